import itertools

import pytest
import torch

from eosr.config import validate_config
from eosr.models.discriminators import (
    PatchGANDiscriminator,
    build_critic,
    critic_forward,
    patch_grid_size,
    patch_receptive_field,
    patch_stride,
)


def disc_cfg(disc_type, **kw):
    return validate_config({"Discriminator": {"disc_type": disc_type, **kw}}).Discriminator


def _conv_len(n, kernel, stride, pad=1):
    return (n + 2 * pad - kernel) // stride + 1


def _grid_oracle(n, n_blocks):
    # layer-by-layer stride arithmetic, written independently of patch_grid_size
    for i in range(n_blocks):
        n = _conv_len(n, 4, 2 if i < n_blocks - 1 else 1)
    return _conv_len(n, 4, 1)


def _rf_oracle(n_blocks):
    # backwards receptive-field recursion over (kernel, stride) pairs
    layers = [(4, 2)] * (n_blocks - 1) + [(4, 1), (4, 1)]
    rf = 1
    for k, s in reversed(layers):
        rf = (rf - 1) * s + k
    return rf


@pytest.mark.parametrize("size,n_blocks", list(itertools.product([64, 70, 128, 256], [2, 3, 4, 5])))
def test_patch_grid_matches_forward(size, n_blocks):
    net = build_critic(disc_cfg("patchgan", n_blocks=n_blocks, base_channels=4), in_bands=3, seed=0)
    with torch.no_grad():
        out = net(torch.rand(1, 3, size, size))
    g = patch_grid_size(size, n_blocks)
    assert g == _grid_oracle(size, n_blocks)
    assert out.shape == (1, 1, g, g)


def test_patch_70_px_receptive_field():
    assert patch_receptive_field(4) == 70 == _rf_oracle(4)
    assert [patch_receptive_field(n) for n in (2, 3, 5)] == [_rf_oracle(n) for n in (2, 3, 5)]


def test_patch_receptive_field_empirically():
    # perturb one input pixel, count which output cells move
    net = PatchGANDiscriminator(1, base_channels=2, n_blocks=4, norm="none").double()
    x = torch.rand(1, 1, 256, 256, dtype=torch.float64, requires_grad=True)
    out = net(x)
    cell = out.shape[-1] // 2
    out[0, 0, cell, cell].backward()
    rows = torch.nonzero(x.grad[0, 0].abs().sum(dim=1)).flatten()
    assert rows.max() - rows.min() + 1 <= 70


def test_patch_n3_on_70px():
    net = build_critic(disc_cfg("patchgan", n_blocks=3, base_channels=4), in_bands=3, seed=0)
    with torch.no_grad():
        out = net(torch.rand(2, 3, 70, 70))
    assert out.shape == (2, 1, patch_grid_size(70, 3), patch_grid_size(70, 3))


@pytest.mark.parametrize("disc_type", ["standard", "esrgan"])
def test_global_critics_absorb_size(disc_type):
    net = build_critic(disc_cfg(disc_type, base_channels=4, linear_size=16), in_bands=4, seed=0)
    with torch.no_grad():
        assert net(torch.rand(2, 4, 96, 96)).shape == (2, 1)
        assert net(torch.rand(2, 4, 128, 128)).shape == (2, 1)


def test_standard_batch_of_eight():
    net = build_critic(disc_cfg("standard", base_channels=4, linear_size=16), in_bands=4, seed=0)
    with torch.no_grad():
        assert critic_forward(net, torch.rand(8, 4, 48, 48)).shape == (8, 1)


@pytest.mark.parametrize("disc_type", ["standard", "esrgan", "patchgan"])
@pytest.mark.parametrize("bands", [1, 3, 6, 13])
def test_zero_image_finite_and_multiband(disc_type, bands):
    net = build_critic(disc_cfg(disc_type, base_channels=4), in_bands=bands, seed=0)
    with torch.no_grad():
        out = net(torch.zeros(2, bands, 96, 96))
        again = net(torch.zeros(2, bands, 96, 96))
    assert torch.isfinite(out).all()
    assert torch.equal(out, again)


@pytest.mark.parametrize("disc_type", ["standard", "esrgan", "patchgan"])
def test_input_errors(disc_type):
    net = build_critic(disc_cfg(disc_type, base_channels=4), in_bands=4, seed=0)
    with pytest.raises(ValueError, match="shape"):
        net(torch.rand(1, 3, 96, 96))
    small = net.min_input_size - 1
    with pytest.raises(ValueError, match="minimum"):
        net(torch.rand(1, 4, small, small))
    with torch.no_grad():
        net(torch.rand(1, 4, net.min_input_size, net.min_input_size))


def test_patch_translation_equivariance():
    n_blocks = 3
    stride = patch_stride(n_blocks)
    torch.manual_seed(0)
    net = PatchGANDiscriminator(2, base_channels=4, n_blocks=n_blocks, norm="none").double()
    big = torch.rand(1, 2, 128 + stride, 128 + stride, dtype=torch.float64)
    with torch.no_grad():
        a = net(big[..., :128, :128])
        b = net(big[..., stride:, stride:])
    margin = patch_receptive_field(n_blocks) // stride + 1  # cells that may see zero padding
    inner_a = a[..., margin + 1 : -margin, margin + 1 : -margin]
    inner_b = b[..., margin : -margin - 1, margin : -margin - 1]
    assert inner_a.numel() > 0
    assert torch.allclose(inner_a, inner_b, atol=1e-12)


def test_critic_builds_are_seeded():
    cfg = disc_cfg("patchgan", base_channels=4)
    a, b = build_critic(cfg, 4, seed=3), build_critic(cfg, 4, seed=3)
    assert all(torch.equal(x, y) for x, y in zip(a.state_dict().values(), b.state_dict().values()))


def test_config_widths_are_honoured():
    net = build_critic(disc_cfg("esrgan", base_channels=8, linear_size=32), in_bands=4)
    assert net.head[1].out_features == 32
    assert net.features[0][0].out_channels == 8
    patch = build_critic(disc_cfg("patchgan", n_blocks=5, norm="batch"), in_bands=4)
    assert patch.n_blocks == 5
    assert isinstance(patch.model[1][1], torch.nn.BatchNorm2d)
