import random

import pytest
import torch
from torch import nn

from eosr.config import shipped_config_path, load_config, validate_config
from eosr.schedule import (
    PlateauScheduler,
    adv_weight,
    d_gate,
    d_start_step,
    d_warmup_factor,
    ema_init,
    ema_swap_in,
    ema_swap_out,
    ema_update,
    plateau_step,
    schedule_state,
    warmup_factor,
)


def train_cfg(**kw):
    return validate_config({"Training": kw}).Training


EXP1 = load_config(shipped_config_path("exp1_sen2naip_rgb.yaml")).Training


def test_exp1_pretrain_has_zero_adv_weight():
    for step in (0, 1, 75_000, 149_999):
        assert adv_weight(step, EXP1) == 0.0
        assert schedule_state(step, EXP1).pretrain_active


def test_ramp_endpoints_and_midpoint():
    cfg = train_cfg(g_pretrain_steps=100, adv_loss_ramp_steps=40, adv_loss_beta=0.01)
    assert adv_weight(140, cfg) == 0.01
    assert adv_weight(120, cfg) == pytest.approx(0.005, abs=1e-15)
    assert adv_weight(10_000, cfg) == 0.01
    with pytest.raises(ValueError):
        adv_weight(-1, cfg)


def test_ramp_is_monotone_and_continuous():
    cfg = train_cfg(g_pretrain_steps=50, adv_loss_ramp_steps=30, adv_loss_beta=0.02)
    values = [adv_weight(s, cfg) for s in range(200)]
    assert all(b >= a for a, b in zip(values, values[1:]))
    assert max(b - a for a, b in zip(values, values[1:])) <= 0.02 / 30 + 1e-15
    assert values[:50] == [0.0] * 50


def test_no_pretrain_flag_skips_phase():
    cfg = train_cfg(pretrain_g_only=False, g_pretrain_steps=100, adv_loss_ramp_steps=0, adv_loss_beta=0.01)
    assert adv_weight(0, cfg) == 0.01
    assert not schedule_state(0, cfg).pretrain_active
    assert d_gate(0, cfg)


@pytest.mark.parametrize("kind", ["linear", "cosine"])
def test_warmup_endpoints(kind):
    assert warmup_factor(0, 10, kind) == 0.0
    assert warmup_factor(10, 10, kind) == 1.0
    assert warmup_factor(500, 10, kind) == 1.0
    assert warmup_factor(3, 0, kind) == 1.0
    values = [warmup_factor(s, 17, kind) for s in range(30)]
    assert all(0.0 <= v <= 1.0 for v in values)
    assert all(b >= a for a, b in zip(values, values[1:]))


def test_warmup_midpoints():
    assert warmup_factor(5, 10, "cosine") == pytest.approx(0.5, abs=1e-15)
    assert warmup_factor(5, 10, "linear") == 0.5


def test_gate_during_pretrain_and_after():
    cfg = train_cfg(g_pretrain_steps=100, d_holdback_steps=0)
    assert not any(d_gate(s, cfg) for s in range(100))
    assert d_gate(100, cfg)


def test_gate_holdback_arithmetic():
    cfg = train_cfg(g_pretrain_steps=100, d_holdback_steps=1000)
    first = next(s for s in range(5000) if d_gate(s, cfg))
    assert first == 1100 == d_start_step(cfg)
    flags = [d_gate(s, cfg) for s in range(3000)]
    assert flags == sorted(flags)  # monotone


def test_gate_epoch_spelling():
    cfg = train_cfg(g_pretrain_steps=10, d_holdback_epochs=2)
    assert d_start_step(cfg, steps_per_epoch=7) == 24


def test_d_warmup_clock_starts_at_gate():
    cfg = train_cfg(g_pretrain_steps=10, d_holdback_steps=5, d_warmup_steps=4)
    assert d_warmup_factor(14, cfg) == 0.0
    assert d_warmup_factor(15, cfg) == 0.0
    assert d_warmup_factor(17, cfg) == 0.5
    assert d_warmup_factor(19, cfg) == 1.0
    state = schedule_state(17, cfg)
    assert state.d_updates_enabled and state.d_lr_factor == 0.5


def test_schedule_state_invariants():
    cfg = train_cfg(g_pretrain_steps=20, adv_loss_ramp_steps=10, g_warmup_steps=5)
    for s in range(60):
        st = schedule_state(s, cfg)
        assert st.pretrain_active == (s < 20)
        if st.pretrain_active:
            assert st.adv_weight == 0.0
        assert 0.0 <= st.g_lr_factor <= 1.0 and 0.0 <= st.d_lr_factor <= 1.0


# EMA


def _net(seed=0):
    torch.manual_seed(seed)
    return nn.Sequential(nn.Conv2d(2, 3, 3), nn.PReLU(3), nn.Linear(4, 2))


def test_ema_geometric_closed_form():
    theta = {"w": torch.ones(1, dtype=torch.float64)}
    state = ema_init({"w": torch.zeros(1, dtype=torch.float64)}, 0.999)
    for _ in range(3):
        ema_update(state, theta)
    assert state.shadow["w"].item() == pytest.approx(0.002997001, abs=1e-15)
    assert state.updates_applied == 3


def test_ema_decay_extremes():
    net = _net()
    memoryless = ema_init(net, 0.0)
    frozen = ema_init(net, 1.0)
    start = {k: v.clone() for k, v in frozen.shadow.items()}
    with torch.no_grad():
        for p in net.parameters():
            p.add_(1.0)
    ema_update(memoryless, net)
    ema_update(frozen, net)
    for k, p in net.named_parameters():
        assert torch.equal(memoryless.shadow[k], p)
        assert torch.equal(frozen.shadow[k], start[k])


def test_ema_swap_round_trip_is_bit_identical():
    net = _net()
    state = ema_init(net, 0.9)
    with torch.no_grad():
        for p in net.parameters():
            p.mul_(1.7).add_(0.3)
    ema_update(state, net)
    before = {k: v.clone() for k, v in net.state_dict().items()}
    ema_swap_in(net, state)
    for k, p in net.named_parameters():
        assert torch.equal(p, state.shadow[k])
    with pytest.raises(RuntimeError):
        ema_swap_in(net, state)
    ema_swap_out(net, state)
    after = net.state_dict()
    assert all(torch.equal(before[k], after[k]) for k in before)
    with pytest.raises(RuntimeError):
        ema_swap_out(net, state)


def test_ema_update_linear_in_shadow_and_params():
    g = torch.Generator().manual_seed(0)
    a, b = torch.randn(5, 4, generator=g, dtype=torch.float64), torch.randn(5, 4, generator=g, dtype=torch.float64)
    ta, tb = torch.randn(5, 4, generator=g, dtype=torch.float64), torch.randn(5, 4, generator=g, dtype=torch.float64)
    beta = 0.97
    sa = ema_update(ema_init({"w": a}, beta), {"w": ta}).shadow["w"]
    sb = ema_update(ema_init({"w": b}, beta), {"w": tb}).shadow["w"]
    sab = ema_update(ema_init({"w": a + b}, beta), {"w": ta + tb}).shadow["w"]
    assert torch.allclose(sab, sa + sb, atol=1e-12, rtol=0)


def test_ema_shape_mismatch():
    state = ema_init(_net(), 0.9)
    other = nn.Sequential(nn.Conv2d(2, 4, 3), nn.PReLU(4), nn.Linear(4, 2))
    with pytest.raises(ValueError, match="shape"):
        ema_update(state, other)
    with pytest.raises(ValueError):
        ema_update(state, {"x": torch.zeros(1)})


def test_ema_state_dict_round_trip():
    net = _net()
    state = ema_update(ema_init(net, 0.5), net)
    restored = type(state).from_state_dict(state.state_dict())
    assert restored.decay == 0.5 and restored.updates_applied == 1
    assert all(torch.equal(restored.shadow[k], state.shadow[k]) for k in state.shadow)


# plateau


def test_plateau_improving_metric_keeps_lr():
    sched = PlateauScheduler(1e-4, patience=2, factor=0.5, cooldown=0, min_lr=0.0)
    assert all(sched.step(1.0 / (i + 1)) == 1e-4 for i in range(50))


def test_plateau_flat_metric_example():
    sched = PlateauScheduler(1e-4, patience=2, factor=0.5, cooldown=0, min_lr=0.0)
    lrs = [sched.step(1.0) for _ in range(4)]
    # the first evaluation sets the reference; the 3rd flat one after it triggers
    assert lrs == [1e-4, 1e-4, 1e-4, 5e-5]


def test_plateau_min_lr_floor():
    sched = PlateauScheduler(1e-4, patience=0, factor=0.5, cooldown=0, min_lr=1e-6)
    for _ in range(40):
        lr = sched.step(1.0)
    assert lr == 1e-6


def test_plateau_step_validates_factor():
    with pytest.raises(ValueError):
        plateau_step(1e-3, [1.0], factor=1.0)
    assert plateau_step(1e-3, []) == 1e-3


def _torch_oracle(metrics, lr, patience, factor, cooldown, min_lr):
    opt = torch.optim.SGD([torch.zeros(1, requires_grad=True)], lr=lr)
    sched = torch.optim.lr_scheduler.ReduceLROnPlateau(
        opt, mode="min", factor=factor, patience=patience, cooldown=cooldown, min_lr=min_lr, threshold=1e-4,
        eps=0.0,  # torch skips sub-1e-8 reductions by default; our rule has no such guard
    )
    out = []
    for m in metrics:
        sched.step(m)
        out.append(opt.param_groups[0]["lr"])
    return out


@pytest.mark.parametrize("trial", range(25))
def test_plateau_matches_torch_reference(trial):
    rng = random.Random(trial)
    patience, cooldown = rng.randint(0, 4), rng.randint(0, 3)
    factor = rng.choice([0.1, 0.5, 0.8])
    min_lr = rng.choice([0.0, 1e-3])
    metrics, level = [], 1.0
    for _ in range(60):
        level *= rng.choice([1.0, 1.0, 1.0, 0.9, 1.05])
        metrics.append(level)
    sched = PlateauScheduler(0.1, patience, factor, cooldown, min_lr)
    ours = [sched.step(m) for m in metrics]
    theirs = _torch_oracle(metrics, 0.1, patience, factor, cooldown, min_lr)
    assert ours == pytest.approx(theirs, rel=1e-12, abs=0)


def test_plateau_scheduler_state_round_trip():
    a = PlateauScheduler(0.1, 1, 0.5, 0, 0.0)
    for m in (1.0, 1.0, 0.5, 0.5):
        a.step(m)
    b = PlateauScheduler(0.1, 1, 0.5, 0, 0.0)
    b.load_state_dict(a.state_dict())
    assert [a.step(0.5) for _ in range(3)] == [b.step(0.5) for _ in range(3)]
