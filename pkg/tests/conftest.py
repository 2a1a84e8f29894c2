from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest
import torch
from torchvision.models import vgg16, vgg19

from eosr.config import validate_config


def tiny_config(**sections) -> "eosr.config.Config":
    """A fast-to-train config; keyword args are merged into the named sections."""
    raw = {
        "Model": {"model_type": "res", "in_bands": 4, "scale": 2, "n_blocks": 2, "n_channels": 8},
        "Discriminator": {"disc_type": "standard", "base_channels": 4, "linear_size": 16},
        "Training": {
            "g_pretrain_steps": 3,
            "adv_steps": 4,
            "adv_loss_ramp_steps": 2,
            "adv_loss_beta": 0.01,
            "g_warmup_steps": 2,
            "d_warmup_steps": 2,
            "batch_size": 2,
            "Optimizers": {"optim_g_lr": 1e-3, "optim_d_lr": 5e-4},
            "EMA": {"enabled": True, "decay": 0.9},
        },
        "Data": {"source": "procedural", "patch_size_hr": 32, "num_samples": 6, "num_val_samples": 2},
        "Logging": {"log_every": 1, "val_every": 3},
    }
    for name, values in sections.items():
        section = raw.setdefault(name, {})
        for key, value in values.items():
            if isinstance(value, dict) and isinstance(section.get(key), dict):
                section[key] = {**section[key], **value}
            else:
                section[key] = value
    return validate_config(raw)


@pytest.fixture
def make_tiny_config():
    return tiny_config


def _save_features(net, path: Path) -> Path:
    torch.manual_seed(0)
    torch.save({f"features.{k}": v for k, v in net.features.state_dict().items()}, path)
    return path


@pytest.fixture(scope="session")
def vgg19_weights(tmp_path_factory) -> Path:
    """Randomly initialized VGG19 trunk in torchvision's state-dict layout."""
    torch.manual_seed(0)
    return _save_features(vgg19(weights=None), tmp_path_factory.mktemp("vgg") / "vgg19_random.pth")


@pytest.fixture(scope="session")
def vgg16_weights(tmp_path_factory) -> Path:
    torch.manual_seed(0)
    return _save_features(vgg16(weights=None), tmp_path_factory.mktemp("vgg") / "vgg16_random.pth")


def write_geotiff(path: Path, array: np.ndarray, pixel_size: float = 10.0, origin=(500000.0, 4100000.0)) -> Path:
    import rasterio
    from rasterio.transform import Affine

    bands, h, w = array.shape
    with rasterio.open(
        path, "w", driver="GTiff", count=bands, height=h, width=w, dtype=array.dtype.name,
        crs="EPSG:32633", transform=Affine(pixel_size, 0.0, origin[0], 0.0, -pixel_size, origin[1]),
    ) as dst:
        dst.write(array)
    return path


def reflectance_scene(rng: np.random.Generator, bands: int, h: int, w: int) -> np.ndarray:
    """Smooth uint16 reflectance-like scene (values roughly 500..9000)."""
    coarse = torch.from_numpy(rng.uniform(0, 1, (1, bands, max(h // 8, 2), max(w // 8, 2))))
    smooth = torch.nn.functional.interpolate(coarse, size=(h, w), mode="bilinear", align_corners=False)[0]
    return (500 + 8500 * smooth.numpy()).astype(np.uint16)


def sen2naip_like_tree(root: Path, n: int = 2, lr_size: int = 48) -> Path:
    """``{train,val}/{hr,lr}`` GeoTIFF pairs laid out like the SEN2NAIP tree, x4, 4 bands."""
    from eosr.data import degrade

    rng = np.random.default_rng(0)
    for split in ("train", "val"):
        (root / split / "hr").mkdir(parents=True)
        (root / split / "lr").mkdir(parents=True)
        for i in range(n):
            hr = reflectance_scene(rng, 4, lr_size * 4, lr_size * 4)
            lr = degrade(hr.astype(np.float64), 4).astype(np.uint16)
            write_geotiff(root / split / "hr" / f"t{i}.tif", hr, pixel_size=2.5)
            write_geotiff(root / split / "lr" / f"t{i}.tif", lr, pixel_size=10.0)
    return root


def dump_tiny(path: Path, **sections) -> Path:
    """Write :func:`tiny_config` as a YAML file for CLI runs."""
    from eosr.config import dump_config

    path.write_text(dump_config(tiny_config(**sections)))
    return path
