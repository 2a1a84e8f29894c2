"""YAML configuration schema, loading and validation.

A single YAML file drives every experiment. The top-level sections are
``Model``, ``Discriminator``, ``Training`` (with nested ``Optimizers``,
``Schedulers``, ``EMA`` and ``Losses``), ``Data``, ``Logging`` and
``Inference``. Unknown keys are errors, and every error names the dotted key
path that caused it.
"""

from __future__ import annotations

import hashlib
import json
import warnings
from copy import deepcopy
from pathlib import Path
from typing import Any, Iterable, Literal, Optional

import yaml
from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    NonNegativeFloat,
    NonNegativeInt,
    PositiveFloat,
    PositiveInt,
    ValidationError,
)

ModelType = Literal["res", "rcab", "rrdb", "lka", "esrgan", "cgan"]
DiscType = Literal["standard", "patchgan", "esrgan"]

MODEL_TYPES: tuple[str, ...] = ("res", "rcab", "rrdb", "lka", "esrgan", "cgan")
DISC_TYPES: tuple[str, ...] = ("standard", "patchgan", "esrgan")

DEFAULT_NOISE_DIM = 64
DEFAULT_GROWTH_CHANNELS = 32
DEFAULT_N_BLOCKS = 16
DEFAULT_ESRGAN_BLOCKS = 23


class ConfigError(ValueError):
    """Raised when a configuration is malformed or violates a constraint.

    ``problems`` holds ``(key_path, message)`` pairs; ``str(err)`` lists them
    one per line as ``Model.scale: ...``.
    """

    def __init__(self, problems: list[tuple[str, str]]):
        self.problems = problems
        super().__init__("\n".join(f"{path}: {msg}" for path, msg in problems))

    @property
    def paths(self) -> list[str]:
        return [p for p, _ in self.problems]


class ConfigParseError(ConfigError):
    """The file is not syntactically valid YAML (or not a mapping)."""


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class ModelConfig(_Section):
    model_type: ModelType = "res"
    in_bands: PositiveInt = 4
    out_bands: Optional[PositiveInt] = None
    scale: Literal[2, 4, 8] = 4
    n_blocks: Optional[PositiveInt] = None
    n_channels: PositiveInt = 64
    residual_scale: float = Field(0.2, gt=0.0, le=1.0)
    noise_dim: Optional[PositiveInt] = None
    growth_channels: Optional[PositiveInt] = None
    # constant subtracted from inputs and added back to outputs
    data_offset: float = 0.5


class DiscriminatorConfig(_Section):
    disc_type: DiscType = "standard"
    base_channels: PositiveInt = 64
    n_blocks: Optional[PositiveInt] = None
    linear_size: Optional[PositiveInt] = None
    norm: Optional[Literal["batch", "instance", "none"]] = None


class OptimizerConfig(_Section):
    optim_g_lr: PositiveFloat = 1e-4
    optim_d_lr: PositiveFloat = 5e-5
    betas: tuple[float, float] = (0.0, 0.99)
    eps: PositiveFloat = 1e-7
    weight_decay: NonNegativeFloat = 0.0


class SchedulerConfig(_Section):
    patience: NonNegativeInt = 10
    factor: float = Field(0.5, gt=0.0, lt=1.0)
    cooldown: NonNegativeInt = 0
    min_lr: NonNegativeFloat = 0.0


class EMAConfig(_Section):
    enabled: bool = True
    decay: float = Field(0.999, ge=0.0, lt=1.0)


class LossConfig(_Section):
    w_l1: NonNegativeFloat = 1.0
    w_sam: NonNegativeFloat = 0.0
    w_perceptual: NonNegativeFloat = 0.0
    w_tv: NonNegativeFloat = 0.0
    perceptual_backend: Literal["vgg19", "lpips"] = "vgg19"
    perceptual_weights: Optional[str] = None
    perceptual_sha256: Optional[str] = None
    lpips_weights: Optional[str] = None


class TrainConfig(_Section):
    pretrain_g_only: bool = True
    g_pretrain_steps: NonNegativeInt = 10_000
    adv_steps: NonNegativeInt = 100_000
    adv_loss_ramp_steps: NonNegativeInt = 5_000
    adv_loss_beta: NonNegativeFloat = 1e-3
    label_smoothing: float = Field(0.1, ge=0.0, lt=0.5)
    g_warmup_steps: NonNegativeInt = 1_000
    g_warmup_type: Literal["linear", "cosine"] = "linear"
    d_warmup_steps: NonNegativeInt = 500
    d_holdback_steps: NonNegativeInt = 0
    d_holdback_epochs: Optional[NonNegativeInt] = None
    batch_size: PositiveInt = 8
    gradient_clip_val: NonNegativeFloat = 0.0
    gpus: list[NonNegativeInt] = Field(default_factory=list)
    precision: Literal[16, 32] = 32
    seed: int = 0
    Optimizers: OptimizerConfig = Field(default_factory=OptimizerConfig)
    Schedulers: SchedulerConfig = Field(default_factory=SchedulerConfig)
    EMA: EMAConfig = Field(default_factory=EMAConfig)
    Losses: LossConfig = Field(default_factory=LossConfig)


class NormalizationConfig(_Section):
    kind: Literal["reflectance_scale", "minmax", "zscore"] = "reflectance_scale"
    divisor: PositiveFloat = 10_000.0
    ceiling: PositiveFloat = 1.5
    min: Optional[float | list[float]] = None
    max: Optional[float | list[float]] = None
    mean: Optional[float | list[float]] = None
    std: Optional[float | list[float]] = None


class AugmentationConfig(_Section):
    flips: bool = True
    rot90: bool = True


class DataConfig(_Section):
    source: Literal["paired_dirs", "synthetic_degradation", "procedural"] = "procedural"
    root: Optional[str] = None
    bands: Optional[list[str]] = None
    rgb_triplet: Optional[tuple[NonNegativeInt, NonNegativeInt, NonNegativeInt]] = None
    scale: Optional[Literal[2, 4, 8]] = None
    patch_size_hr: PositiveInt = 128
    normalization: NormalizationConfig = Field(default_factory=NormalizationConfig)
    augmentation: AugmentationConfig = Field(default_factory=AugmentationConfig)
    num_samples: PositiveInt = 200
    num_val_samples: PositiveInt = 32
    num_workers: NonNegativeInt = 0


class LoggingConfig(_Section):
    out_dir: str = "runs/default"
    log_every: PositiveInt = 50
    val_every: PositiveInt = 1_000
    jsonl: bool = True
    num_val_previews: NonNegativeInt = 0


class InferenceConfig(_Section):
    tile_size_lr: PositiveInt = 512
    overlap_lr: NonNegativeInt = 32
    context_lr: Optional[NonNegativeInt] = None
    blend: Literal["linear", "cosine"] = "linear"
    output_dtype: Literal["same", "float32"] = "same"
    use_ema: bool = True


class Config(_Section):
    Model: ModelConfig = Field(default_factory=ModelConfig)
    Discriminator: DiscriminatorConfig = Field(default_factory=DiscriminatorConfig)
    Training: TrainConfig = Field(default_factory=TrainConfig)
    Data: DataConfig = Field(default_factory=DataConfig)
    Logging: LoggingConfig = Field(default_factory=LoggingConfig)
    Inference: InferenceConfig = Field(default_factory=InferenceConfig)


# ---------------------------------------------------------------------------
# raw-tree helpers


def _canonicalize_aliases(raw: dict) -> list[tuple[str, str]]:
    """Fold ``Training.Losses.w_adv`` into ``Training.adv_loss_beta`` in place."""
    training = raw.get("Training")
    if not isinstance(training, dict):
        return []
    losses = training.get("Losses")
    if not isinstance(losses, dict) or "w_adv" not in losses:
        return []
    w_adv = losses.pop("w_adv")
    if "adv_loss_beta" in training and training["adv_loss_beta"] != w_adv:
        return [(
            "Training.Losses.w_adv",
            f"conflicts with Training.adv_loss_beta ({training['adv_loss_beta']} != {w_adv}); "
            "they are two spellings of the same weight",
        )]
    training["adv_loss_beta"] = w_adv
    return []


def apply_overrides(raw: dict, overrides: Iterable[str]) -> dict:
    """Return a copy of ``raw`` with ``Dotted.key=value`` overrides merged in.

    Values are parsed as YAML scalars/flow collections, so ``false``, ``3``,
    ``[0, 1]`` and ``null`` have their usual meaning.
    """
    out = deepcopy(raw)
    for item in overrides:
        if "=" not in item:
            raise ConfigError([(item, "override must look like Section.key=value")])
        key, _, text = item.partition("=")
        parts = [p for p in key.strip().split(".") if p]
        if not parts:
            raise ConfigError([(item, "empty override key")])
        try:
            value = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError([(key, f"cannot parse override value {text!r}: {exc}")]) from exc
        node = out
        for i, part in enumerate(parts[:-1]):
            child = node.get(part)
            if child is None:
                child = node[part] = {}
            elif not isinstance(child, dict):
                raise ConfigError([(".".join(parts[: i + 1]), "is not a section")])
            node = child
        node[parts[-1]] = value
    return out


def _format_loc(loc: tuple) -> str:
    return ".".join(str(p) for p in loc)


def _fill_and_check(cfg: Config) -> Config:
    problems: list[tuple[str, str]] = []
    m, d, t, data = cfg.Model, cfg.Discriminator, cfg.Training, cfg.Data

    model_updates: dict[str, Any] = {}
    if m.noise_dim is not None and m.model_type != "cgan":
        problems.append(("Model.noise_dim", f"only valid for model_type=cgan, not {m.model_type!r}"))
    if m.model_type == "cgan" and m.noise_dim is None:
        model_updates["noise_dim"] = DEFAULT_NOISE_DIM
    if m.growth_channels is not None and m.model_type not in ("rrdb", "esrgan"):
        problems.append((
            "Model.growth_channels",
            f"only valid for model_type in (rrdb, esrgan), not {m.model_type!r}",
        ))
    if m.model_type in ("rrdb", "esrgan") and m.growth_channels is None:
        model_updates["growth_channels"] = DEFAULT_GROWTH_CHANNELS
    if m.n_blocks is None:
        model_updates["n_blocks"] = DEFAULT_ESRGAN_BLOCKS if m.model_type == "esrgan" else DEFAULT_N_BLOCKS
    if m.out_bands is None:
        model_updates["out_bands"] = m.in_bands

    disc_updates: dict[str, Any] = {}
    if d.disc_type == "patchgan":
        if d.linear_size is not None:
            problems.append(("Discriminator.linear_size", "only valid for disc_type in (standard, esrgan)"))
        disc_updates["n_blocks"] = d.n_blocks if d.n_blocks is not None else 4
        disc_updates["norm"] = d.norm if d.norm is not None else "instance"
    else:
        if d.norm is not None:
            problems.append(("Discriminator.norm", "only valid for disc_type=patchgan"))
        if d.n_blocks is not None:
            problems.append(("Discriminator.n_blocks", "only valid for disc_type=patchgan"))
        disc_updates["linear_size"] = d.linear_size if d.linear_size is not None else 1024

    for i, beta in enumerate(t.Optimizers.betas):
        if not 0.0 <= beta < 1.0:
            problems.append((f"Training.Optimizers.betas.{i}", f"must lie in [0, 1), got {beta}"))
    if "d_holdback_steps" in t.model_fields_set and t.d_holdback_epochs is not None:
        problems.append(("Training.d_holdback_epochs", "give either d_holdback_steps or d_holdback_epochs, not both"))
    losses = t.Losses
    if not any(w > 0 for w in (losses.w_l1, losses.w_sam, losses.w_perceptual, losses.w_tv)):
        problems.append(("Training.Losses", "at least one of w_l1, w_sam, w_perceptual, w_tv must be > 0"))

    data_updates: dict[str, Any] = {}
    if data.scale is not None and data.scale != m.scale:
        problems.append(("Data.scale", f"must match Model.scale ({data.scale} != {m.scale})"))
    data_updates["scale"] = m.scale
    if data.patch_size_hr % m.scale:
        problems.append(("Data.patch_size_hr", f"{data.patch_size_hr} is not divisible by scale {m.scale}"))
    bands = data.bands if data.bands is not None else [f"b{i + 1}" for i in range(m.in_bands)]
    data_updates["bands"] = bands
    if len(bands) != m.in_bands:
        problems.append(("Data.bands", f"lists {len(bands)} bands but Model.in_bands is {m.in_bands}"))
    if data.rgb_triplet is None:
        data_updates["rgb_triplet"] = tuple(min(i, len(bands) - 1) for i in range(3))
    else:
        for i, idx in enumerate(data.rgb_triplet):
            if idx >= len(bands):
                problems.append((f"Data.rgb_triplet.{i}", f"index {idx} out of range for {len(bands)} bands"))
    if data.source in ("paired_dirs", "synthetic_degradation") and not data.root:
        problems.append(("Data.root", f"required for source={data.source}"))
    norm = data.normalization
    if norm.kind == "minmax":
        if norm.min is None or norm.max is None:
            problems.append(("Data.normalization", "minmax needs both min and max"))
        else:
            lo = norm.min if isinstance(norm.min, list) else [norm.min]
            hi = norm.max if isinstance(norm.max, list) else [norm.max]
            if any(h - l <= 0 for l, h in zip(lo, hi, strict=False)):
                problems.append(("Data.normalization.max", "zero or negative range (max must exceed min)"))
    if norm.kind == "zscore":
        if norm.mean is None or norm.std is None:
            problems.append(("Data.normalization", "zscore needs both mean and std"))
        else:
            std = norm.std if isinstance(norm.std, list) else [norm.std]
            if any(s <= 0 for s in std):
                problems.append(("Data.normalization.std", "must be > 0"))

    inf = cfg.Inference
    if inf.tile_size_lr <= 2 * inf.overlap_lr:
        problems.append(("Inference.tile_size_lr", f"must exceed 2 * overlap_lr ({2 * inf.overlap_lr})"))

    if problems:
        raise ConfigError(problems)

    if t.Optimizers.optim_d_lr > t.Optimizers.optim_g_lr:
        warnings.warn(
            "Training.Optimizers.optim_d_lr exceeds optim_g_lr; TTUR convention is a slower discriminator",
            stacklevel=3,
        )

    return cfg.model_copy(update={
        "Model": m.model_copy(update=model_updates),
        "Discriminator": d.model_copy(update=disc_updates),
        "Data": data.model_copy(update=data_updates),
    })


def validate_config(raw: Any) -> Config:
    """Validate a raw (already parsed) tree and return the effective config."""
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError([("<root>", f"expected a mapping of sections, got {type(raw).__name__}")])
    raw = deepcopy(raw)
    problems = _canonicalize_aliases(raw)
    if problems:
        raise ConfigError(problems)
    try:
        cfg = Config.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError([(_format_loc(e["loc"]), e["msg"]) for e in exc.errors()]) from None
    return _fill_and_check(cfg)


def read_yaml(path: str | Path) -> Any:
    path = Path(path)
    if not path.is_file():
        raise ConfigParseError([(str(path), "config file does not exist")])
    try:
        return yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigParseError([(str(path), f"malformed YAML: {exc}")]) from None


def load_config(path: str | Path, overrides: Iterable[str] = ()) -> Config:
    """Load, override, validate and default-fill a YAML config file."""
    raw = read_yaml(path)
    if raw is not None and not isinstance(raw, dict):
        raise ConfigParseError([(str(path), "top level must be a mapping of sections")])
    overrides = list(overrides)
    if overrides:
        raw = apply_overrides(raw or {}, overrides)
    return validate_config(raw)


def default_config() -> Config:
    return validate_config({})


def config_to_dict(cfg: Config) -> dict:
    return cfg.model_dump(mode="json", exclude_none=True)


def dump_config(cfg: Config) -> str:
    """Serialize the effective config as YAML (loadable by :func:`load_config`)."""
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=False)


def model_fingerprint(model_cfg: ModelConfig) -> str:
    """Stable hash of the generator architecture settings."""
    payload = json.dumps(model_cfg.model_dump(mode="json"), sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def holdback_steps(train: TrainConfig, steps_per_epoch: Optional[int] = None) -> int:
    """Discriminator holdback in optimizer steps, converting the epoch spelling."""
    if train.d_holdback_epochs is None:
        return train.d_holdback_steps
    if not steps_per_epoch:
        raise ValueError("d_holdback_epochs needs steps_per_epoch to be converted to steps")
    return train.d_holdback_epochs * steps_per_epoch


def shipped_config_path(name: str) -> Path:
    """Path of a config file shipped with the package (e.g. ``toy_smoke.yaml``)."""
    path = Path(__file__).parent / "configs" / name
    if not path.is_file():
        raise FileNotFoundError(path)
    return path
