"""Step-indexed training-dynamics calculators and the EMA weight tracker.

Everything here except :class:`EmaState` and :class:`PlateauScheduler` is a
pure function of the global step and the training config, so a resumed run
reproduces the schedule of a fresh one exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import torch
from torch import nn

from .config import TrainConfig, holdback_steps


def pretrain_steps(cfg: TrainConfig) -> int:
    return cfg.g_pretrain_steps if cfg.pretrain_g_only else 0


def is_pretrain(step: int, cfg: TrainConfig) -> bool:
    return cfg.pretrain_g_only and step < cfg.g_pretrain_steps


def adv_weight(step: int, cfg: TrainConfig) -> float:
    """Adversarial loss weight: 0 during pretraining, then a linear ramp to ``adv_loss_beta``."""
    if step < 0:
        raise ValueError("step must be non-negative")
    since = step - pretrain_steps(cfg)
    if since < 0:
        return 0.0
    ramp = cfg.adv_loss_ramp_steps
    if ramp == 0 or since >= ramp:
        return float(cfg.adv_loss_beta)
    return cfg.adv_loss_beta * (since / ramp)


def warmup_factor(step: int, warmup_steps: int, kind: str = "linear") -> float:
    """Learning-rate multiplier in [0, 1] that reaches 1 at ``warmup_steps``."""
    if warmup_steps <= 0:
        return 1.0
    frac = min(1.0, max(step, 0) / warmup_steps)
    if kind == "linear":
        return frac
    if kind == "cosine":
        return 0.5 * (1.0 - math.cos(math.pi * frac))
    raise ValueError(f"unknown warmup kind {kind!r}")


def d_start_step(cfg: TrainConfig, steps_per_epoch: Optional[int] = None) -> int:
    """First step on which the discriminator is updated."""
    return pretrain_steps(cfg) + holdback_steps(cfg, steps_per_epoch)


def d_gate(step: int, cfg: TrainConfig, steps_per_epoch: Optional[int] = None) -> bool:
    return step >= d_start_step(cfg, steps_per_epoch)


def d_warmup_factor(step: int, cfg: TrainConfig, steps_per_epoch: Optional[int] = None) -> float:
    """Discriminator lr multiplier; its warmup clock starts when the gate opens."""
    start = d_start_step(cfg, steps_per_epoch)
    if step < start:
        return 0.0
    return warmup_factor(step - start, cfg.d_warmup_steps, cfg.g_warmup_type)


@dataclass(frozen=True)
class ScheduleState:
    global_step: int
    pretrain_active: bool
    adv_weight: float
    g_lr_factor: float
    d_lr_factor: float
    d_updates_enabled: bool


def schedule_state(step: int, cfg: TrainConfig, steps_per_epoch: Optional[int] = None) -> ScheduleState:
    return ScheduleState(
        global_step=step,
        pretrain_active=is_pretrain(step, cfg),
        adv_weight=adv_weight(step, cfg),
        g_lr_factor=warmup_factor(step, cfg.g_warmup_steps, cfg.g_warmup_type),
        d_lr_factor=d_warmup_factor(step, cfg, steps_per_epoch),
        d_updates_enabled=d_gate(step, cfg, steps_per_epoch),
    )


# ---------------------------------------------------------------------------
# EMA


def _param_dict(params) -> dict[str, torch.Tensor]:
    if isinstance(params, nn.Module):
        return {k: v for k, v in params.named_parameters()}
    return dict(params)


@dataclass
class EmaState:
    """Shadow copy of generator parameters updated as ``b * shadow + (1 - b) * theta``."""

    shadow: dict[str, torch.Tensor]
    decay: float
    updates_applied: int = 0
    _backup: Optional[dict[str, torch.Tensor]] = field(default=None, repr=False)

    def __post_init__(self):
        if not 0.0 <= self.decay <= 1.0:
            raise ValueError(f"decay must lie in [0, 1], got {self.decay}")

    @classmethod
    def init(cls, params, decay: float) -> "EmaState":
        shadow = {k: v.detach().clone() for k, v in _param_dict(params).items()}
        return cls(shadow, decay)

    def _check(self, params: Mapping[str, torch.Tensor]) -> None:
        if params.keys() != self.shadow.keys():
            raise ValueError("EMA state and parameters name different tensors (architecture changed?)")
        for k, v in params.items():
            if v.shape != self.shadow[k].shape:
                raise ValueError(f"EMA shape mismatch for {k}: {tuple(v.shape)} vs {tuple(self.shadow[k].shape)}")

    @torch.no_grad()
    def update(self, params) -> "EmaState":
        params = _param_dict(params)
        self._check(params)
        for k, v in params.items():
            self.shadow[k].mul_(self.decay).add_(v.detach().to(self.shadow[k].dtype), alpha=1.0 - self.decay)
        self.updates_applied += 1
        return self

    @torch.no_grad()
    def swap_in(self, net: nn.Module) -> None:
        """Load the shadow weights into ``net``, keeping the live ones aside."""
        if self._backup is not None:
            raise RuntimeError("EMA weights are already swapped in")
        params = dict(net.named_parameters())
        self._check(params)
        self._backup = {k: v.detach().clone() for k, v in params.items()}
        for k, v in params.items():
            v.copy_(self.shadow[k])

    @torch.no_grad()
    def swap_out(self, net: nn.Module) -> None:
        if self._backup is None:
            raise RuntimeError("EMA weights are not swapped in")
        for k, v in net.named_parameters():
            v.copy_(self._backup[k])
        self._backup = None

    @property
    def swapped_in(self) -> bool:
        return self._backup is not None

    def state_dict(self) -> dict:
        return {"decay": self.decay, "updates_applied": self.updates_applied, "shadow": dict(self.shadow)}

    @classmethod
    def from_state_dict(cls, state: dict) -> "EmaState":
        return cls({k: v.clone() for k, v in state["shadow"].items()}, state["decay"], state["updates_applied"])


def ema_init(params, decay: float) -> EmaState:
    return EmaState.init(params, decay)


def ema_update(state: EmaState, params) -> EmaState:
    return state.update(params)


def ema_swap_in(net: nn.Module, state: EmaState) -> None:
    state.swap_in(net)


def ema_swap_out(net: nn.Module, state: EmaState) -> None:
    state.swap_out(net)


# ---------------------------------------------------------------------------
# plateau scheduling


def _replay(history: Sequence[float], patience: int, cooldown: int, threshold: float) -> bool:
    """Whether the last entry of ``history`` triggers a reduction."""
    best = math.inf
    bad = 0
    cooldown_left = 0
    fired = False
    for value in history:
        fired = False
        if best == math.inf or value < best * (1.0 - threshold):
            best = value
            bad = 0
        else:
            bad += 1
        if cooldown_left > 0:
            cooldown_left -= 1
            bad = 0
        if bad > patience:
            fired = True
            cooldown_left = cooldown
            bad = 0
    return fired


def plateau_step(
    current_lr: float,
    metric_history: Sequence[float],
    patience: int = 10,
    factor: float = 0.5,
    cooldown: int = 0,
    min_lr: float = 0.0,
    threshold: float = 1e-4,
) -> float:
    """Learning rate after observing the last value of ``metric_history`` (lower is better).

    Follows reduce-on-plateau semantics: a reduction by ``factor`` fires once
    the metric has failed to improve (relative ``threshold``) for more than
    ``patience`` evaluations, no reductions happen during the ``cooldown``
    evaluations that follow one, and the result never drops below ``min_lr``.
    """
    if not 0.0 < factor < 1.0:
        raise ValueError("factor must lie in (0, 1)")
    if not metric_history or not _replay(metric_history, patience, cooldown, threshold):
        return current_lr
    return max(current_lr * factor, min_lr)


class PlateauScheduler:
    """Stateful wrapper around :func:`plateau_step`; ``lr`` is the plateau-adjusted base rate."""

    def __init__(self, lr: float, patience: int, factor: float, cooldown: int, min_lr: float):
        self.lr = lr
        self.patience = patience
        self.factor = factor
        self.cooldown = cooldown
        self.min_lr = min_lr
        self.history: list[float] = []

    def step(self, metric: float) -> float:
        self.history.append(float(metric))
        self.lr = plateau_step(self.lr, self.history, self.patience, self.factor, self.cooldown, self.min_lr)
        return self.lr

    def state_dict(self) -> dict:
        return {"history": list(self.history), "lr": self.lr}

    def load_state_dict(self, state: dict) -> None:
        self.history = list(state["history"])
        self.lr = float(state["lr"])
