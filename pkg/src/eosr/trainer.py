"""Alternating generator/discriminator optimization with validation and checkpoints.

Per training step the discriminator is updated first (on detached generator
output, once its gate is open), then the generator. Learning rates are the
plateau-adjusted base rates times the step-indexed warmup factors from
:mod:`eosr.schedule`; metrics are emitted as :class:`MetricRecord` objects
to a list of sinks.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import random
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
import torch
from torch import nn
from torch.utils.data import DataLoader

from . import metrics
from .config import Config, config_to_dict, model_fingerprint, validate_config
from .losses import adversarial_d_loss, compose_g_objective
from .models import build_critic, build_generator
from .perceptual import PerceptualWeightsUnavailable, build_perceptual
from .schedule import EmaState, PlateauScheduler, d_gate, pretrain_steps, schedule_state

log = logging.getLogger(__name__)

PRETRAIN_PHASE = "training/pretrain_phase"
D_LOSS = "discriminator/adversarial_loss"
D_REAL_PROB = "discriminator/D(y)_prob"
D_FAKE_PROB = "discriminator/D(G(x))_prob"
G_CONTENT = "generator/content_loss"
G_TOTAL = "generator/total_loss"
ADV_WEIGHT = "training/adv_loss_weight"
VAL_D_LOSS = "validation/DISC_adversarial_loss"
VAL_PSNR = "validation/PSNR"
VAL_SSIM = "validation/SSIM"
VAL_SAM = "validation/SAM"
VAL_PERCEPTUAL = "validation/perceptual"
VAL_CONTENT = "validation/content_loss"

TRAIN_METRICS = (PRETRAIN_PHASE, D_LOSS, D_REAL_PROB, D_FAKE_PROB, G_CONTENT, G_TOTAL, ADV_WEIGHT)
VALIDATION_SEED = 12345


class NonFiniteLossError(RuntimeError):
    pass


class CheckpointMismatch(ValueError):
    pass


@dataclass(frozen=True)
class MetricRecord:
    step: int
    name: str
    value: float


# ---------------------------------------------------------------------------
# sinks


class MemorySink:
    def __init__(self):
        self.records: list[MetricRecord] = []

    def write(self, records: Sequence[MetricRecord]) -> None:
        self.records.extend(records)

    def close(self) -> None:
        pass

    def values(self, name: str) -> list[float]:
        return [r.value for r in self.records if r.name == name]


class JsonlSink:
    """Appends one ``{"step", "name", "value"}`` object per line."""

    def __init__(self, path: str | Path, append: bool = False):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "a" if append else "w")

    def write(self, records: Sequence[MetricRecord]) -> None:
        for r in records:
            self._fh.write(json.dumps({"step": r.step, "name": r.name, "value": r.value}) + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()


class LoggingSink:
    def write(self, records: Sequence[MetricRecord]) -> None:
        if records:
            body = " ".join(f"{r.name}={r.value:.5g}" for r in records)
            log.info("step %d %s", records[0].step, body)

    def close(self) -> None:
        pass


# ---------------------------------------------------------------------------
# helpers


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)


def _is_decayed(name: str, param: nn.Parameter) -> bool:
    # conv kernels and linear weight matrices; biases, norm affines and PReLU slopes are not
    return param.ndim >= 2 and not name.endswith(".bias")


def param_groups(net: nn.Module, weight_decay: float) -> list[dict]:
    decayed, undecayed = [], []
    for name, p in net.named_parameters():
        if not p.requires_grad:
            continue
        (decayed if _is_decayed(name, p) else undecayed).append(p)
    return [
        {"params": decayed, "weight_decay": weight_decay, "group": "decayed"},
        {"params": undecayed, "weight_decay": 0.0, "group": "undecayed"},
    ]


def make_optimizer(net: nn.Module, lr: float, opt_cfg) -> torch.optim.Adam:
    return torch.optim.Adam(param_groups(net, opt_cfg.weight_decay), lr=lr, betas=tuple(opt_cfg.betas), eps=opt_cfg.eps)


def set_lr(opt: torch.optim.Optimizer, lr: float) -> None:
    for group in opt.param_groups:
        group["lr"] = lr


def global_grad_norm(params: Iterable[torch.Tensor]) -> float:
    grads = [p.grad.detach().double() for p in params if p.grad is not None]
    if not grads:
        return 0.0
    return float(torch.sqrt(sum((g**2).sum() for g in grads)))


def architecture_fingerprint(cfg: Config) -> str:
    payload = json.dumps(
        {"generator": model_fingerprint(cfg.Model), "critic": cfg.Discriminator.model_dump(mode="json")},
        sort_keys=True,
    )
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def _epoch_batches(n: int, batch_size: int, seed: int, epoch: int) -> list[list[int]]:
    gen = torch.Generator().manual_seed(seed * 100003 + epoch)
    perm = torch.randperm(n, generator=gen).tolist()
    if n < batch_size:
        return [perm]
    return [perm[i : i + batch_size] for i in range(0, n - batch_size + 1, batch_size)]


def _resolve_device(gpus: Sequence[int]) -> torch.device:
    if gpus and torch.cuda.is_available():
        return torch.device(f"cuda:{gpus[0]}")
    if gpus:
        log.warning("Training.gpus=%s requested but CUDA is unavailable; training on CPU", list(gpus))
    return torch.device("cpu")


# ---------------------------------------------------------------------------
# trainer


class Trainer:
    """Owns the networks, optimizers, schedules and EMA state of one run."""

    def __init__(
        self,
        cfg: Config,
        sinks: Optional[list] = None,
        device: Optional[str | torch.device] = None,
        perceptual: Optional[nn.Module] = None,
    ):
        self.cfg = cfg
        t = cfg.Training
        self.train_cfg = t
        self.sinks = list(sinks) if sinks is not None else []
        self.device = torch.device(device) if device is not None else _resolve_device(t.gpus)
        seed_everything(t.seed)

        self.G = build_generator(cfg.Model, seed=t.seed).to(self.device)
        self.D = build_critic(cfg.Discriminator, cfg.Model.out_bands, seed=t.seed + 1).to(self.device)
        self.G_run: nn.Module = self.G
        self.D_run: nn.Module = self.D
        if self.device.type == "cuda" and len(t.gpus) > 1:
            self.G_run = nn.DataParallel(self.G, device_ids=list(t.gpus))
            self.D_run = nn.DataParallel(self.D, device_ids=list(t.gpus))
        self.use_amp = t.precision == 16 and self.device.type == "cuda"
        if t.precision == 16 and not self.use_amp:
            log.warning("precision=16 needs CUDA; running in float32")
        self.scaler = torch.amp.GradScaler("cuda", enabled=self.use_amp)

        self.opt_g = make_optimizer(self.G, t.Optimizers.optim_g_lr, t.Optimizers)
        self.opt_d = make_optimizer(self.D, t.Optimizers.optim_d_lr, t.Optimizers)
        s = t.Schedulers
        self.plateau_g = PlateauScheduler(t.Optimizers.optim_g_lr, s.patience, s.factor, s.cooldown, s.min_lr)
        self.plateau_d = PlateauScheduler(t.Optimizers.optim_d_lr, s.patience, s.factor, s.cooldown, s.min_lr)
        self.ema = EmaState.init(self.G, t.EMA.decay) if t.EMA.enabled else None

        self.perceptual = perceptual
        if self.perceptual is None and t.Losses.w_perceptual > 0:
            self.perceptual = build_perceptual(t.Losses, cfg.Data.rgb_triplet)
        if self.perceptual is not None:
            self.perceptual = self.perceptual.to(self.device)

        self.step = 0
        self.steps_per_epoch: Optional[int] = None
        self.best_psnr = -math.inf
        self.last_grad_norm = {"generator": 0.0, "discriminator": 0.0}
        self.last_lr = {"generator": 0.0, "discriminator": 0.0}

    # -- learning rates -----------------------------------------------------

    def effective_lrs(self, step: Optional[int] = None) -> tuple[float, float]:
        """(generator, critic) learning rates in force at ``step``."""
        st = schedule_state(self.step if step is None else step, self.train_cfg, self.steps_per_epoch)
        return self.plateau_g.lr * st.g_lr_factor, self.plateau_d.lr * st.d_lr_factor

    # -- one step -----------------------------------------------------------

    def _check_finite(self, terms: dict[str, torch.Tensor]) -> None:
        for name, value in terms.items():
            if not torch.isfinite(value).all():
                raise NonFiniteLossError(f"non-finite {name} ({float(value.detach())}) at step {self.step}")

    def apply_gradients(self, loss: torch.Tensor, net: nn.Module, opt: torch.optim.Optimizer) -> float:
        """Backpropagate ``loss``, clip the global gradient norm, step; returns the post-clip norm."""
        opt.zero_grad(set_to_none=True)
        self.scaler.scale(loss).backward()
        self.scaler.unscale_(opt)
        clip = self.train_cfg.gradient_clip_val
        if clip > 0:
            nn.utils.clip_grad_norm_(net.parameters(), clip)
        norm = global_grad_norm(net.parameters())
        self.scaler.step(opt)
        self.scaler.update()
        return norm

    def _forward_g(self, lr: torch.Tensor) -> torch.Tensor:
        return self.G_run(lr)

    def train_step(self, batch: dict) -> list[MetricRecord]:
        t = self.train_cfg
        step = self.step
        st = schedule_state(step, t, self.steps_per_epoch)
        lr_x = batch["lr"].to(self.device)
        hr = batch["hr"].to(self.device)
        g_lr, d_lr = self.effective_lrs(step)
        self.last_lr = {"generator": g_lr, "discriminator": d_lr}
        records = [MetricRecord(step, PRETRAIN_PHASE, float(st.pretrain_active))]

        self.G.train()
        with torch.autocast(self.device.type, enabled=self.use_amp):
            sr = self._forward_g(lr_x)

        if st.d_updates_enabled:
            set_lr(self.opt_d, d_lr)
            self.D.train()
            with torch.autocast(self.device.type, enabled=self.use_amp):
                real_logits = self.D_run(hr)
                fake_logits = self.D_run(sr.detach())
                d_loss = adversarial_d_loss(real_logits.float(), fake_logits.float(), t.label_smoothing)
            self._check_finite({"discriminator adversarial loss": d_loss})
            self.last_grad_norm["discriminator"] = self.apply_gradients(d_loss, self.D, self.opt_d)
            records += [
                MetricRecord(step, D_LOSS, float(d_loss.detach())),
                MetricRecord(step, D_REAL_PROB, float(torch.sigmoid(real_logits.detach().float()).mean())),
                MetricRecord(step, D_FAKE_PROB, float(torch.sigmoid(fake_logits.detach().float()).mean())),
            ]

        set_lr(self.opt_g, g_lr)
        g_fake_logits = None
        if st.adv_weight > 0:
            self.D.requires_grad_(False)
            try:
                with torch.autocast(self.device.type, enabled=self.use_amp):
                    g_fake_logits = self.D_run(sr).float()
            finally:
                self.D.requires_grad_(True)
        with torch.autocast(self.device.type, enabled=self.use_amp):
            parts = compose_g_objective(sr.float(), hr, g_fake_logits, t.Losses, st.adv_weight, self.perceptual)
        self._check_finite(
            {
                "L1 loss": parts.l1,
                "SAM loss": parts.sam,
                "perceptual loss": parts.perceptual,
                "TV loss": parts.tv,
                "generator adversarial loss": parts.adversarial,
                "generator total loss": parts.g_total,
            }
        )
        self.last_grad_norm["generator"] = self.apply_gradients(parts.g_total, self.G, self.opt_g)
        if self.ema is not None:
            self.ema.update(self.G)

        records += [
            MetricRecord(step, G_CONTENT, float(parts.content_total.detach())),
            MetricRecord(step, G_TOTAL, float(parts.g_total.detach())),
            MetricRecord(step, ADV_WEIGHT, st.adv_weight),
        ]
        self.step += 1
        return records

    # -- validation ---------------------------------------------------------

    @torch.no_grad()
    def validation_pass(self, val_set, batch_size: Optional[int] = None) -> list[MetricRecord]:
        if val_set is None or len(val_set) == 0:
            raise ValueError("validation set is empty")
        t = self.train_cfg
        batch_size = batch_size or t.batch_size
        loader = DataLoader(val_set, batch_size=batch_size, shuffle=False)
        swapped = False
        g_mode, d_mode = self.G.training, self.D.training
        self.G.eval()
        self.D.eval()
        sums = {VAL_PSNR: 0.0, VAL_SSIM: 0.0, VAL_SAM: 0.0, VAL_PERCEPTUAL: 0.0, VAL_CONTENT: 0.0, VAL_D_LOSS: 0.0}
        n_samples = 0
        n_batches = 0
        try:
            if self.ema is not None:
                self.ema.swap_in(self.G)
                swapped = True
            for b, batch in enumerate(loader):
                lr_x = batch["lr"].to(self.device)
                hr = batch["hr"].to(self.device)
                z = self.G.sample_noise(lr_x.shape[0], seed=VALIDATION_SEED + b) if self.G.is_conditional else None
                sr = self.G(lr_x, z).float()
                parts = compose_g_objective(sr, hr, None, t.Losses, 0.0, self.perceptual)
                d_loss = adversarial_d_loss(self.D(hr).float(), self.D(sr).float(), t.label_smoothing)
                sums[VAL_CONTENT] += float(parts.content_total)
                sums[VAL_D_LOSS] += float(d_loss)
                for k in range(sr.shape[0]):
                    sums[VAL_PSNR] += metrics.psnr(sr[k], hr[k])
                    sums[VAL_SSIM] += metrics.ssim(sr[k], hr[k])
                    sums[VAL_SAM] += metrics.sam(sr[k], hr[k])
                    if self.perceptual is not None:
                        sums[VAL_PERCEPTUAL] += float(self.perceptual(sr[k : k + 1], hr[k : k + 1]))
                n_samples += sr.shape[0]
                n_batches += 1
        finally:
            if swapped:
                self.ema.swap_out(self.G)
            self.G.train(g_mode)
            self.D.train(d_mode)
        out = {}
        for name in (VAL_PSNR, VAL_SSIM, VAL_SAM, VAL_PERCEPTUAL):
            out[name] = sums[name] / n_samples
        out[VAL_CONTENT] = sums[VAL_CONTENT] / n_batches
        out[VAL_D_LOSS] = sums[VAL_D_LOSS] / n_batches
        if self.perceptual is None:
            del out[VAL_PERCEPTUAL]
        return [MetricRecord(self.step, k, v) for k, v in out.items()]

    def on_validation(self, records: list[MetricRecord]) -> None:
        """Feed the plateau schedulers; the critic's only once it is being trained."""
        vals = {r.name: r.value for r in records}
        self.plateau_g.step(vals[VAL_CONTENT])
        if d_gate(self.step, self.train_cfg, self.steps_per_epoch):
            self.plateau_d.step(vals[VAL_D_LOSS])

    # -- checkpoints --------------------------------------------------------

    def state_dict(self) -> dict:
        return {
            "format": 1,
            "fingerprint": architecture_fingerprint(self.cfg),
            "config": config_to_dict(self.cfg),
            "step": self.step,
            "best_psnr": self.best_psnr,
            "generator": self.G.state_dict(),
            "discriminator": self.D.state_dict(),
            "opt_g": self.opt_g.state_dict(),
            "opt_d": self.opt_d.state_dict(),
            "plateau_g": self.plateau_g.state_dict(),
            "plateau_d": self.plateau_d.state_dict(),
            "ema": self.ema.state_dict() if self.ema is not None else None,
            "schedule": asdict(schedule_state(self.step, self.train_cfg, self.steps_per_epoch)),
            "torch_rng": torch.get_rng_state(),
        }

    def save_checkpoint(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(path.suffix + ".tmp")
        torch.save(self.state_dict(), tmp)
        tmp.replace(path)
        return path

    def load_checkpoint(self, path: str | Path) -> None:
        state = torch.load(path, map_location=self.device, weights_only=False)
        expected = architecture_fingerprint(self.cfg)
        if state.get("fingerprint") != expected:
            raise CheckpointMismatch(
                f"{path} was written for architecture {state.get('fingerprint')}, current config is {expected}"
            )
        self.G.load_state_dict(state["generator"])
        self.D.load_state_dict(state["discriminator"])
        self.opt_g.load_state_dict(state["opt_g"])
        self.opt_d.load_state_dict(state["opt_d"])
        self.plateau_g.load_state_dict(state["plateau_g"])
        self.plateau_d.load_state_dict(state["plateau_d"])
        if self.ema is not None and state["ema"] is not None:
            self.ema = EmaState.from_state_dict(state["ema"])
        self.step = int(state["step"])
        self.best_psnr = float(state["best_psnr"])
        torch.set_rng_state(state["torch_rng"].cpu())

    # -- loop ---------------------------------------------------------------

    def total_steps(self) -> int:
        return pretrain_steps(self.train_cfg) + self.train_cfg.adv_steps

    def emit(self, records: Sequence[MetricRecord]) -> None:
        for sink in self.sinks:
            sink.write(records)

    def fit(self, train_set, val_set=None, out_dir: Optional[str | Path] = None, max_steps: Optional[int] = None) -> dict:
        """Train to ``total_steps()`` (or ``max_steps``); returns checkpoint paths."""
        t = self.train_cfg
        lg = self.cfg.Logging
        out_dir = Path(out_dir or lg.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        end = self.total_steps() if max_steps is None else min(max_steps, self.total_steps())
        n = len(train_set)
        if n == 0:
            raise ValueError("training set is empty")
        self.steps_per_epoch = len(_epoch_batches(n, t.batch_size, t.seed, 0))
        paths = {"last": out_dir / "last.ckpt", "best": out_dir / "best.ckpt"}

        while self.step < end:
            epoch, skip = divmod(self.step, self.steps_per_epoch)
            if hasattr(train_set, "set_epoch"):
                train_set.set_epoch(epoch)
            batches = _epoch_batches(n, t.batch_size, t.seed, epoch)[skip:]
            loader = DataLoader(train_set, batch_sampler=batches, num_workers=self.cfg.Data.num_workers)
            for batch in loader:
                records = self.train_step(batch)
                if (self.step - 1) % lg.log_every == 0 or self.step == end:
                    self.emit(records)
                if val_set is not None and (self.step % lg.val_every == 0 or self.step == end):
                    self._validate_and_checkpoint(val_set, paths)
                if self.step >= end:
                    break
        self.save_checkpoint(paths["last"])
        if not paths["best"].exists():
            self.save_checkpoint(paths["best"])
        return paths

    def _validate_and_checkpoint(self, val_set, paths: dict) -> None:
        records = self.validation_pass(val_set)
        self.emit(records)
        self.on_validation(records)
        psnr = next(r.value for r in records if r.name == VAL_PSNR)
        if psnr > self.best_psnr:
            self.best_psnr = psnr
            self.save_checkpoint(paths["best"])
        self.save_checkpoint(paths["last"])


def fit(cfg: Config, train_set, val_set=None, sinks: Optional[list] = None, resume: Optional[str | Path] = None,
        out_dir: Optional[str | Path] = None, max_steps: Optional[int] = None) -> dict:
    trainer = Trainer(cfg, sinks=sinks)
    if resume is not None:
        trainer.load_checkpoint(resume)
    return trainer.fit(train_set, val_set, out_dir=out_dir, max_steps=max_steps)


def load_generator(checkpoint: str | Path, cfg: Optional[Config] = None, use_ema: bool = True,
                   device: str | torch.device = "cpu"):
    """Generator from a checkpoint, with EMA weights when available and requested."""
    state = torch.load(checkpoint, map_location=device, weights_only=False)
    ckpt_cfg = validate_config(state["config"])
    if cfg is not None and architecture_fingerprint(cfg) != state["fingerprint"]:
        raise CheckpointMismatch(f"{checkpoint} does not match the architecture of the given config")
    net = build_generator((cfg or ckpt_cfg).Model)
    net.load_state_dict(state["generator"])
    if use_ema and state.get("ema") is not None:
        with torch.no_grad():
            params = dict(net.named_parameters())
            for k, v in state["ema"]["shadow"].items():
                params[k].copy_(v)
    return net.to(device).eval(), ckpt_cfg
