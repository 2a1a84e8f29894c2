import json
import math

import numpy as np
import pytest
import torch

from conftest import sen2naip_like_tree, tiny_config
from eosr.config import load_config, shipped_config_path
from eosr.data import make_dataset
from eosr.losses import l1_loss
from eosr import metrics
from eosr.schedule import adv_weight, warmup_factor, d_warmup_factor
from eosr.trainer import (
    ADV_WEIGHT,
    D_FAKE_PROB,
    D_REAL_PROB,
    G_CONTENT,
    G_TOTAL,
    PRETRAIN_PHASE,
    TRAIN_METRICS,
    VAL_CONTENT,
    VAL_D_LOSS,
    VAL_PERCEPTUAL,
    VAL_PSNR,
    VAL_SAM,
    VAL_SSIM,
    CheckpointMismatch,
    JsonlSink,
    MemorySink,
    NonFiniteLossError,
    Trainer,
    fit,
    load_generator,
    param_groups,
)


def datasets(cfg, seed=0):
    return make_dataset(cfg.Data, "train", seed), make_dataset(cfg.Data, "val", seed)


def batch_of(ds, n=2):
    items = [ds[i] for i in range(n)]
    return {k: torch.stack([it[k] for it in items]) for k in ("lr", "hr")}


def snapshot(net):
    return {k: v.detach().clone() for k, v in net.state_dict().items()}


def same(a, b):
    return a.keys() == b.keys() and all(torch.equal(a[k], b[k]) for k in a)


def test_pretrain_leaves_critic_untouched():
    cfg = tiny_config()
    trainer = Trainer(cfg)
    train, _ = datasets(cfg)
    before = snapshot(trainer.D)
    for _ in range(cfg.Training.g_pretrain_steps):
        records = trainer.train_step(batch_of(train))
        vals = {r.name: r.value for r in records}
        assert vals[ADV_WEIGHT] == 0.0 and vals[PRETRAIN_PHASE] == 1.0
        assert vals[G_TOTAL] == vals[G_CONTENT]
        assert D_REAL_PROB not in vals
    assert same(before, snapshot(trainer.D))
    # the critic's warmup clock starts at 0 when the gate opens, so it first moves one step later
    trainer.train_step(batch_of(train))
    assert trainer.last_lr["discriminator"] == 0.0
    assert same(before, snapshot(trainer.D))
    trainer.train_step(batch_of(train))
    assert trainer.last_lr["discriminator"] > 0.0
    assert not same(before, snapshot(trainer.D))


def test_generator_updates_during_pretrain():
    cfg = tiny_config()
    trainer = Trainer(cfg)
    train = datasets(cfg)[0]
    before = snapshot(trainer.G)
    trainer.train_step(batch_of(train))  # warmup factor is 0 at step 0
    assert trainer.last_lr["generator"] == 0.0 and same(before, snapshot(trainer.G))
    trainer.train_step(batch_of(train))
    assert trainer.last_lr["generator"] > 0.0
    assert not same(before, snapshot(trainer.G))


def test_emitted_adv_weight_matches_schedule(tmp_path):
    cfg = tiny_config()
    sink = MemorySink()
    train, val = datasets(cfg)
    Trainer(cfg, sinks=[sink]).fit(train, val, out_dir=tmp_path)
    records = [r for r in sink.records if r.name == ADV_WEIGHT]
    assert len(records) == cfg.Training.g_pretrain_steps + cfg.Training.adv_steps
    for r in records:
        assert r.value == adv_weight(r.step, cfg.Training)


def test_gradient_clip_bounds_post_clip_norm():
    cfg = tiny_config(Training={"gradient_clip_val": 1.0})
    trainer = Trainer(cfg)
    b = batch_of(datasets(cfg)[0])
    loss = l1_loss(trainer.G(b["lr"]), b["hr"]) * 1e6
    loss.backward(retain_graph=True)
    pre = math.sqrt(sum(float((p.grad.double() ** 2).sum()) for p in trainer.G.parameters()))
    assert pre > 1.0
    post = trainer.apply_gradients(loss, trainer.G, trainer.opt_g)
    assert post <= 1.0 + 1e-6
    # independent recomputation from the gradients left on the parameters
    recomputed = math.sqrt(sum(float((p.grad.double() ** 2).sum()) for p in trainer.G.parameters()))
    assert recomputed == pytest.approx(post, rel=1e-9)


def test_non_finite_loss_names_term():
    cfg = tiny_config()
    trainer = Trainer(cfg)
    b = batch_of(datasets(cfg)[0])
    b["hr"][0, 0, 0, 0] = float("nan")
    with pytest.raises(NonFiniteLossError, match="L1"):
        trainer.train_step(b)


def test_decay_groups_partition_parameters():
    cfg = tiny_config(
        Training={"Optimizers": {"weight_decay": 1e-4}},
        Discriminator={"disc_type": "patchgan", "base_channels": 4, "n_blocks": 3, "norm": "instance", "linear_size": None},
    )
    trainer = Trainer(cfg)
    for net, opt in ((trainer.G, trainer.opt_g), (trainer.D, trainer.opt_d)):
        groups = {g["group"]: g for g in opt.param_groups}
        decayed = {id(p) for p in groups["decayed"]["params"]}
        undecayed = {id(p) for p in groups["undecayed"]["params"]}
        assert decayed.isdisjoint(undecayed)
        assert decayed | undecayed == {id(p) for p in net.parameters()}
        assert groups["decayed"]["weight_decay"] == 1e-4 and groups["undecayed"]["weight_decay"] == 0.0
        modules = dict(net.named_modules())
        for name, p in net.named_parameters():
            owner = modules[name.rsplit(".", 1)[0]]
            if name.endswith(".bias") or isinstance(owner, (torch.nn.InstanceNorm2d, torch.nn.PReLU)):
                assert id(p) in undecayed, name


def test_param_groups_skip_frozen():
    net = torch.nn.Linear(3, 3)
    net.bias.requires_grad_(False)
    groups = param_groups(net, 0.1)
    assert sum(len(g["params"]) for g in groups) == 1


def test_ttur_learning_rates_per_step():
    cfg = tiny_config(Training={"g_warmup_steps": 4, "d_warmup_steps": 2, "g_pretrain_steps": 3})
    trainer = Trainer(cfg)
    t = cfg.Training
    for step in range(12):
        g, d = trainer.effective_lrs(step)
        assert g == t.Optimizers.optim_g_lr * warmup_factor(step, 4)
        assert d == t.Optimizers.optim_d_lr * d_warmup_factor(step, t)
    train = datasets(cfg)[0]
    for _ in range(6):
        step = trainer.step
        trainer.train_step(batch_of(train))
        assert trainer.opt_g.param_groups[0]["lr"] == trainer.effective_lrs(step)[0]


def test_validation_is_deterministic():
    cfg = tiny_config()
    trainer = Trainer(cfg)
    train, val = datasets(cfg)
    trainer.train_step(batch_of(train))
    a = trainer.validation_pass(val)
    b = trainer.validation_pass(val)
    assert [(r.name, r.value) for r in a] == [(r.name, r.value) for r in b]
    names = {r.name for r in a}
    assert names == {VAL_PSNR, VAL_SSIM, VAL_SAM, VAL_CONTENT, VAL_D_LOSS}


def test_validation_cgan_uses_fixed_latent():
    cfg = tiny_config(Model={"model_type": "cgan", "noise_dim": 8})
    trainer = Trainer(cfg)
    val = datasets(cfg)[1]
    assert [r.value for r in trainer.validation_pass(val)] == [r.value for r in trainer.validation_pass(val)]


def test_validation_uses_ema_weights_and_restores_live():
    cfg = tiny_config(Training={"EMA": {"enabled": True, "decay": 0.99}})
    trainer = Trainer(cfg)
    val = datasets(cfg)[1]
    with torch.no_grad():
        for p in trainer.G.parameters():
            p.add_(torch.randn_like(p) * 0.05)
    trainer.ema.update(trainer.G)
    live = snapshot(trainer.G)
    ema_psnr = next(r.value for r in trainer.validation_pass(val) if r.name == VAL_PSNR)
    assert same(live, snapshot(trainer.G))
    trainer.ema = None
    live_psnr = next(r.value for r in trainer.validation_pass(val) if r.name == VAL_PSNR)
    assert ema_psnr != live_psnr


def test_validation_without_ema_uses_live_weights():
    cfg = tiny_config(Training={"EMA": {"enabled": False}})
    trainer = Trainer(cfg)
    assert trainer.ema is None
    val = datasets(cfg)[1]
    reported = next(r.value for r in trainer.validation_pass(val) if r.name == VAL_PSNR)
    with torch.no_grad():
        scores = [metrics.psnr(trainer.G(val[i]["lr"][None])[0], val[i]["hr"]) for i in range(len(val))]
    assert reported == pytest.approx(np.mean(scores), rel=1e-9)


def test_validation_empty_set_errors():
    with pytest.raises(ValueError, match="empty"):
        Trainer(tiny_config()).validation_pass([])


def test_validation_reports_perceptual_when_available(vgg19_weights):
    cfg = tiny_config(Training={"Losses": {"w_perceptual": 0.1, "perceptual_weights": str(vgg19_weights)}})
    trainer = Trainer(cfg)
    names = {r.name for r in trainer.validation_pass(datasets(cfg)[1])}
    assert VAL_PERCEPTUAL in names


def test_metric_completeness_and_ranges(tmp_path):
    cfg = tiny_config()
    sink = MemorySink()
    train, val = datasets(cfg)
    Trainer(cfg, sinks=[sink]).fit(train, val, out_dir=tmp_path)
    adv_start = cfg.Training.g_pretrain_steps
    for step in range(adv_start, adv_start + cfg.Training.adv_steps):
        names = {r.name for r in sink.records if r.step == step}
        assert set(TRAIN_METRICS) <= names, step
    assert {VAL_PSNR, VAL_SSIM, VAL_SAM, VAL_D_LOSS, VAL_CONTENT} <= {r.name for r in sink.records}
    for name in (D_REAL_PROB, D_FAKE_PROB):
        assert all(0.0 <= v <= 1.0 for v in sink.values(name))
    assert set(sink.values(PRETRAIN_PHASE)) == {0.0, 1.0}


def test_fit_writes_checkpoints_and_jsonl(tmp_path):
    cfg = tiny_config()
    train, val = datasets(cfg)
    sink = JsonlSink(tmp_path / "metrics.jsonl")
    paths = fit(cfg, train, val, sinks=[sink], out_dir=tmp_path)
    sink.close()
    assert paths["last"].exists() and paths["best"].exists()
    lines = (tmp_path / "metrics.jsonl").read_text().splitlines()
    assert lines and all(set(json.loads(line)) == {"step", "name", "value"} for line in lines)
    net, ckpt_cfg = load_generator(paths["last"])
    assert ckpt_cfg.Model == cfg.Model
    state = torch.load(paths["last"], weights_only=False)
    ema_params = state["ema"]["shadow"]
    assert all(torch.equal(p, ema_params[k]) for k, p in net.named_parameters())
    live, _ = load_generator(paths["last"], use_ema=False)
    assert all(torch.equal(p, state["generator"][k]) for k, p in live.named_parameters())


def test_best_checkpoint_tracks_validation_psnr(tmp_path):
    cfg = tiny_config(Logging={"val_every": 1})
    sink = MemorySink()
    train, val = datasets(cfg)
    trainer = Trainer(cfg, sinks=[sink])
    trainer.fit(train, val, out_dir=tmp_path)
    best = torch.load(tmp_path / "best.ckpt", weights_only=False)
    assert best["best_psnr"] == max(sink.values(VAL_PSNR))


def test_resume_reproduces_fresh_run(tmp_path):
    cfg = tiny_config(Logging={"val_every": 100})
    train, val = datasets(cfg)
    fresh_sink = MemorySink()
    fresh = Trainer(cfg, sinks=[fresh_sink])
    fresh.fit(train, None, out_dir=tmp_path / "fresh")

    first_sink = MemorySink()
    first = Trainer(cfg, sinks=[first_sink])
    first.fit(train, None, out_dir=tmp_path / "a", max_steps=4)
    resumed_sink = MemorySink()
    resumed = Trainer(cfg, sinks=[resumed_sink])
    resumed.load_checkpoint(tmp_path / "a" / "last.ckpt")
    assert resumed.step == 4
    resumed.fit(train, None, out_dir=tmp_path / "b")

    stitched = first_sink.records + resumed_sink.records
    assert [(r.step, r.name, r.value) for r in stitched] == [(r.step, r.name, r.value) for r in fresh_sink.records]
    assert same(snapshot(fresh.G), snapshot(resumed.G))
    assert all(torch.equal(fresh.ema.shadow[k], resumed.ema.shadow[k]) for k in fresh.ema.shadow)
    for step in range(10):
        assert fresh.effective_lrs(step) == resumed.effective_lrs(step)


def test_resume_rejects_other_architecture(tmp_path):
    cfg = tiny_config()
    trainer = Trainer(cfg)
    trainer.save_checkpoint(tmp_path / "c.ckpt")
    other = Trainer(tiny_config(Model={"n_channels": 12}))
    with pytest.raises(CheckpointMismatch):
        other.load_checkpoint(tmp_path / "c.ckpt")
    with pytest.raises(CheckpointMismatch):
        load_generator(tmp_path / "c.ckpt", tiny_config(Model={"n_blocks": 3}))


def test_exp1_config_smoke_50_steps(tmp_path, vgg16_weights):
    root = sen2naip_like_tree(tmp_path / "data")
    cfg = load_config(
        shipped_config_path("exp1_sen2naip_rgb.yaml"),
        [
            f"Data.root={root}",
            "Data.patch_size_hr=64",
            "Training.batch_size=2",
            f"Training.Losses.perceptual_weights={vgg16_weights}",
            "Logging.log_every=10",
            "Logging.val_every=25",
        ],
    )
    sink = MemorySink()
    train, val = datasets(cfg)
    paths = fit(cfg, train, val, sinks=[sink], out_dir=tmp_path / "run", max_steps=50)
    assert paths["last"].exists()
    steps = sorted({r.step for r in sink.records if r.name == G_CONTENT})
    assert steps[0] == 0 and steps[-1] == 49
    assert all(v == 0.0 for v in sink.values(ADV_WEIGHT))
    assert all(math.isfinite(v) for v in sink.values(G_TOTAL))
    assert len(sink.values(VAL_PSNR)) == 2 and VAL_PERCEPTUAL in {r.name for r in sink.records}

