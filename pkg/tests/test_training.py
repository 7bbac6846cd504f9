import json
import math
from statistics import median

import numpy as np
import pytest
import torch

from msfiqa import checkpoint as ckpt
from msfiqa.data import AugmentationPlan, PairBatchInputs, make_pair_batch
from msfiqa.model import MultiStageIQA
from msfiqa.training import (
    TrainConfig,
    TrainHistory,
    TrainingError,
    cosine_lr,
    fit,
    make_optimizer,
    siamese_scores,
    train_step,
)

from conftest import small_config

PLAN = AugmentationPlan(resize_to=(40, 40), crop_size=(32, 32))


def quick_config(**kw):
    base = dict(base_lr=3e-4, batch_size_per_device=4, total_epochs=3, warmup_epochs=1, steps_per_epoch=2,
                eval_strategy="center", grad_clip=1.0)
    base.update(kw)
    return TrainConfig(**base)


# -- schedule ----------------------------------------------------------------

def test_cosine_schedule_points():
    assert cosine_lr(0, 100, 10, 1.0) == 0.0
    assert cosine_lr(5, 100, 10, 1.0) == 0.5
    assert cosine_lr(10, 100, 10, 1.0) == 1.0
    assert cosine_lr(55, 100, 10, 1.0) == pytest.approx(0.5, abs=1e-15)
    total, warm = 70, 10
    last = cosine_lr(total - 1, total, warm, 2e-5)
    progress = 1 - 1 / (total - warm)
    assert last == pytest.approx(2e-5 * (1 + math.cos(math.pi * progress)) / 2, rel=1e-12)
    assert 0 < last < 2e-6


def test_cosine_schedule_continuous_and_monotone():
    vals = [cosine_lr(s, 200, 20, 1.0) for s in range(200)]
    assert all(b > a for a, b in zip(vals[:20], vals[1:21]))
    assert all(b <= a for a, b in zip(vals[20:], vals[21:]))
    assert abs(vals[21] - vals[20]) < 0.01


def test_config_invariants():
    with pytest.raises(ValueError):
        TrainConfig(base_lr=0)
    with pytest.raises(ValueError):
        TrainConfig(beta2=1.0)
    with pytest.raises(ValueError):
        TrainConfig(warmup_epochs=5, total_epochs=5)
    with pytest.raises(ValueError):
        TrainConfig(batch_size_per_device=3)
    assert TrainConfig(devices=4).batch_size == 256


# -- optimizer oracle --------------------------------------------------------

class Quadratic(torch.nn.Module):
    def __init__(self, n=6):
        super().__init__()
        g = torch.Generator().manual_seed(0)
        self.p = torch.nn.Parameter(torch.randn(n, generator=g, dtype=torch.float64))
        self.a = torch.rand(n, generator=g, dtype=torch.float64) * 3 + 0.1
        self.c = torch.randn(n, generator=g, dtype=torch.float64)

    def loss(self):
        return 0.5 * (self.a * (self.p - self.c) ** 2).sum()


def reference_adamw(p, a, c, lrs, b1, b2, wd, eps=1e-8):
    p = p.copy()
    m = np.zeros_like(p)
    v = np.zeros_like(p)
    for t, lr in enumerate(lrs, start=1):
        g = a * (p - c)
        p = p * (1 - lr * wd)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        p = p - lr * mhat / (np.sqrt(vhat) + eps)
    return p


def test_update_rule_matches_reference():
    cfg = TrainConfig(base_lr=0.05, weight_decay=0.1, beta1=0.8, beta2=0.95, total_epochs=10, warmup_epochs=1)
    q = Quadratic()
    start = q.p.detach().numpy().copy()
    opt = make_optimizer(q, cfg)
    lrs = [cosine_lr(s, 100, 10, cfg.base_lr) for s in range(100)]
    for lr in lrs:
        opt.zero_grad()
        q.loss().backward()
        for g in opt.param_groups:
            g["lr"] = lr
        opt.step()
    ref = reference_adamw(start, q.a.numpy(), q.c.numpy(), lrs, cfg.beta1, cfg.beta2, cfg.weight_decay)
    np.testing.assert_allclose(q.p.detach().numpy(), ref, rtol=0, atol=1e-10)


# -- train_step --------------------------------------------------------------

def fixture_batch(manifest, n=4, seed=0):
    return make_pair_batch(manifest, n, None, np.random.default_rng(seed), PLAN, batch_id="b0")


def fresh_model(dtype=torch.float64):
    torch.manual_seed(0)
    return MultiStageIQA(small_config()).to(dtype)


def test_null_update_leaves_params(fixture_synth):
    model = fresh_model()
    before = {k: v.clone() for k, v in model.state_dict().items()}
    opt = make_optimizer(model, TrainConfig(weight_decay=0.0))
    train_step(model, opt, fixture_batch(fixture_synth.manifest), lr=0.0)
    for k, v in model.state_dict().items():
        assert torch.equal(v, before[k]), k


def test_update_changes_params(fixture_synth):
    model = fresh_model()
    before = [p.clone() for p in model.parameters()]
    opt = make_optimizer(model, TrainConfig())
    rec = train_step(model, opt, fixture_batch(fixture_synth.manifest), lr=1e-3)
    assert rec.total == pytest.approx(rec.reg + rec.rank, abs=1e-12)
    assert any(not torch.equal(a, b) for a, b in zip(before, model.parameters()))


def test_repeated_image_tie_has_no_rank_term(fixture_synth):
    b = fixture_batch(fixture_synth.manifest, 2)
    same = PairBatchInputs(np.stack([b.images[0], b.images[0]]), np.array([0.5, 0.5]), b.indices, "tie")
    model = fresh_model()
    rec = train_step(model, make_optimizer(model, TrainConfig()), same, lr=0.0)
    assert rec.rank == 0.0


def test_weight_sharing_single_parameter_set(fixture_synth):
    model = fresh_model()
    ids = [id(p) for p in model.parameters()]
    images = torch.as_tensor(fixture_batch(fixture_synth.manifest).images).permute(0, 3, 1, 2)
    scores = siamese_scores(model, images)
    scores.sum().backward()
    assert [id(p) for p in model.parameters()] == ids
    # the pair gradient equals the sum of both members' individual gradients
    g_pair = [p.grad.clone() for p in model.parameters()]
    model.zero_grad()
    for i in range(4):
        model(images[i:i + 1]).sum().backward()
    for a, p in zip(g_pair, model.parameters()):
        torch.testing.assert_close(a, p.grad, rtol=1e-10, atol=1e-12)


def test_two_devices_match_one(fixture_synth):
    batch = fixture_batch(fixture_synth.manifest, 8, seed=4)
    grads = []
    for devices in (1, 2):
        model = fresh_model()
        rec = train_step(model, make_optimizer(model, TrainConfig(weight_decay=0.0)), batch, 0.0, devices=devices)
        grads.append(([p.grad.clone() for p in model.parameters()], rec))
    for a, b in zip(grads[0][0], grads[1][0]):
        torch.testing.assert_close(a, b, rtol=1e-10, atol=1e-13)
    assert grads[0][1].total == pytest.approx(grads[1][1].total, rel=1e-12)


def test_non_finite_loss_names_batch(fixture_synth):
    model = fresh_model()
    with torch.no_grad():
        model.head[-1].bias.fill_(float("nan"))
    with pytest.raises(TrainingError, match="b0"):
        train_step(model, make_optimizer(model, TrainConfig()), fixture_batch(fixture_synth.manifest), 1e-3)


# -- fit ---------------------------------------------------------------------

def test_zero_epochs_returns_initial_model(fixture_synth):
    model = fresh_model(torch.float32)
    before = {k: v.clone() for k, v in model.state_dict().items()}
    res = fit(fixture_synth.manifest, small_config(), quick_config(total_epochs=0, warmup_epochs=0), PLAN,
              initial_model=model)
    assert len(res.history) == 0 and res.best_checkpoint is None
    for k, v in res.model.state_dict().items():
        assert torch.equal(v, before[k])


def test_crop_must_match_model_input(fixture_synth):
    with pytest.raises(ValueError):
        fit(fixture_synth.manifest, small_config(48), quick_config(), PLAN)


def test_fit_outputs_and_invariants(tmp_path, fixture_synth):
    res = fit(fixture_synth.manifest, small_config(), quick_config(), PLAN, holdout=fixture_synth.manifest,
              out_dir=tmp_path)
    h = res.history
    assert len(h) == 3
    for r in h.records:
        assert abs(r.total - (r.reg + r.rank)) <= 1e-12
        assert r.holdout_srcc is not None
    assert (tmp_path / "best.ckpt").exists() and (tmp_path / "last.ckpt").exists()
    lines = (tmp_path / "history.jsonl").read_text().splitlines()
    assert [json.loads(x)["epoch"] for x in lines] == [1, 2, 3]
    assert TrainHistory.from_json(h.to_json()).records == h.records
    _, tensors, meta = ckpt.read_checkpoint(tmp_path / "last.ckpt")
    assert meta["epoch"] == 3 and any(k.startswith("optim.") for k in tensors)


def test_fit_is_deterministic(fixture_synth):
    a = fit(fixture_synth.manifest, small_config(), quick_config(), PLAN)
    b = fit(fixture_synth.manifest, small_config(), quick_config(), PLAN)
    assert a.history.to_json() == b.history.to_json()
    for x, y in zip(a.model.parameters(), b.model.parameters()):
        assert torch.equal(x, y)


def test_resume_matches_uninterrupted(tmp_path, fixture_synth):
    cfg = quick_config(total_epochs=4)
    full = fit(fixture_synth.manifest, small_config(), cfg, PLAN, out_dir=tmp_path / "full")
    part = fit(fixture_synth.manifest, small_config(), cfg, PLAN, out_dir=tmp_path / "part", stop_after_epoch=2)
    assert len(part.history) == 2
    resumed = fit(fixture_synth.manifest, small_config(), cfg, PLAN, out_dir=tmp_path / "part", resume=True)
    assert resumed.history.to_json() == full.history.to_json()
    for x, y in zip(full.model.parameters(), resumed.model.parameters()):
        assert torch.equal(x, y)


def test_loss_decreases(fixture_synth):
    cfg = quick_config(base_lr=1e-4, total_epochs=12, warmup_epochs=1, steps_per_epoch=4, batch_size_per_device=8)
    plan = AugmentationPlan(resize_to=(40, 40), crop_size=(32, 32), colorspaces=("RGB",))
    totals = fit(fixture_synth.manifest, small_config(), cfg, plan).history.column("total")
    assert median(totals[-5:]) < median(totals[:5])
