"""Siamese pairwise training with AdamW and a warmup + cosine schedule.

Both members of every pair run through the one :class:`MultiStageIQA`
instance, so their gradients land in the same parameter tensors.
Multi-device data parallelism is emulated by splitting a step's batch into
per-device chunks whose loss-share-weighted gradients are summed.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from . import checkpoint as ckpt
from .data import AugmentationPlan, DatasetManifest, PairBatchInputs, compute_sampling_weights, make_pair_batch, to_tensor_batch
from .inference import TTAPlan
from .losses import LossRecord, total_loss
from .metrics import evaluate
from .model import BackboneConfig, MultiStageIQA

logger = logging.getLogger(__name__)

LOSS_WEIGHTS = {"combined": (1.0, 1.0), "mse": (1.0, 0.0), "rank": (0.0, 1.0)}


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 2e-5
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.01
    batch_size_per_device: int = 64
    devices: int = 1
    warmup_epochs: int = 2
    total_epochs: int = 30
    steps_per_epoch: int | None = None  # default: one pass over the manifest
    loss: str = "combined"
    sampling_bins: int = 10  # 0 disables MOS-balanced sampling
    grad_clip: float | None = None  # max global gradient norm
    eval_strategy: str = "five_crop"
    dtype: str = "float32"
    seed: int = 0

    def __post_init__(self):
        if not self.base_lr > 0:
            raise ValueError("base_lr must be > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if self.total_epochs > 0 and not self.warmup_epochs < self.total_epochs:
            raise ValueError("warmup_epochs must be < total_epochs")
        if self.batch_size_per_device < 2 or self.batch_size_per_device % 2:
            raise ValueError("batch_size_per_device must be even and >= 2")
        if self.devices < 1:
            raise ValueError("devices must be >= 1")
        if self.loss not in LOSS_WEIGHTS:
            raise ValueError(f"loss must be one of {sorted(LOSS_WEIGHTS)}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    @property
    def batch_size(self) -> int:
        return self.batch_size_per_device * self.devices

    @property
    def torch_dtype(self) -> torch.dtype:
        return torch.float64 if self.dtype == "float64" else torch.float32

    def steps_for(self, n_samples: int) -> int:
        return self.steps_per_epoch or max(1, math.ceil(n_samples / self.batch_size))


@dataclass
class EpochRecord:
    epoch: int
    total: float
    reg: float
    rank: float
    lr: float
    train_srcc: float | None
    holdout_srcc: float | None = None
    holdout_plcc: float | None = None


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)
    split_seed: int | None = None

    def __len__(self):
        return len(self.records)

    def column(self, name: str) -> list:
        return [getattr(r, name) for r in self.records]

    def to_json(self) -> str:
        return json.dumps({"split_seed": self.split_seed, "records": [asdict(r) for r in self.records]},
                          sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "TrainHistory":
        d = json.loads(text)
        return cls([EpochRecord(**r) for r in d["records"]], d.get("split_seed"))


def cosine_lr(step: int, total_steps: int, warmup_steps: int, base_lr: float) -> float:
    """Linear 0 -> base_lr ramp over warmup, then half-cosine decay towards 0."""
    if step < warmup_steps:
        return base_lr * step / warmup_steps
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return base_lr * (1.0 + math.cos(math.pi * progress)) / 2.0


def make_optimizer(model: MultiStageIQA, cfg: TrainConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(model.parameters(), lr=cfg.base_lr, betas=(cfg.beta1, cfg.beta2),
                             weight_decay=cfg.weight_decay)


def siamese_scores(model: MultiStageIQA, images: torch.Tensor) -> torch.Tensor:
    """Scores for consecutive pairs; both branches share ``model``."""
    first, second = model.score_pair(images[0::2], images[1::2])
    return torch.stack([first, second], dim=1).reshape(-1)


def train_step(model: MultiStageIQA, optimizer: torch.optim.Optimizer, batch: PairBatchInputs,
               lr: float, loss: str = "combined", devices: int = 1,
               grad_clip: float | None = None) -> LossRecord:
    """One update; returns the full-batch (total, reg, rank) as floats.

    With ``devices > 1`` each contiguous chunk's gradient is scaled by its
    share of the batch, so the summed gradient equals the full-batch one.
    """
    reg_w, rank_w = LOSS_WEIGHTS[loss]
    dtype = next(model.parameters()).dtype
    images = to_tensor_batch(batch.images, dtype)
    targets = torch.as_tensor(batch.mos, dtype=dtype)
    n = len(targets)
    if n % (2 * devices):
        raise ValueError(f"batch of {n} cannot be split into {devices} even chunks")
    chunk = n // devices
    model.train()
    optimizer.zero_grad(set_to_none=True)
    reg_sum = rank_sum = 0.0
    for d in range(devices):
        sl = slice(d * chunk, (d + 1) * chunk)
        pred = siamese_scores(model, images[sl])
        rec = total_loss(pred, targets[sl], reg_w, rank_w) if torch.isfinite(pred).all() else None
        if rec is None or not torch.isfinite(rec.total):
            optimizer.zero_grad(set_to_none=True)
            raise TrainingError(f"non-finite loss in batch {batch.batch_id!r} (device chunk {d})")
        (rec.total * (chunk / n)).backward()
        reg_sum += rec.reg.item() * chunk / n
        rank_sum += rec.rank.item() * chunk / n
    if grad_clip is not None:
        torch.nn.utils.clip_grad_norm_(model.parameters(), grad_clip)
    for group in optimizer.param_groups:
        group["lr"] = lr
    optimizer.step()
    return LossRecord(reg_w * reg_sum + rank_w * rank_sum, reg_sum, rank_sum)


def optimizer_tensors(optimizer: torch.optim.Optimizer) -> dict[str, torch.Tensor]:
    out = {}
    for idx, state in optimizer.state_dict()["state"].items():
        for key, value in state.items():
            out[f"optim.{idx}.{key}"] = torch.as_tensor(value, dtype=torch.float64).reshape(
                tuple(value.shape) if torch.is_tensor(value) else ())
    return out


def load_optimizer_tensors(optimizer: torch.optim.Optimizer, tensors: dict[str, torch.Tensor]):
    sd = optimizer.state_dict()
    params = [p for g in optimizer.param_groups for p in g["params"]]
    state: dict[int, dict] = {}
    for name, value in tensors.items():
        if not name.startswith("optim."):
            continue
        _, idx, key = name.split(".", 2)
        idx = int(idx)
        dtype = torch.float32 if key == "step" else params[idx].dtype
        state.setdefault(idx, {})[key] = value.to(dtype)
    sd["state"] = state
    optimizer.load_state_dict(sd)


def save_training_checkpoint(path: Path, model, optimizer, epoch: int, history: TrainHistory,
                             train_cfg: TrainConfig, plan: AugmentationPlan):
    meta = {"kind": "training", "epoch": epoch, "history": history.to_json(),
            "train_config": asdict(train_cfg), "augmentation": asdict(plan)}
    ckpt.save_checkpoint(path, model, meta, optimizer_tensors(optimizer))


@dataclass
class FitResult:
    model: MultiStageIQA
    history: TrainHistory
    best_checkpoint: Path | None = None


def _eval_plan(plan: AugmentationPlan, strategy: str) -> TTAPlan:
    return TTAPlan(strategy, plan.crop_size, resize_to=plan.resize_to, seed=0)


def fit(manifest: DatasetManifest, model_config: BackboneConfig, train_config: TrainConfig,
        plan: AugmentationPlan, holdout: DatasetManifest | None = None,
        out_dir: str | Path | None = None, resume: bool = False,
        initial_model: MultiStageIQA | None = None, split_seed: int | None = None,
        stop_after_epoch: int | None = None,
        on_epoch_end: Callable[[EpochRecord], None] | None = None, workers: int = 1) -> FitResult:
    """Train for ``train_config.total_epochs`` epochs of MOS-balanced pair batches.

    With ``out_dir`` set, ``last.ckpt`` is written after every epoch (the
    resume point), ``best.ckpt`` tracks the best holdout SRCC (training
    SRCC without a holdout) and ``history.jsonl`` holds one record per line.
    Epoch ``e`` draws its batches from ``default_rng([seed, e])`` so a
    resumed run replays exactly what an uninterrupted one would.
    """
    cfg = train_config
    if tuple(plan.crop_size) != (model_config.input_height, model_config.input_width):
        raise ValueError(f"crop size {plan.crop_size} does not match model input "
                         f"{model_config.input_height}x{model_config.input_width}")
    torch.manual_seed(cfg.seed)
    model = initial_model if initial_model is not None else MultiStageIQA(model_config)
    model.to(cfg.torch_dtype)
    optimizer = make_optimizer(model, cfg)
    history = TrainHistory(split_seed=split_seed)
    start_epoch = 0
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    best_path = None
    best_score = -math.inf

    if resume and out is not None and (out / "last.ckpt").exists():
        config, tensors, meta = ckpt.read_checkpoint(out / "last.ckpt")
        if config != model_config:
            raise TrainingError("resume checkpoint was written for a different model config")
        if meta.get("train_config") != asdict(cfg):
            logger.warning("resuming with a train config that differs from the checkpoint's")
        model = ckpt.build_model(config, tensors).to(cfg.torch_dtype)
        optimizer = make_optimizer(model, cfg)
        load_optimizer_tensors(optimizer, tensors)
        history = TrainHistory.from_json(meta["history"])
        start_epoch = int(meta["epoch"])
        logger.info("resuming from epoch %d", start_epoch)
        if (out / "best.ckpt").exists():
            best_path = out / "best.ckpt"
            scores = [r.holdout_srcc if holdout is not None else r.train_srcc for r in history.records]
            best_score = max((s for s in scores if s is not None), default=-math.inf)

    if cfg.total_epochs == 0:
        return FitResult(model, history, None)

    weights = compute_sampling_weights(manifest, cfg.sampling_bins) if cfg.sampling_bins > 0 else None
    steps = cfg.steps_for(len(manifest))
    total_steps = steps * cfg.total_epochs
    warmup_steps = steps * cfg.warmup_epochs
    eval_plan = _eval_plan(plan, cfg.eval_strategy)

    for epoch in range(start_epoch, cfg.total_epochs):
        rng = np.random.default_rng([cfg.seed, epoch])
        regs, ranks, lr = [], [], 0.0
        for s in range(steps):
            step = epoch * steps + s
            lr = cosine_lr(step, total_steps, warmup_steps, cfg.base_lr)
            batch = make_pair_batch(manifest, cfg.batch_size, weights, rng, plan, "train",
                                    batch_id=f"epoch{epoch}-step{s}")
            rec = train_step(model, optimizer, batch, lr, cfg.loss, cfg.devices, cfg.grad_clip)
            regs.append(rec.reg)
            ranks.append(rec.rank)
        reg, rank = float(np.mean(regs)), float(np.mean(ranks))
        train_eval = evaluate(model, manifest, eval_plan, workers)
        record = EpochRecord(epoch + 1, reg + rank, reg, rank, lr, train_eval.srcc)
        if holdout is not None:
            ho = evaluate(model, holdout, eval_plan, workers)
            record.holdout_srcc, record.holdout_plcc = ho.srcc, ho.plcc
        history.records.append(record)
        logger.info("epoch %d total=%.5f reg=%.5f rank=%.5f lr=%.3g srcc=%s", record.epoch,
                    record.total, reg, rank, lr, record.train_srcc)

        if out is not None:
            score = record.holdout_srcc if holdout is not None else record.train_srcc
            if score is not None and score > best_score:
                best_score = score
                best_path = out / "best.ckpt"
                ckpt.save_checkpoint(best_path, model, {"kind": "model", "epoch": epoch + 1,
                                                        "augmentation": asdict(plan)})
            save_training_checkpoint(out / "last.ckpt", model, optimizer, epoch + 1, history, cfg, plan)
            with open(out / "history.jsonl", "w") as fh:
                for r in history.records:
                    fh.write(json.dumps(asdict(r), sort_keys=True) + "\n")
        if on_epoch_end is not None:
            on_epoch_end(record)
        if stop_after_epoch is not None and epoch + 1 >= stop_after_epoch:
            break

    return FitResult(model, history, best_path)
