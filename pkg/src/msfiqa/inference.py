"""Test-time crop augmentation, harmonic-mean aggregation and model ensembles."""
from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import yaml

from . import data
from .checkpoint import load_model
from .model import MultiStageIQA

logger = logging.getLogger(__name__)

STRATEGIES = ("five_crop", "random_crops", "center")
HM_EPSILON = 1e-3


class NonPositiveScoreWarning(UserWarning):
    """Patch scores <= epsilon were shifted before harmonic averaging."""


@dataclass(frozen=True)
class TTAPlan:
    strategy: str = "five_crop"
    crop_size: tuple[int, int] = (64, 64)
    n_crops: int = 20
    resize_to: tuple[int, int] | None = None
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "crop_size", tuple(self.crop_size))
        if self.resize_to is not None:
            object.__setattr__(self, "resize_to", tuple(self.resize_to))
            if self.crop_size[0] > self.resize_to[0] or self.crop_size[1] > self.resize_to[1]:
                raise ValueError(f"crop {self.crop_size} exceeds resize target {self.resize_to}")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown TTA strategy {self.strategy!r}; choose from {STRATEGIES}")
        if self.n_crops < 1:
            raise ValueError("n_crops must be >= 1")

    def describe(self) -> str:
        s = f"strategy={self.strategy} crop={self.crop_size[0]}x{self.crop_size[1]}"
        if self.strategy == "random_crops":
            s += f" n_crops={self.n_crops} seed={self.seed}"
        if self.resize_to:
            s += f" resize={self.resize_to[0]}x{self.resize_to[1]}"
        return s


def five_crop(image: np.ndarray, crop_size: tuple[int, int]) -> list[np.ndarray]:
    """Top-left, top-right, bottom-left, bottom-right, centre."""
    H, W = image.shape[:2]
    h, w = crop_size
    if h > H or w > W:
        raise ValueError(f"crop {h}x{w} larger than image {H}x{W}")
    offsets = [(0, 0), (0, W - w), (H - h, 0), (H - h, W - w), ((H - h) // 2, (W - w) // 2)]
    return [data.crop(image, t, l, crop_size) for t, l in offsets]


def center_crop(image: np.ndarray, crop_size: tuple[int, int]) -> np.ndarray:
    return five_crop(image, crop_size)[4]


def random_crops(image: np.ndarray, crop_size: tuple[int, int], n: int, seed: int) -> list[np.ndarray]:
    rng = np.random.default_rng(seed)
    return [data.random_crop(image, crop_size, rng) for _ in range(n)]


def harmonic_mean(scores: Sequence[float], epsilon: float = HM_EPSILON) -> float:
    """n / sum(1/x).

    Scores at or below ``epsilon`` make the mean undefined, so everything is
    shifted up until the minimum equals ``epsilon``, averaged, and shifted
    back (with a :class:`NonPositiveScoreWarning`).
    """
    x = np.asarray(scores, dtype=np.float64).ravel()
    if x.size == 0:
        raise ValueError("harmonic mean of an empty score list")
    offset = max(0.0, epsilon - float(x.min()))
    if offset > 0:
        warnings.warn("patch scores <= epsilon shifted before harmonic averaging",
                      NonPositiveScoreWarning, stacklevel=2)
        logger.debug("harmonic mean: %d score(s) <= %g, offset %.6g", int((x <= epsilon).sum()), epsilon, offset)
        x = x + offset
    return float(x.size / np.sum(1.0 / x)) - offset


def tta_patches(image: np.ndarray, plan: TTAPlan) -> list[np.ndarray]:
    """Test-path preprocessing: resize, crop per plan, RGB kept as-is."""
    if plan.resize_to is not None:
        image = data.resize_image(image, plan.resize_to)
    if plan.strategy == "five_crop":
        patches = five_crop(image, plan.crop_size)
    elif plan.strategy == "center":
        patches = [center_crop(image, plan.crop_size)]
    else:
        patches = random_crops(image, plan.crop_size, plan.n_crops, plan.seed)
    return [data.random_colorspace(p, None, mode="test") for p in patches]


@torch.no_grad()
def score_patches(model: MultiStageIQA, patches: Sequence[np.ndarray], batch_size: int = 32) -> np.ndarray:
    was_training = model.training
    model.eval()
    dtype = next(model.parameters()).dtype
    out = []
    try:
        for i in range(0, len(patches), batch_size):
            x = data.to_tensor_batch(np.stack(patches[i:i + batch_size]), dtype)
            out.append(model(x).double().numpy())
    finally:
        model.train(was_training)
    return np.concatenate(out)


def predict_image(model: MultiStageIQA, image: np.ndarray, plan: TTAPlan) -> float:
    return harmonic_mean(score_patches(model, tta_patches(image, plan)))


@dataclass
class EnsembleMember:
    checkpoint: str
    resize_to: tuple[int, int]
    model: MultiStageIQA | None = field(default=None, repr=False)

    def load(self) -> MultiStageIQA:
        if self.model is None:
            try:
                self.model = load_model(self.checkpoint)
            except Exception as e:
                raise RuntimeError(f"ensemble member {self.checkpoint!r} failed to load: {e}") from e
        return self.model


@dataclass
class EnsembleSpec:
    members: list[EnsembleMember]
    crop_size: tuple[int, int] = (224, 224)
    strategy: str = "five_crop"
    n_crops: int = 20
    seed: int = 0
    aggregation: str = "mean"

    def __post_init__(self):
        if not self.members:
            raise ValueError("ensemble needs at least one member")
        if self.aggregation != "mean":
            raise ValueError("only 'mean' aggregation is supported")
        self.crop_size = tuple(self.crop_size)

    def plan_for(self, member: EnsembleMember) -> TTAPlan:
        return TTAPlan(self.strategy, self.crop_size, self.n_crops, member.resize_to, self.seed)

    @classmethod
    def from_yaml(cls, path: str | Path) -> "EnsembleSpec":
        """Member checkpoint paths are resolved relative to the YAML file."""
        path = Path(path)
        doc = yaml.safe_load(path.read_text()) or {}
        allowed = {"members", "crop_size", "strategy", "n_crops", "seed", "aggregation"}
        unknown = set(doc) - allowed
        if unknown:
            raise ValueError(f"unknown ensemble keys: {sorted(unknown)}")
        members = []
        for m in doc.get("members") or []:
            extra = set(m) - {"checkpoint", "resize_to"}
            if extra:
                raise ValueError(f"unknown ensemble member keys: {sorted(extra)}")
            ck = Path(m["checkpoint"])
            if not ck.is_absolute():
                ck = path.parent / ck
            members.append(EnsembleMember(str(ck), tuple(m["resize_to"])))
        return cls(members, **{k: v for k, v in doc.items() if k != "members"})


def ensemble_predict(spec: EnsembleSpec, image: np.ndarray) -> float:
    scores = [predict_image(m.load(), image, spec.plan_for(m)) for m in spec.members]
    return float(np.mean(scores))


def write_predictions(path: str | Path, rows: Sequence[tuple[str, float]]):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["image_path", "score"])
        for name, score in rows:
            w.writerow([name, repr(float(score))])
