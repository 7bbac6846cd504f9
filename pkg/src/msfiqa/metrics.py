"""Correlation metrics and evaluation reports.

``srcc`` and ``plcc`` return ``None`` when a correlation is undefined
(a constant input vector). Callers must treat ``None`` as "degenerate",
never as zero.
"""
from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .data import read_image
from .inference import predict_image

logger = logging.getLogger(__name__)


def _as_pair(predictions, targets) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(predictions, dtype=np.float64).ravel()
    s = np.asarray(targets, dtype=np.float64).ravel()
    if p.shape != s.shape:
        raise ValueError(f"length mismatch: {p.size} predictions vs {s.size} targets")
    if p.size < 2:
        raise ValueError("correlation needs at least 2 samples")
    return p, s


def _pearson(x: np.ndarray, y: np.ndarray) -> float | None:
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(dx @ dx)
    syy = float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        return None
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


def srcc(predictions, targets) -> float | None:
    """Spearman rank correlation.

    Tie-free inputs use 1 - 6*sum(d^2) / (N(N^2-1)); with ties the ranks are
    averaged and their Pearson correlation is returned.
    """
    p, s = _as_pair(predictions, targets)
    if np.ptp(p) == 0 or np.ptp(s) == 0:
        return None
    rp = rankdata(p)
    rs = rankdata(s)
    n = p.size
    if np.unique(p).size == n and np.unique(s).size == n:
        d = rp - rs
        return 1.0 - 6.0 * float(d @ d) / (n * (n * n - 1))
    return _pearson(rp, rs)


def plcc(predictions, targets) -> float | None:
    p, s = _as_pair(predictions, targets)
    return _pearson(p, s)


def main_score(srcc_value: float, plcc_value: float) -> float:
    return srcc_value + plcc_value


@dataclass
class EvalReport:
    srcc: float | None
    plcc: float | None
    per_image: list[tuple[str, float, float]]  # (image id, prediction, mos)
    excluded: list[str] = field(default_factory=list)
    settings: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return len(self.per_image)

    @property
    def main_score(self) -> float | None:
        if self.srcc is None or self.plcc is None:
            return None
        return main_score(self.srcc, self.plcc)

    @classmethod
    def from_predictions(cls, ids: Sequence[str], predictions, targets, **kwargs) -> "EvalReport":
        p, s = _as_pair(predictions, targets)
        rows = [(str(i), float(a), float(b)) for i, a, b in zip(ids, p, s)]
        return cls(srcc(p, s), plcc(p, s), rows, **kwargs)

    def predictions(self) -> np.ndarray:
        return np.array([r[1] for r in self.per_image])

    def targets(self) -> np.ndarray:
        return np.array([r[2] for r in self.per_image])

    def write(self, path: str | Path):
        """Plain ``key: value`` report; degenerate metrics are written as ``degenerate``."""
        def fmt(v):
            return "degenerate" if v is None else repr(float(v))

        lines = []
        if self.excluded:
            lines.append(f"# WARNING: {len(self.excluded)} image(s) excluded (undecodable)")
        lines += [f"n: {self.n}", f"srcc: {fmt(self.srcc)}", f"plcc: {fmt(self.plcc)}",
                  f"main_score: {fmt(self.main_score)}"]
        for k in sorted(self.settings):
            lines.append(f"setting.{k}: {self.settings[k]}")
        for name in self.excluded:
            lines.append(f"excluded: {name}")
        Path(path).write_text("\n".join(lines) + "\n")

    def write_scatter(self, path: str | Path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["image_id", "mos", "prediction"])
            for image_id, pred, mos in self.per_image:
                w.writerow([image_id, repr(mos), repr(pred)])


def read_report(path: str | Path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text().splitlines():
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition(": ")
        out.setdefault(key, value)
    return out


def _try_read(path: str):
    try:
        return read_image(path)
    except (OSError, ValueError) as e:
        logger.warning("cannot decode %s: %s", path, e)
        return None


def evaluate(model, manifest, plan, workers: int = 1) -> EvalReport:
    """Predict every manifest image with ``plan`` and correlate with its MOS.

    Undecodable images are excluded and listed in the report. Decoding may
    use ``workers`` threads; results are reduced in manifest order.
    """
    paths = [s.image_path for s in manifest.samples]
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            images = list(pool.map(_try_read, paths))
    else:
        images = [_try_read(p) for p in paths]
    ids, preds, mos, excluded = [], [], [], []
    for sample, img in zip(manifest.samples, images):
        if img is None:
            excluded.append(sample.image_path)
            continue
        ids.append(sample.image_path)
        preds.append(predict_image(model, img, plan))
        mos.append(sample.mos)
    settings = {"tta": plan.describe()}
    if len(ids) < 2:
        raise ValueError(f"only {len(ids)} decodable image(s); need at least 2")
    return EvalReport.from_predictions(ids, preds, mos, excluded=excluded, settings=settings)
