"""Report figures rendered to files with the non-interactive Agg backend."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# fixed metadata keeps PNG bytes identical across reruns
_PNG_META = {"Software": None}


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return path


def scatter_mos(mos: Sequence[float], predictions: Sequence[float], path: str | Path,
                title: str | None = None) -> Path:
    """Ground-truth MOS against predicted score."""
    mos = np.asarray(mos, dtype=float)
    pred = np.asarray(predictions, dtype=float)
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    ax.scatter(mos, pred, s=12, alpha=0.7)
    ax.set_xlabel("MOS")
    ax.set_ylabel("prediction")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    return _save(fig, path)


def training_curves(history, path: str | Path) -> Path:
    """Loss terms and correlation per epoch from a TrainHistory."""
    epochs = history.column("epoch")
    fig, (ax_loss, ax_corr) = plt.subplots(1, 2, figsize=(9, 3.5))
    for name in ("total", "reg", "rank"):
        ax_loss.plot(epochs, history.column(name), label=name)
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("loss")
    ax_loss.legend()
    for name in ("train_srcc", "holdout_srcc", "holdout_plcc"):
        vals = [np.nan if v is None else v for v in history.column(name)]
        if not np.all(np.isnan(vals)):
            ax_corr.plot(epochs, vals, label=name)
    ax_corr.set_xlabel("epoch")
    ax_corr.set_ylabel("correlation")
    if ax_corr.lines:
        ax_corr.legend()
    fig.tight_layout()
    return _save(fig, path)


def mos_histogram(mos: Sequence[float], path: str | Path, bins: int = 10,
                  mos_range: tuple[float, float] | None = None) -> Path:
    fig, ax = plt.subplots(figsize=(4.5, 3.5))
    ax.hist(np.asarray(mos, dtype=float), bins=bins, range=mos_range, edgecolor="black")
    ax.set_xlabel("MOS")
    ax.set_ylabel("count")
    fig.tight_layout()
    return _save(fig, path)
