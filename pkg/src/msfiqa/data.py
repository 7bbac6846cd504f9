"""Manifests, preprocessing, training augmentations and MOS-balanced sampling.

Images are handled as float64 ``(H, W, 3)`` arrays in ``[0, 1]``.

Label formats accepted by :func:`load_manifest` (paths resolve relative
to the label file's directory unless ``image_root`` is given):

``generic_csv``
    Header row containing ``path`` and ``mos``; extra columns are kept in
    :attr:`ImageSample.attrs`.
``tid2013``
    ``mos_with_names.txt`` layout, one ``<mos> <filename>`` per line,
    images under ``distorted_images/``.
``koniq10k``
    ``koniq10k_scores_and_distributions.csv``; columns ``image_name`` and
    ``MOS`` (or ``MOS_zscore`` when ``MOS`` is absent), images under
    ``1024x768/`` if that directory exists.
``pipal``
    A directory of per-reference ``*.txt`` label files, each line
    ``<filename>,<score>``, images under ``Distortion/`` if present.

Colorspace outputs are always three channels in ``[0, 1]``:

* HSV: ``skimage.color.rgb2hsv`` (hue already scaled to ``[0, 1]``).
* LAB: ``L / 100``, ``(a + 128) / 255``, ``(b + 128) / 255``, clipped.
* GRAY: ``Y = 0.2125 R + 0.7154 G + 0.0721 B`` replicated to 3 channels.
"""
from __future__ import annotations

import csv
import functools
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image
from skimage import color

logger = logging.getLogger(__name__)

COLORSPACES = ("RGB", "HSV", "LAB", "GRAY")
MANIFEST_FORMATS = ("generic_csv", "tid2013", "koniq10k", "pipal")
GRAY_WEIGHTS = np.array([0.2125, 0.7154, 0.0721])


class ManifestError(ValueError):
    """Malformed or empty label file."""


@dataclass(frozen=True)
class ImageSample:
    image_path: str
    mos: float
    dataset_id: str = "generic"
    split: str = "train"
    attrs: dict = field(default_factory=dict, compare=False, hash=False)

    @property
    def image_id(self) -> str:
        return Path(self.image_path).name


@dataclass
class DatasetManifest:
    samples: list[ImageSample]
    mos_range: tuple[float, float] | None = None
    missing: list[str] = field(default_factory=list)  # validation report: files not found

    def __post_init__(self):
        if not self.samples:
            raise ManifestError("manifest has no samples")
        mos = self.mos_values()
        if not np.all(np.isfinite(mos)):
            raise ManifestError("non-finite MOS in manifest")
        if self.mos_range is None:
            self.mos_range = (float(mos.min()), float(mos.max()))
        lo, hi = self.mos_range
        if mos.min() < lo or mos.max() > hi:
            raise ManifestError(f"MOS values outside declared range {self.mos_range}")

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, i) -> ImageSample:
        return self.samples[i]

    def mos_values(self) -> np.ndarray:
        return np.array([s.mos for s in self.samples], dtype=np.float64)

    def subset(self, indices: Sequence[int], split: str | None = None) -> "DatasetManifest":
        samples = [self.samples[i] for i in indices]
        if split is not None:
            samples = [replace(s, split=split) for s in samples]
        return DatasetManifest(samples, mos_range=self.mos_range)

    def write_csv(self, path: str | Path, relative_to: str | Path | None = None):
        """Write as ``generic_csv``; attrs become extra columns."""
        base = Path(relative_to) if relative_to else Path(path).parent
        extra = sorted({k for s in self.samples for k in s.attrs})
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["path", "mos", *extra])
            for s in self.samples:
                p = Path(s.image_path)
                try:
                    p = p.relative_to(base)
                except ValueError:
                    pass
                w.writerow([p.as_posix(), repr(s.mos), *(s.attrs.get(k, "") for k in extra)])


def split_manifest(manifest: DatasetManifest, train_fraction: float = 0.8,
                   seed: int = 0) -> tuple[DatasetManifest, DatasetManifest]:
    """Random train/test split drawn from ``seed``."""
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(manifest))
    k = int(round(train_fraction * len(manifest)))
    if not 0 < k < len(manifest):
        raise ValueError("split leaves one side empty")
    return manifest.subset(sorted(order[:k]), "train"), manifest.subset(sorted(order[k:]), "test")


def _parse_float(value: str, path: Path, lineno: int) -> float:
    try:
        v = float(value)
    except ValueError:
        raise ManifestError(f"{path}:{lineno}: cannot parse score {value!r}") from None
    if not math.isfinite(v):
        raise ManifestError(f"{path}:{lineno}: non-finite score {value!r}")
    return v


def _read_generic(path: Path, root: Path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ManifestError(f"{path}: empty file")
        header = [h.strip() for h in header]
        if "path" not in header or "mos" not in header:
            raise ManifestError(f"{path}:1: header needs 'path' and 'mos' columns, got {header}")
        ip, im = header.index("path"), header.index("mos")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ManifestError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            attrs = {h: row[i] for i, h in enumerate(header) if i not in (ip, im)}
            yield root / row[ip].strip(), _parse_float(row[im], path, lineno), attrs


def _read_tid2013(path: Path, root: Path):
    sub = root / "distorted_images"
    base = sub if sub.is_dir() else root
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 2:
            raise ManifestError(f"{path}:{lineno}: expected '<mos> <filename>'")
        yield base / parts[1], _parse_float(parts[0], path, lineno), {}


def _read_koniq(path: Path, root: Path):
    sub = root / "1024x768"
    base = sub if sub.is_dir() else root
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise ManifestError(f"{path}: empty file")
        key = "MOS" if "MOS" in reader.fieldnames else "MOS_zscore"
        if "image_name" not in reader.fieldnames or key not in reader.fieldnames:
            raise ManifestError(f"{path}:1: need 'image_name' and 'MOS' columns")
        for lineno, row in enumerate(reader, start=2):
            name = (row.get("image_name") or "").strip()
            if not name:
                raise ManifestError(f"{path}:{lineno}: missing image_name")
            yield base / name, _parse_float(row[key] or "", path, lineno), {}


def _read_pipal(path: Path, root: Path):
    files = sorted(path.glob("*.txt")) if path.is_dir() else [path]
    label_dir = path if path.is_dir() else path.parent
    sub = label_dir.parent / "Distortion"
    base = root if root != label_dir else (sub if sub.is_dir() else label_dir)
    for f in files:
        for lineno, line in enumerate(f.read_text().splitlines(), start=1):
            if not line.strip():
                continue
            parts = line.split(",")
            if len(parts) != 2:
                raise ManifestError(f"{f}:{lineno}: expected '<filename>,<score>'")
            yield base / parts[0].strip(), _parse_float(parts[1], f, lineno), {"reference": f.stem}


_READERS = {"generic_csv": _read_generic, "tid2013": _read_tid2013,
            "koniq10k": _read_koniq, "pipal": _read_pipal}


def load_manifest(path: str | Path, format: str = "generic_csv", image_root: str | Path | None = None,
                  dataset_id: str | None = None, split: str = "train") -> DatasetManifest:
    path = Path(path)
    if format not in _READERS:
        raise ManifestError(f"unknown manifest format {format!r}; choose from {MANIFEST_FORMATS}")
    if not path.exists():
        raise FileNotFoundError(f"label file not found: {path}")
    root = Path(image_root) if image_root else (path if path.is_dir() else path.parent)
    samples, missing = [], []
    for img, mos, attrs in _READERS[format](path, root):
        if not img.exists():
            missing.append(str(img))
        samples.append(ImageSample(str(img), mos, dataset_id or format, split, attrs))
    if not samples:
        raise ManifestError(f"{path}: no samples")
    if missing:
        logger.warning("%d image file(s) listed in %s are missing", len(missing), path)
    return DatasetManifest(samples, missing=missing)


def read_image(path: str | Path) -> np.ndarray:
    """Decode an 8-bit image file to a float64 RGB array in [0, 1]."""
    return _read_image_cached(str(path)).copy()


@functools.lru_cache(maxsize=4096)
def _read_image_cached(path: str) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    arr.setflags(write=False)
    return arr


def save_image(image: np.ndarray, path: str | Path):
    arr = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def resize_image(image: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    """Bilinear resize (half-pixel centres, edge clamped) to ``target = (h, w)``."""
    h, w = target
    H, W = image.shape[:2]
    if (H, W) == (h, w):
        return image.copy()

    def coords(n_out, n_in):
        x = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        x = np.clip(x, 0, n_in - 1)
        i0 = np.floor(x).astype(int)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, x - i0

    y0, y1, fy = coords(h, H)
    x0, x1, fx = coords(w, W)
    fy = fy[:, None, None]
    fx = fx[None, :, None]
    top = image[y0][:, x0] * (1 - fx) + image[y0][:, x1] * fx
    bot = image[y1][:, x0] * (1 - fx) + image[y1][:, x1] * fx
    return np.clip(top * (1 - fy) + bot * fy, 0.0, 1.0)


def crop(image: np.ndarray, top: int, left: int, size: tuple[int, int]) -> np.ndarray:
    return image[top:top + size[0], left:left + size[1]]


def random_crop(image: np.ndarray, size: tuple[int, int], rng: np.random.Generator,
                return_offset: bool = False):
    H, W = image.shape[:2]
    h, w = size
    if h > H or w > W:
        raise ValueError(f"crop {h}x{w} larger than image {H}x{W}")
    top = int(rng.integers(0, H - h + 1))
    left = int(rng.integers(0, W - w + 1))
    patch = crop(image, top, left, size)
    return (patch, (top, left)) if return_offset else patch


def rotate(patch: np.ndarray, quarter_turns: int) -> np.ndarray:
    return np.ascontiguousarray(np.rot90(patch, k=quarter_turns, axes=(0, 1)))


def random_rotate(patch: np.ndarray, rng: np.random.Generator, angles: Sequence[int] = (0, 90, 180, 270)) -> np.ndarray:
    angle = int(angles[int(rng.integers(len(angles)))])
    if angle % 90:
        raise ValueError(f"rotation angle {angle} is not a multiple of 90")
    if angle % 180 and patch.shape[0] != patch.shape[1]:
        raise ValueError("90/270 degree rotation needs a square patch")
    return rotate(patch, angle // 90)


def to_colorspace(patch: np.ndarray, space: str) -> np.ndarray:
    if space == "RGB":
        return patch
    if space == "HSV":
        return color.rgb2hsv(patch)
    if space == "LAB":
        lab = color.rgb2lab(patch)
        out = np.stack([lab[..., 0] / 100.0, (lab[..., 1] + 128.0) / 255.0, (lab[..., 2] + 128.0) / 255.0], -1)
        return np.clip(out, 0.0, 1.0)
    if space == "GRAY":
        y = patch @ GRAY_WEIGHTS
        return np.repeat(y[..., None], 3, axis=-1)
    raise ValueError(f"unknown colorspace {space!r}")


def random_colorspace(patch: np.ndarray, rng: np.random.Generator, mode: str = "train",
                      spaces: Sequence[str] = COLORSPACES) -> np.ndarray:
    if mode == "test":
        return patch
    if mode != "train":
        raise ValueError(f"mode must be 'train' or 'test', got {mode!r}")
    return to_colorspace(patch, spaces[int(rng.integers(len(spaces)))])


@dataclass(frozen=True)
class AugmentationPlan:
    resize_to: tuple[int, int] = (72, 72)
    crop_size: tuple[int, int] = (64, 64)
    rotation: bool = True
    angles: tuple[int, ...] = (0, 90, 180, 270)
    colorspaces: tuple[str, ...] = COLORSPACES
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "resize_to", tuple(self.resize_to))
        object.__setattr__(self, "crop_size", tuple(self.crop_size))
        object.__setattr__(self, "angles", tuple(self.angles))
        object.__setattr__(self, "colorspaces", tuple(self.colorspaces))
        if self.crop_size[0] > self.resize_to[0] or self.crop_size[1] > self.resize_to[1]:
            raise ValueError(f"crop {self.crop_size} exceeds resize target {self.resize_to}")
        if not self.colorspaces or set(self.colorspaces) - set(COLORSPACES):
            raise ValueError(f"colorspaces must be a non-empty subset of {COLORSPACES}")
        if self.rotation:
            if any(a % 90 for a in self.angles):
                raise ValueError("rotation angles must be multiples of 90")
            if any(a % 180 for a in self.angles) and self.crop_size[0] != self.crop_size[1]:
                raise ValueError("90/270 degree rotations need a square crop")

    def apply(self, image: np.ndarray, rng: np.random.Generator, mode: str = "train") -> np.ndarray:
        """resize -> random crop -> (train) rotation and colorspace."""
        x = resize_image(image, self.resize_to)
        x = random_crop(x, self.crop_size, rng)
        if mode == "train":
            if self.rotation:
                x = random_rotate(x, rng, self.angles)
            x = random_colorspace(x, rng, "train", self.colorspaces)
        return np.ascontiguousarray(x)


def compute_sampling_weights(manifest: DatasetManifest, bins: int = 10) -> np.ndarray:
    """Inverse bin-frequency weights over equal-width MOS bins, summing to 1."""
    if bins < 1:
        raise ValueError("bins must be >= 1")
    idx = mos_bin_indices(manifest.mos_values(), manifest.mos_range, bins)
    counts = np.bincount(idx, minlength=bins)
    w = 1.0 / counts[idx]
    return w / w.sum()


def mos_bin_indices(mos: np.ndarray, mos_range: tuple[float, float], bins: int) -> np.ndarray:
    lo, hi = mos_range
    if hi <= lo:
        return np.zeros(len(mos), dtype=int)
    idx = np.floor((np.asarray(mos) - lo) / (hi - lo) * bins).astype(int)
    return np.clip(idx, 0, bins - 1)


@dataclass
class PairBatchInputs:
    images: np.ndarray  # (N, h, w, 3)
    mos: np.ndarray  # (N,)
    indices: np.ndarray  # manifest rows drawn
    batch_id: str = ""

    @property
    def n_pairs(self) -> int:
        return len(self.mos) // 2


def draw_indices(n: int, count: int, weights: np.ndarray | None, rng: np.random.Generator) -> np.ndarray:
    return rng.choice(n, size=count, replace=True, p=weights)


def make_pair_batch(manifest: DatasetManifest, batch_size: int, weights: np.ndarray | None,
                    rng: np.random.Generator, plan: AugmentationPlan, mode: str = "train",
                    batch_id: str = "") -> PairBatchInputs:
    """Draw ``batch_size`` samples and lay them out as consecutive pairs.

    Each patch inherits its source image's MOS unchanged.
    """
    if batch_size < 2 or batch_size % 2:
        raise ValueError(f"batch_size must be even and >= 2, got {batch_size}")
    idx = draw_indices(len(manifest), batch_size, weights, rng)
    images = np.stack([plan.apply(read_image(manifest[i].image_path), rng, mode) for i in idx])
    mos = np.array([manifest[i].mos for i in idx], dtype=np.float64)
    return PairBatchInputs(images, mos, idx, batch_id)


def to_tensor_batch(images: np.ndarray, dtype=None):
    """(N, h, w, 3) numpy -> (N, 3, h, w) torch tensor."""
    t = torch.from_numpy(np.ascontiguousarray(np.asarray(images).transpose(0, 3, 1, 2)))
    return t.to(dtype or torch.get_default_dtype())
