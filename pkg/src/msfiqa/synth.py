"""Procedural IQA dataset with a known quality ordering.

Each reference image is distorted at every (type, level). Severity 0 is
the identity. The noise-free MOS is affine in severity, so within one
(reference, type) family quality strictly decreases with level; label
noise is added on top.
"""
from __future__ import annotations

import itertools
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import yaml
from scipy.ndimage import gaussian_filter

from .data import DatasetManifest, ImageSample, load_manifest, save_image

logger = logging.getLogger(__name__)

DISTORTIONS = ("gaussian_blur", "additive_noise", "quantization")
MANIFEST_NAME = "manifest.csv"


@dataclass(frozen=True)
class SynthSpec:
    n_references: int = 5
    distortion_types: tuple[str, ...] = DISTORTIONS
    levels_per_type: int = 4
    image_size: tuple[int, int] = (64, 64)
    seed: int = 0
    mos_high: float = 0.9
    mos_low: float = 0.1
    noise_std: float = 0.02
    imbalanced: bool = False

    def __post_init__(self):
        object.__setattr__(self, "distortion_types", tuple(self.distortion_types))
        object.__setattr__(self, "image_size", tuple(self.image_size))
        if self.n_references < 1:
            raise ValueError("n_references must be >= 1")
        if self.levels_per_type < 2:
            raise ValueError("levels_per_type must be >= 2")
        if not self.distortion_types or set(self.distortion_types) - set(DISTORTIONS):
            raise ValueError(f"distortion_types must be a non-empty subset of {DISTORTIONS}")
        if min(self.image_size) < 32:
            raise ValueError("image_size components must be >= 32")
        if not self.mos_high > self.mos_low:
            raise ValueError("mos_high must exceed mos_low")

    @property
    def n_samples(self) -> int:
        return self.n_references * len(self.distortion_types) * self.levels_per_type

    def mos_model(self, severity):
        return self.mos_high - (self.mos_high - self.mos_low) * np.asarray(severity)

    @classmethod
    def from_yaml(cls, path: str | Path) -> "SynthSpec":
        data = yaml.safe_load(Path(path).read_text()) or {}
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown synth spec keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["distortion_types"] = list(self.distortion_types)
        d["image_size"] = list(self.image_size)
        return d


FIXTURE_SPEC = SynthSpec(n_references=2, distortion_types=("gaussian_blur", "additive_noise"),
                         levels_per_type=3, image_size=(48, 48), seed=0)


def reference_image(size: tuple[int, int], rng: np.random.Generator) -> np.ndarray:
    """Smooth colour gradient + a few flat shapes + fine sinusoidal texture."""
    h, w = size
    y, x = np.mgrid[0:h, 0:w] / np.array([h, w])[:, None, None]
    img = np.empty((h, w, 3))
    for c in range(3):
        a, b, d = rng.uniform(0.2, 0.8), rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3)
        img[..., c] = a + b * x + d * y + 0.1 * np.sin(2 * np.pi * rng.uniform(0.5, 2) * (x + y))
    for _ in range(rng.integers(2, 5)):
        col = rng.uniform(0, 1, 3)
        cy, cx, r = rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8), rng.uniform(0.08, 0.25)
        if rng.random() < 0.5:
            m = (y - cy) ** 2 + (x - cx) ** 2 < r ** 2
        else:
            m = (abs(y - cy) < r) & (abs(x - cx) < r * rng.uniform(0.5, 1.5))
        img[m] = 0.3 * img[m] + 0.7 * col
    fx, fy = rng.uniform(0.15, 0.35, 2) * np.array([w, h])
    theta = rng.uniform(0, 2 * np.pi)
    texture = np.sin(2 * np.pi * (fx * x * np.cos(theta) + fy * y * np.sin(theta)))
    img += 0.08 * texture[..., None]
    return np.round(np.clip(img, 0, 1) * 255) / 255


def distort(image: np.ndarray, kind: str, severity: float, rng: np.random.Generator) -> np.ndarray:
    if severity <= 0:
        return image.copy()
    # the mildest levels are kept clearly visible so severity stays learnable from pixels
    if kind == "gaussian_blur":
        sigma = 0.6 + 2.4 * severity
        out = gaussian_filter(image, sigma=(sigma, sigma, 0), mode="reflect")
    elif kind == "additive_noise":
        out = image + rng.normal(0, 0.02 + 0.13 * severity, image.shape)
    elif kind == "quantization":
        levels = max(2, int(round(2 ** (5.5 - 4.5 * severity))))
        out = np.round(image * (levels - 1)) / (levels - 1)
    else:
        raise ValueError(f"unknown distortion {kind!r}")
    return np.clip(out, 0.0, 1.0)


def family_severities(spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    L = spec.levels_per_type
    if not spec.imbalanced:
        return np.arange(L) / (L - 1)
    # middle-heavy MOS histogram; level 0 stays the identity
    draws = np.sort(rng.beta(5.0, 5.0, L - 1))
    return np.concatenate([[0.0], draws])


@dataclass
class SynthResult:
    manifest: DatasetManifest
    manifest_path: Path
    oracle_agreement: float
    files: list[Path] = field(default_factory=list)


def generate(spec: SynthSpec, out_dir: str | Path) -> SynthResult:
    out_dir = Path(out_dir)
    img_dir = out_dir / "images"
    try:
        img_dir.mkdir(parents=True, exist_ok=True)
        probe = out_dir / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as e:
        raise OSError(f"output directory {out_dir} is not writable: {e}") from e

    root = np.random.SeedSequence(spec.seed)
    ref_seeds = root.spawn(spec.n_references)
    samples, files = [], []
    for r, ref_seed in enumerate(ref_seeds):
        ref_rng, *type_seeds = ref_seed.spawn(1 + len(spec.distortion_types))
        ref = reference_image(spec.image_size, np.random.default_rng(ref_rng))
        for kind, ts in zip(spec.distortion_types, type_seeds):
            rng = np.random.default_rng(ts)
            sev = family_severities(spec, rng)
            clean = spec.mos_model(sev)
            noisy = np.clip(clean + rng.normal(0, spec.noise_std, len(sev)), 0.0, 1.0)
            for level, (s, mc, m) in enumerate(zip(sev, clean, noisy)):
                img = distort(ref, kind, float(s), rng)
                path = img_dir / f"ref{r:03d}_{kind}_{level}.png"
                save_image(img, path)
                files.append(path)
                attrs = {"reference": str(r), "distortion": kind, "level": str(level),
                         "severity": repr(float(s)), "mos_clean": repr(float(mc))}
                samples.append(ImageSample(str(path), float(m), "synth", "train", attrs))

    manifest = DatasetManifest(samples, mos_range=(0.0, 1.0))
    manifest_path = out_dir / MANIFEST_NAME
    manifest.write_csv(manifest_path, relative_to=out_dir)
    (out_dir / "synth_spec.yaml").write_text(yaml.safe_dump(spec.to_dict(), sort_keys=True))
    manifest = load_synth_manifest(manifest_path)
    agreement = oracle_agreement(manifest)
    if agreement < 0.95:
        logger.warning("noisy MOS agrees with severity order on only %.1f%% of pairs", 100 * agreement)
    return SynthResult(manifest, manifest_path, agreement, files)


def load_synth_manifest(path: str | Path) -> DatasetManifest:
    m = load_manifest(path, "generic_csv", dataset_id="synth")
    return DatasetManifest(m.samples, mos_range=(0.0, 1.0), missing=m.missing)


_SYNTH_ATTRS = ("reference", "distortion", "level")


def oracle_ranking(manifest: DatasetManifest) -> list[tuple[int, int]]:
    """All same-family pairs as (better index, worse index), ordered by severity level."""
    families: dict[tuple[str, str], list[tuple[int, int]]] = {}
    for i, s in enumerate(manifest.samples):
        if any(k not in s.attrs for k in _SYNTH_ATTRS):
            raise ValueError(f"sample {s.image_path} was not produced by the synthetic generator")
        key = (s.attrs["reference"], s.attrs["distortion"])
        families.setdefault(key, []).append((int(s.attrs["level"]), i))
    pairs = []
    for members in families.values():
        for (la, ia), (lb, ib) in itertools.combinations(sorted(members), 2):
            if la != lb:
                pairs.append((ia, ib))
    return pairs


def oracle_agreement(manifest: DatasetManifest, scores=None) -> float:
    """Fraction of oracle pairs whose ``scores`` (default: noisy MOS) put the better image higher."""
    pairs = oracle_ranking(manifest)
    if not pairs:
        return float("nan")
    s = manifest.mos_values() if scores is None else np.asarray(scores)
    return float(np.mean([s[a] > s[b] for a, b in pairs]))
