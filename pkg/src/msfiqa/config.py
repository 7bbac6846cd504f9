"""YAML run configuration with strict key checking.

Layout (every section optional; unknown keys anywhere are an error)::

    seed: 0
    output_dir: runs/desk          # default: $MSFIQA_OUTPUT_ROOT/<config stem>
    data:
      manifest: data/manifest.csv
      format: generic_csv          # generic_csv | tid2013 | koniq10k | pipal
      image_root: null
      holdout_fraction: 0.0        # > 0 draws a seeded train/holdout split
    model:
      preset: Desk
      input_size: null             # preset default when null
      fusion: true
      ...                          # any other BackboneConfig field
    train: {...}                   # TrainConfig fields except seed
    augment: {...}                 # AugmentationPlan fields except seed
    tta: {strategy, crop_size, n_crops, resize_to}
"""
from __future__ import annotations

import dataclasses
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .data import MANIFEST_FORMATS, AugmentationPlan
from .inference import TTAPlan
from .model import BackboneConfig
from .training import TrainConfig

logger = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "MSFIQA_OUTPUT_ROOT"


class RunConfigError(ValueError):
    pass


def default_output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))


def _fields(cls, exclude=()) -> set[str]:
    return {f.name for f in dataclasses.fields(cls)} - set(exclude)


def _check(section: str, doc: dict, allowed: set[str]):
    if not isinstance(doc, dict):
        raise RunConfigError(f"section {section!r} must be a mapping")
    unknown = set(doc) - allowed
    if unknown:
        raise RunConfigError(f"unknown key(s) in {section}: {', '.join(sorted(unknown))}")


@dataclass
class DataSection:
    manifest: str | None = None
    format: str = "generic_csv"
    image_root: str | None = None
    holdout_fraction: float = 0.0

    def __post_init__(self):
        if self.format not in MANIFEST_FORMATS:
            raise RunConfigError(f"data.format must be one of {MANIFEST_FORMATS}")
        if not 0.0 <= self.holdout_fraction < 1.0:
            raise RunConfigError("data.holdout_fraction must lie in [0, 1)")


@dataclass
class RunConfig:
    seed: int = 0
    output_dir: str | None = None
    data: DataSection = field(default_factory=DataSection)
    model: dict = field(default_factory=lambda: {"preset": "Desk"})
    train: dict = field(default_factory=dict)
    augment: dict = field(default_factory=dict)
    tta: dict = field(default_factory=dict)
    source: str | None = None

    _MODEL_KEYS = {"preset", "input_size"} | _fields(BackboneConfig, ("size_preset", "input_height", "input_width"))
    _TRAIN_KEYS = _fields(TrainConfig, ("seed",))
    _AUGMENT_KEYS = _fields(AugmentationPlan, ("seed",))
    _TTA_KEYS = {"strategy", "crop_size", "n_crops", "resize_to"}

    @classmethod
    def from_dict(cls, doc: dict, source: str | None = None) -> "RunConfig":
        doc = dict(doc or {})
        _check("config", doc, {"seed", "output_dir", "data", "model", "train", "augment", "tta"})
        data = doc.get("data") or {}
        _check("data", data, _fields(DataSection))
        model = doc.get("model") or {"preset": "Desk"}
        _check("model", model, cls._MODEL_KEYS)
        sections = {}
        for name, allowed in (("train", cls._TRAIN_KEYS), ("augment", cls._AUGMENT_KEYS), ("tta", cls._TTA_KEYS)):
            sections[name] = doc.get(name) or {}
            _check(name, sections[name], allowed)
        cfg = cls(seed=int(doc.get("seed", 0)), output_dir=doc.get("output_dir"), data=DataSection(**data),
                  model=dict(model), source=source, **sections)
        cfg.model_config()
        cfg.train_config()
        cfg.augmentation_plan()
        cfg.tta_plan()
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise RunConfigError(f"config file not found: {path}")
        try:
            doc = yaml.safe_load(path.read_text())
        except yaml.YAMLError as e:
            raise RunConfigError(f"{path}: invalid YAML: {e}") from e
        cfg = cls.from_dict(doc or {}, source=str(path))
        # relative data paths are taken relative to the config file
        for key in ("manifest", "image_root"):
            value = getattr(cfg.data, key)
            if value is not None and not Path(value).is_absolute():
                setattr(cfg.data, key, str((path.parent / value).resolve()))
        return cfg

    def _build(self, factory, *args, **kwargs):
        try:
            return factory(*args, **kwargs)
        except (TypeError, ValueError) as e:
            raise RunConfigError(str(e)) from e

    def model_config(self) -> BackboneConfig:
        m = dict(self.model)
        preset = m.pop("preset", "Desk")
        size = m.pop("input_size", None)
        if isinstance(size, list):
            size = tuple(size)
        cfg = self._build(BackboneConfig.from_preset, preset, size, **m)
        self._build(cfg.validate)
        return cfg

    def train_config(self) -> TrainConfig:
        return self._build(TrainConfig, seed=self.seed, **self.train)

    def augmentation_plan(self) -> AugmentationPlan:
        kw = dict(self.augment)
        if "crop_size" not in kw:
            m = self.model_config()
            kw["crop_size"] = (m.input_height, m.input_width)
            kw.setdefault("resize_to", kw["crop_size"])
        return self._build(AugmentationPlan, seed=self.seed, **kw)

    def tta_plan(self) -> TTAPlan:
        plan = self.augmentation_plan()
        kw = {"strategy": "five_crop", "crop_size": plan.crop_size, "resize_to": plan.resize_to}
        kw.update(self.tta)
        return self._build(TTAPlan, seed=self.seed, **kw)

    def resolved_output_dir(self) -> Path:
        if self.output_dir is not None:
            return Path(self.output_dir)
        stem = Path(self.source).stem if self.source else "run"
        return default_output_root() / stem

    def resolved(self) -> dict:
        """Fully expanded configuration, as logged and written next to run outputs."""
        def plain(obj):
            d = dataclasses.asdict(obj)
            return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

        return {
            "seed": self.seed,
            "output_dir": str(self.resolved_output_dir()),
            "data": dataclasses.asdict(self.data),
            "model": self.model_config().to_dict(),
            "train": {k: v for k, v in plain(self.train_config()).items() if k != "seed"},
            "augment": {k: v for k, v in plain(self.augmentation_plan()).items() if k != "seed"},
            "tta": {k: v for k, v in plain(self.tta_plan()).items() if k != "seed"},
        }

    def dump(self) -> str:
        return yaml.safe_dump(self.resolved(), sort_keys=True)

    def log(self):
        for line in self.dump().splitlines():
            logger.info("config | %s", line)
