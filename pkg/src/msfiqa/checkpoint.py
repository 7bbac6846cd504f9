"""Single-file parameter checkpoints.

Byte layout (all integers little-endian)::

    magic           8 bytes   b"MSFIQACK"
    version         u32 n, n bytes UTF-8    e.g. "msfiqa-checkpoint/1"
    config          u32 n, n bytes UTF-8    BackboneConfig as "key=value" lines
    metadata        u32 n, n bytes UTF-8    free "key=value" lines (values are JSON)
    tensor count    u32
    per tensor:
        name        u16 n, n bytes UTF-8
        itemsize    u8        4 (float32) or 8 (float64)
        ndim        u8
        shape       ndim x u32
        payload     prod(shape) * itemsize bytes, C order, little-endian IEEE 754

Model tensors are named ``model.<state_dict key>``; training checkpoints
add optimizer tensors ``optim.<param index>.<field>``.
"""
from __future__ import annotations

import io
import json
import os
import struct
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

from .model import BackboneConfig, ConfigError, MultiStageIQA

MAGIC = b"MSFIQACK"
FORMAT_VERSION = "msfiqa-checkpoint/1"


class CheckpointError(ValueError):
    pass


def config_to_text(config: BackboneConfig) -> str:
    lines = []
    for k, v in config.to_dict().items():
        if isinstance(v, (list, tuple)):
            v = ",".join(str(x) for x in v)
        lines.append(f"{k}={v}")
    return "\n".join(lines)


def config_from_text(text: str) -> BackboneConfig:
    raw = dict(line.split("=", 1) for line in text.splitlines() if line)
    fields = BackboneConfig.__dataclass_fields__
    unknown = set(raw) - set(fields)
    if unknown:
        raise CheckpointError(f"unknown config keys in checkpoint: {sorted(unknown)}")
    out = {}
    for k, v in raw.items():
        if k in ("depths", "heads"):
            out[k] = tuple(int(x) for x in v.split(","))
        elif k == "fusion":
            out[k] = v == "True"
        elif k == "mlp_ratio":
            out[k] = float(v)
        elif k == "size_preset":
            out[k] = v
        else:
            out[k] = int(v)
    return BackboneConfig(**out)


def _put_str(buf: io.BytesIO, s: str, fmt: str = "<I"):
    b = s.encode("utf-8")
    buf.write(struct.pack(fmt, len(b)))
    buf.write(b)


def _get_str(buf: io.BytesIO, fmt: str = "<I") -> str:
    (n,) = struct.unpack(fmt, _read(buf, struct.calcsize(fmt)))
    return _read(buf, n).decode("utf-8")


def _read(buf: io.BytesIO, n: int) -> bytes:
    b = buf.read(n)
    if len(b) != n:
        raise CheckpointError("truncated checkpoint")
    return b


def dumps(config: BackboneConfig, tensors: Mapping[str, torch.Tensor], metadata: Mapping | None = None) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    _put_str(buf, FORMAT_VERSION)
    _put_str(buf, config_to_text(config))
    meta = "\n".join(f"{k}={json.dumps(v, sort_keys=True)}" for k, v in sorted((metadata or {}).items()))
    _put_str(buf, meta)
    buf.write(struct.pack("<I", len(tensors)))
    for name, t in tensors.items():
        arr = t.detach().cpu().numpy()
        if arr.dtype == np.float64:
            arr = arr.astype("<f8", copy=False)
        else:
            arr = arr.astype("<f4", copy=False)
        _put_str(buf, name, "<H")
        buf.write(struct.pack("<BB", arr.dtype.itemsize, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr).tobytes())
    return buf.getvalue()


def loads(data: bytes) -> tuple[BackboneConfig, dict[str, torch.Tensor], dict]:
    buf = io.BytesIO(data)
    if _read(buf, len(MAGIC)) != MAGIC:
        raise CheckpointError("not a msfiqa checkpoint (bad magic)")
    version = _get_str(buf)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version!r}")
    try:
        config = config_from_text(_get_str(buf))
    except (ValueError, TypeError) as e:
        raise CheckpointError(f"bad config section: {e}") from e
    meta = {}
    for line in _get_str(buf).splitlines():
        k, _, v = line.partition("=")
        meta[k] = json.loads(v)
    (count,) = struct.unpack("<I", _read(buf, 4))
    tensors = {}
    for _ in range(count):
        name = _get_str(buf, "<H")
        itemsize, ndim = struct.unpack("<BB", _read(buf, 2))
        if itemsize not in (4, 8):
            raise CheckpointError(f"tensor {name}: unsupported item size {itemsize}")
        shape = struct.unpack(f"<{ndim}I", _read(buf, 4 * ndim))
        n = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(_read(buf, n * itemsize), dtype="<f8" if itemsize == 8 else "<f4").reshape(shape)
        tensors[name] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="), copy=True))
    if buf.read(1):
        raise CheckpointError("trailing bytes after last tensor")
    return config, tensors, meta


def _atomic_write(path: Path, data: bytes):
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def save_checkpoint(path: str | Path, model: MultiStageIQA, metadata: Mapping | None = None,
                    extra_tensors: Mapping[str, torch.Tensor] | None = None):
    tensors = {f"model.{k}": v for k, v in model.state_dict().items()}
    tensors.update(extra_tensors or {})
    _atomic_write(Path(path), dumps(model.config, tensors, metadata))


def read_checkpoint(path: str | Path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return loads(path.read_bytes())


def build_model(config: BackboneConfig, tensors: Mapping[str, torch.Tensor]) -> MultiStageIQA:
    model = MultiStageIQA(config)
    expected = model.state_dict()
    state = {k[len("model."):]: v for k, v in tensors.items() if k.startswith("model.")}
    missing = set(expected) - set(state)
    unexpected = set(state) - set(expected)
    if missing or unexpected:
        raise CheckpointError(f"tensor names do not match config: missing={sorted(missing)[:5]} "
                              f"unexpected={sorted(unexpected)[:5]}")
    for k, v in state.items():
        if tuple(v.shape) != tuple(expected[k].shape):
            raise CheckpointError(f"tensor {k}: shape {tuple(v.shape)} != expected {tuple(expected[k].shape)}")
    dtype = next(iter(state.values())).dtype
    model.to(dtype)
    model.load_state_dict(state)
    return model


def load_model(path: str | Path) -> MultiStageIQA:
    config, tensors, _ = read_checkpoint(path)
    try:
        return build_model(config, tensors)
    except ConfigError as e:
        raise CheckpointError(str(e)) from e
