"""Multi-stage fusion shifted-window transformer for no-reference quality scoring.

The backbone follows the usual four-stage hierarchical layout: a linear
patch embedding, then stages whose token grids shrink by 2 per side while
channels double. Every stage output is layer-normalised, globally average
pooled and concatenated (15C features), and a two-layer GELU head maps the
fused vector to one scalar per image.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace
from typing import NamedTuple, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

__all__ = [
    "PRESETS",
    "BackboneConfig",
    "ConfigError",
    "MultiStageIQA",
    "StageFeature",
    "cyclic_shift",
    "window_partition",
    "window_reverse",
]


class ConfigError(ValueError):
    """Raised for invalid architecture settings or mismatched inputs."""


# name -> (embed_dim, depths, heads, window_size, default input side)
PRESETS: dict[str, tuple[int, tuple[int, ...], tuple[int, ...], int, int]] = {
    "Tiny": (96, (2, 2, 6, 2), (3, 6, 12, 24), 7, 224),
    "Base": (128, (2, 2, 18, 2), (4, 8, 16, 32), 7, 224),
    "Large": (192, (2, 2, 18, 2), (6, 12, 24, 48), 7, 224),
    "Desk": (24, (1, 1, 2, 1), (2, 2, 4, 4), 4, 64),
}


@dataclass(frozen=True)
class BackboneConfig:
    input_height: int = 64
    input_width: int = 64
    patch_size: int = 4
    embed_dim: int = 24
    depths: tuple[int, ...] = (1, 1, 2, 1)
    heads: tuple[int, ...] = (2, 2, 4, 4)
    window_size: int = 4
    size_preset: str = "Desk"
    mlp_ratio: float = 4.0
    fusion: bool = True  # False: head sees only the pooled last stage

    def __post_init__(self):
        object.__setattr__(self, "depths", tuple(int(d) for d in self.depths))
        object.__setattr__(self, "heads", tuple(int(h) for h in self.heads))
        self.validate()

    @classmethod
    def from_preset(cls, name: str, input_size: int | tuple[int, int] | None = None, **overrides):
        try:
            dim, depths, heads, window, side = PRESETS[name]
        except KeyError:
            raise ConfigError(f"unknown size preset {name!r}; choose from {sorted(PRESETS)}") from None
        if input_size is None:
            h = w = side
        elif isinstance(input_size, int):
            h = w = input_size
        else:
            h, w = input_size
        kwargs = dict(input_height=h, input_width=w, embed_dim=dim, depths=depths,
                      heads=heads, window_size=window, size_preset=name)
        kwargs.update(overrides)
        return cls(**kwargs)

    def validate(self):
        if self.size_preset not in PRESETS:
            raise ConfigError(f"unknown size preset {self.size_preset!r}")
        if len(self.depths) != 4 or len(self.heads) != 4:
            raise ConfigError("depths and heads need exactly 4 entries")
        if min(self.depths) < 1 or min(self.heads) < 1:
            raise ConfigError("depths and heads entries must be >= 1")
        if self.patch_size < 1 or self.window_size < 1 or self.embed_dim < 1:
            raise ConfigError("patch_size, window_size and embed_dim must be positive")
        unit = self.patch_size * 8
        if self.input_height % unit or self.input_width % unit:
            raise ConfigError(
                f"input {self.input_height}x{self.input_width} not divisible by patch_size*8={unit}")
        for k in range(4):
            if self.stage_channels(k + 1) % self.heads[k]:
                raise ConfigError(
                    f"stage {k + 1}: {self.stage_channels(k + 1)} channels not divisible by {self.heads[k]} heads")

    def stage_grid(self, stage_index: int) -> tuple[int, int]:
        scale = self.patch_size * 2 ** (stage_index - 1)
        return self.input_height // scale, self.input_width // scale

    def stage_channels(self, stage_index: int) -> int:
        return self.embed_dim * 2 ** (stage_index - 1)

    @property
    def fused_dim(self) -> int:
        return 15 * self.embed_dim if self.fusion else 8 * self.embed_dim

    @property
    def head_hidden(self) -> int:
        return 4 * self.embed_dim

    def to_dict(self) -> dict:
        d = asdict(self)
        d["depths"] = list(self.depths)
        d["heads"] = list(self.heads)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def with_input(self, height: int, width: int) -> "BackboneConfig":
        return replace(self, input_height=height, input_width=width)


class StageFeature(NamedTuple):
    """Output of one backbone stage; ``values`` is (B, grid_h, grid_w, channels)."""

    stage_index: int
    values: torch.Tensor

    @property
    def grid_height(self) -> int:
        return self.values.shape[1]

    @property
    def grid_width(self) -> int:
        return self.values.shape[2]

    @property
    def channels(self) -> int:
        return self.values.shape[3]


def trunc_normal_(t: torch.Tensor, std: float = 0.02) -> torch.Tensor:
    return nn.init.trunc_normal_(t, std=std, a=-2 * std, b=2 * std)


def cyclic_shift(x: torch.Tensor, shift: int) -> torch.Tensor:
    """Roll a (B, H, W, C) grid by ``-shift`` along both spatial axes."""
    if shift == 0:
        return x
    return torch.roll(x, shifts=(-shift, -shift), dims=(1, 2))


def window_partition(x: torch.Tensor, ws: int) -> torch.Tensor:
    """(B, H, W, C) -> (B * nW, ws * ws, C); H and W must be multiples of ws."""
    B, H, W, C = x.shape
    x = x.view(B, H // ws, ws, W // ws, ws, C)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(-1, ws * ws, C)


def window_reverse(windows: torch.Tensor, ws: int, H: int, W: int) -> torch.Tensor:
    C = windows.shape[-1]
    x = windows.view(-1, H // ws, W // ws, ws, ws, C)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(-1, H, W, C)


def relative_position_index(ws: int) -> torch.Tensor:
    coords = torch.stack(torch.meshgrid(torch.arange(ws), torch.arange(ws), indexing="ij")).flatten(1)
    rel = (coords[:, :, None] - coords[:, None, :]).permute(1, 2, 0)
    rel = rel + (ws - 1)
    return rel[..., 0] * (2 * ws - 1) + rel[..., 1]


def _attention_mask(H: int, W: int, ws: int, shift: int) -> torch.Tensor:
    """Boolean (nW, ws*ws, ws*ws) mask of allowed query/key pairs.

    Keys outside the real grid (zero padding) are blocked, and after a
    cyclic shift tokens only attend within the region they came from.
    Each query may always attend to itself so no softmax row is empty.
    """
    Hp, Wp = math.ceil(H / ws) * ws, math.ceil(W / ws) * ws
    valid = torch.zeros(1, Hp, Wp, 1)
    valid[:, :H, :W] = 1
    region = torch.zeros(1, Hp, Wp, 1)
    if shift:
        cnt = 0
        for hs in (slice(0, -ws), slice(-ws, -shift), slice(-shift, None)):
            for wsl in (slice(0, -ws), slice(-ws, -shift), slice(-shift, None)):
                region[:, hs, wsl] = cnt
                cnt += 1
        valid = cyclic_shift(valid, shift)
    valid_w = window_partition(valid, ws).squeeze(-1) > 0.5  # nW, N
    region_w = window_partition(region, ws).squeeze(-1)
    same = region_w[:, :, None] == region_w[:, None, :]
    allowed = same & valid_w[:, None, :]
    eye = torch.eye(ws * ws, dtype=torch.bool)
    return allowed | eye


class WindowAttention(nn.Module):
    """Multi-head self attention inside square windows with a learned relative position bias."""

    def __init__(self, dim: int, num_heads: int, window_size: int):
        super().__init__()
        self.dim = dim
        self.num_heads = num_heads
        self.window_size = window_size
        self.scale = (dim // num_heads) ** -0.5
        self.relative_position_bias_table = nn.Parameter(
            torch.zeros((2 * window_size - 1) ** 2, num_heads))
        self.register_buffer("relative_position_index", relative_position_index(window_size),
                             persistent=False)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None = None, return_weights: bool = False):
        # x: (B*nW, N, C); mask: (nW, N, N) bool of allowed pairs
        Bw, N, C = x.shape
        qkv = self.qkv(x).reshape(Bw, N, 3, self.num_heads, C // self.num_heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q * self.scale) @ k.transpose(-2, -1)
        bias = self.relative_position_bias_table[self.relative_position_index.reshape(-1)]
        attn = attn + bias.reshape(N, N, -1).permute(2, 0, 1).unsqueeze(0)
        if mask is not None:
            nW = mask.shape[0]
            attn = attn.view(Bw // nW, nW, self.num_heads, N, N)
            attn = attn.masked_fill(~mask[None, :, None], float("-inf")).view(Bw, self.num_heads, N, N)
        attn = attn.softmax(dim=-1)
        out = self.proj((attn @ v).transpose(1, 2).reshape(Bw, N, C))
        if return_weights:
            return out, attn
        return out


class ShiftedWindowBlock(nn.Module):
    def __init__(self, dim: int, num_heads: int, window_size: int, shift: bool, mlp_ratio: float = 4.0):
        super().__init__()
        self.window_size = window_size
        self.shift = shift
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention(dim, num_heads, window_size)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def shift_size(self, H: int, W: int) -> int:
        # a grid that fits in one window gains nothing from shifting
        if not self.shift or min(H, W) <= self.window_size:
            return 0
        return self.window_size // 2

    def windowed_attention(self, x: torch.Tensor, shift: bool | None = None, return_weights: bool = False):
        """Attention over (B, H, W, C) tokens, zero-padded to whole windows."""
        B, H, W, C = x.shape
        ws = self.window_size
        if shift is None:
            s = self.shift_size(H, W)
        else:
            s = ws // 2 if shift and min(H, W) > ws else 0
        Hp, Wp = math.ceil(H / ws) * ws, math.ceil(W / ws) * ws
        if (Hp, Wp) != (H, W):
            x = F.pad(x, (0, 0, 0, Wp - W, 0, Hp - H))
        x = cyclic_shift(x, s)
        mask = _attention_mask(H, W, ws, s).to(x.device)
        out = self.attn(window_partition(x, ws), mask, return_weights=return_weights)
        if return_weights:
            out, weights = out
        out = window_reverse(out, ws, Hp, Wp)
        out = cyclic_shift(out, -s)[:, :H, :W].contiguous()
        if return_weights:
            return out, weights, mask
        return out

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.windowed_attention(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class PatchMerging(nn.Module):
    """2x2 neighbourhood concat + linear 4C -> 2C; halves each grid side."""

    def __init__(self, dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(4 * dim)
        self.reduction = nn.Linear(4 * dim, 2 * dim, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x0 = x[:, 0::2, 0::2]
        x1 = x[:, 1::2, 0::2]
        x2 = x[:, 0::2, 1::2]
        x3 = x[:, 1::2, 1::2]
        return self.reduction(self.norm(torch.cat([x0, x1, x2, x3], dim=-1)))


class Stage(nn.Module):
    def __init__(self, dim_in: int, depth: int, num_heads: int, window_size: int,
                 downsample: bool, mlp_ratio: float):
        super().__init__()
        self.downsample = PatchMerging(dim_in) if downsample else None
        dim = 2 * dim_in if downsample else dim_in
        self.blocks = nn.ModuleList(
            ShiftedWindowBlock(dim, num_heads, window_size, shift=(i % 2 == 1), mlp_ratio=mlp_ratio)
            for i in range(depth))
        self.norm = nn.LayerNorm(dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.downsample is not None:
            x = self.downsample(x)
        for blk in self.blocks:
            x = blk(x)
        return self.norm(x)


class MultiStageIQA(nn.Module):
    """Quality regressor: images (B, 3, H, W) in [0, 1] -> scores (B,).

    A single instance serves both branches of Siamese training; there is
    no second copy of the weights.
    """

    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = config
        p = config.patch_size
        self.patch_proj = nn.Linear(3 * p * p, config.embed_dim)
        self.patch_norm = nn.LayerNorm(config.embed_dim)
        self.stages = nn.ModuleList(
            Stage(config.stage_channels(max(k, 1)), config.depths[k], config.heads[k],
                  config.window_size, downsample=k > 0, mlp_ratio=config.mlp_ratio)
            for k in range(4))
        self.head = nn.Sequential(
            nn.Linear(config.fused_dim, config.head_hidden), nn.GELU(), nn.Linear(config.head_hidden, 1))
        self.apply(self._init_weights)

    @staticmethod
    def _init_weights(m: nn.Module):
        if isinstance(m, nn.Linear):
            trunc_normal_(m.weight, std=0.02)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.LayerNorm):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)
        elif isinstance(m, WindowAttention):
            trunc_normal_(m.relative_position_bias_table, std=0.02)

    def _check_image(self, images: torch.Tensor):
        cfg = self.config
        if images.ndim != 4 or images.shape[1] != 3:
            raise ConfigError(f"expected (B, 3, H, W) images, got shape {tuple(images.shape)}")
        if images.shape[2] != cfg.input_height or images.shape[3] != cfg.input_width:
            raise ConfigError(
                f"image {images.shape[2]}x{images.shape[3]} does not match configured "
                f"{cfg.input_height}x{cfg.input_width}")

    def patch_embed(self, images: torch.Tensor) -> torch.Tensor:
        """Split into non-overlapping p x p patches and project the raw 3*p*p values to C."""
        self._check_image(images)
        p = self.config.patch_size
        B, _, H, W = images.shape
        patches = images.reshape(B, 3, H // p, p, W // p, p).permute(0, 2, 4, 3, 5, 1)
        patches = patches.reshape(B, H // p, W // p, p * p * 3)
        return self.patch_norm(self.patch_proj(patches))

    def run_stage(self, tokens: torch.Tensor, stage_index: int) -> StageFeature:
        cfg = self.config
        if stage_index == 1:
            expect = (*cfg.stage_grid(1), cfg.embed_dim)
        else:
            expect = (*cfg.stage_grid(stage_index - 1), cfg.stage_channels(stage_index - 1))
        if tuple(tokens.shape[1:]) != expect:
            raise ConfigError(f"stage {stage_index} expects tokens {expect}, got {tuple(tokens.shape[1:])}")
        return StageFeature(stage_index, self.stages[stage_index - 1](tokens))

    def stage_features(self, images: torch.Tensor) -> list[StageFeature]:
        x = self.patch_embed(images)
        feats = []
        for k in range(1, 5):
            f = self.run_stage(x, k)
            feats.append(f)
            x = f.values
        return feats

    def fuse_stages(self, stages: Sequence[StageFeature]) -> torch.Tensor:
        """Average-pool every stage over its grid and concatenate in stage order."""
        if len(stages) != 4:
            raise ConfigError("fusion needs all four stage outputs")
        C = stages[0].channels
        for k, f in enumerate(stages):
            if f.stage_index != k + 1 or f.channels != C * 2 ** k:
                raise ConfigError(f"inconsistent stage feature at position {k}")
            if k and (f.grid_height * 2 ** k != stages[0].grid_height
                      or f.grid_width * 2 ** k != stages[0].grid_width):
                raise ConfigError(f"stage {k + 1} grid does not match stage 1")
        used = stages if self.config.fusion else stages[-1:]
        return torch.cat([f.values.mean(dim=(1, 2)) for f in used], dim=-1)

    def predict_head(self, fused: torch.Tensor) -> torch.Tensor:
        if fused.shape[-1] != self.config.fused_dim:
            raise ConfigError(f"head expects {self.config.fused_dim} features, got {fused.shape[-1]}")
        return self.head(fused).squeeze(-1)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.predict_head(self.fuse_stages(self.stage_features(images)))

    def score_pair(self, first: torch.Tensor, second: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Siamese evaluation: both branches run through this one module."""
        return self(first), self(second)
