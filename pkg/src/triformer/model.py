"""Tri-Former: factorized spectral/spatial attention blocks in a 4-stage hierarchy.

Stage one is a convolutional stem (spectrum compression + 3x3x3 conv block);
stages two to four each open with a 2x2x2 strided downsample that doubles the
width and then apply ``depth`` Tri-Former blocks. Features are pooled
globally and classified by a linear head.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import ops
from .errors import ConfigError, DimensionError
from .nn import Conv3d, LayerNorm, Linear, Module, parameter
from .tensor import Tensor, scope

_DTYPES = {"float32": np.float32, "float64": np.float64}


@dataclass
class TriFormerConfig:
    in_bands: int = 64
    num_classes: int = 9
    patch: int = 27
    stage_widths: tuple[int, ...] = (32, 64, 128, 256)
    stage_depths: tuple[int, ...] = (2, 2, 2)
    heads_per_stage: tuple[int, ...] | None = None
    mlp_ratio: int = 4
    spectral_stride: int = 2
    norm_eps: float = 1e-5
    dtype: str = "float32"

    def __post_init__(self):
        self.stage_widths = tuple(int(w) for w in self.stage_widths)
        self.stage_depths = tuple(int(d) for d in self.stage_depths)
        if self.heads_per_stage is None:
            self.heads_per_stage = tuple(max(1, w // 32) for w in self.stage_widths[1:])
        self.heads_per_stage = tuple(int(h) for h in self.heads_per_stage)
        self.validate()

    @property
    def stem_width(self) -> int:
        return self.stage_widths[0]

    @property
    def np_dtype(self):
        return _DTYPES[self.dtype]

    def validate(self) -> None:
        w = self.stage_widths
        if len(w) != 4:
            raise ConfigError(f"stage_widths needs 4 entries (stem + 3 stages), got {w}")
        if any(b != 2 * a for a, b in zip(w, w[1:])):
            raise ConfigError(f"stage_widths must double stage to stage, got {w}")
        if len(self.stage_depths) != 3 or any(d < 0 for d in self.stage_depths):
            raise ConfigError(f"stage_depths needs 3 non-negative entries, got {self.stage_depths}")
        if len(self.heads_per_stage) != 3:
            raise ConfigError(f"heads_per_stage needs 3 entries, got {self.heads_per_stage}")
        for width, heads in zip(w[1:], self.heads_per_stage):
            if heads < 1 or width % heads:
                raise ConfigError(f"stage width {width} not divisible by {heads} heads")
        if self.patch < 1 or self.patch % 2 == 0:
            raise ConfigError(f"patch must be odd, got {self.patch}")
        if self.in_bands < 2:
            raise ConfigError(f"in_bands must be >= 2, got {self.in_bands}")
        if self.num_classes < 1:
            raise ConfigError("num_classes must be >= 1")
        if self.dtype not in _DTYPES:
            raise ConfigError(f"dtype must be one of {sorted(_DTYPES)}")

    @classmethod
    def tiny(cls, **overrides) -> "TriFormerConfig":
        base = dict(stage_widths=(16, 32, 64, 128), stage_depths=(1, 1, 1), patch=13)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("stage_widths", "stage_depths", "heads_per_stage"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TriFormerConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def extents(self) -> list[tuple[int, int, int]]:
        """(H, W, L) after the stem and after each stage's downsample."""
        ceil = lambda n: -(-n // 2)
        h, l = self.patch, -(-self.in_bands // self.spectral_stride)
        out = [(h, h, l)]
        for _ in range(3):
            h, l = ceil(h), ceil(l)
            out.append((h, h, l))
        return out


# -- attention -----------------------------------------------------------------


class Attention(Module):
    """Bias-free multi-head self-attention projections (Q, K, V, output)."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, dtype=np.float32, std: float = 0.02):
        if heads < 1 or dim % heads:
            raise ConfigError(f"channels {dim} not divisible by {heads} heads")
        self.heads = heads
        self.wq = parameter(rng.normal(0.0, std, (dim, dim)), dtype)
        self.wk = parameter(rng.normal(0.0, std, (dim, dim)), dtype)
        self.wv = parameter(rng.normal(0.0, std, (dim, dim)), dtype)
        self.wo = parameter(rng.normal(0.0, std, (dim, dim)), dtype)

    @property
    def dim(self) -> int:
        return self.wq.shape[0]


def mhsa(tokens: Tensor, p: Attention) -> Tensor:
    """softmax(Q K^T / sqrt(d_k)) V over axis 1 of ``[N, T, C]``, then ``@ Wo``."""
    N, T, C = tokens.shape
    if C != p.dim:
        raise DimensionError(f"token width {C} != attention width {p.dim}")
    h = p.heads
    dk = C // h

    def split(t):
        return t.reshape(N, T, h, dk).transpose(0, 2, 1, 3)

    q = split(ops.matmul(tokens, p.wq))
    k = ops.matmul(tokens, p.wk).reshape(N, T, h, dk).transpose(0, 2, 3, 1)
    v = split(ops.matmul(tokens, p.wv))
    scores = ops.scale(ops.matmul(q, k), 1.0 / math.sqrt(dk))
    out = ops.matmul(ops.softmax_lastdim(scores), v)
    out = out.transpose(0, 2, 1, 3).reshape(N, T, C)
    return ops.matmul(out, p.wo)


def _check5(x: Tensor, p: Attention):
    if x.ndim != 5:
        raise DimensionError(f"expected [B,H,W,L,C], got {x.shape}")
    if x.shape[-1] % p.heads:
        raise ConfigError(f"channels {x.shape[-1]} not divisible by {p.heads} heads")


def spectral_attention(x: Tensor, p: Attention) -> Tensor:
    """Attention among the L band tokens at every spatial site."""
    _check5(x, p)
    B, H, W, L, C = x.shape
    return mhsa(x.reshape(B * H * W, L, C), p).reshape(B, H, W, L, C)


def spatial_attention(x: Tensor, p: Attention) -> Tensor:
    """Attention among the H*W spatial tokens within every band."""
    _check5(x, p)
    B, H, W, L, C = x.shape
    t = x.transpose(0, 3, 1, 2, 4).reshape(B * L, H * W, C)
    return mhsa(t, p).reshape(B, L, H, W, C).transpose(0, 2, 3, 1, 4)


def full3d_attention(x: Tensor, p: Attention) -> Tensor:
    """Unfactorized attention over all H*W*L tokens (reference for cost accounting only)."""
    _check5(x, p)
    B, H, W, L, C = x.shape
    return mhsa(x.reshape(B, H * W * L, C), p).reshape(B, H, W, L, C)


# -- blocks --------------------------------------------------------------------


class ChannelMixer(Module):
    """Depthwise 3x3x3 conv, then Linear(C, r*C) -> GELU -> Linear(r*C, C)."""

    def __init__(self, dim: int, ratio: int, rng, dtype=np.float32):
        self.dwconv = Conv3d(dim, dim, (3, 3, 3), rng, dtype, groups=dim, bias=False)
        self.fc1 = Linear(dim, ratio * dim, rng, dtype)
        self.fc2 = Linear(ratio * dim, dim, rng, dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(ops.gelu(self.fc1(self.dwconv(x))))


class TriFormerBlock(Module):
    """Pre-norm block: parallel spectral + spatial token mixing, conv-enhanced channel mixer."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int, rng, dtype=np.float32, eps: float = 1e-5):
        self.norm1 = LayerNorm(dim, dtype, eps)
        self.spectral = Attention(dim, heads, rng, dtype)
        self.spatial = Attention(dim, heads, rng, dtype)
        self.norm2 = LayerNorm(dim, dtype, eps)
        self.mixer = ChannelMixer(dim, mlp_ratio, rng, dtype)

    def forward(self, x: Tensor) -> Tensor:
        with scope("norm1"):
            h = self.norm1(x)
        with scope("spectral"):
            a = spectral_attention(h, self.spectral)
        with scope("spatial"):
            s = spatial_attention(h, self.spatial)
        y = ops.add(ops.add(x, a), s)
        with scope("norm2"):
            h2 = self.norm2(y)
        with scope("mixer"):
            m = self.mixer(h2)
        return ops.add(y, m)


class Stem(Module):
    """Spectrum compression (1,1,3) conv with spectral stride, then conv+norm+GELU."""

    def __init__(self, width: int, spectral_stride: int, rng, dtype=np.float32, eps: float = 1e-5):
        self.compress = Conv3d(1, width, (1, 1, 3), rng, dtype, stride=(1, 1, spectral_stride))
        self.conv = Conv3d(width, width, (3, 3, 3), rng, dtype)
        self.norm = LayerNorm(width, dtype, eps)

    def forward(self, x: Tensor, inject: Tensor | None = None) -> Tensor:
        with scope("compress"):
            x = self.compress(x)
        if inject is not None:
            x = ops.add(x, inject)
        with scope("conv"):
            return ops.gelu(self.norm(self.conv(x)))


class Stage(Module):
    def __init__(self, cin: int, depth: int, heads: int, mlp_ratio: int, rng, dtype=np.float32, eps: float = 1e-5):
        self.down = Conv3d(cin, 2 * cin, (2, 2, 2), rng, dtype, stride=(2, 2, 2))
        self.blocks = [TriFormerBlock(2 * cin, heads, mlp_ratio, rng, dtype, eps) for _ in range(depth)]

    def forward(self, x: Tensor, inject: Tensor | None = None) -> Tensor:
        with scope("down"):
            x = self.down(x)
        if inject is not None:
            x = ops.add(x, inject)
        for i, blk in enumerate(self.blocks):
            with scope(f"block{i}"):
                x = blk(x)
        return x


class TriFormerModel(Module):
    def __init__(self, config: TriFormerConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        dt = config.np_dtype
        w = config.stage_widths
        self.stem = Stem(w[0], config.spectral_stride, rng, dt, config.norm_eps)
        self.stages = [
            Stage(w[i], config.stage_depths[i], config.heads_per_stage[i], config.mlp_ratio, rng, dt, config.norm_eps)
            for i in range(3)
        ]
        self.head = Linear(w[3], config.num_classes, rng, dt, zero=True)

    def check_input(self, x: Tensor) -> None:
        c = self.config
        if x.ndim != 5 or x.shape[1] != c.patch or x.shape[2] != c.patch or x.shape[4] != 1:
            raise DimensionError(f"expected input [B,{c.patch},{c.patch},L,1], got {x.shape}")
        if x.shape[3] != c.in_bands:
            raise DimensionError(f"expected {c.in_bands} bands, got {x.shape[3]}")

    def features(self, x: Tensor, injections=None) -> list[Tensor]:
        """Per-stage outputs ``[stem, stage1, stage2, stage3]``.

        ``injections[i]``, when given, is added to stage ``i``'s input right
        after its compression/downsample conv.
        """
        self.check_input(x)
        inj = list(injections) if injections is not None else [None] * 4
        x = x if x.dtype == self.config.np_dtype else x.astype(self.config.np_dtype)
        with scope("stem"):
            x = self.stem(x, inj[0])
        outs = [x]
        for i, stage in enumerate(self.stages):
            with scope(f"stage{i + 1}"):
                x = stage(x, inj[i + 1])
            outs.append(x)
        return outs

    def forward(self, x: Tensor) -> Tensor:
        feats = self.features(x)[-1]
        pooled = ops.global_avg_pool(feats)
        with scope("head"):
            return self.head(pooled)


def param_count(config: TriFormerConfig) -> int:
    """Closed-form number of learnable scalars for ``config``."""
    w, r = config.stage_widths, config.mlp_ratio
    total = (3 * w[0] + w[0])  # compression kernel + bias
    total += 27 * w[0] * w[0] + w[0] + 2 * w[0]  # stem conv + bias + norm
    for i in range(3):
        cin, c = w[i], w[i + 1]
        total += 8 * cin * c + c
        block = 2 * c + 8 * c * c + 2 * c + 27 * c + (c * r * c + r * c) + (r * c * c + c)
        total += config.stage_depths[i] * block
    total += w[3] * config.num_classes + config.num_classes
    return total
