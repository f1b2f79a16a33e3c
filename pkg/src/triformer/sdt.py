"""Single-direction tuning: a pretrained base feeds a tiny auxiliary branch through one-way bridges.

The base sees the large patch and the auxiliary branch the concentric small
patch. At every stage boundary the base feature map is detached, centre
cropped to the auxiliary extents, mapped by a pointwise conv (the bridge) and
added to the auxiliary stage input. Predictions come from the auxiliary head.

Since no gradient crosses a bridge, the base is trained ("cold") only through
a separate classifier on its pooled features, with a learning rate scaled by
``cold_factor`` and applied every ``cold_period`` steps. Auxiliary branch,
bridges and head are updated ("hot") on every step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .checkpoint import Checkpoint, load_checkpoint
from .data import PatchSource, SplitSpec, split_per_class
from .errors import ConfigError, DimensionError, FormatError
from .metrics import ConfusionMatrix, MetricsReport, aggregate
from .model import TriFormerConfig, TriFormerModel
from .nn import Conv3d, Linear, Module
from .tensor import Tensor, backward, no_grad
from .train import AdamW, TrainConfig, lr_at


@dataclass
class SdtConfig:
    aux: TriFormerConfig = field(default_factory=TriFormerConfig.tiny)
    cold_factor: float = 0.1
    cold_period: int = 1
    bridge_init: str = "zero"

    def __post_init__(self):
        if isinstance(self.aux, dict):
            self.aux = TriFormerConfig.from_dict(self.aux)
        if self.cold_factor < 0:
            raise ConfigError("cold_factor must be >= 0")
        if self.cold_period < 1:
            raise ConfigError("cold_period must be >= 1")
        if self.bridge_init not in ("zero", "normal"):
            raise ConfigError("bridge_init must be 'zero' or 'normal'")

    def to_dict(self) -> dict:
        return {"aux": self.aux.to_dict(), "cold_factor": self.cold_factor,
                "cold_period": self.cold_period, "bridge_init": self.bridge_init}

    @classmethod
    def from_dict(cls, d: dict) -> "SdtConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown sdt config keys: {sorted(unknown)}")
        return cls(**d)


class Bridge(Module):
    """Bias-free 1x1x1 conv from base width to auxiliary width."""

    def __init__(self, cin: int, cout: int, rng, dtype=np.float32, zero: bool = True):
        self.conv = Conv3d(cin, cout, (1, 1, 1), rng, dtype, bias=False, zero=zero)

    def forward(self, x: Tensor) -> Tensor:
        return self.conv(x)


def center_crop(x: Tensor, extents: tuple[int, int, int]) -> Tensor:
    """Centre crop the H, W, L axes of ``[B,H,W,L,C]`` to ``extents``."""
    idx = [slice(None)]
    for n, m in zip(x.shape[1:4], extents):
        if m > n:
            raise DimensionError(f"cannot crop extent {n} to larger {m}")
        o = (n - m) // 2
        idx.append(slice(o, o + m))
    idx.append(slice(None))
    if all(s.start == 0 and s.stop == n for s, n in zip(idx[1:4], x.shape[1:4])):
        return x
    return ops.crop(x, tuple(idx))


class DualModel(Module):
    def __init__(self, base: TriFormerModel, config: SdtConfig, num_classes: int, seed: int = 0):
        bc, ac = base.config, config.aux
        if ac.num_classes != num_classes:
            ac = TriFormerConfig.from_dict({**ac.to_dict(), "num_classes": num_classes})
        if ac.patch >= bc.patch:
            raise ConfigError(f"aux patch {ac.patch} must be smaller than base patch {bc.patch}")
        if ac.in_bands != bc.in_bands:
            raise ConfigError(f"aux in_bands {ac.in_bands} != base in_bands {bc.in_bands}")
        self.config = config
        rng = np.random.default_rng(seed)
        base.head = None  # base classifier is discarded
        self.base = base
        self.aux = TriFormerModel(ac, seed=seed)
        dt = ac.np_dtype
        self.bridges = [Bridge(cb, ca, rng, dt, zero=config.bridge_init == "zero")
                        for cb, ca in zip(bc.stage_widths, ac.stage_widths)]
        self.cold_head = Linear(bc.stage_widths[3], num_classes, rng, bc.np_dtype, zero=True)

    @property
    def num_classes(self) -> int:
        return self.aux.config.num_classes

    def base_parameters(self):
        return self.base.parameters()

    def hot_parameters(self):
        return self.aux.parameters() + [p for b in self.bridges for p in b.parameters()]

    def to_checkpoint(self, **meta) -> Checkpoint:
        header = {"kind": "sdt", "config": self.base.config.to_dict(),
                  "sdt": self.config.to_dict(), "aux_config": self.aux.config.to_dict(), "meta": meta}
        return Checkpoint(header, {k: v.copy() for k, v in self.state_dict().items()})

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "DualModel":
        if ckpt.kind != "sdt":
            raise FormatError(f"expected an sdt checkpoint, got kind {ckpt.kind!r}")
        base = TriFormerModel(TriFormerConfig.from_dict(ckpt.header["config"]))
        sdt = SdtConfig.from_dict(ckpt.header["sdt"])
        sdt.aux = TriFormerConfig.from_dict(ckpt.header["aux_config"])
        dual = cls(base, sdt, sdt.aux.num_classes)
        dual.load_state_dict(ckpt.tensors)
        return dual


def load_pretrained(checkpoint, target_bands: int) -> TriFormerModel:
    """Build a base model from a TFCK checkpoint (path or :class:`Checkpoint`).

    The cube must already be resampled to the checkpoint's band count; the
    returned model keeps its head, which :class:`DualModel` discards.
    """
    ckpt = checkpoint if isinstance(checkpoint, Checkpoint) else load_checkpoint(checkpoint)
    if ckpt.kind != "triformer":
        raise FormatError(f"expected a triformer checkpoint, got kind {ckpt.kind!r}")
    try:
        cfg = TriFormerConfig.from_dict(ckpt.header["config"])
    except (KeyError, TypeError, ConfigError) as e:
        raise FormatError(f"checkpoint config unusable: {e}") from None
    if cfg.in_bands != target_bands:
        raise FormatError(f"checkpoint expects {cfg.in_bands} bands, data has {target_bands}; "
                          "resample the cube first")
    model = TriFormerModel(cfg)
    model.load_state_dict(ckpt.tensors)
    return model


def _check_pair(dual: DualModel, big: Tensor, small: Tensor) -> None:
    bp, ap = dual.base.config.patch, dual.aux.config.patch
    if big.ndim != 5 or small.ndim != 5 or big.shape[1:3] != (bp, bp) or small.shape[1:3] != (ap, ap):
        raise DimensionError(f"expected base patches {bp}x{bp} and aux patches {ap}x{ap}, "
                             f"got {big.shape} and {small.shape}")
    if big.shape[0] != small.shape[0] or big.shape[3:] != small.shape[3:]:
        raise DimensionError(f"base/aux batches disagree: {big.shape} vs {small.shape}")
    o = (bp - ap) // 2
    if not np.array_equal(big.data[:, o:o + ap, o:o + ap], small.data):
        raise DimensionError("aux patches are not concentric crops of the base patches")


def _forward(dual: DualModel, big: Tensor, small: Tensor, base_grad: bool):
    """Returns ``(aux logits, base pooled features or None)``."""
    _check_pair(dual, big, small)
    if base_grad:
        feats = dual.base.features(big)
    else:
        with no_grad():
            feats = dual.base.features(big)
    ext = dual.aux.config.extents()
    inject = []
    for f, bridge, e in zip(feats, dual.bridges, ext):
        inject.append(bridge(center_crop(f.detach(), e)))
    out = dual.aux.features(small, inject)[-1]
    logits = dual.aux.head(ops.global_avg_pool(out))
    pooled = ops.global_avg_pool(feats[-1]) if base_grad else None
    return logits, pooled


def sdt_forward(dual: DualModel, big: Tensor, small: Tensor) -> Tensor:
    return _forward(dual, big, small, base_grad=False)[0]


class SdtOptimizer:
    """Hot (aux + bridges) and cold (base + cold head) AdamW groups."""

    def __init__(self, dual: DualModel, weight_decay: float = 1e-5):
        self.hot = AdamW(dual.hot_parameters(), weight_decay)
        self.base = AdamW(dual.base_parameters(), weight_decay)
        self.cold_head = AdamW(dual.cold_head.parameters(), weight_decay)

    def zero_grad(self):
        for g in (self.hot, self.base, self.cold_head):
            g.zero_grad()


def is_cold_step(config: SdtConfig, step_index: int) -> bool:
    return config.cold_factor > 0 and step_index % config.cold_period == 0


def sdt_step(dual: DualModel, opt: SdtOptimizer, big: Tensor, small: Tensor, y,
             hot_lr: float, step_index: int) -> float:
    """One tuning step; returns the hot (auxiliary) loss."""
    cfg = dual.config
    cold = is_cold_step(cfg, step_index)
    logits, pooled = _forward(dual, big, small, base_grad=cold)
    loss = ops.cross_entropy(logits, y)
    total = loss
    if cold:
        total = ops.add(total, ops.cross_entropy(dual.cold_head(pooled), y))
    opt.zero_grad()
    backward(total)
    opt.hot.step(hot_lr)
    if cold:
        opt.cold_head.step(hot_lr)
        opt.base.step(cfg.cold_factor * hot_lr)
    return loss.item()


def sdt_predict(dual: DualModel, source: PatchSource, idx, batch: int = 64) -> np.ndarray:
    idx = np.asarray(idx)
    out = np.empty(len(idx), dtype=np.int64)
    bp, ap = dual.base.config.patch, dual.aux.config.patch
    with no_grad():
        for s in range(0, len(idx), batch):
            part = idx[s:s + batch]
            logits = sdt_forward(dual, Tensor(source.patches(part, bp)), Tensor(source.patches(part, ap)))
            out[s:s + batch] = logits.data.argmax(axis=1)
    return out


def sdt_evaluate(dual: DualModel, source: PatchSource, idx, batch: int = 64) -> ConfusionMatrix:
    pred = sdt_predict(dual, source, idx, batch)
    return ConfusionMatrix.from_predictions(source.targets(idx), pred, source.num_classes)


def tune_once(dual: DualModel, source: PatchSource, train_idx, config: TrainConfig) -> list[dict]:
    """SDT tuning loop with the warmup + cosine schedule driving the hot rate."""
    rng = np.random.default_rng(config.seed)
    train_idx = np.asarray(train_idx)
    n = len(train_idx)
    spe = max(1, math.ceil(n / config.batch))
    opt = SdtOptimizer(dual, config.weight_decay)
    bp, ap = dual.base.config.patch, dual.aux.config.patch
    history = []
    for epoch in range(config.epochs):
        order = train_idx[rng.permutation(n)]
        losses = []
        for b in range(spe):
            idx = order[b * config.batch:(b + 1) * config.batch]
            step = epoch * spe + b
            loss = sdt_step(dual, opt, Tensor(source.patches(idx, bp)), Tensor(source.patches(idx, ap)),
                            source.targets(idx), lr_at(step, config, spe), step)
            losses.append(loss * len(idx))
        history.append({"epoch": epoch, "loss": float(np.sum(losses) / n)})
    return history


def tune(make_dual, source: PatchSource, epochs: int, seeds, n_per_class: int,
         train_config: TrainConfig | None = None) -> MetricsReport:
    """Tune a fresh dual model per seed and average test metrics over seeds.

    ``make_dual(seed)`` must return a new :class:`DualModel` (fresh auxiliary
    branch, freshly loaded base). The per-class split is reseeded per run.
    """
    base_cfg = train_config or TrainConfig(batch=12)
    reports = []
    for seed in seeds:
        cfg = TrainConfig(**{**base_cfg.to_dict(), "epochs": epochs, "seed": seed,
                             "warmup_epochs": min(base_cfg.warmup_epochs, max(epochs - 1, 0))})
        tr, te = split_per_class(source.labels, SplitSpec(n_per_class, seed))
        dual = make_dual(seed)
        tune_once(dual, source, tr, cfg)
        reports.append(MetricsReport.from_cm(sdt_evaluate(dual, source, te)))
    return aggregate(reports)
