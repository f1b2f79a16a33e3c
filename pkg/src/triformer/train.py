"""AdamW, warmup + cosine schedule, and the supervised training / evaluation loops."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import ops
from .data import PatchSource
from .errors import ConfigError, NumericError
from .metrics import ConfusionMatrix
from .tensor import Tensor, backward, no_grad

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 300
    batch: int = 96
    base_lr: float = 1e-3
    min_lr: float = 1e-6
    weight_decay: float = 1e-5
    warmup_epochs: int = 5
    seed: int = 0
    # off unless configured
    label_smoothing: float = 0.0
    grad_clip: float = 0.0
    augment: bool = False

    def __post_init__(self):
        if self.min_lr > self.base_lr:
            raise ConfigError("min_lr must not exceed base_lr")
        if self.epochs > 0 and not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigError("warmup_epochs must be in [0, epochs)")
        if self.batch < 1:
            raise ConfigError("batch must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


def lr_at(step: int, config: TrainConfig, steps_per_epoch: int = 1) -> float:
    """Linear warmup from 0, then cosine decay reaching ``min_lr`` at the last step."""
    warm = config.warmup_epochs * steps_per_epoch
    total = config.epochs * steps_per_epoch
    if step < warm:
        return config.base_lr * step / warm
    span = total - 1 - warm
    t = min(1.0, (step - warm) / span) if span > 0 else 1.0
    return config.min_lr + 0.5 * (config.base_lr - config.min_lr) * (1.0 + math.cos(math.pi * t))


def adamw_step(params, grads, state: dict, lr: float, wd: float,
               beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One decoupled-weight-decay Adam update, in place.

    ``state`` maps ``id(param)`` to ``(m, v, t)``; missing grads count as zero.
    """
    for p, g in zip(params, grads):
        data = p.data
        if g is None:
            g = np.zeros_like(data)
        m, v, t = state.get(id(p), (np.zeros_like(data), np.zeros_like(data), 0))
        t += 1
        # overflow surfaces as NumericError on the next forward pass
        with np.errstate(over="ignore", invalid="ignore"):
            if wd:
                data -= lr * wd * data
            m = beta1 * m + (1 - beta1) * g
            v = beta2 * v + (1 - beta2) * (g * g)
            mhat = m / (1 - beta1 ** t)
            vhat = v / (1 - beta2 ** t)
            data -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(data.dtype)
        state[id(p)] = (m, v, t)


class AdamW:
    def __init__(self, params, weight_decay: float = 1e-5, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.state: dict = {}

    def step(self, lr: float) -> None:
        adamw_step(self.params, [p.grad for p in self.params], self.state, lr,
                   self.weight_decay, *self.betas, self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def clip_grad_norm(params, max_norm: float) -> float:
    total = math.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum()) for p in params if p.grad is not None))
    if max_norm > 0 and total > max_norm:
        s = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad *= s
    return total


def augment_batch(x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Random spatial flips / transposes of ``[B,P,P,L,1]`` patches."""
    out = x.copy()
    for i in range(len(x)):
        k = rng.integers(8)
        p = x[i]
        if k & 1:
            p = p[::-1]
        if k & 2:
            p = p[:, ::-1]
        if k & 4:
            p = p.transpose(1, 0, 2, 3)
        out[i] = p
    return out


def smoothed_cross_entropy(logits: Tensor, y: np.ndarray, smoothing: float) -> Tensor:
    if smoothing <= 0:
        return ops.cross_entropy(logits, y)
    C = logits.shape[1]
    # (1 - s) * CE(y) + s * mean_c CE(c)
    uniform = [ops.cross_entropy(logits, np.full_like(y, c)) for c in range(C)]
    acc = ops.scale(ops.cross_entropy(logits, y), 1.0 - smoothing)
    for u in uniform:
        acc = ops.add(acc, ops.scale(u, smoothing / C))
    return acc


def train(model, source: PatchSource, train_idx, config: TrainConfig,
          history_path=None, stop_at_train_oa: float | None = None):
    """Seeded mini-batch AdamW training on cross-entropy.

    Returns ``(model, history)``; ``history`` holds one dict per epoch with
    mean loss, train OA measured on the fly, and the last learning rate.
    If ``stop_at_train_oa`` is given, training stops after the first epoch
    reaching it.
    """
    rng = np.random.default_rng(config.seed)
    train_idx = np.asarray(train_idx)
    n = len(train_idx)
    spe = max(1, math.ceil(n / config.batch))
    opt = AdamW(model.parameters(), config.weight_decay)
    patch = model.config.patch
    history = []
    fh = open(history_path, "w") if history_path else None
    try:
        for epoch in range(config.epochs):
            order = train_idx[rng.permutation(n)]
            losses, correct, lr = [], 0, 0.0
            for b in range(spe):
                idx = order[b * config.batch:(b + 1) * config.batch]
                x = source.patches(idx, patch)
                if config.augment:
                    x = augment_batch(x, rng)
                y = source.targets(idx)
                lr = lr_at(epoch * spe + b, config, spe)
                try:
                    logits = model(Tensor(x))
                    loss = smoothed_cross_entropy(logits, y, config.label_smoothing)
                except NumericError as e:
                    raise NumericError(f"{e} (epoch {epoch}, batch {b}, lr {lr:.3e})") from None
                if not np.isfinite(loss.item()):
                    raise NumericError(f"non-finite loss (epoch {epoch}, batch {b}, lr {lr:.3e})")
                opt.zero_grad()
                backward(loss)
                if config.grad_clip > 0:
                    clip_grad_norm(opt.params, config.grad_clip)
                opt.step(lr)
                losses.append(loss.item() * len(idx))
                correct += int((logits.data.argmax(axis=1) == y).sum())
            rec = {"epoch": epoch, "loss": float(np.sum(losses) / n), "train_oa": correct / n, "lr": lr}
            history.append(rec)
            log.debug("epoch %d loss %.4f train_oa %.4f", epoch, rec["loss"], rec["train_oa"])
            if fh:
                fh.write(json.dumps(rec) + "\n")
            if stop_at_train_oa is not None and rec["train_oa"] >= stop_at_train_oa:
                break
    finally:
        if fh:
            fh.close()
    return model, history


def predict(model, source: PatchSource, idx, batch: int = 64) -> np.ndarray:
    """Argmax class (zero-based) per pixel; ties go to the lowest index."""
    idx = np.asarray(idx)
    out = np.empty(len(idx), dtype=np.int64)
    with no_grad():
        for s in range(0, len(idx), batch):
            part = idx[s:s + batch]
            logits = model(Tensor(source.patches(part, model.config.patch)))
            out[s:s + batch] = logits.data.argmax(axis=1)
    return out


def evaluate(model, source: PatchSource, idx, batch: int = 64) -> ConfusionMatrix:
    pred = predict(model, source, idx, batch)
    return ConfusionMatrix.from_predictions(source.targets(idx), pred, source.num_classes)
