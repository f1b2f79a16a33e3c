"""Differentiable tensor operations.

Layout convention for volumetric data is ``[batch, H, W, L, channels]``.
Each op computes its forward value with numpy, validates it, and records a
vector-Jacobian closure via :func:`triformer.tensor.record`.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .errors import ConfigError, DataError, DimensionError, NumericError
from .tensor import Tensor, as_tensor, count, record

_GELU_C = math.sqrt(2.0 / math.pi)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _pair(a, b) -> tuple[Tensor, Tensor]:
    a = as_tensor(a)
    b = as_tensor(b, dtype=a.dtype)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"shapes {a.shape} and {b.shape} do not broadcast") from None
    return a, b


# -- elementwise ---------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return record("add", a.data + b.data, (a, b),
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return record("sub", a.data - b.data, (a, b),
                  lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    return record("mul", a.data * b.data, (a, b),
                  lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return record("scale", a.data * a.data.dtype.type(s), (a,), lambda g: (g * s,))


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    xd = x.data
    x2 = xd * xd
    th = np.tanh(xd * (_GELU_C + _GELU_C * 0.044715 * x2))
    out = 0.5 * xd * (1.0 + th)

    def vjp(g):
        dinner = _GELU_C + (_GELU_C * 3 * 0.044715) * x2
        d = 0.5 * (1.0 + th) + 0.5 * xd * (1.0 - th * th) * dinner
        return (g * d,)

    return record("gelu", out, (x,), vjp)


# -- reductions and shape ops --------------------------------------------------


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    return record("sum", np.asarray(x.data.sum(), dtype=x.dtype), (x,),
                  lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean(x: Tensor) -> Tensor:
    n = x.size
    return record("mean", np.asarray(x.data.mean(), dtype=x.dtype), (x,),
                  lambda g: (np.broadcast_to(g / n, x.shape).astype(x.dtype),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError:
        raise DimensionError(f"cannot reshape {x.shape} to {tuple(shape)}") from None
    return record("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return record("transpose", np.ascontiguousarray(x.data.transpose(axes)), (x,),
                  lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def crop(x: Tensor, index: tuple) -> Tensor:
    """Basic-slice ``x[index]`` with a scatter-back gradient."""
    out = np.ascontiguousarray(x.data[index])

    def vjp(g):
        gx = np.zeros_like(x.data)
        gx[index] = g
        return (gx,)

    return record("crop", out, (x,), vjp)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the H, W, L axes of ``[B,H,W,L,C]`` -> ``[B,C]``."""
    if x.ndim != 5:
        raise DimensionError(f"global_avg_pool expects [B,H,W,L,C], got {x.shape}")
    B, H, W, L, C = x.shape
    n = H * W * L
    out = x.data.mean(axis=(1, 2, 3))
    return record("global_avg_pool", out, (x,),
                  lambda g: (np.broadcast_to((g / n)[:, None, None, None, :], x.shape).astype(x.dtype),))


# -- contractions --------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product ``[..,m,k] @ [..,k,n]`` with broadcasting batch dims."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs ndim >= 2, got {a.shape} and {b.shape}")
    m, k = a.shape[-2:]
    k2, n = b.shape[-2:]
    if k != k2:
        raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    try:
        batch = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul batch extents incompatible: {a.shape} @ {b.shape}") from None
    count("mac", int(np.prod(batch, dtype=np.int64)) * m * k * n)

    if b.ndim == 2:
        # weight-style right operand: flatten leading axes into one GEMM
        a2 = a.data.reshape(-1, k)
        out = (a2 @ b.data).reshape(a.shape[:-1] + (n,))

        def vjp(g):
            g2 = g.reshape(-1, n)
            return (g2 @ b.data.T).reshape(a.shape), a2.T @ g2

        return record("matmul", out, (a, b), vjp)

    out = np.matmul(a.data, b.data)

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return record("matmul", out, (a, b), vjp)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


def softmax_lastdim(x: Tensor) -> Tensor:
    if x.shape[-1] < 1:
        raise DimensionError("softmax over an empty axis")
    if np.isnan(x.data).any():
        raise NumericError("softmax input contains NaN")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    count("exp", y.size)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return record("softmax", y, (x,), vjp)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply the per-channel affine map."""
    if eps <= 0:
        raise ConfigError(f"layer_norm eps must be > 0, got {eps}")
    C = x.shape[-1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise DimensionError(f"layer_norm affine params must be ({C},), got {gamma.shape}, {beta.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + xd.dtype.type(eps))
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    count("norm", xd.size)

    def vjp(g):
        red = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=red)
        dbeta = g.sum(axis=red)
        dxhat = g * gamma.data
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, dgamma, dbeta

    return record("layer_norm", out, (x, gamma, beta), vjp)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy expects [B,C] logits, got {logits.shape}")
    B, C = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (B,):
        raise DimensionError(f"labels shape {labels.shape} does not match batch {B}")
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise DataError(f"labels must lie in [0, {C}), got range [{labels.min()}, {labels.max()}]")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    rows = np.arange(B)
    loss = np.asarray(-logp[rows, labels].mean(), dtype=logits.dtype)

    def vjp(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (p * (g / B),)

    return record("cross_entropy", loss, (logits,), vjp)


# -- 3D convolution ------------------------------------------------------------


def conv_out_extent(n: int, k: int, stride: int, pad: str) -> tuple[int, int, int]:
    """Output extent plus (low, high) zero padding for one axis.

    ``"same"`` gives ``ceil(n/stride)`` with any odd surplus padded at the
    high end; ``"none"`` is a valid (unpadded) correlation.
    """
    if pad == "same":
        out = -(-n // stride)
        total = max((out - 1) * stride + k - n, 0)
        return out, total // 2, total - total // 2
    if pad == "none":
        if k > n:
            raise DimensionError(f"kernel extent {k} exceeds input extent {n}")
        return (n - k) // stride + 1, 0, 0
    raise ConfigError(f"unknown padding mode {pad!r}")


def conv3d(x: Tensor, k: Tensor, stride=(1, 1, 1), pad: str = "same", groups: int = 1) -> Tensor:
    """Grouped 3D cross-correlation.

    Parameters
    ----------
    x : Tensor
        ``[B, H, W, L, Cin]`` input.
    k : Tensor
        ``[kh, kw, kl, Cin // groups, Cout]`` kernel.
    stride : int or triple
    pad : {"same", "none"}
    groups : int
        Channel groups; ``groups == Cin == Cout`` is depthwise.
    """
    if x.ndim != 5 or k.ndim != 5:
        raise DimensionError(f"conv3d expects 5-D input and kernel, got {x.shape} and {k.shape}")
    if isinstance(stride, int):
        stride = (stride,) * 3
    B, H, W, L, cin = x.shape
    kh, kw, kl, cin_g, cout = k.shape
    if groups < 1 or cin % groups or cout % groups:
        raise ConfigError(f"groups={groups} must divide Cin={cin} and Cout={cout}")
    if cin_g != cin // groups:
        raise DimensionError(f"kernel expects {cin_g} input channels per group, input gives {cin // groups}")
    dims = [conv_out_extent(n, kd, s, pad) for n, kd, s in zip((H, W, L), (kh, kw, kl), stride)]
    (oh, ph0, ph1), (ow, pw0, pw1), (ol, pl0, pl1) = dims
    xp = x.data
    padded = any((ph0, ph1, pw0, pw1, pl0, pl1))
    if padded:
        xp = np.pad(xp, ((0, 0), (ph0, ph1), (pw0, pw1), (pl0, pl1), (0, 0)))
    sh, sw, sl = stride
    count("mac", B * oh * ow * ol * kh * kw * kl * cin_g * cout)

    offsets = [(i, j, l) for i in range(kh) for j in range(kw) for l in range(kl)]

    def window(arr, i, j, l):
        return arr[:, i:i + sh * (oh - 1) + 1:sh, j:j + sw * (ow - 1) + 1:sw, l:l + sl * (ol - 1) + 1:sl, :]

    kd = k.data
    depthwise = groups == cin and cout == cin
    out = np.zeros((B, oh, ow, ol, cout), dtype=np.result_type(x.dtype, k.dtype))
    npos = B * oh * ow * ol
    cout_g = cout // groups
    for i, j, l in offsets:
        win = window(xp, i, j, l)
        if depthwise:
            out += win * kd[i, j, l, 0]
        elif groups == 1:
            out += (win.reshape(npos, cin) @ kd[i, j, l]).reshape(out.shape)
        else:
            for g in range(groups):
                ci = slice(g * cin_g, (g + 1) * cin_g)
                co = slice(g * cout_g, (g + 1) * cout_g)
                out[..., co] += (win[..., ci].reshape(npos, cin_g) @ kd[i, j, l, :, co]).reshape(out.shape[:-1] + (cout_g,))

    def vjp(gy):
        gxp = np.zeros_like(xp)
        gk = np.zeros_like(kd)
        g2 = gy.reshape(npos, cout)
        for i, j, l in offsets:
            win = window(xp, i, j, l)
            gwin = window(gxp, i, j, l)
            if depthwise:
                gk[i, j, l, 0] = (win * gy).reshape(npos, cout).sum(axis=0)
                gwin += gy * kd[i, j, l, 0]
            elif groups == 1:
                gk[i, j, l] = win.reshape(npos, cin).T @ g2
                gwin += (g2 @ kd[i, j, l].T).reshape(gwin.shape)
            else:
                for g in range(groups):
                    ci = slice(g * cin_g, (g + 1) * cin_g)
                    co = slice(g * cout_g, (g + 1) * cout_g)
                    gk[i, j, l, :, co] = win[..., ci].reshape(npos, cin_g).T @ g2[:, co]
                    gwin[..., ci] += (g2[:, co] @ kd[i, j, l, :, co].T).reshape(gwin.shape[:-1] + (cin_g,))
        gx = gxp[:, ph0:ph0 + H, pw0:pw0 + W, pl0:pl0 + L, :] if padded else gxp
        return np.ascontiguousarray(gx), gk

    return record("conv3d", out, (x, k), vjp)
