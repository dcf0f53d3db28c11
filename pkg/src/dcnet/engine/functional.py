"""Neural-network primitives on :class:`~dcnet.engine.tensor.Tensor`."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor

GN_EPS = 1e-5


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    b, c = xp.shape[:2]
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, : stride * ho : stride, : stride * wo : stride]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * k * k)


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int | None = None) -> Tensor:
    """2D cross-correlation (no kernel flip), square odd kernels.

    ``padding=None`` selects same-size padding ``(k-1)//2``.
    """
    if x.ndim != 4 or kernel.ndim != 4:
        raise ValueError(f"conv2d expects 4D input and kernel, got {x.shape} and {kernel.shape}")
    b, cin, h, w = x.shape
    cout, kcin, k, k2 = kernel.shape
    if kcin != cin:
        raise ValueError(f"kernel expects {kcin} input channels, input has {cin}")
    if k != k2:
        raise ValueError("only square kernels are supported")
    if k % 2 == 0:
        raise ValueError(f"kernel size must be odd, got {k}")
    if stride not in (1, 2):
        raise ValueError(f"stride must be 1 or 2, got {stride}")
    p = (k - 1) // 2 if padding is None else padding
    ho = (h + 2 * p - k) // stride + 1
    wo = (w + 2 * p - k) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError("kernel larger than padded input")

    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    wmat = kernel.data.reshape(cout, -1)
    cols = _im2col(xp, k, stride, ho, wo)
    out = (cols @ wmat.T).reshape(b, ho, wo, cout).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        gk = gx = None
        if kernel.requires_grad:
            gk = (g2.T @ _im2col(xp, k, stride, ho, wo)).reshape(kernel.shape)
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(b, ho, wo, cin, k, k).transpose(0, 3, 4, 5, 1, 2)
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[:, :, i, j]
            gx = gxp[:, :, p : p + h, p : p + w] if p else gxp
        return gx, gk

    return Tensor.make(out, (x, kernel), backward)


def group_norm(x: Tensor, groups: int, gamma: Tensor, beta: Tensor, eps: float = GN_EPS) -> Tensor:
    """Group normalization with per-channel affine."""
    b, c = x.shape[:2]
    if c % groups:
        raise ValueError(f"{c} channels not divisible into {groups} groups")
    if eps <= 0:
        raise ValueError("eps must be positive")
    xg = x.data.reshape(b, groups, -1)
    n = xg.shape[2]
    xc = xg - xg.mean(axis=2, keepdims=True)
    var = np.einsum("bgn,bgn->bg", xc, xc)[..., None] / n
    rstd = (1.0 / np.sqrt(var + eps)).astype(xc.dtype)
    xc *= rstd
    xhat = xc.reshape(x.shape)
    bshape = (1, c) + (1,) * (x.ndim - 2)
    out = xhat * gamma.data.reshape(bshape)
    out += beta.data.reshape(bshape)

    def backward(g):
        red = (0,) + tuple(range(2, x.ndim))
        ggamma = np.einsum("bcn,bcn->c", g.reshape(b, c, -1), xhat.reshape(b, c, -1)) if gamma.requires_grad else None
        gbeta = g.sum(axis=red) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = (g * gamma.data.reshape(bshape)).reshape(b, groups, -1)
            xh = xhat.reshape(b, groups, -1)
            m1 = dxhat.mean(axis=2, keepdims=True)
            m2 = np.einsum("bgn,bgn->bg", dxhat, xh)[..., None] / n
            dxhat -= m1
            dxhat -= xh * m2.astype(xh.dtype)
            dxhat *= rstd
            gx = dxhat.reshape(x.shape)
        return gx, ggamma, gbeta

    return Tensor.make(out, (x, gamma, beta), backward)


def celu(x: Tensor) -> Tensor:
    """CELU with unit scale: x for x >= 0, exp(x) - 1 below."""
    # branch-free: masked numpy ops are far slower than two full passes
    out = np.minimum(x.data, 0)
    np.expm1(out, out=out)
    out += np.maximum(x.data, 0)

    def backward(g):
        d = np.minimum(out, 0)
        d += 1
        d *= g
        return (d,)

    return Tensor.make(out, (x,), backward)


def relu(x: Tensor) -> Tensor:
    def backward(g):
        return (g * (x.data > 0),)

    return Tensor.make(np.maximum(x.data, 0), (x,), backward)


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "celu":
        return celu(x)
    if kind == "relu":
        return relu(x)
    raise ValueError(f"unknown activation {kind!r}")


def global_avg_pool(x: Tensor) -> Tensor:
    b, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))

    def backward(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).astype(g.dtype),)

    return Tensor.make(out, (x,), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    if x.shape[-1] != weight.shape[1]:
        raise ValueError(f"linear: input features {x.shape[-1]} != weight columns {weight.shape[1]}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ValueError(f"linear: bias shape {bias.shape} != ({weight.shape[0]},)")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def backward(g):
        gx = g @ weight.data if x.requires_grad else None
        gw = g.T @ x.data if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor.make(out, parents, backward)


def _interp_matrix(n_in: int, factor: int, dtype) -> np.ndarray:
    # half-pixel centres (align_corners=False), sources clamped at the border
    n_out = n_in * factor
    src = (np.arange(n_out) + 0.5) / factor - 0.5
    src = np.clip(src, 0.0, None)
    i0 = np.minimum(np.floor(src).astype(int), n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    w1 = src - i0
    m = np.zeros((n_out, n_in), dtype=np.float64)
    np.add.at(m, (np.arange(n_out), i0), 1.0 - w1)
    np.add.at(m, (np.arange(n_out), i1), w1)
    return m.astype(dtype)


def bilinear_upsample(x: Tensor, factor: int) -> Tensor:
    if factor < 1:
        raise ValueError(f"upsampling factor must be >= 1, got {factor}")
    if factor == 1:
        return Tensor.make(x.data.copy(), (x,), lambda g: (g,))
    b, c, h, w = x.shape
    uy = _interp_matrix(h, factor, x.data.dtype)
    ux = _interp_matrix(w, factor, x.data.dtype)
    out = np.matmul(np.matmul(uy, x.data), ux.T)

    def backward(g):
        return (np.matmul(np.matmul(uy.T, g), ux),)

    return Tensor.make(out, (x,), backward)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label]."""
    labels = np.asarray(labels, dtype=np.int64)
    b, n = logits.shape
    if labels.shape != (b,):
        raise ValueError(f"expected {b} labels, got shape {labels.shape}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= n:
        raise ValueError(f"label out of range [0, {n})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    loss = -logp[np.arange(b), labels].mean()

    def backward(g):
        p = np.exp(logp)
        p[np.arange(b), labels] -= 1.0
        return (p * (g / b),)

    return Tensor.make(np.asarray(loss), (logits,), backward)


def mse_loss(pred: Tensor, target) -> Tensor:
    t = target if isinstance(target, Tensor) else Tensor(target)
    if pred.shape != t.shape:
        raise ValueError(f"mse: shape mismatch {pred.shape} vs {t.shape}")
    diff = pred.data - t.data
    n = diff.size

    def backward(g):
        gp = diff * (2.0 * g / n)
        return gp, -gp

    return Tensor.make(np.asarray(np.mean(diff * diff)), (pred, t), backward)


def loss(pred: Tensor, target, kind: str) -> Tensor:
    if kind == "cross_entropy":
        return cross_entropy(pred, target)
    if kind == "mse":
        return mse_loss(pred, target)
    raise ValueError(f"unknown loss {kind!r}")


def channel_offset(x: Tensor, d: Tensor, t: float) -> Tensor:
    """x + d*t with ``d`` a per-channel vector broadcast over batch and space."""
    c = x.shape[1]
    dd = d.data.reshape(1, c, 1, 1)
    tt = x.data.dtype.type(t)

    def backward(g):
        return g, (g.sum(axis=(0, 2, 3)) * tt if d.requires_grad else None)

    return Tensor.make(x.data + dd * tt, (x, d), backward)


__all__ = [
    "conv2d",
    "group_norm",
    "celu",
    "relu",
    "activation",
    "global_avg_pool",
    "linear",
    "bilinear_upsample",
    "cross_entropy",
    "mse_loss",
    "loss",
    "channel_offset",
]
