"""Structured-receptive-field convolutions.

Kernels are sampled N-jet filters whose coefficients ``alphas`` and log2
scale ``s`` (sigma = 2**s) are learnable tensors. Two execution paths share
one parametrization:

* ``dense`` materializes the full ``[Cout, Cin, k, k]`` kernel and calls
  :func:`~dcnet.engine.conv2d`;
* ``separable`` exploits G^{l,k} = G^l(x) G^k(y): channels are mixed with
  the coefficients first, then 1D Gaussian-derivative passes are applied as
  banded Toeplitz matrix products. Its cost does not grow with kernel size.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import njet
from .engine import Tensor, conv2d

VARIANTS = ("shared_sigma", "per_channel_sigma", "meta_sigma_t", "meta_sigma_t2", "meta_sigma_alpha_t")
META_VARIANTS = ("meta_sigma_t", "meta_sigma_t2", "meta_sigma_alpha_t")
PER_CHANNEL_SIZE = 7
LN2 = math.log(2.0)

ALPHA_STD = 0.1
SIGMA_STD = 2.0 / 3.0


class ScaleOverflowError(ArithmeticError):
    """A log2-scale parameter left the allowed range; training has diverged."""


@dataclass(frozen=True)
class TimeClipRule:
    tau: float = 0.5
    t_min: float = -0.5
    t_max: float = 2.5

    def __post_init__(self):
        if not self.t_min < self.t_max:
            raise ValueError("t_min must be below t_max")
        if self.tau <= 0:
            raise ValueError("tau must be positive")

    def __call__(self, t: float) -> float:
        return self.tau * min(max(t, self.t_min), self.t_max)


@dataclass
class SrfConvParams:
    variant: str
    cout: int
    cin: int
    order: int = 2
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def parameters(self) -> list[Tensor]:
        return list(self.tensors.values())

    @property
    def is_meta(self) -> bool:
        return self.variant in META_VARIANTS


def init_srf_params(cout: int, cin: int, variant: str = "shared_sigma", seed=0, order: int = 2) -> SrfConvParams:
    """Draw initial parameters; ``seed`` may be an int or a numpy Generator."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown SRF variant {variant!r}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    nb = njet.n_coefficients(order)
    ashape = (cout, cin, nb)

    def p(std, shape=()):
        return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)

    t: dict[str, Tensor] = {}
    if variant == "shared_sigma":
        t["alphas"] = p(ALPHA_STD, ashape)
        t["sigma_log2"] = p(SIGMA_STD)
    elif variant == "per_channel_sigma":
        t["alphas"] = p(ALPHA_STD, ashape)
        t["sigma_log2"] = p(SIGMA_STD, (cout, cin))
    elif variant == "meta_sigma_t":
        t["alphas"] = p(ALPHA_STD, ashape)
        t["a"] = p(SIGMA_STD)
        t["b"] = p(0.1)
    elif variant == "meta_sigma_t2":
        t["alphas"] = p(ALPHA_STD, ashape)
        t["a"] = p(SIGMA_STD)
        t["b"] = p(SIGMA_STD)
        t["c"] = p(0.1)
    else:
        t["a_s"] = p(SIGMA_STD)
        t["b_s"] = p(0.1)
        t["a_alpha"] = p(0.1, ashape)
        t["b_alpha"] = p(0.05, ashape)
    for name, tt in t.items():
        tt.name = name
    return SrfConvParams(variant=variant, cout=cout, cin=cin, order=order, tensors=t)


def eval_meta(params: SrfConvParams, t: float, clip: TimeClipRule = TimeClipRule()) -> tuple[Tensor, Tensor]:
    """Log2 scale and coefficients of a meta-parametrized layer at time ``t``."""
    if not params.is_meta:
        raise ValueError(f"eval_meta called on non-meta variant {params.variant!r}")
    u = clip(float(t))
    p = params.tensors
    if params.variant == "meta_sigma_t":
        return p["a"] * u + p["b"], p["alphas"]
    if params.variant == "meta_sigma_t2":
        return p["a"] * (u * u) + p["b"] * u + p["c"], p["alphas"]
    return p["a_s"] * u + p["b_s"], p["a_alpha"] * u + p["b_alpha"]


def scale_and_coefficients(
    params: SrfConvParams, t: float = 0.0, clip: TimeClipRule = TimeClipRule()
) -> tuple[Tensor, Tensor]:
    if params.is_meta:
        return eval_meta(params, t, clip)
    return params["sigma_log2"], params["alphas"]


def _check_bound(s: np.ndarray, bound: float) -> None:
    if not np.all(np.isfinite(s)) or np.any(np.abs(s) > bound):
        raise ScaleOverflowError(f"log2 scale {np.max(np.abs(s)):.3g} exceeds bound {bound}")


def kernel_size_for(params: SrfConvParams, s: Tensor) -> int:
    if params.variant == "per_channel_sigma":
        return PER_CHANNEL_SIZE
    return njet.support_size(float(2.0 ** float(s.data)))


def njet_weights(alphas: Tensor, s: Tensor, size: int, order: int = 2) -> Tensor:
    """Sampled kernels sum_b alphas[..., b] * G_b(sigma = 2**s) on a ``size`` grid.

    ``s`` is a scalar (one scale for every filter) or shaped like the leading
    two axes of ``alphas`` (one scale per filter).
    """
    sd = np.asarray(s.data, dtype=np.float64)
    sigma = np.exp2(sd)
    g = njet.basis_1d_many(sigma, size, order + 2)  # (..., order+3, size)
    pairs = njet.basis_orders(order)
    basis = np.stack([g[..., k, :, None] * g[..., l, None, :] for l, k in pairs], axis=-3)
    dbasis = np.stack(
        [
            sigma[..., None, None]
            * (g[..., k, :, None] * g[..., l + 2, None, :] + g[..., k + 2, :, None] * g[..., l, None, :])
            for l, k in pairs
        ],
        axis=-3,
    )
    a = alphas.data.astype(np.float64)
    if sd.ndim == 0:
        w = np.tensordot(a, basis, axes=([2], [0]))
    else:
        w = np.einsum("oib,oibyx->oiyx", a, basis)

    def backward(gout):
        g64 = gout.astype(np.float64)
        if sd.ndim == 0:
            ga = np.tensordot(g64, basis, axes=([2, 3], [1, 2]))
            dw = np.tensordot(a, dbasis, axes=([2], [0]))
            gs = np.sum(g64 * dw) * sigma * LN2
        else:
            ga = np.einsum("oiyx,oibyx->oib", g64, basis)
            dw = np.einsum("oib,oibyx->oiyx", a, dbasis)
            gs = np.sum(g64 * dw, axis=(2, 3)) * sigma * LN2
        return ga, np.asarray(gs)

    return Tensor.make(w, (alphas, s), backward)


def materialize_weights(
    params: SrfConvParams, t: float = 0.0, clip: TimeClipRule = TimeClipRule(), sigma_bound: float = 6.0
) -> Tensor:
    s, alphas = scale_and_coefficients(params, t, clip)
    _check_bound(s.data, sigma_bound)
    return njet_weights(alphas, s, kernel_size_for(params, s), params.order)


def _toeplitz(g: np.ndarray, n_in: int, stride: int) -> np.ndarray:
    """Matrix T with (x @ T)[o] = sum_j g[j] x[stride*o + j - p], zero outside."""
    k = g.shape[-1]
    p = (k - 1) // 2
    n_out = (n_in - 1) // stride + 1
    idx = np.arange(n_in)[:, None] - stride * np.arange(n_out)[None, :] + p
    mask = (idx >= 0) & (idx < k)
    return np.where(mask, g[np.clip(idx, 0, k - 1)], 0.0)


def separable_njet_conv(x: Tensor, alphas: Tensor, s: Tensor, stride: int = 1, order: int = 2) -> Tensor:
    """Same-padded SRF convolution with one shared scale, via separable passes.

    Numerically equivalent to ``conv2d(x, njet_weights(alphas, s, k), stride)``
    with ``k = support_size(2**s)``.
    """
    if s.data.ndim != 0:
        raise ValueError("separable path needs a single shared scale")
    if stride not in (1, 2):
        raise ValueError(f"stride must be 1 or 2, got {stride}")
    b, cin, h, w = x.shape
    cout = alphas.shape[0]
    if alphas.shape[1] != cin:
        raise ValueError(f"coefficients expect {alphas.shape[1]} input channels, input has {cin}")
    dtype = x.data.dtype
    sigma = float(np.exp2(float(s.data)))
    k = njet.support_size(sigma)
    g = njet.basis_1d(sigma, k, order + 2)
    pairs = njet.basis_orders(order)
    nb = len(pairs)

    txm = [_toeplitz(g[n], w, stride).astype(dtype) for n in range(order + 1)]  # (w, wo)
    tym = [_toeplitz(g[n], h, stride).astype(dtype) for n in range(order + 1)]  # (h, ho)
    tym_t = [m.T.copy() for m in tym]
    # Toeplitz forms of d(filter)/d(sigma) = sigma * g_{n+2}, for the scale gradient
    dxm = [_toeplitz(sigma * g[n + 2], w, stride).astype(dtype) for n in range(order + 1)]
    dym_t = [_toeplitz(sigma * g[n + 2], h, stride).T.astype(dtype).copy() for n in range(order + 1)]
    ho, wo = tym[0].shape[1], txm[0].shape[1]

    # channel-major layout so mixing is one GEMM; mixed rows ordered (basis, cout)
    amix = np.ascontiguousarray(alphas.data.transpose(2, 0, 1).reshape(nb * cout, cin)).astype(dtype)
    xt = np.ascontiguousarray(x.data.transpose(1, 0, 2, 3)).reshape(cin, b * h * w)
    z = (amix @ xt).reshape(nb, cout * b, h, w)
    us = []
    for l in range(order + 1):
        u = None
        for bi, (ll, kk) in enumerate(pairs):
            if ll == l:
                term = np.matmul(tym_t[kk], z[bi])
                u = term if u is None else u + term
        us.append(u.reshape(-1, w))  # (cout*b*ho, w)
    out_t = us[0] @ txm[0]
    for l in range(1, order + 1):
        out_t += us[l] @ txm[l]
    out = np.ascontiguousarray(out_t.reshape(cout, b, ho, wo).transpose(1, 0, 2, 3))

    def backward(gout):
        gx = ga = gs = None
        gt = np.ascontiguousarray(gout.transpose(1, 0, 2, 3)).reshape(-1, wo)
        dus = [(gt @ txm[l].T).reshape(cout * b, ho, w) for l in range(order + 1)]
        dz = np.empty_like(z)
        dsigma = 0.0
        for bi, (l, kk) in enumerate(pairs):
            np.matmul(tym[kk], dus[l], out=dz[bi])
            if s.requires_grad:
                dsigma += float(np.vdot(dus[l].ravel(), np.matmul(dym_t[kk], z[bi]).ravel()))
        dzf = dz.reshape(nb * cout, b * h * w)
        if x.requires_grad:
            gx = np.ascontiguousarray((amix.T @ dzf).reshape(cin, b, h, w).transpose(1, 0, 2, 3))
        if alphas.requires_grad:
            ga = (dzf @ xt.T).reshape(nb, cout, cin).transpose(1, 2, 0)
        if s.requires_grad:
            for l in range(order + 1):
                dsigma += float(np.vdot(gt.ravel(), (us[l] @ dxm[l]).ravel()))
            gs = np.asarray(dsigma * sigma * LN2)
        return gx, ga, gs

    return Tensor.make(out, (x, alphas, s), backward)


def srf_conv_forward(
    x: Tensor,
    params: SrfConvParams,
    t: float = 0.0,
    stride: int = 1,
    method: str = "dense",
    clip: TimeClipRule = TimeClipRule(),
    sigma_bound: float = 6.0,
) -> Tensor:
    """Apply an SRF layer; ``method`` is ``dense`` or ``separable``.

    The per-channel-scale variant always runs densely on its fixed 7x7 grid.
    """
    if method == "dense" or params.variant == "per_channel_sigma":
        return conv2d(x, materialize_weights(params, t, clip, sigma_bound), stride=stride)
    if method != "separable":
        raise ValueError(f"unknown SRF method {method!r}")
    s, alphas = scale_and_coefficients(params, t, clip)
    _check_bound(s.data, sigma_bound)
    return separable_njet_conv(x, alphas, s, stride=stride, order=params.order)


def sigma_values(params: SrfConvParams, t: float = 0.0, clip: TimeClipRule = TimeClipRule()) -> np.ndarray:
    s, _ = scale_and_coefficients(params, t, clip)
    return np.exp2(np.asarray(s.data, dtype=np.float64))


class SrfConv:
    """An SRF convolution layer (parameters plus execution settings)."""

    def __init__(
        self,
        cout: int,
        cin: int,
        variant: str = "shared_sigma",
        stride: int = 1,
        seed=0,
        method: str = "separable",
        clip: TimeClipRule = TimeClipRule(),
        sigma_bound: float = 6.0,
        order: int = 2,
    ):
        self.params = init_srf_params(cout, cin, variant, seed, order)
        self.stride = stride
        self.method = method
        self.clip = clip
        self.sigma_bound = sigma_bound

    @property
    def time_dependent(self) -> bool:
        return self.params.is_meta

    def named_parameters(self) -> dict[str, Tensor]:
        return dict(self.params.tensors)

    def sigmas(self, t: float = 0.0) -> np.ndarray:
        return sigma_values(self.params, t, self.clip)

    def kernel_size(self, t: float = 0.0) -> int:
        s, _ = scale_and_coefficients(self.params, t, self.clip)
        return kernel_size_for(self.params, s)

    def __call__(self, x: Tensor, t: float = 0.0) -> Tensor:
        return srf_conv_forward(x, self.params, t, self.stride, self.method, self.clip, self.sigma_bound)
