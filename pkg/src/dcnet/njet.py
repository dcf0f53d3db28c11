"""Gaussian derivative basis and N-jet filters.

Grid convention: a kernel of odd ``size`` is sampled at integer offsets
``-half..half``; column index maps to x, row index maps to y (rows grow
downward, as in images). ``values[i, j] = G^l(x_j) * G^k(y_i)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import convolve2d


def basis_orders(order: int) -> list[tuple[int, int]]:
    """(l, k) pairs with l + k <= order, lexicographic."""
    return [(l, k) for l in range(order + 1) for k in range(order + 1 - l)]


def n_coefficients(order: int) -> int:
    return (order + 1) * (order + 2) // 2


def hermite(n: int, u):
    """Physicists' Hermite polynomial H_n(u) by the three-term recurrence."""
    if n < 0:
        raise ValueError("hermite order must be >= 0")
    u = np.asarray(u, dtype=np.float64)
    h_prev = np.ones_like(u)
    if n == 0:
        return h_prev if h_prev.ndim else float(h_prev)
    h = 2.0 * u
    for m in range(1, n):
        h_prev, h = h, 2.0 * u * h - 2.0 * m * h_prev
    return h if h.ndim else float(h)


def gaussian_deriv_1d(n: int, sigma: float, x):
    """n-th derivative of the unit-mass 1D Gaussian with std ``sigma``."""
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if n < 0:
        raise ValueError("derivative order must be >= 0")
    x = np.asarray(x, dtype=np.float64)
    s2 = sigma * math.sqrt(2.0)
    g = np.exp(-(x * x) / (2.0 * sigma * sigma)) / (sigma * math.sqrt(2.0 * math.pi))
    out = (-1.0 / s2) ** n * np.asarray(hermite(n, x / s2)) * g
    return out if out.ndim else float(out)


def grid(size: int) -> np.ndarray:
    if size < 1 or size % 2 == 0:
        raise ValueError(f"kernel size must be odd and positive, got {size}")
    half = (size - 1) // 2
    return np.arange(-half, half + 1, dtype=np.float64)


def support_size(sigma: float) -> int:
    """Odd kernel size covering [-2 sigma, 2 sigma]; never below 3."""
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    return max(3, 2 * math.ceil(2.0 * sigma) + 1)


@dataclass
class SampledKernel:
    size: int
    values: np.ndarray
    sigma_used: float
    support_halfwidth: float


@dataclass
class NJetFilter:
    order: int
    sigma: float
    alphas: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.order < 0:
            raise ValueError("order must be >= 0")
        if self.sigma <= 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        self.alphas = np.asarray(self.alphas, dtype=np.float64).reshape(-1)
        if self.alphas.size != n_coefficients(self.order):
            raise ValueError(
                f"order {self.order} needs {n_coefficients(self.order)} coefficients, got {self.alphas.size}"
            )


def _kernel(values: np.ndarray, sigma: float) -> SampledKernel:
    size = values.shape[0]
    return SampledKernel(size=size, values=values, sigma_used=float(sigma), support_halfwidth=(size - 1) / 2)


def gaussian_kernel_2d(l: int, k: int, sigma: float, size: int) -> SampledKernel:
    xs = grid(size)
    gx = np.asarray(gaussian_deriv_1d(l, sigma, xs))
    gy = np.asarray(gaussian_deriv_1d(k, sigma, xs))
    return _kernel(np.outer(gy, gx), sigma)


def basis_1d(sigma: float, size: int, max_order: int) -> np.ndarray:
    """Rows ``n = 0..max_order`` of sampled 1D Gaussian derivatives."""
    xs = grid(size)
    return np.stack([np.asarray(gaussian_deriv_1d(n, sigma, xs)) for n in range(max_order + 1)])


def basis_1d_many(sigmas, size: int, max_order: int) -> np.ndarray:
    """Vectorized :func:`basis_1d` over an array of scales: shape (..., max_order+1, size)."""
    sigmas = np.asarray(sigmas, dtype=np.float64)
    if np.any(sigmas <= 0):
        raise ValueError("sigma must be positive")
    xs = grid(size)
    sig = sigmas[..., None]
    s2 = sig * math.sqrt(2.0)
    u = xs / s2
    g = np.exp(-(xs * xs) / (2.0 * sig * sig)) / (sig * math.sqrt(2.0 * math.pi))
    rows = [(-1.0 / s2) ** n * hermite(n, u) * g for n in range(max_order + 1)]
    return np.stack(rows, axis=-2)


def basis_stack(sigma: float, size: int, order: int) -> np.ndarray:
    """All 2D basis kernels for ``order``, shape (n_coefficients, size, size)."""
    g = basis_1d(sigma, size, order)
    return np.stack([np.outer(g[k], g[l]) for l, k in basis_orders(order)])


def basis_stack_dsigma(sigma: float, size: int, order: int) -> np.ndarray:
    """d/dsigma of :func:`basis_stack` at fixed support (heat-equation identity)."""
    g = basis_1d(sigma, size, order + 2)
    return np.stack(
        [sigma * (np.outer(g[k], g[l + 2]) + np.outer(g[k + 2], g[l])) for l, k in basis_orders(order)]
    )


def assemble_filter(f: NJetFilter, size: int) -> SampledKernel:
    basis = basis_stack(f.sigma, size, f.order)
    return _kernel(np.tensordot(f.alphas, basis, axes=1), f.sigma)


def dfilter_dsigma(f: NJetFilter, size: int) -> SampledKernel:
    """Derivative of the sampled filter w.r.t. sigma, support held fixed.

    Uses dG^{l,k}/dsigma = sigma * (G^{l+2,k} + G^{l,k+2}).
    """
    dbasis = basis_stack_dsigma(f.sigma, size, f.order)
    return _kernel(np.tensordot(f.alphas, dbasis, axes=1), f.sigma)


def steer_second_order(theta: float) -> tuple[float, float, float]:
    """Weights on (G^{2,0}, G^{1,1}, G^{0,2}) for the second derivative at angle theta.

    Angles are counter-clockwise with image rows growing downward, so the
    steered direction is (cos theta, -sin theta) in (column, row) coordinates.
    """
    c, s = math.cos(theta), math.sin(theta)
    return c * c, -2.0 * c * s, s * s


def steered_kernel(theta: float, sigma: float, size: int) -> np.ndarray:
    c20, c11, c02 = steer_second_order(theta)
    return (
        c20 * gaussian_kernel_2d(2, 0, sigma, size).values
        + c11 * gaussian_kernel_2d(1, 1, sigma, size).values
        + c02 * gaussian_kernel_2d(0, 2, sigma, size).values
    )


def directional_second_derivative(theta: float, sigma: float, size: int) -> np.ndarray:
    """Closed form of the second derivative of the 2D Gaussian along angle theta.

    Same direction convention as :func:`steer_second_order`.
    """
    xs = grid(size)
    x = xs[None, :]
    y = xs[:, None]
    proj = math.cos(theta) * x - math.sin(theta) * y
    g = np.exp(-(x * x + y * y) / (2 * sigma * sigma)) / (2 * math.pi * sigma * sigma)
    return (proj * proj / sigma**4 - 1.0 / sigma**2) * g


def semigroup_residual(l: int, k: int, t: float, tp: float, size: int) -> float:
    """Max |G^{l,k}(t) * G(t') - G^{l,k}(t + t')| on the sampled grid.

    ``t`` and ``tp`` are variances. The smoothing kernel G(t') is scaled to
    unit discrete mass so very narrow Gaussians act as the identity.
    """
    if t <= 0 or tp <= 0:
        raise ValueError("variances must be positive")
    a = gaussian_kernel_2d(l, k, math.sqrt(t), size).values
    smooth = gaussian_kernel_2d(0, 0, math.sqrt(tp), size).values
    smooth = smooth / smooth.sum()
    conv = convolve2d(a, smooth, mode="same")
    direct = gaussian_kernel_2d(l, k, math.sqrt(t + tp), size).values
    return float(np.max(np.abs(conv - direct)))


def njet_taylor_check(order_pair: tuple[int, int], sigma: float, extent: float = 5.0) -> float:
    """Response of G^{l,k} to the monomial x^l y^k at the grid centre.

    The kernel is sampled over +-``extent`` sigma. Up to the correlation
    sign the result approximates l! * k!.
    """
    l, k = order_pair
    if l + k > 2:
        raise ValueError("only orders with l + k <= 2 are checked")
    size = 2 * math.ceil(extent * sigma) + 1
    xs = grid(size)
    image = np.outer(xs**k, xs**l)
    kern = gaussian_kernel_2d(l, k, sigma, size).values
    # correlation evaluated at the centre pixel
    return float(np.sum(image * kern))
