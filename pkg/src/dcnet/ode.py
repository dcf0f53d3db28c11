"""Adaptive Dormand-Prince 5(4) integration and adjoint gradients.

The integrator works on raw numpy arrays in the state's dtype; the public
entry points wrap a :class:`VectorField` whose ``eval`` takes and returns
:class:`~dcnet.engine.Tensor`. :func:`odeint` exposes a whole integration
as one differentiable op whose backward pass runs the adjoint ODE.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .engine import NonFiniteError, Tensor, enable_grad, grad, is_grad_enabled, no_grad

# Dormand-Prince tableau
_C = (0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0)
_A = (
    (),
    (1 / 5,),
    (3 / 40, 9 / 40),
    (44 / 45, -56 / 15, 32 / 9),
    (19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729),
    (9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656),
    (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84),
)
_B5 = (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0)
_B4 = (5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40)
_E = tuple(b5 - b4 for b5, b4 in zip(_B5, _B4))

STAGES_PER_STEP = 6


class SolverError(RuntimeError):
    pass


class MaxStepsExceeded(SolverError):
    """Step budget exhausted; usually a sign of stiffness or blow-up."""


@dataclass(frozen=True)
class SolverConfig:
    rtol: float = 1e-3
    atol: float = 1e-3
    max_steps: int = 10000
    safety: float = 0.9
    min_factor: float = 0.2
    max_factor: float = 10.0
    max_first_step: float = 1.0  # fraction of the interval

    def __post_init__(self):
        if self.rtol <= 0 or self.atol <= 0:
            raise ValueError("rtol and atol must be positive")
        if self.max_steps <= 0:
            raise ValueError("max_steps must be positive")
        if not 0 < self.min_factor <= 1 <= self.max_factor:
            raise ValueError("need 0 < min_factor <= 1 <= max_factor")
        if not 0 < self.max_first_step <= 1:
            raise ValueError("max_first_step must lie in (0, 1]")


@dataclass
class IntegrationResult:
    final_state: Tensor
    nfe: int
    accepted_steps: int
    rejected_steps: int
    trajectory: list[tuple[float, Tensor]] | None = None
    step_nfe: list[int] = field(default_factory=list)  # cumulative nfe after each accepted step


@dataclass
class VectorField:
    eval: Callable[[Tensor, float], Tensor]
    parameters: list[Tensor] = field(default_factory=list)


def _rms(x: np.ndarray) -> float:
    return float(np.sqrt(np.mean(np.square(x, dtype=np.float64))))


def _as_fn(f: VectorField) -> Callable[[np.ndarray, float], np.ndarray]:
    def fn(y, t):
        with no_grad():
            out = f.eval(Tensor(y), t).data
        if out.shape != y.shape:
            raise ValueError(f"vector field changed the state shape {y.shape} -> {out.shape}")
        return out

    return fn


def _initial_step(fn, y0: np.ndarray, t0: float, t1: float, cfg: SolverConfig):
    """Hairer's starting-step heuristic; returns (step, f(y0, t0)). Costs 2 evaluations."""
    span = (t1 - t0) * cfg.max_first_step
    f0 = fn(y0, t0)
    scale = cfg.atol + cfg.rtol * np.abs(y0)
    d0 = _rms(y0 / scale)
    d1 = _rms(f0 / scale)
    h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    h0 = min(h0, span)
    f1 = fn(y0 + y0.dtype.type(h0) * f0, t0 + h0)
    d2 = _rms((f1 - f0) / scale) / h0
    if max(d1, d2) <= 1e-15:
        return span, f0
    h1 = (0.01 / max(d1, d2)) ** (1.0 / 5.0)
    return min(100.0 * h0, h1, span), f0


def _check(y: np.ndarray, t: float) -> None:
    if not np.all(np.isfinite(y)):
        raise NonFiniteError(f"non-finite state during integration at t={t:.6g}")


def _dopri5(fn, y0: np.ndarray, t0: float, t1: float, cfg: SolverConfig, record: bool = False, norm_mask=None):
    """Core loop on arrays. Returns (y1, nfe, accepted, rejected, trajectory, step_nfe)."""
    if not t1 > t0:
        raise ValueError(f"need t1 > t0, got [{t0}, {t1}]")
    _check(y0, t0)
    dt = y0.dtype.type
    h, k1 = _initial_step(fn, y0, t0, t1, cfg)
    nfe = 2
    accepted = rejected = 0
    t, y = t0, y0
    traj = [(t0, y0.copy())] if record else None
    step_nfe: list[int] = []
    while t < t1:
        if accepted + rejected >= cfg.max_steps:
            raise MaxStepsExceeded(f"exceeded {cfg.max_steps} steps at t={t:.6g} of [{t0}, {t1}]")
        landing = t + h >= t1 or (t1 - (t + h)) <= 1e-12 * max(1.0, abs(t1))
        if landing:
            h = t1 - t
        ks = [k1]
        for i in range(1, 7):
            yi = y.copy()
            for a, k in zip(_A[i], ks):
                if a:
                    yi += dt(h * a) * k
            ks.append(fn(yi, t + _C[i] * h))
        nfe += STAGES_PER_STEP
        y_new = yi  # stage 7 is evaluated at the 5th-order solution (FSAL)
        err = np.zeros_like(y)
        for e, k in zip(_E, ks):
            if e:
                err += dt(h * e) * k
        scale = cfg.atol + cfg.rtol * np.maximum(np.abs(y), np.abs(y_new))
        ratio = err / scale
        if norm_mask is not None:
            ratio = ratio[norm_mask]
        norm = _rms(ratio)
        if not np.isfinite(norm):
            _check(y_new, t + h)
            raise NonFiniteError(f"non-finite error estimate at t={t:.6g}")
        if norm <= 1.0:
            t = t1 if landing else t + h
            y = y_new
            k1 = ks[6]
            accepted += 1
            step_nfe.append(nfe)
            if record:
                traj.append((t, y.copy()))
            factor = cfg.max_factor if norm == 0.0 else cfg.safety * norm ** -0.2
            h = h * min(cfg.max_factor, max(cfg.min_factor, factor))
        else:
            rejected += 1
            factor = cfg.safety * norm ** -0.2
            h = h * min(1.0, max(cfg.min_factor, factor))
    return y, nfe, accepted, rejected, traj, step_nfe


def initial_step(f: VectorField, h0: Tensor, t0: float, cfg: SolverConfig = SolverConfig(), t1: float | None = None) -> float:
    """Starting step size for integrating ``f`` from ``t0``; clipped to ``t1 - t0``."""
    span_end = t0 + 1.0 if t1 is None else t1
    step, _ = _initial_step(_as_fn(f), h0.data, t0, span_end, cfg)
    return step


def dopri5_integrate(
    f: VectorField, h0: Tensor, t0: float, t1: float, cfg: SolverConfig = SolverConfig(), record: bool = False
) -> IntegrationResult:
    """Integrate dh/dt = f(h, t) from t0 to t1 without recording a graph."""
    y, nfe, acc, rej, traj, step_nfe = _dopri5(_as_fn(f), h0.data, t0, t1, cfg, record)
    trajectory = [(t, Tensor(s)) for t, s in traj] if record else None
    return IntegrationResult(Tensor(y), nfe, acc, rej, trajectory, step_nfe)


def adjoint_grad(
    f: VectorField,
    h1: Tensor,
    t0: float,
    t1: float,
    dL_dh1: Tensor | np.ndarray,
    cfg: SolverConfig = SolverConfig(),
    stats: dict | None = None,
    checkpoints: Sequence[tuple[float, np.ndarray]] | None = None,
) -> tuple[np.ndarray, list[np.ndarray]]:
    """Gradients of a loss w.r.t. the initial state and ``f.parameters``.

    ``h1`` is the forward solution at ``t1``. The augmented state
    [h, a, g] is integrated in reversed time s = -t, so that
    dh/ds = -f, da/ds = a df/dh and dg/ds = a df/dtheta, starting from
    a = dL/dh1 and g = 0. Each right-hand side records f once and takes one
    vector-Jacobian product.

    ``checkpoints`` are ascending (t, state) pairs from the forward pass,
    starting at ``t0`` and ending at ``t1``. When given, the backward pass
    restarts h from the stored state at each of them, since reconstructing
    h by integrating backward is unstable for contracting fields.
    """
    y1 = h1.data
    dtype = y1.dtype
    a1 = np.asarray(dL_dh1.data if isinstance(dL_dh1, Tensor) else dL_dh1, dtype=dtype)
    params = list(f.parameters)
    shapes = [y1.shape, y1.shape] + [p.shape for p in params]
    sizes = [int(np.prod(s)) for s in shapes]
    offsets = np.cumsum([0] + sizes)
    n = y1.size

    def unpack(z):
        return [z[offsets[i] : offsets[i + 1]].reshape(shapes[i]) for i in range(len(shapes))]

    def rhs(z, s):
        h, a = unpack(z)[:2]
        with enable_grad():
            ht = Tensor(h, requires_grad=True)
            out = f.eval(ht, -s)
        vjps = grad([out], [ht] + params, [a])
        parts = [-out.data.reshape(-1)] + [v.reshape(-1).astype(dtype, copy=False) for v in vjps]
        return np.concatenate(parts)

    z = np.concatenate([y1.reshape(-1), a1.reshape(-1), np.zeros(int(offsets[-1]) - 2 * n, dtype=dtype)])
    if not np.any(a1):
        return a1.copy(), [np.zeros(p.shape, dtype=p.data.dtype) for p in params]
    if checkpoints is None:
        checkpoints = [(t0, None), (t1, y1)]
    if checkpoints[0][0] != t0 or checkpoints[-1][0] != t1:
        raise ValueError("checkpoints must start at t0 and end at t1")
    total = {"nfe": 0, "accepted_steps": 0, "rejected_steps": 0}
    for (ta, _), (tb, yb) in zip(checkpoints[-2::-1], checkpoints[:0:-1]):
        if tb <= ta:
            continue
        if yb is not None:
            z[:n] = np.asarray(yb, dtype=dtype).reshape(-1)
        z, nfe, acc, rej, _, _ = _dopri5(rhs, z, -tb, -ta, cfg)
        total["nfe"] += nfe
        total["accepted_steps"] += acc
        total["rejected_steps"] += rej
    if stats is not None:
        stats.update(total)
    parts = unpack(z)
    return parts[1].copy(), [g.astype(p.data.dtype, copy=False) for g, p in zip(parts[2:], params)]


def odeint(
    f: VectorField,
    h0: Tensor,
    t0: float,
    t1: float,
    cfg: SolverConfig = SolverConfig(),
    record: bool = False,
    adjoint_cfg: SolverConfig | None = None,
) -> tuple[Tensor, IntegrationResult]:
    """Differentiable integration: the returned state's backward runs :func:`adjoint_grad`.

    The states at accepted steps are kept as checkpoints for the backward pass.

    ``result.final_state`` is the same tensor as the first return value.
    """
    params: Sequence[Tensor] = f.parameters
    needs_grad = is_grad_enabled() and (h0.requires_grad or any(p.requires_grad for p in params))
    y1, nfe, acc, rej, traj, step_nfe = _dopri5(_as_fn(f), h0.data, t0, t1, cfg, record=record or needs_grad)
    res = IntegrationResult(None, nfe, acc, rej, [(t, Tensor(s)) for t, s in traj] if record else None, step_nfe)
    bcfg = adjoint_cfg or cfg

    def backward(g):
        gh, gp = adjoint_grad(f, Tensor(y1), t0, t1, g, bcfg, checkpoints=traj)
        return (gh, *gp)

    out = Tensor.make(y1, (h0, *params), backward)
    res.final_state = out
    return out, res
