"""Fast built-in checks of the basis, the solver and the gradients."""

from __future__ import annotations

import math

import numpy as np

from . import njet
from .engine import Tensor, default_dtype, grad
from .ode import SolverConfig, VectorField, dopri5_integrate
from .srf import init_srf_params, srf_conv_forward


def check_basis() -> tuple[bool, str]:
    worst = 0.0
    for l, k in njet.basis_orders(2):
        for t in (1.0, 2.0, 4.0):
            worst = max(worst, njet.semigroup_residual(l, k, t, t, 41))
    steer = max(
        float(np.max(np.abs(njet.steered_kernel(th, 1.5, 11) - njet.directional_second_derivative(th, 1.5, 11))))
        for th in (0.0, 0.3, 1.1, 2.0)
    )
    ok = worst < 1e-3 and steer < 1e-10
    return ok, f"semigroup residual {worst:.2e}, steering error {steer:.1e}"


def check_solver() -> tuple[bool, str]:
    with default_dtype(np.float64):
        res = dopri5_integrate(VectorField(lambda h, t: -h), Tensor(np.ones(1)), 0.0, 1.0, SolverConfig(1e-6, 1e-6))
    err = abs(float(res.final_state.data[0]) - math.exp(-1.0))
    fsal = all(b - a == 6 for a, b in zip(res.step_nfe, res.step_nfe[1:]))
    return err < 1e-5 and fsal, f"|h(1) - 1/e| = {err:.1e}, nfe {res.nfe} over {res.accepted_steps} steps"


def check_sigma_gradient() -> tuple[bool, str]:
    with default_dtype(np.float64):
        p = init_srf_params(2, 2, "shared_sigma", seed=3)
        x = Tensor(np.random.default_rng(0).normal(size=(1, 2, 9, 9)))
        s = p["sigma_log2"]
        (g,) = grad([srf_conv_forward(x, p, method="separable").sum()], [s])
        eps = 1e-6
        s0 = s.data.copy()
        vals = []
        for d in (eps, -eps):
            s.data = s0 + d
            vals.append(float(srf_conv_forward(x, p, method="dense").sum().data))
        s.data = s0
    fd = (vals[0] - vals[1]) / (2 * eps)
    rel = abs(float(g) - fd) / max(abs(fd), 1e-12)
    return rel < 1e-4, f"scale gradient relative error {rel:.1e}"


CHECKS = {"basis": check_basis, "solver": check_solver, "sigma_gradient": check_sigma_gradient}


def run_selftest(log=print) -> bool:
    all_ok = True
    for name, fn in CHECKS.items():
        ok, detail = fn()
        all_ok &= ok
        log(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    return all_ok
