"""Time integration and the small dense linear algebra used by the estimator."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.integrate import solve_ivp

from . import _kernels as K

SAMPLE_PERIOD = 0.1


class StiffnessError(RuntimeError):
    """Integrator could not make progress; ``t`` is the simulation time reached."""

    def __init__(self, msg: str, t: float):
        super().__init__(f"{msg} at t = {t:.6g} s")
        self.t = t


class SingularMatrixError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class IntegratorConfig:
    max_step: float = SAMPLE_PERIOD
    rel_tol: float = 1e-6
    abs_tol: float = 1e-9
    method: str = "adaptive"  # or "fixed-step"

    def __post_init__(self):
        if not (self.rel_tol > 0 and self.abs_tol > 0):
            raise ValueError("tolerances must be > 0")
        if not self.max_step > 0:
            raise ValueError("max_step must be > 0")
        if self.method not in ("adaptive", "fixed-step"):
            raise ValueError(f"unknown integration method {self.method!r}")


def output_grid(t0: float, t1: float, dt: float = SAMPLE_PERIOD) -> np.ndarray:
    n = int(round((t1 - t0) / dt))
    return t0 + dt * np.arange(n + 1)


def integrate(rhs, s0, t0: float, t1: float, cfg: IntegratorConfig = IntegratorConfig(),
              jac=None, dt: float = SAMPLE_PERIOD):
    """Integrate ``ds/dt = rhs(t, s)`` and sample the solution every ``dt``.

    The adaptive method is scipy's Radau IIA (stiffly accurate, embedded error
    estimate); "fixed-step" is classical RK4 at ``cfg.max_step``. Returns
    ``(t, S)`` with ``S[k]`` the state at ``t[k]``.
    """
    if not t1 > t0:
        raise ValueError("t1 must be greater than t0")
    s0 = np.atleast_1d(np.asarray(s0, dtype=float))
    grid = output_grid(t0, t1, dt)
    if cfg.method == "fixed-step":
        return grid, _rk4(rhs, s0, grid, cfg.max_step)
    sol = solve_ivp(rhs, (t0, grid[-1]), s0, method="Radau", t_eval=grid,
                    rtol=cfg.rel_tol, atol=cfg.abs_tol, max_step=cfg.max_step,
                    jac=jac)
    if sol.status != 0:
        raise StiffnessError(sol.message, float(sol.t[-1]) if sol.t.size else t0)
    return grid, sol.y.T


def _rk4(rhs, s0, grid, h_max):
    out = np.empty((len(grid), len(s0)))
    out[0] = s = s0
    for k in range(1, len(grid)):
        t = grid[k - 1]
        span = grid[k] - t
        nsub = max(1, int(np.ceil(span / h_max - 1e-12)))
        h = span / nsub
        for _ in range(nsub):
            k1 = rhs(t, s)
            k2 = rhs(t + h / 2, s + h / 2 * k1)
            k3 = rhs(t + h / 2, s + h / 2 * k2)
            k4 = rhs(t + h, s + h * k3)
            s = s + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
            t += h
        out[k] = s
    return out


class PlantStepper:
    """Advances the compiled plant model one sample interval at a time.

    Wraps the Rosenbrock kernel; the step size is carried over between calls
    so quiet intervals cost a single step. The "fixed-step" method takes
    steps of ``max_step`` without error control.
    """

    def __init__(self, prm: np.ndarray, n_states: int, cfg: IntegratorConfig = IntegratorConfig()):
        self.prm = prm
        self.cfg = cfg
        self.atol = np.full(n_states, cfg.abs_tol)
        self.h = cfg.max_step
        self.stats = np.zeros(2, dtype=np.int64)

    def advance(self, y: np.ndarray, u: np.ndarray, span: float, t_now: float = 0.0) -> None:
        # an unbounded tolerance accepts every step, leaving fixed steps of max_step
        rtol = math.inf if self.cfg.method == "fixed-step" else self.cfg.rel_tol
        status, h, t_reached = K.plant_advance(y, u, self.prm, span, self.h,
                                               self.cfg.max_step, rtol, self.atol, self.stats)
        if status != K.OK:
            what = "step size underflow" if status == K.STEP_UNDERFLOW else "non-finite state"
            raise StiffnessError(what, t_now + t_reached)
        self.h = h


def solve_linear(A, B) -> np.ndarray:
    """Solve ``A X = B``; refuses systems with condition number above 1e12."""
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"A must be square, got shape {A.shape}")
    cond = np.linalg.cond(A)
    if not np.isfinite(cond) or cond > 1e12:
        raise SingularMatrixError(f"matrix is singular or ill-conditioned (cond = {cond:.3e})")
    return np.linalg.solve(A, B)


def rank(A, tol: float = 1e-10) -> int:
    """Numerical rank: singular values above ``tol * sigma_max``."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    if A.size == 0:
        raise ValueError("empty matrix")
    sv = np.linalg.svd(A, compute_uv=False)
    if sv[0] == 0:
        return 0
    return int(np.sum(sv > tol * sv[0]))
