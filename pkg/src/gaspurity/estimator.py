"""Extended Kalman filter on the separator model with random-walk inflow states.

Filter state: ``[p (bar), l (m), x_H2, x_O2, n_H2_in (mol/s), n_O2_in (mol/s)]``,
inputs ``[n_out_gas (mol/s), m_lye (kg/s)]``, measurements the first four
states. The two inflow states carry no dynamics of their own; they move only
through process noise, so the filter does not need to know what disturbs the
stack.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from .numerics import SAMPLE_PERIOD, rank
from .plant_model import (SINGULAR_EPS, PlantDomainError, PlantInputs, PlantParams,
                          hagen_poiseuille_flow, steady_state)

N_STATES = 6
N_MEAS = 4
H = np.hstack([np.eye(N_MEAS), np.zeros((N_MEAS, 2))])

DEFAULT_Q = np.diag([10.0, 1.0, 1e-4, 1e-4, 0.3, 300.0])
DEFAULT_R = np.eye(N_MEAS)


class EstimatorDivergence(RuntimeError):
    pass


@dataclass
class EstimatorState:
    x_hat: np.ndarray
    P: np.ndarray

    def copy(self) -> "EstimatorState":
        return EstimatorState(self.x_hat.copy(), self.P.copy())


@dataclass(frozen=True)
class MeasurementVector:
    """Separator measurements ``[p (bar), l (m), x_H2, x_O2]``."""

    y: np.ndarray

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        if y.shape != (N_MEAS,) or not np.all(np.isfinite(y)):
            raise ValueError("measurement must be four finite values")
        object.__setattr__(self, "y", y)


@dataclass
class NoiseConfig:
    Q: np.ndarray = field(default_factory=lambda: DEFAULT_Q.copy())
    R: np.ndarray = field(default_factory=lambda: DEFAULT_R.copy())
    seed: int = 0

    def __post_init__(self):
        for name, m, dim in (("Q", self.Q, N_STATES), ("R", self.R, N_MEAS)):
            m = np.asarray(m, dtype=float)
            if m.shape != (dim, dim):
                raise ValueError(f"{name} must be {dim}x{dim}")
            if not np.allclose(m, m.T):
                raise ValueError(f"{name} must be symmetric")
            if np.linalg.eigvalsh(m).min() < -1e-12 * max(np.trace(m), 1.0):
                raise ValueError(f"{name} must be positive semidefinite")
            setattr(self, name, m)


def pack_params(pp: PlantParams, m_in: float) -> np.ndarray:
    """The handful of plant constants the separator model needs. ``m_in`` is the
    known lye return flow to the separator."""
    e = np.empty(K.N_EST_PRM)
    e[K.E_RGAS] = pp.R_gas
    e[K.E_T] = pp.T
    e[K.E_VT] = pp.V_t
    e[K.E_AREA] = pp.A
    e[K.E_RHO] = pp.rho
    e[K.E_SO2] = pp.o2.S
    e[K.E_MIN] = m_in
    return e


def _check(x_hat, e):
    if not x_hat[0] > 0:
        raise PlantDomainError(f"estimator pressure {x_hat[0]} <= 0")
    if not e[K.E_VT] - x_hat[1] * e[K.E_AREA] > 0:
        raise PlantDomainError(f"estimator level {x_hat[1]} leaves no gas volume")


def simplified_rhs(x_hat, u, pp: PlantParams, m_in: float) -> np.ndarray:
    x_hat = np.asarray(x_hat, dtype=float)
    e = pack_params(pp, m_in)
    _check(x_hat, e)
    dx = np.empty(N_STATES)
    K.sep_rhs(x_hat, np.asarray(u, dtype=float), e, dx)
    return dx


def transition_f(x_hat, u, pp: PlantParams, m_in: float, t_s: float = SAMPLE_PERIOD) -> np.ndarray:
    """One explicit Euler step of the separator model."""
    x_hat = np.asarray(x_hat, dtype=float)
    e = pack_params(pp, m_in)
    _check(x_hat, e)
    out = np.empty(N_STATES)
    K.sep_transition(x_hat, np.asarray(u, dtype=float), e, t_s, out)
    return out


def _jacobians(x_hat, u, pp, m_in, t_s):
    x_hat = np.asarray(x_hat, dtype=float)
    e = pack_params(pp, m_in)
    _check(x_hat, e)
    fx = np.empty((N_STATES, N_STATES))
    gu = np.empty((N_STATES, 2))
    K.sep_transition_jac(x_hat, np.asarray(u, dtype=float), e, t_s, fx, gu)
    return fx, gu


def jacobian_F(x_hat, u, pp: PlantParams, m_in: float, t_s: float = SAMPLE_PERIOD) -> np.ndarray:
    return _jacobians(x_hat, u, pp, m_in, t_s)[0]


def jacobian_G(x_hat, u, pp: PlantParams, m_in: float, t_s: float = SAMPLE_PERIOD) -> np.ndarray:
    return _jacobians(x_hat, u, pp, m_in, t_s)[1]


def jacobian_H() -> np.ndarray:
    return H.copy()


def ekf_predict(est: EstimatorState, u, cfg: NoiseConfig, pp: PlantParams, m_in: float,
                t_s: float = SAMPLE_PERIOD) -> EstimatorState:
    out = est.copy()
    e = pack_params(pp, m_in)
    _check(out.x_hat, e)
    K.ekf_predict(out.x_hat, out.P, np.asarray(u, dtype=float), e, t_s, cfg.Q)
    return out


def ekf_update(est: EstimatorState, y, cfg: NoiseConfig) -> EstimatorState:
    if isinstance(y, MeasurementVector):
        y = y.y
    out = est.copy()
    if not K.ekf_update(out.x_hat, out.P, np.asarray(y, dtype=float), cfg.R):
        raise EstimatorDivergence("innovation covariance is singular")
    return out


def observability_matrix(F, H) -> np.ndarray:
    """Stack ``H F^k`` for k = 0 .. n-1."""
    F = np.asarray(F, dtype=float)
    H = np.asarray(H, dtype=float)
    blocks = [H]
    for _ in range(F.shape[0] - 1):
        blocks.append(blocks[-1] @ F)
    return np.vstack(blocks)


def is_observable(x_hat, u, pp: PlantParams, m_in: float, t_s: float = SAMPLE_PERIOD,
                  tol: float = 1e-10) -> bool:
    O = observability_matrix(jacobian_F(x_hat, u, pp, m_in, t_s), H)
    return rank(O, tol) == N_STATES


def initialize(pp: PlantParams, nominal: PlantInputs, p_sep: float = 20.0,
               level: float = 0.5) -> tuple[EstimatorState, PlantInputs]:
    """Filter state at the nominal steady state with identity covariance.

    Returns the estimator state and the balanced nominal inputs.
    """
    s, u = steady_state(nominal, pp, p_sep=p_sep, level=level)
    n_o2, n_h2 = separator_inflows(s, u, pp)
    x0 = np.array([s.p_bar[-1], s.l, s.x_h2[-1], s.x_o2[-1], n_h2, n_o2])
    return EstimatorState(x0, np.eye(N_STATES)), u


def separator_inflows(s, u: PlantInputs, pp: PlantParams) -> tuple[float, float]:
    """True gas inflow to the separator (O2, H2), before the dissolved-O2 sink."""
    q = hagen_poiseuille_flow(s.p_bar[-2], s.p_bar[-1], pp)
    return q * s.x_o2[-2], q * s.x_h2[-2]


def estimated_pipe_hto(est: EstimatorState) -> float:
    n_h2, n_o2 = est.x_hat[4], est.x_hat[5]
    if n_o2 <= SINGULAR_EPS:
        raise PlantDomainError(f"estimated O2 inflow {n_o2} is not positive")
    return n_h2 / n_o2


def replay(y, u, pp: PlantParams, nominal: PlantInputs, cfg: NoiseConfig = None,
           t_s: float = SAMPLE_PERIOD, p_sep: float = 20.0, level: float = 0.5,
           ) -> np.ndarray:
    """Re-run the filter over a recorded stream and return the filter states.

    ``y`` holds one measurement vector per tick and ``u[k]`` the valve flows
    ``[n_out_gas, m_lye]`` applied from tick k to k+1. The filter starts from
    the nominal steady state, exactly as in a live run, so a recorded run is
    reproduced to rounding.
    """
    cfg = NoiseConfig() if cfg is None else cfg
    y = np.asarray(y, dtype=float)
    u = np.asarray(u, dtype=float)
    if y.ndim != 2 or y.shape[1] != N_MEAS or u.shape != (len(y), 2):
        raise ValueError("y must be (n, 4) and u (n, 2)")
    if not np.all(np.isfinite(y)):
        raise ValueError("measurements must be finite")
    est, _ = initialize(pp, nominal, p_sep, level)
    e = pack_params(pp, nominal.m_in)
    x, P = est.x_hat, est.P
    out = np.empty((len(y), N_STATES))
    for k in range(len(y)):
        if k > 0 and not K.ekf_predict(x, P, u[k - 1], e, t_s, cfg.Q):
            raise PlantDomainError(f"estimator left the model domain at tick {k}")
        if not K.ekf_update(x, P, y[k], cfg.R):
            raise EstimatorDivergence(f"singular innovation covariance at tick {k}")
        out[k] = x
    return out
