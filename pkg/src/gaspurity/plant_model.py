"""Distributed model of the anodic gas train: stack -> pipe segments -> separator.

Pressures are carried in Pa inside :class:`PlantState`; every public function
that takes or returns a pressure at the interface uses bar.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import constants, optimize

from . import _kernels as K

BAR = K.PA_PER_BAR
SINGULAR_EPS = 1e-12


class PlantDomainError(ValueError):
    """Raised when an input or state is outside the physical domain."""


@dataclass(frozen=True)
class SpeciesParams:
    species_id: str
    z: float
    D: float  # membrane diffusion coefficient, m^2/s
    S: float  # solubility in lye, mol/(kg bar)

    def __post_init__(self):
        if self.species_id not in ("H2", "O2"):
            raise PlantDomainError(f"unknown species {self.species_id!r}")
        if self.z not in (2, 4):
            raise PlantDomainError(f"z must be 2 or 4, got {self.z}")
        if self.D < 0:
            raise PlantDomainError("D must be >= 0")
        if self.S <= 0:
            raise PlantDomainError("S must be > 0")


H2 = SpeciesParams("H2", z=2, D=5.59e-9, S=8.84e-5)
O2 = SpeciesParams("O2", z=4, D=0.0, S=8.13e-5)


@dataclass(frozen=True)
class PlantParams:
    """Geometry and physical constants of the gas train (SI units)."""

    A_c: float = 598.0
    d_m: float = 5e-3
    T: float = 353.15
    n: int = 5
    l_p: float = 1.0
    r: float = 0.0075
    eta: float = 1.1e-5
    V_t: float = 2.0
    A: float = 2.0
    rho: float = 1290.0
    F: float = constants.physical_constants["Faraday constant"][0]
    R_gas: float = constants.R
    h2: SpeciesParams = H2
    o2: SpeciesParams = O2

    def __post_init__(self):
        for name in ("A_c", "d_m", "T", "l_p", "r", "eta", "V_t", "A", "rho",
                     "F", "R_gas"):
            if not getattr(self, name) > 0:
                raise PlantDomainError(f"{name} must be > 0")
        if int(self.n) != self.n or self.n < 1:
            raise PlantDomainError("n must be an integer >= 1")

    @property
    def n_compartments(self) -> int:
        return self.n + 1

    @property
    def segment_volume(self) -> float:
        return math.pi * self.r ** 2 * self.l_p / self.n

    def pack(self) -> np.ndarray:
        v = np.empty(K.N_PLANT_PRM)
        v[K.P_AC] = self.A_c
        v[K.P_DM] = self.d_m
        v[K.P_T] = self.T
        v[K.P_NSEG] = self.n
        v[K.P_LP] = self.l_p
        v[K.P_RPIPE] = self.r
        v[K.P_ETA] = self.eta
        v[K.P_VT] = self.V_t
        v[K.P_AREA] = self.A
        v[K.P_RHO] = self.rho
        v[K.P_FARADAY] = self.F
        v[K.P_RGAS] = self.R_gas
        v[K.P_ZH2] = self.h2.z
        v[K.P_ZO2] = self.o2.z
        v[K.P_DH2] = self.h2.D
        v[K.P_SH2] = self.h2.S
        v[K.P_SO2] = self.o2.S
        return v


@dataclass(frozen=True)
class PlantInputs:
    I: float        # current density, A/m^2
    dp: float       # anode-cathode pressure difference, bar
    m_lye: float    # liquid outflow of the separator, kg/s
    n_out_gas: float  # separator gas outflow, mol/s
    m_in: float     # liquid inflow to the separator, kg/s

    def __post_init__(self):
        if self.I < 0:
            raise PlantDomainError("I must be >= 0")
        if self.m_lye < 0:
            raise PlantDomainError("m_lye must be >= 0")
        if self.n_out_gas < 0:
            raise PlantDomainError("n_out_gas must be >= 0")

    def pack(self) -> np.ndarray:
        v = np.empty(K.N_PLANT_U)
        v[K.U_I] = self.I
        v[K.U_DP] = self.dp
        v[K.U_MLYE] = self.m_lye
        v[K.U_NOUT] = self.n_out_gas
        v[K.U_MIN] = self.m_in
        return v


@dataclass
class PlantState:
    """Per-compartment pressure [Pa] and mole fractions plus separator level [m].

    Index ``n`` (the last entry) is the separator.
    """

    p: np.ndarray
    x_h2: np.ndarray
    x_o2: np.ndarray
    l: float

    @property
    def p_bar(self) -> np.ndarray:
        return self.p / BAR

    @property
    def n_compartments(self) -> int:
        return len(self.p)

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.p, self.x_h2, self.x_o2, [self.l]])

    @classmethod
    def from_vector(cls, y) -> "PlantState":
        y = np.asarray(y, dtype=float)
        nc = (len(y) - 1) // 3
        return cls(y[:nc].copy(), y[nc:2 * nc].copy(), y[2 * nc:3 * nc].copy(),
                   float(y[-1]))

    def hto(self) -> np.ndarray:
        return self.x_h2 / self.x_o2

    def check(self, pp: PlantParams, tol: float = 1e-9) -> None:
        """Raise :class:`PlantDomainError` naming the first offending compartment."""
        if len(self.p) != pp.n_compartments:
            raise PlantDomainError(
                f"state has {len(self.p)} compartments, params expect {pp.n_compartments}")
        for i in range(len(self.p)):
            if not self.p[i] > 0:
                raise PlantDomainError(f"compartment {i}: pressure {self.p[i]} <= 0")
            if not -tol <= self.x_h2[i] <= 1 + tol:
                raise PlantDomainError(f"compartment {i}: x_H2 = {self.x_h2[i]} outside [0, 1]")
            if abs(self.x_h2[i] + self.x_o2[i] - 1.0) > tol:
                raise PlantDomainError(f"compartment {i}: x_H2 + x_O2 != 1")
        liquid = self.l * pp.A
        if not 0 < liquid < pp.V_t:
            raise PlantDomainError(f"separator: level {self.l} m outside (0, V_t/A)")


def production_rate(I: float, sp: SpeciesParams, pp: PlantParams) -> float:
    """Faradaic production of species ``sp`` in mol/s."""
    if I < 0:
        raise PlantDomainError("current density must be >= 0")
    return K.production(I, pp.A_c, sp.z, pp.F)


def diffusion_rate(p: float, sp: SpeciesParams, pp: PlantParams) -> float:
    """Diffusive membrane crossover at pressure ``p`` [bar], mol/s.

    The dissolved concentration is rho*S*p, so the density factor makes the
    Fick flux come out in mol/s.
    """
    if p < 0:
        raise PlantDomainError("pressure must be >= 0")
    return K.diffusion(p, pp.rho, sp.S, sp.D, pp.A_c, pp.d_m)


def convection_rate(n_diff: float, dp: float) -> float:
    """Pressure-driven crossover; equals ``n_diff`` at dp = 0.01 bar."""
    if n_diff < 0:
        raise PlantDomainError("n_diff must be >= 0")
    return K.convection(n_diff, dp)


def hagen_poiseuille_flow(p_i: float, p_next: float, pp: PlantParams) -> float:
    """Molar gas flow between neighbouring pipe compartments, pressures in bar."""
    if not (p_i > 0 and p_next > 0):
        raise PlantDomainError("pressures must be > 0")
    a, b = p_i * BAR, p_next * BAR
    return K.pipe_conductance(pp.pack()) * (a - b) * (a + b)


def dissolved_o2_sink(m_lye: float, p_sep: float, pp: PlantParams) -> float:
    """O2 carried away dissolved in the lye outflow, mol/s (p_sep in bar)."""
    return m_lye * pp.o2.S * p_sep


def gas_volume(l: float, pp: PlantParams) -> tuple[float, float]:
    """Separator gas volume and its derivative with respect to the level."""
    if not 0 <= l * pp.A < pp.V_t:
        raise PlantDomainError(f"level {l} m outside the separator")
    return pp.V_t - l * pp.A, -pp.A


def stack_effluent(inputs: PlantInputs, pp: PlantParams, p1: float) -> tuple[float, float]:
    """Anodic gas leaving the stack, (n_O2, n_H2) in mol/s, at pressure ``p1`` [bar].

    Hydrogen crossover is diffusion plus convection, floored at zero.
    """
    n_o2 = production_rate(inputs.I, pp.o2, pp)
    n_diff = diffusion_rate(p1, pp.h2, pp)
    n_h2 = max(0.0, n_diff + K.convection(n_diff, inputs.dp))
    return n_o2, n_h2


def hto(x_h2: float, x_o2: float) -> float:
    if x_o2 <= SINGULAR_EPS:
        raise PlantDomainError(f"singular composition: x_O2 = {x_o2}")
    return x_h2 / x_o2


def plant_rhs(s: PlantState, u: PlantInputs, pp: PlantParams) -> PlantState:
    """Time derivatives of every state entry, returned as a PlantState (p' in Pa/s)."""
    s.check(pp)
    y = s.to_vector()
    dy = np.empty_like(y)
    K.plant_rhs(y, u.pack(), pp.pack(), dy)
    return PlantState.from_vector(dy)


def plant_jacobian(s: PlantState, u: PlantInputs, pp: PlantParams) -> np.ndarray:
    y = s.to_vector()
    jac = np.empty((len(y), len(y)))
    K.plant_jac(y, u.pack(), pp.pack(), jac)
    return jac


def holdups(s: PlantState, pp: PlantParams) -> np.ndarray:
    """Gas moles in each compartment."""
    vol = np.full(s.n_compartments, pp.segment_volume)
    vol[-1] = pp.V_t - s.l * pp.A
    return s.p * vol / (pp.R_gas * pp.T)


def normalized_residual(s: PlantState, u: PlantInputs, pp: PlantParams) -> np.ndarray:
    """Steady-state residual with every balance expressed relative to throughput.

    Molar accumulation rates dN_i/dt and component accumulation N_i*x' are
    divided by the stack gas production; the level rate by its full-scale
    fill rate m_in/(rho*A).
    """
    d = plant_rhs(s, u, pp)
    n_ref = max(sum(stack_effluent(u, pp, s.p_bar[0])), SINGULAR_EPS)
    vol = np.full(s.n_compartments, pp.segment_volume)
    vol[-1] = pp.V_t - s.l * pp.A
    vdot = np.zeros(s.n_compartments)
    vdot[-1] = -pp.A * d.l
    rt = pp.R_gas * pp.T
    dn = (d.p * vol + s.p * vdot) / rt
    comp = holdups(s, pp) * d.x_h2
    lvl = d.l / max(u.m_in / (pp.rho * pp.A), SINGULAR_EPS)
    return np.concatenate([dn / n_ref, comp / n_ref, [lvl]])


class SteadyStateError(RuntimeError):
    def __init__(self, msg, residual):
        super().__init__(f"{msg} (best residual {residual:.3e})")
        self.residual = residual


def _equilibrium_guess(u: PlantInputs, pp: PlantParams, p_sep: float, level: float):
    """Closed-form equilibrium built by marching up the pipe from the separator."""
    nc = pp.n_compartments
    c = K.pipe_conductance(pp.pack())
    p = np.full(nc, p_sep * BAR)
    for _ in range(50):
        n_o2, n_h2 = stack_effluent(u, pp, p[0] / BAR)
        total = n_o2 + n_h2
        prev = p[0]
        for i in range(nc - 2, -1, -1):
            p[i] = math.sqrt(p[i + 1] ** 2 + total / c)
        if abs(p[0] - prev) <= 1e-15 * p[0]:
            break
    x_pipe = n_h2 / total
    n_dis = dissolved_o2_sink(u.m_lye, p_sep, pp)
    x_sep = n_h2 / (total - n_dis)
    x_h2 = np.full(nc, x_pipe)
    x_h2[-1] = x_sep
    state = PlantState(p, x_h2, 1.0 - x_h2, level)
    return state, total - n_dis


def steady_state(u: PlantInputs, pp: PlantParams, guess: PlantState | None = None,
                 p_sep: float = 20.0, level: float = 0.5, tol: float = 1e-10,
                 ) -> tuple[PlantState, PlantInputs]:
    """Equilibrium at the given separator pressure [bar] and level.

    The separator pressure and level are integrating under constant flows, so
    they are held at their targets (taken from ``guess`` when given) and the
    gas outflow that balances the train is solved for instead of
    ``u.n_out_gas``; the liquid outflow must equal the inflow. Returns the
    state and the balanced inputs.
    """
    if guess is not None:
        p_sep, level = float(guess.p_bar[-1]), guess.l
    if abs(u.m_in - u.m_lye) > 1e-12 * max(u.m_in, 1.0):
        raise SteadyStateError("level cannot be stationary with m_in != m_lye",
                               abs(u.m_in - u.m_lye))
    gas_volume(level, pp)
    nc = pp.n_compartments
    analytic, n_out = _equilibrium_guess(u, pp, p_sep, level)
    start = analytic if guess is None else guess

    def unpack(z):
        p = np.append(z[:nc - 1] * BAR, p_sep * BAR)
        xh = z[nc - 1:2 * nc - 1]
        return PlantState(p, xh, 1.0 - xh, level), z[-1]

    def residual(z):
        s, nout = unpack(z)
        try:
            r = normalized_residual(s, replace(u, n_out_gas=max(nout, 0.0)), pp)
        except PlantDomainError:
            return np.full(2 * nc, 1e3)
        return np.concatenate([r[:nc], r[nc:2 * nc]])

    z0 = np.concatenate([start.p[:-1] / BAR, start.x_h2, [n_out]])
    best = None
    for z_init in (z0, np.concatenate([analytic.p[:-1] / BAR, analytic.x_h2, [n_out]])):
        sol = optimize.root(residual, z_init, method="hybr", options={"xtol": 1e-14})
        res = float(np.max(np.abs(residual(sol.x))))
        if best is None or res < best[1]:
            best = (sol.x, res)
        if res < tol:
            break
    z, res = best
    if res >= tol:
        # fall back on the closed-form march, which is exact up to rounding
        res_a = float(np.max(np.abs(residual(np.concatenate(
            [analytic.p[:-1] / BAR, analytic.x_h2, [n_out]])))))
        if res_a < res:
            z = np.concatenate([analytic.p[:-1] / BAR, analytic.x_h2, [n_out]])
            res = res_a
    if res >= tol:
        raise SteadyStateError("steady state did not converge", res)
    s, nout = unpack(z)
    return s, replace(u, n_out_gas=float(nout))
