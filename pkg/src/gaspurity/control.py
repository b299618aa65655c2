"""PI control, SIMC tuning and the concentration/pressure/level cascade."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

ALARM_LIMIT = 0.02
HTO_SETPOINT = 0.0125


class IdentificationError(ValueError):
    pass


class FeedbackSource(str, Enum):
    MEASUREMENT = "measurement"
    ESTIMATE = "estimate"


@dataclass
class PiController:
    """Ideal-form PI: ``u = bias + direction*Kc*(e + integral/tau_I)``, e = sp - y.

    ``integral`` holds the time integral of the error. It is frozen whenever
    the output sits on a limit and the error would push it further out.
    ``sp_weight`` (b) below 1 puts only ``b*sp - y`` on the proportional term,
    which tames setpoint overshoot without changing disturbance response.
    """

    Kc: float
    tau_I: float
    setpoint: float = 0.0
    out_min: float = -math.inf
    out_max: float = math.inf
    direction: int = 1
    bias: float = 0.0
    integral: float = 0.0
    sp_weight: float = 1.0

    def __post_init__(self):
        if not self.tau_I > 0:
            raise ValueError("tau_I must be > 0")
        if not self.out_min < self.out_max:
            raise ValueError("out_min must be < out_max")
        if self.direction not in (1, -1):
            raise ValueError("direction must be +1 or -1")
        if not 0.0 <= self.sp_weight <= 1.0:
            raise ValueError("sp_weight must lie in [0, 1]")

    def output(self, measurement: float, integral: float) -> float:
        prop = self.sp_weight * self.setpoint - measurement
        return self.bias + self.direction * self.Kc * (prop + integral / self.tau_I)

    def initialize(self, u0: float, measurement: float | None = None) -> None:
        """Set the integral so the output equals ``u0`` at ``measurement``
        (default: at the setpoint), for a bumpless start."""
        y = self.setpoint if measurement is None else measurement
        prop = self.sp_weight * self.setpoint - y
        self.integral = ((u0 - self.bias) / (self.direction * self.Kc) - prop) * self.tau_I


def pi_step(c: PiController, measurement: float, dt: float) -> float:
    """Advance ``c`` by ``dt`` and return its clamped output."""
    if not dt > 0:
        raise ValueError("dt must be > 0")
    e = c.setpoint - measurement
    trial = c.integral + e * dt
    u = c.output(measurement, trial)
    if u > c.out_max:
        if c.direction * e > 0:
            trial = c.integral
        u = c.out_max
    elif u < c.out_min:
        if c.direction * e < 0:
            trial = c.integral
        u = c.out_min
    c.integral = trial
    return u


@dataclass(frozen=True)
class FoptdModel:
    """First order plus delay. With ``integrating`` set, ``k`` is the slope
    gain k' of ``k' e^{-theta s}/s`` and ``tau`` is unused."""

    k: float
    tau: float
    theta: float
    integrating: bool = False

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be > 0")
        if self.theta < 0:
            raise ValueError("theta must be >= 0")


def simc_tune(m: FoptdModel, tau_c: float) -> tuple[float, float]:
    """SIMC PI settings (Kc, tau_I); Kc carries the sign of the process gain."""
    if not tau_c > 0:
        raise ValueError("tau_c must be > 0")
    if m.k == 0:
        raise IdentificationError("process gain is zero")
    if m.integrating:
        return 1.0 / (m.k * (tau_c + m.theta)), 4.0 * (tau_c + m.theta)
    return m.tau / (m.k * (tau_c + m.theta)), min(m.tau, 4.0 * (tau_c + m.theta))


def _crossing(t, y, level):
    """First time |y| reaches ``level`` (linear interpolation), or None."""
    idx = np.nonzero(y >= level)[0]
    if idx.size == 0:
        return None
    j = idx[0]
    if j == 0:
        return float(t[0])
    return float(t[j - 1] + (level - y[j - 1]) * (t[j] - t[j - 1]) / (y[j] - y[j - 1]))


def identify_foptd(t, y, step_size: float, settle_tol: float = 0.02) -> FoptdModel:
    """FOPTD fit of a step response by the tangent method.

    ``y`` is the response relative to its pre-step value, ``t`` measured from
    the step. The final value is the mean of the last 5% of samples and the
    response must have settled there (change over that stretch below
    ``settle_tol`` of the total). theta is where the tangent at the steepest
    point crosses zero; tau runs from theta to 63.2% of the change.
    """
    if step_size == 0:
        raise IdentificationError("step size is zero")
    t = np.asarray(t, dtype=float)
    y = np.asarray(y, dtype=float)
    if t.shape != y.shape or t.size < 20:
        raise IdentificationError("need at least 20 samples of matching length")
    tail = max(2, t.size // 20)
    y_inf = float(np.mean(y[-tail:]))
    if y_inf == 0:
        raise IdentificationError("response did not move")
    drift = abs(y[-1] - y[-tail]) / abs(y_inf)
    if drift > settle_tol:
        raise IdentificationError(f"response has not settled (tail drift {drift:.3g})")
    z = y / y_inf
    t63 = _crossing(t, z, 0.632)
    if t63 is None:
        raise IdentificationError("response never reaches 63% of its final value")
    rise = t <= t63
    slope = np.gradient(z[rise], t[rise]) if rise.sum() > 1 else np.array([0.0])
    j = int(np.argmax(slope))
    if not slope[j] > 0:
        raise IdentificationError("response is not monotone enough to fit")
    theta = min(max(0.0, t[j] - z[j] / slope[j]), t63)
    tau = t63 - theta
    if not tau > 0:
        raise IdentificationError("could not separate delay from time constant")
    return FoptdModel(y_inf / step_size, tau, theta)


def identify_integrating(t, y, step_size: float) -> FoptdModel:
    """Integrating-plus-delay fit ``k' (t - theta)`` to the late ramp of a response.

    The straight-line fit uses the last half of the record; theta is where the
    line crosses zero.
    """
    if step_size == 0:
        raise IdentificationError("step size is zero")
    t = np.asarray(t, dtype=float)
    y = np.asarray(y, dtype=float)
    if t.size < 20:
        raise IdentificationError("need at least 20 samples")
    half = t.size // 2
    slope, icpt = np.polyfit(t[half:], y[half:], 1)
    if slope == 0:
        raise IdentificationError("response has no ramp")
    theta = max(0.0, -icpt / slope)
    return FoptdModel(slope / step_size, 1.0, theta, integrating=True)


@dataclass
class ValveLag:
    """First-order actuator lag, discretized exactly for a held command."""

    tau: float
    value: float

    def step(self, command: float, dt: float) -> float:
        self.value += (1.0 - math.exp(-dt / self.tau)) * (command - self.value)
        return self.value


@dataclass
class CascadeConfig:
    pc: PiController
    cc: PiController
    lc: PiController
    hto_sp: float = HTO_SETPOINT
    p_sp_min: float = 5.0
    p_sp_max: float = 20.0
    feedback_source: FeedbackSource = FeedbackSource.ESTIMATE
    concentration_loop: bool = True  # False holds p_SP (open loop on HTO)
    p_sp_fixed: float = 20.0

    def __post_init__(self):
        if not self.hto_sp < ALARM_LIMIT:
            raise ValueError("hto_sp must be below the alarm limit")
        if not self.p_sp_min < self.p_sp_max:
            raise ValueError("p_sp_min must be < p_sp_max")
        self.cc.setpoint = self.hto_sp
        self.cc.out_min = self.p_sp_min
        self.cc.out_max = self.p_sp_max


@dataclass
class CascadeOutput:
    p_sp: float
    n_out_gas: float
    m_lye: float


def cascade_step(cfg: CascadeConfig, hto_feedback: float, p_meas: float, l_meas: float,
                 dt: float) -> CascadeOutput:
    """One controller tick in the fixed order CC, PC, LC."""
    if cfg.concentration_loop:
        p_sp = pi_step(cfg.cc, hto_feedback, dt)
    else:
        p_sp = cfg.p_sp_fixed
    cfg.pc.setpoint = p_sp
    n_out = pi_step(cfg.pc, p_meas, dt)
    m_lye = pi_step(cfg.lc, l_meas, dt)
    return CascadeOutput(p_sp, n_out, m_lye)


@dataclass
class LoopTuning:
    name: str
    model: FoptdModel
    tau_c: float
    Kc: float
    tau_I: float

    def line(self) -> str:
        kind = "integrating k'" if self.model.integrating else "k"
        tau = "-" if self.model.integrating else f"{self.model.tau:.4g} s"
        return (f"{self.name}: {kind} = {self.model.k:.4g}, tau = {tau}, "
                f"theta = {self.model.theta:.4g} s, tau_c = {self.tau_c:.4g} s -> "
                f"Kc = {self.Kc:.4g}, tau_I = {self.tau_I:.4g} s")


@dataclass
class TuningReport:
    loops: list[LoopTuning] = field(default_factory=list)
    inner_closed_loop: FoptdModel | None = None
    outer_closed_loop: dict[str, FoptdModel] = field(default_factory=dict)

    def get(self, name: str) -> LoopTuning:
        for lt in self.loops:
            if lt.name == name:
                return lt
        raise KeyError(name)

    def time_constant_ratio(self, source: str) -> float:
        return self.outer_closed_loop[source].tau / self.inner_closed_loop.tau

    def text(self) -> str:
        out = [lt.line() for lt in self.loops]
        if self.inner_closed_loop is not None:
            m = self.inner_closed_loop
            out.append(f"inner closed loop (p to p_SP): tau = {m.tau:.4g} s, "
                       f"theta = {m.theta:.4g} s")
        for source, m in self.outer_closed_loop.items():
            out.append(f"outer closed loop, {source} feedback (HTO to HTO_SP): "
                       f"tau = {m.tau:.4g} s, theta = {m.theta:.4g} s, "
                       f"ratio to inner = {self.time_constant_ratio(source):.3g}")
        return "\n".join(out) + "\n"
