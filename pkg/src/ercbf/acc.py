"""Adaptive cruise control scenario: ego (AV) behind a human-driven lead (HDV).

Ego state ``x = [p, v]``, lead state ``x_s = [p_s, v_s]``, input ``u`` is the
wheel force in newtons.  All quantities are SI internally.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .controllers import ErrorBounds, ErrorExpressions
from .core import BarrierSpec, ControlAffineSystem, EnvironmentEstimate, LyapunovSpec

KMH = 1.0 / 3.6


def kmh_to_mps(v_kmh: float) -> float:
    return v_kmh * KMH


@dataclass(frozen=True)
class VehicleParams:
    m: float = 1650.0
    c0: float = 0.1
    c1: float = 5.0
    c2: float = 0.25
    c_d: float = 0.3
    grav: float = 9.81
    T_h: float = 1.8  # not given for the paper's experiments; common headway choice

    def __post_init__(self):
        if self.m <= 0:
            raise ValueError("mass must be positive")
        if self.c_d * self.grav <= 0:
            raise ValueError("c_d * grav must be positive")
        if self.T_h < 0:
            raise ValueError("T_h must be non-negative")

    @property
    def max_decel(self) -> float:
        return self.c_d * self.grav

    def rolling_force(self, v):
        return self.c0 + self.c1 * v + self.c2 * v * v


@dataclass(frozen=True)
class EgoState:
    p: float
    v: float

    def as_array(self) -> np.ndarray:
        return np.array([self.p, self.v])


@dataclass(frozen=True)
class LeadState:
    p_s: float
    v_s: float
    v_s_dot: float = 0.0


@dataclass(frozen=True)
class AccErrorBounds:
    E_p: float = 1.0
    E_v: float = 1.0
    E_vdot: float = 0.0

    def __post_init__(self):
        if min(self.E_p, self.E_v, self.E_vdot) < 0:
            raise ValueError("error bounds must be non-negative")

    def to_error_bounds(self) -> ErrorBounds:
        # position-error rate equals the velocity error, so it shares E_v
        return ErrorBounds([self.E_p, self.E_v], [self.E_v, self.E_vdot])


def acc_dynamics(params: VehicleParams, state: EgoState, u: float) -> tuple[float, float]:
    """Return ``(p_dot, v_dot)`` of the ego longitudinal model."""
    return state.v, (u - params.rolling_force(state.v)) / params.m


def acc_system(params: VehicleParams) -> ControlAffineSystem:
    g_col = np.array([[0.0], [1.0 / params.m]])

    def f(x):
        return np.array([x[1], -params.rolling_force(x[1]) / params.m])

    def g(x):
        return g_col

    return ControlAffineSystem(2, 1, f, g)


def acc_barrier(params: VehicleParams, nu: float = 5.0) -> BarrierSpec:
    """Rear-end barrier ``p_s - p - T_h v - (v_s - v)^2 / (2 c_d g)``."""
    T_h, cdg = params.T_h, params.max_decel

    def h(x, xs):
        return xs[0] - x[0] - T_h * x[1] - 0.5 * (xs[1] - x[1]) ** 2 / cdg

    def grad_x_h(x, xs):
        return np.array([-1.0, -T_h + (xs[1] - x[1]) / cdg])

    def dh_dt(x, xs, xs_dot):
        return xs_dot[0] - (xs[1] - x[1]) * xs_dot[1] / cdg

    return BarrierSpec(h, grad_x_h, dh_dt, nu)


def acc_error_expressions(params: VehicleParams) -> ErrorExpressions:
    """Barrier, gradient and time-derivative errors as functions of the lead errors.

    ``e_s = [e_p, e_v]`` and ``e_s_dot = [e_p_dot, e_vdot]``; the position
    error rate is the velocity error, so ``e_p_dot`` does not appear.
    """
    cdg = params.max_decel

    def e_h(x, xs_hat, xs_hat_dot, e, ed):
        e_p, e_v = e[0], e[1]
        return e_p - (2.0 * e_v * (xs_hat[1] - x[1]) + e_v * e_v) / (2.0 * cdg)

    def e_grad_h(x, xs_hat, xs_hat_dot, e, ed):
        e_v = np.asarray(e[1], dtype=float)
        out = np.zeros((2,) + e_v.shape)
        out[1] = e_v / cdg
        return out

    def e_dhdt(x, xs_hat, xs_hat_dot, e, ed):
        e_v, e_vdot = e[1], ed[1]
        return e_v - (xs_hat_dot[1] * e_v + e_vdot * (xs_hat[1] - x[1]) + e_v * e_vdot) / cdg

    return ErrorExpressions(e_h, e_grad_h, e_dhdt)


def speed_limit_barriers(v_max: float, v_min: float, nu: float = 5.0) -> tuple[BarrierSpec, BarrierSpec]:
    """Ego-only barriers ``v_max - v`` and ``v - v_min``."""
    if v_max <= v_min:
        raise ValueError("v_max must exceed v_min")

    def zero_rate(x, xs, xs_dot):
        return 0.0

    upper = BarrierSpec(lambda x, xs: v_max - x[1], lambda x, xs: np.array([0.0, -1.0]), zero_rate, nu)
    lower = BarrierSpec(lambda x, xs: x[1] - v_min, lambda x, xs: np.array([0.0, 1.0]), zero_rate, nu)
    return upper, lower


def acc_clf(v_d: float, c3: float = 5.0) -> LyapunovSpec:
    """Speed-tracking CLF ``(v - v_d)^2``."""
    return LyapunovSpec(lambda x: (x[1] - v_d) ** 2, lambda x: np.array([0.0, 2.0 * (x[1] - v_d)]), c3)


class HistoryError(LookupError):
    """The velocity history does not reach back far enough."""


class VelocityHistory:
    """Ring buffer of past lead speeds for the driver reaction delay."""

    def __init__(self, maxlen: int = 100_000):
        self._t: deque[float] = deque(maxlen=maxlen)
        self._v: deque[float] = deque(maxlen=maxlen)

    def append(self, t: float, v: float) -> None:
        if self._t and t <= self._t[-1]:
            raise ValueError("history times must increase")
        self._t.append(t)
        self._v.append(v)

    def at(self, t: float) -> float:
        """Linearly interpolated speed at time ``t``."""
        if not self._t or t < self._t[0] - 1e-12:
            raise HistoryError(f"no lead velocity recorded at t={t}")
        ts = self._t
        if t >= ts[-1]:
            return self._v[-1]
        i = int(np.searchsorted(np.asarray(ts), t, side="right"))
        t0, t1 = ts[i - 1], ts[i]
        w = (t - t0) / (t1 - t0)
        return (1.0 - w) * self._v[i - 1] + w * self._v[i]


@dataclass
class HdvModel:
    """Linear free-flow driver: ``v_s_dot = lambda (v_desired - v_s(t - tau)) + eps``."""

    lam: float = 0.309
    v_desired: float = 100.0 * KMH
    tau: float = 0.0
    sigma: float = 1.13
    seed: int = 0
    rng: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        if self.lam < 0 or self.sigma < 0 or self.tau < 0:
            raise ValueError("lam, sigma and tau must be non-negative")
        self.rng = np.random.default_rng(self.seed)

    def draw_noise(self) -> float:
        return float(self.sigma * self.rng.standard_normal()) if self.sigma > 0 else 0.0

    def acceleration(self, v_s_delayed: float, eps: float) -> float:
        return self.lam * (self.v_desired - v_s_delayed) + eps


def hdv_step(model: HdvModel, v_s: float, history: VelocityHistory | None = None, t: float = 0.0,
             dt: float = 0.01) -> float:
    """Draw one noise sample and return the lead acceleration.

    With ``tau > 0`` the delayed speed ``v_s(t - tau)`` is read from ``history``.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    if model.tau > 0.0:
        if history is None:
            raise HistoryError("a velocity history is required when tau > 0")
        v_del = history.at(t - model.tau)
    else:
        v_del = v_s
    return model.acceleration(v_del, model.draw_noise())


MEASUREMENT_POLICIES = ("zero", "uniform", "corner")


def measure_lead(true: LeadState, bounds: AccErrorBounds, policy: str = "uniform",
                 rng: np.random.Generator | None = None, corner_signs=(-1.0, -1.0, -1.0)):
    """Noisy lead measurement ``x_s_hat = x_s - e`` with ``|e|`` inside the bounds.

    Returns ``(estimate, e)`` where ``e = (e_p, e_v, e_vdot)``.  The ``corner``
    policy puts every error on the bound with ``corner_signs``; the default
    makes the lead look farther away and faster than it is.
    """
    E = np.array([bounds.E_p, bounds.E_v, bounds.E_vdot])
    if policy == "zero":
        e = np.zeros(3)
    elif policy == "uniform":
        if rng is None:
            raise ValueError("uniform policy needs an rng")
        e = rng.uniform(-1.0, 1.0, size=3) * E
    elif policy == "corner":
        e = np.sign(np.asarray(corner_signs, dtype=float)) * E
    else:
        raise ValueError(f"unknown measurement policy {policy!r}")
    p_hat = true.p_s - e[0]
    v_hat = true.v_s - e[1]
    est = EnvironmentEstimate(np.array([p_hat, v_hat]), np.array([v_hat, true.v_s_dot - e[2]]))
    return est, e
