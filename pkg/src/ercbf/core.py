"""Control-affine systems, barrier and Lyapunov functions, and constraint values.

Every safety filter in :mod:`ercbf.controllers` is built from the affine
decomposition of the barrier condition

    dh/dt + L_f h + L_g h u + nu * h >= 0

which :func:`barrier_terms` returns as ``(drift, lgh)`` so that the
condition reads ``drift + lgh @ u >= 0``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np


class ShapeError(ValueError):
    """Raised when an array does not have the dimension a system declares."""


def _vec(a, size: int, name: str) -> np.ndarray:
    if type(a) is np.ndarray and a.shape == (size,) and a.dtype == np.float64:
        return a
    arr = np.asarray(a, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if arr.shape != (size,):
        raise ShapeError(f"{name} must have shape ({size},), got {arr.shape}")
    return arr


@dataclass(frozen=True)
class ControlAffineSystem:
    """Dynamics ``xdot = f(x) + g(x) u`` with ``x`` in R^n and ``u`` in R^m."""

    n: int
    m: int
    f: Callable[[np.ndarray], np.ndarray]
    g: Callable[[np.ndarray], np.ndarray]

    def __post_init__(self):
        if self.n < 1 or self.m < 1:
            raise ValueError("state and input dimensions must be positive")

    def drift(self, x) -> np.ndarray:
        x = _vec(x, self.n, "x")
        return _vec(self.f(x), self.n, "f(x)")

    def input_matrix(self, x) -> np.ndarray:
        x = _vec(x, self.n, "x")
        gx = np.asarray(self.g(x), dtype=float)
        if gx.shape == (self.n,) and self.m == 1:
            gx = gx.reshape(self.n, 1)
        if gx.shape != (self.n, self.m):
            raise ShapeError(f"g(x) must have shape ({self.n}, {self.m}), got {gx.shape}")
        return gx

    def xdot(self, x, u) -> np.ndarray:
        u = _vec(u, self.m, "u")
        return self.drift(x) + self.input_matrix(x) @ u


@dataclass(frozen=True)
class BarrierSpec:
    """Barrier ``h(x, x_s)`` with analytic derivatives and a linear class-K rate.

    ``dh_dt(x, x_s, x_s_dot)`` is the time derivative of ``h`` arising through
    the environment state only, i.e. ``dh/dx_s . x_s_dot``.
    """

    h: Callable[[np.ndarray, np.ndarray], float]
    grad_x_h: Callable[[np.ndarray, np.ndarray], np.ndarray]
    dh_dt: Callable[[np.ndarray, np.ndarray, np.ndarray], float]
    nu: float

    def __post_init__(self):
        if self.nu < 0:
            raise ValueError("class-K rate nu must be non-negative")

    def alpha(self, r):
        return self.nu * r


@dataclass(frozen=True)
class LyapunovSpec:
    """CLF ``V`` with gradient and decay rate ``c3`` (``L_f V + L_g V u + c3 V <= 0``)."""

    V: Callable[[np.ndarray], float]
    grad_V: Callable[[np.ndarray], np.ndarray]
    c3: float

    def __post_init__(self):
        if self.c3 <= 0:
            raise ValueError("CLF rate c3 must be positive")


@dataclass(frozen=True)
class EnvironmentEstimate:
    """Measured environment state and its measured rate."""

    x_s_hat: np.ndarray
    x_s_hat_dot: np.ndarray

    def __post_init__(self):
        xs = np.asarray(self.x_s_hat, dtype=float).reshape(-1)
        xsd = np.asarray(self.x_s_hat_dot, dtype=float).reshape(-1)
        if xs.shape != xsd.shape:
            raise ShapeError("x_s_hat and x_s_hat_dot must have the same length")
        if not (np.all(np.isfinite(xs)) and np.all(np.isfinite(xsd))):
            raise ValueError("environment estimate must be finite")
        object.__setattr__(self, "x_s_hat", xs)
        object.__setattr__(self, "x_s_hat_dot", xsd)

    @property
    def p(self) -> int:
        return self.x_s_hat.shape[0]


def barrier_terms(sys: ControlAffineSystem, bar: BarrierSpec, x, x_s, x_s_dot):
    """Return ``(drift, lgh, fx, gx)`` of the barrier condition at ``x``.

    ``drift = dh/dt + L_f h + nu h`` and ``lgh = L_g h`` (shape ``(m,)``).
    """
    x = _vec(x, sys.n, "x")
    x_s = np.asarray(x_s, dtype=float)
    x_s_dot = np.asarray(x_s_dot, dtype=float)
    if x_s.shape != x_s_dot.shape:
        raise ShapeError("x_s and x_s_dot must have the same shape")
    fx = sys.drift(x)
    gx = sys.input_matrix(x)
    grad = _vec(bar.grad_x_h(x, x_s), sys.n, "grad_x_h")
    drift = float(bar.dh_dt(x, x_s, x_s_dot)) + float(grad @ fx) + bar.alpha(float(bar.h(x, x_s)))
    return drift, grad @ gx, fx, gx


def phi_nominal(sys: ControlAffineSystem, bar: BarrierSpec, x, x_s, x_s_dot, u) -> float:
    """Nominal barrier condition value ``dh/dt + L_f h + L_g h u + nu h``."""
    drift, lgh, _, _ = barrier_terms(sys, bar, x, x_s, x_s_dot)
    return drift + float(lgh @ _vec(u, sys.m, "u"))


def robust_residual(wce, nu: float, flow_norm: float) -> float:
    """Worst-case correction ``e_dhdt* + nu e_h* - e_grad_h* * flow_norm``."""
    return wce.e_dhdt_star + nu * wce.e_h_star - wce.e_grad_h_star * flow_norm


def phi_robust(sys: ControlAffineSystem, bar: BarrierSpec, x, est: EnvironmentEstimate, wce, u) -> float:
    """Robust condition value: nominal terms at the estimate plus the input-dependent residual."""
    if wce.e_grad_h_star < 0:
        raise ValueError("e_grad_h_star must be non-negative")
    drift, lgh, fx, gx = barrier_terms(sys, bar, x, est.x_s_hat, est.x_s_hat_dot)
    u = _vec(u, sys.m, "u")
    flow = float(np.linalg.norm(fx + gx @ u))
    return drift + float(lgh @ u) + robust_residual(wce, bar.nu, flow)


def phi_robust_hat(sys: ControlAffineSystem, bar: BarrierSpec, x, est: EnvironmentEstimate, wce,
                   u, u_nom, u_delta_bar: float) -> float:
    """Input-independent-residual robust condition value.

    The flow norm is replaced by the bound ``||f + g u_nom|| + u_delta_bar ||g||``,
    which makes the condition affine in ``u``.
    """
    drift, lgh, fx, gx = barrier_terms(sys, bar, x, est.x_s_hat, est.x_s_hat_dot)
    u = _vec(u, sys.m, "u")
    u_nom = _vec(u_nom, sys.m, "u_nom")
    flow_bound = float(np.linalg.norm(fx + gx @ u_nom)) + u_delta_bar * float(np.linalg.norm(gx))
    return drift + float(lgh @ u) + robust_residual(wce, bar.nu, flow_bound)
