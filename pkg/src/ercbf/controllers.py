"""Safety filters for barrier conditions with uncertain environment state.

Three filters are provided:

* ``cbf_qp_*``: the nominal min-norm filter, treating the environment
  estimate as exact.
* ``er_cbf_socp``: the robust filter whose constraint carries the
  input-dependent residual ``-e_grad_h* ||f + g u||``.  For scalar inputs
  its feasible set is an interval, so the SOCP is solved exactly by a clamp.
* ``er_cbf_qp*``: robustifies a nominally safe input by bounding the flow
  norm with ``||f + g u_nom|| + u_delta_bar ||g||``, which turns the robust
  constraint affine and the program into a QP.

The worst-case error engine extremizes scenario-supplied error expressions
over the box ``[-E_s, E_s] x [-E_s_dot, E_s_dot]``.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np

from .core import (
    BarrierSpec,
    ControlAffineSystem,
    EnvironmentEstimate,
    LyapunovSpec,
    barrier_terms,
    phi_nominal,
    phi_robust,
    robust_residual,
)
from .optim import DenseQP, ScalarConeConstraint, feasible_interval, half_line, project_to_interval, solve_qp

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
UNCONSTRAINED = "unconstrained"
CONSTRAINED = "constrained"


class DegenerateBarrierError(ValueError):
    """``L_g h`` vanishes where a closed form divides by it."""


class DegenerateDenominatorError(ValueError):
    """A denominator of the modification bound is numerically zero."""


class ClfInfeasibleError(ValueError):
    """``L_g V = 0`` while the CLF decrease condition is violated."""


class UnsupportedDegreeError(ValueError):
    """An error expression is not a polynomial of total degree <= 2."""


# ---------------------------------------------------------------------------
# worst-case errors


@dataclass(frozen=True)
class ErrorBounds:
    """Componentwise bounds ``|e_s| <= E_s`` and ``|e_s_dot| <= E_s_dot``."""

    E_s: np.ndarray
    E_s_dot: np.ndarray

    def __post_init__(self):
        E_s = np.asarray(self.E_s, dtype=float).reshape(-1)
        E_s_dot = np.asarray(self.E_s_dot, dtype=float).reshape(-1)
        if E_s.shape != E_s_dot.shape:
            raise ValueError("E_s and E_s_dot must have the same length")
        if np.any(E_s < 0) or np.any(E_s_dot < 0) or not np.all(np.isfinite(np.r_[E_s, E_s_dot])):
            raise ValueError("error bounds must be finite and non-negative")
        object.__setattr__(self, "E_s", E_s)
        object.__setattr__(self, "E_s_dot", E_s_dot)

    @property
    def box(self) -> np.ndarray:
        return np.concatenate([self.E_s, self.E_s_dot])

    @property
    def is_zero(self) -> bool:
        return not np.any(self.box)


@dataclass(frozen=True)
class WorstCaseErrors:
    e_h_star: float
    e_grad_h_star: float
    e_dhdt_star: float
    # whether the three extremizers agree on every coordinate they share
    common_optimizer: bool | None = None
    # maximum of e_h over the box (upper edge of the barrier uncertainty band)
    e_h_max: float | None = None

    def __post_init__(self):
        if self.e_grad_h_star < 0:
            raise ValueError("e_grad_h_star must be non-negative")

    @classmethod
    def zero(cls) -> "WorstCaseErrors":
        return cls(0.0, 0.0, 0.0, True, 0.0)


@dataclass(frozen=True)
class ErrorExpressions:
    """Scenario error maps ``fn(x, x_s_hat, x_s_hat_dot, e_s, e_s_dot)``.

    ``e_h`` and ``e_dhdt`` return scalars; ``e_grad_h`` returns the gradient
    error vector (or a scalar whose absolute value is its norm).  Functions
    should broadcast over a trailing batch axis of ``e_s``/``e_s_dot``; a
    per-point loop is used otherwise.  Set ``polynomial=False`` for
    expressions that are not quadratic, which switches to grid search.
    """

    e_h: Callable
    e_grad_h: Callable
    e_dhdt: Callable
    polynomial: bool = True


@dataclass(frozen=True)
class Extremum:
    lo: float
    hi: float
    argmin: np.ndarray
    argmax: np.ndarray
    relevant: tuple[int, ...]


_rng_probe = np.random.default_rng(20230417)
_PROBES = {}


def _probe_points(k: int) -> np.ndarray:
    if k not in _PROBES:
        _PROBES[k] = _rng_probe.uniform(-1.0, 1.0, size=(3, k))
    return _PROBES[k]


@lru_cache(maxsize=None)
def _patterns(r: int) -> tuple[tuple[int, ...], ...]:
    # 0: lower bound, 1: upper bound, 2: free (stationary)
    return tuple(itertools.product((0, 1, 2), repeat=r))


def _evaluate(fn, x, est: EnvironmentEstimate, pts: np.ndarray) -> np.ndarray:
    """Evaluate ``fn`` at error points ``pts`` (shape (N, 2p)); returns (q, N)."""
    p = est.p
    N = pts.shape[0]
    E = pts.T
    try:
        out = np.asarray(fn(x, est.x_s_hat, est.x_s_hat_dot, E[:p], E[p:]), dtype=float)
        if out.ndim == 1 and out.shape[0] == N:
            return out.reshape(1, N)
        if out.ndim == 2 and out.shape[1] == N:
            return out
        if N == 1 and out.ndim <= 1:
            return out.reshape(-1, 1)
    except (IndexError, ValueError, TypeError):
        pass
    cols = [np.asarray(fn(x, est.x_s_hat, est.x_s_hat_dot, pt[:p], pt[p:]), dtype=float).reshape(-1) for pt in pts]
    return np.stack(cols, axis=1)


@lru_cache(maxsize=64)
def _fit_design(dim: int, idx: tuple[int, ...], s: tuple[float, ...]):
    """Sample points and the linear maps from sampled values to the quadratic model.

    Returns ``(pts, coef_map, resid_map)``: ``coef_map @ vals`` gives
    ``[f0, g_1..g_k, Q_ij (i <= j)]`` and ``resid_map @ vals`` the model
    mismatch at the validation probes.
    """
    k = len(idx)
    pairs = list(itertools.combinations(range(k), 2))
    probes = _probe_points(k) * np.asarray(s)
    base = 1 + 2 * k
    n_fit = base + len(pairs)
    pts = np.zeros((n_fit + probes.shape[0], dim))
    for i in range(k):
        pts[1 + 2 * i, idx[i]] = s[i]
        pts[2 + 2 * i, idx[i]] = -s[i]
    for n, (i, j) in enumerate(pairs):
        pts[base + n, idx[i]] = s[i]
        pts[base + n, idx[j]] = s[j]
    pts[n_fit:, list(idx)] = probes
    # rows of the model in monomial form: 1, e_i, e_i e_j / (1 + [i == j])
    mono = [(i, j) for i in range(k) for j in range(i, k)]

    def features(e):
        return [1.0, *e] + [e[i] * e[j] * (0.5 if i == j else 1.0) for i, j in mono]

    local = pts[:, list(idx)]
    F = np.array([features(row) for row in local[:n_fit]])
    coef = np.linalg.solve(F, np.eye(n_fit))  # exact interpolation on the stencil
    coef_map = np.zeros((F.shape[1], pts.shape[0]))
    coef_map[:, :n_fit] = coef
    P = np.array([features(row) for row in local[n_fit:]])
    resid_map = P @ coef_map
    resid_map[:, n_fit:] -= np.eye(probes.shape[0])
    return pts, coef_map, resid_map, mono


def _fit_quadratic(fns, x, est, box: np.ndarray, idx: list[int]):
    """Fit ``f(e) = f0 + g.e + e'Qe/2`` on the coordinates ``idx`` and validate it.

    ``fns`` are evaluated on one shared stencil.  Returns, per function, a
    list ``(f0, g, Q, scale)`` of nested float lists with one entry per
    output component.
    """
    k = len(idx)
    pts, coef_map, resid_map, mono = _fit_design(box.size, tuple(idx), tuple(float(box[i]) for i in idx))
    blocks = [_evaluate(fn, x, est, pts) for fn in fns]
    vals = np.vstack(blocks)
    scales = [1.0 + float(np.abs(b).max()) for b in blocks]
    row_scale = np.repeat(scales, [b.shape[0] for b in blocks])
    if np.any(np.abs(resid_map @ vals.T).max(axis=0) > 1e-8 * row_scale):
        raise UnsupportedDegreeError("error expression is not a polynomial of total degree <= 2 in the errors")
    coef = (coef_map @ vals.T).T.tolist()
    out, row = [], 0
    for b, scale in zip(blocks, scales):
        f0, g, Q = [], [], []
        for c in coef[row:row + b.shape[0]]:
            q = [[0.0] * k for _ in range(k)]
            for (i, j), v in zip(mono, c[1 + k:]):
                q[i][j] = q[j][i] = v
            f0.append(c[0])
            g.append(c[1:1 + k])
            Q.append(q)
        out.append((f0, g, Q, scale))
        row += b.shape[0]
    return out


def _box_candidates(g: list[float], Q: list[list[float]], s: list[float]) -> list[list[float]]:
    """Corners plus stationary points of every face of the box ``[-s, s]``."""
    r = len(s)
    out = []
    for pat in _patterns(r):
        e = [(s[i] if pat[i] else -s[i]) if pat[i] != 2 else 0.0 for i in range(r)]
        free = [i for i in range(r) if pat[i] == 2]
        if free:
            fixed = [i for i in range(r) if pat[i] != 2]
            rhs = [-(g[f] + sum(Q[f][j] * e[j] for j in fixed)) for f in free]
            if len(free) == 1:
                qff = Q[free[0]][free[0]]
                if abs(qff) <= 1e-14:
                    continue
                sol = [rhs[0] / qff]
            elif len(free) == 2:
                a, b = free
                q11, q12, q22 = Q[a][a], Q[a][b], Q[b][b]
                det = q11 * q22 - q12 * q12
                if abs(det) <= 1e-14 * (1.0 + max(abs(q11), abs(q12), abs(q22))) ** 2:
                    continue
                sol = [(q22 * rhs[0] - q12 * rhs[1]) / det, (q11 * rhs[1] - q12 * rhs[0]) / det]
            else:
                QFF = np.array([[Q[a][b] for b in free] for a in free])
                if abs(np.linalg.det(QFF)) <= 1e-14 * (1.0 + np.abs(QFF).max()) ** len(free):
                    continue
                sol = np.linalg.solve(QFF, np.array(rhs)).tolist()
            inside = True
            for f, v in zip(free, sol):
                if abs(v) > s[f] * (1.0 + 1e-12):
                    inside = False
                    break
                e[f] = min(max(v, -s[f]), s[f])
            if not inside:
                continue
        out.append(e)
    return out


def extremize(fn, x, est: EnvironmentEstimate, bounds: ErrorBounds, polynomial: bool = True,
              norm: bool = False, grid_step: float = 1e-2) -> Extremum:
    """Minimum and maximum of an error expression over the error box.

    With ``norm=True`` the expression's Euclidean norm is extremized; it must
    then be affine in the errors so that the maximum sits at a corner.
    """
    box = bounds.box
    dim = box.size
    if dim != 2 * est.p:
        raise ValueError("error bounds and estimate disagree on the environment dimension")
    idx = [i for i in range(dim) if box[i] > 0]
    if not idx:
        zero = np.zeros(dim)
        v = _evaluate(fn, x, est, zero[None, :])[:, 0]
        val = float(np.linalg.norm(v)) if norm else float(v[0])
        return Extremum(val, val, zero, zero, ())
    if not polynomial:
        return _grid_extremize(fn, x, est, box, idx, norm, grid_step)
    return _extremize_model(*_fit_quadratic([fn], x, est, box, idx)[0], box, idx, norm)


def _extremize_model(f0, g, Q, scale, box: np.ndarray, idx: list[int], norm: bool) -> Extremum:
    # the validated model is exact up to rounding, so candidates are scored on it
    tol = 1e-12 * scale
    k = len(idx)
    big_q = any(abs(v) > tol for q in Q for r in q for v in r)
    relevant = [i for i in range(k)
                if any(abs(gc[i]) > tol for gc in g) or any(abs(v) > tol for q in Q for v in q[i])]
    s = [float(box[idx[i]]) for i in relevant]
    if norm:
        if big_q:
            raise UnsupportedDegreeError("gradient error must be affine in the errors")
        cands = [[c * si for c, si in zip(signs, s)] for signs in itertools.product((-1.0, 1.0), repeat=len(s))]
        vals = []
        for e in cands:
            sq = 0.0
            for f, gc in zip(f0, g):
                comp = f + sum(gc[i] * ei for i, ei in zip(relevant, e))
                sq += comp * comp
            vals.append(math.sqrt(sq))
    else:
        if len(f0) != 1:
            raise ValueError("scalar error expression expected")
        gr = [g[0][i] for i in relevant]
        Qr = [[Q[0][i][j] for j in relevant] for i in relevant]
        cands = _box_candidates(gr, Qr, s)
        r = len(s)
        vals = [f0[0] + sum(gr[i] * e[i] for i in range(r))
                + 0.5 * sum(Qr[i][j] * e[i] * e[j] for i in range(r) for j in range(r)) for e in cands]
    i_lo = min(range(len(vals)), key=vals.__getitem__)
    i_hi = max(range(len(vals)), key=vals.__getitem__)
    rel = tuple(idx[i] for i in relevant)

    def point(e):
        out = np.zeros(box.size)
        for a, v in zip(rel, e):
            out[a] = v
        return out

    return Extremum(vals[i_lo], vals[i_hi], point(cands[i_lo]), point(cands[i_hi]), rel)


def _grid_extremize(fn, x, est, box, idx, norm, grid_step):
    # grid search; sound only up to the grid resolution
    axes = [np.linspace(-box[i], box[i], int(round(1.0 / grid_step)) + 1) for i in idx]
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.zeros((mesh[0].size, box.size))
    for a, m in zip(idx, mesh):
        pts[:, a] = m.reshape(-1)
    vals = _evaluate(fn, x, est, pts)
    vals = np.linalg.norm(vals, axis=0) if norm else vals[0]
    i_lo, i_hi = int(np.argmin(vals)), int(np.argmax(vals))
    return Extremum(float(vals[i_lo]), float(vals[i_hi]), pts[i_lo], pts[i_hi], tuple(int(i) for i in idx))


def _agree(a: np.ndarray, ra, b: np.ndarray, rb) -> bool:
    return all(abs(float(a[i]) - float(b[i])) <= 1e-9 for i in set(ra) & set(rb))


def worst_case_errors(err_fns: ErrorExpressions, bounds: ErrorBounds, x, est: EnvironmentEstimate,
                      grid_step: float = 1e-2) -> WorstCaseErrors:
    """Minimum of ``e_h`` and ``e_dhdt`` and maximum norm of ``e_grad_h`` over the box."""
    if bounds.is_zero:
        return WorstCaseErrors.zero()
    box = bounds.box
    idx = [i for i in range(box.size) if box[i] > 0]
    if err_fns.polynomial and box.size == 2 * est.p:
        fits = _fit_quadratic([err_fns.e_h, err_fns.e_grad_h, err_fns.e_dhdt], x, est, box, idx)
        eh = _extremize_model(*fits[0], box, idx, False)
        eg = _extremize_model(*fits[1], box, idx, True)
        et = _extremize_model(*fits[2], box, idx, False)
    else:
        poly = err_fns.polynomial
        eh = extremize(err_fns.e_h, x, est, bounds, poly, grid_step=grid_step)
        eg = extremize(err_fns.e_grad_h, x, est, bounds, poly, norm=True, grid_step=grid_step)
        et = extremize(err_fns.e_dhdt, x, est, bounds, poly, grid_step=grid_step)
    common = (_agree(eh.argmin, eh.relevant, et.argmin, et.relevant)
              and _agree(eh.argmin, eh.relevant, eg.argmax, eg.relevant)
              and _agree(et.argmin, et.relevant, eg.argmax, eg.relevant))
    return WorstCaseErrors(eh.lo, max(eg.hi, 0.0), et.lo, common, eh.hi)


# ---------------------------------------------------------------------------
# desired input


def clf_desired_input(sys: ControlAffineSystem, lyap: LyapunovSpec, x) -> np.ndarray:
    """Minimum-norm input satisfying ``L_f V + L_g V u + c3 V <= 0``."""
    x = np.asarray(x, dtype=float)
    grad = np.asarray(lyap.grad_V(x), dtype=float)
    lfv = float(grad @ sys.drift(x))
    lgv = grad @ sys.input_matrix(x)
    val = lfv + lyap.c3 * float(lyap.V(x))
    if val <= 0.0:
        return np.zeros(sys.m)
    nrm2 = float(lgv @ lgv)
    if nrm2 == 0.0:
        raise ClfInfeasibleError("L_g V = 0 while the CLF condition is violated")
    return -val * lgv / nrm2


# ---------------------------------------------------------------------------
# filters


@dataclass(frozen=True)
class LinearConstraint:
    """``coef . u >= bound``."""

    coef: np.ndarray
    bound: float

    def value(self, u) -> float:
        return float(np.asarray(self.coef, dtype=float) @ np.asarray(u, dtype=float).reshape(-1)) - self.bound


def barrier_constraint(sys: ControlAffineSystem, bar: BarrierSpec, x, x_s, x_s_dot) -> LinearConstraint:
    """The nominal barrier condition as a linear constraint on ``u``."""
    drift, lgh, _, _ = barrier_terms(sys, bar, x, x_s, x_s_dot)
    return LinearConstraint(np.asarray(lgh, dtype=float), -drift)


@dataclass(frozen=True)
class FilterResult:
    u: np.ndarray | None
    status: str
    branch: str
    phi_value: float
    u_ref: np.ndarray  # the input being modified (u_des or u_nom*)
    u_delta: float = 0.0
    u_delta_bar: float = math.nan

    @property
    def optimal(self) -> bool:
        return self.status == OPTIMAL


def _infeasible(u_ref) -> FilterResult:
    return FilterResult(None, INFEASIBLE, CONSTRAINED, math.nan, np.asarray(u_ref, dtype=float))


def cbf_qp_closed_form(sys: ControlAffineSystem, bar: BarrierSpec, x, x_s, x_s_dot, u_des) -> FilterResult:
    """Closed-form min-norm filter for a single barrier."""
    u_des = np.asarray(u_des, dtype=float).reshape(sys.m)
    drift, lgh, _, _ = barrier_terms(sys, bar, x, x_s, x_s_dot)
    nrm2 = float(lgh @ lgh)
    if nrm2 == 0.0:
        raise DegenerateBarrierError("L_g h = 0")
    phi = drift + float(lgh @ u_des)
    if phi >= 0.0:
        return FilterResult(u_des, OPTIMAL, UNCONSTRAINED, phi, u_des)
    u = u_des - lgh * (phi / nrm2)
    return FilterResult(u, OPTIMAL, CONSTRAINED, phi_nominal(sys, bar, x, x_s, x_s_dot, u), u_des)


def _solve_filter_qp(u_ref: np.ndarray, rows: list[LinearConstraint], lyap_row=None, clf_weight: float = 1e4):
    m = u_ref.size
    if lyap_row is None:
        H = np.eye(m)
        c = -u_ref
        A = np.array([np.asarray(r.coef, dtype=float).reshape(m) for r in rows]).reshape(len(rows), m)
        b = np.array([r.bound for r in rows])
    else:
        # extra slack variable relaxing the CLF condition, penalised by clf_weight
        H = np.diag(np.r_[np.ones(m), clf_weight])
        c = np.r_[-u_ref, 0.0]
        A = np.array([np.r_[np.asarray(r.coef, dtype=float).reshape(m), 0.0] for r in rows] + [lyap_row[0]])
        b = np.array([r.bound for r in rows] + [lyap_row[1]])
    res = solve_qp(DenseQP(H, c, A, b))
    if not res.optimal:
        return None, res
    return res.z[:m], res


def cbf_qp_numeric(sys: ControlAffineSystem, barriers: Sequence[BarrierSpec], x, x_s, x_s_dot, u_des,
                   extra_constraints: Sequence[LinearConstraint] = (), clf: LyapunovSpec | None = None,
                   clf_weight: float = 1e4) -> FilterResult:
    """Min-norm filter for several barriers via the dense QP solver.

    With ``clf`` given, the CLF condition enters as a soft constraint with a
    slack penalised by ``clf_weight``.
    """
    if not barriers:
        raise ValueError("at least one barrier is required")
    u_des = np.asarray(u_des, dtype=float).reshape(sys.m)
    rows = [barrier_constraint(sys, bar, x, x_s, x_s_dot) for bar in barriers] + list(extra_constraints)
    lyap_row = None
    if clf is not None:
        xa = np.asarray(x, dtype=float)
        grad = np.asarray(clf.grad_V(xa), dtype=float)
        lgv = grad @ sys.input_matrix(xa)
        lfv = float(grad @ sys.drift(xa))
        lyap_row = (np.r_[-lgv, 1.0], lfv + clf.c3 * float(clf.V(xa)))
    u, res = _solve_filter_qp(u_des, rows, lyap_row, clf_weight)
    if u is None:
        return _infeasible(u_des)
    phi = min(row.value(u) for row in rows[:len(barriers)])
    branch = CONSTRAINED if any(i < len(barriers) for i in res.active_set) else UNCONSTRAINED
    return FilterResult(u, OPTIMAL, branch, phi, u_des)


def _require_scalar(sys: ControlAffineSystem):
    if sys.m != 1:
        raise NotImplementedError("robust filters are implemented for scalar inputs only")


def robust_cone(sys: ControlAffineSystem, bar: BarrierSpec, x, est: EnvironmentEstimate,
                wce: WorstCaseErrors) -> ScalarConeConstraint:
    """The robust barrier condition as a scalar cone constraint on ``u``."""
    _require_scalar(sys)
    drift, lgh, fx, gx = barrier_terms(sys, bar, x, est.x_s_hat, est.x_s_hat_dot)
    a = drift + robust_residual(wce, bar.nu, 0.0)
    return ScalarConeConstraint(a, float(lgh[0]), wce.e_grad_h_star, fx, gx[:, 0])


def er_cbf_socp(sys: ControlAffineSystem, bar: BarrierSpec, x, est: EnvironmentEstimate, wce: WorstCaseErrors,
                u_des, extra_constraints: Sequence[LinearConstraint] = ()) -> FilterResult:
    """Robust filter ``min |u - u_des|^2 s.t. Phi_rob(u) >= 0`` for scalar ``u``.

    An empty feasible set is reported as infeasible; no slack is added.
    """
    _require_scalar(sys)
    u_des = np.asarray(u_des, dtype=float).reshape(1)
    interval = feasible_interval(robust_cone(sys, bar, x, est, wce))
    for con in extra_constraints:
        interval = interval.intersect(half_line(float(np.asarray(con.coef).reshape(-1)[0]), con.bound))
    u = project_to_interval(float(u_des[0]), interval)
    if u is None:
        return _infeasible(u_des)
    u_arr = np.array([u])
    branch = UNCONSTRAINED if u == u_des[0] else CONSTRAINED
    return FilterResult(u_arr, OPTIMAL, branch, phi_robust(sys, bar, x, est, wce, u_arr), u_des, u - float(u_des[0]))


def u_delta_bound(sys: ControlAffineSystem, bar: BarrierSpec, x, est: EnvironmentEstimate, wce: WorstCaseErrors,
                  u_nom_star) -> float:
    """Upper bound on the modification the robust SOCP applies to ``u_nom_star``.

    The bound is a guarantee only when ``|L_g h| > e_grad_h* ||g||``; otherwise
    the robust condition need not improve along either direction of ``u`` and
    the value is returned without that certificate.
    """
    _require_scalar(sys)
    phi = phi_robust(sys, bar, x, est, wce, u_nom_star)
    if phi >= 0.0:
        return 0.0
    _, lgh, _, gx = barrier_terms(sys, bar, x, est.x_s_hat, est.x_s_hat_dot)
    spread = wce.e_grad_h_star * float(np.linalg.norm(gx))
    d_plus = float(lgh[0]) + spread
    d_minus = float(lgh[0]) - spread
    if abs(d_plus) < 1e-12 or abs(d_minus) < 1e-12:
        raise DegenerateDenominatorError("L_g h is within 1e-12 of +-e_grad_h* ||g||")
    return max(abs(phi / d_plus), abs(phi / d_minus))


def _hat_constraint(sys, bar, x, est, wce, u_nom, u_bar) -> LinearConstraint:
    drift, lgh, fx, gx = barrier_terms(sys, bar, x, est.x_s_hat, est.x_s_hat_dot)
    flow_bound = float(np.linalg.norm(fx + gx @ u_nom)) + u_bar * float(np.linalg.norm(gx))
    return LinearConstraint(np.asarray(lgh, dtype=float), -(drift + robust_residual(wce, bar.nu, flow_bound)))


def er_cbf_qp(sys: ControlAffineSystem, bar: BarrierSpec, x, est: EnvironmentEstimate, wce: WorstCaseErrors,
              u_nom_star, extra_constraints: Sequence[LinearConstraint] = (), *,
              u_delta_bar: float | None = None) -> FilterResult:
    """Robustify a nominally safe input with the input-independent residual (numeric QP).

    ``u_delta_bar`` may be passed when already computed for the same state.
    """
    _require_scalar(sys)
    u_nom = np.asarray(u_nom_star, dtype=float).reshape(1)
    u_bar = u_delta_bound(sys, bar, x, est, wce, u_nom) if u_delta_bar is None else u_delta_bar
    row = _hat_constraint(sys, bar, x, est, wce, u_nom, u_bar)
    u, res = _solve_filter_qp(u_nom, [row, *extra_constraints])
    if u is None:
        r = _infeasible(u_nom)
        return FilterResult(r.u, r.status, r.branch, r.phi_value, r.u_ref, math.nan, u_bar)
    branch = CONSTRAINED if res.active_set else UNCONSTRAINED
    return FilterResult(u, OPTIMAL, branch, row.value(u), u_nom, float(u[0] - u_nom[0]), u_bar)


def er_cbf_qp_closed_form(sys: ControlAffineSystem, bar: BarrierSpec, x, est: EnvironmentEstimate,
                          wce: WorstCaseErrors, u_nom_star, *, u_delta_bar: float | None = None) -> FilterResult:
    """Closed-form solution of the input-independent robust QP for scalar ``u``."""
    _require_scalar(sys)
    u_nom = np.asarray(u_nom_star, dtype=float).reshape(1)
    if u_delta_bar is None:
        if float(barrier_terms(sys, bar, x, est.x_s_hat, est.x_s_hat_dot)[1][0]) == 0.0:
            raise DegenerateBarrierError("L_g h(x, x_s_hat) = 0")
        u_delta_bar = u_delta_bound(sys, bar, x, est, wce, u_nom)
    u_bar = u_delta_bar
    row = _hat_constraint(sys, bar, x, est, wce, u_nom, u_bar)
    lgh = float(row.coef[0])
    if lgh == 0.0:
        raise DegenerateBarrierError("L_g h(x, x_s_hat) = 0")
    phi_hat = row.value(u_nom)
    if phi_hat >= 0.0:
        return FilterResult(u_nom, OPTIMAL, UNCONSTRAINED, phi_hat, u_nom, 0.0, u_bar)
    delta = -phi_hat / lgh
    u = u_nom + delta
    return FilterResult(u, OPTIMAL, CONSTRAINED, row.value(u), u_nom, delta, u_bar)
