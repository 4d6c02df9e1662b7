"""Small dense solvers used by the safety filters.

``solve_qp`` is a dual active-set method (Goldfarb-Idnani) for strictly
convex QPs with a handful of variables and inequality constraints.
``feasible_interval`` gives the exact feasible set of a scalar-input
second-order-cone constraint, so the scalar SOCP reduces to a clamp.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

FEAS_TOL = 1e-9
STAT_TOL = 1e-8
MAX_VARS = 4
MAX_CONSTRAINTS = 8


@dataclass(frozen=True)
class DenseQP:
    """``min 1/2 z'Hz + c'z  s.t.  A z >= b``."""

    H: np.ndarray
    c: np.ndarray
    A: np.ndarray
    b: np.ndarray
    _H_inv: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        H = np.atleast_2d(np.asarray(self.H, dtype=float))
        c = np.asarray(self.c, dtype=float).reshape(-1)
        d = c.shape[0]
        A = np.asarray(self.A, dtype=float).reshape(-1, d) if np.size(self.A) else np.zeros((0, d))
        b = np.asarray(self.b, dtype=float).reshape(-1)
        if H.shape != (d, d):
            raise ValueError(f"H must be {d}x{d}, got {H.shape}")
        if A.shape[0] != b.shape[0]:
            raise ValueError("A and b disagree on the number of constraints")
        if d > MAX_VARS or A.shape[0] > MAX_CONSTRAINTS:
            raise ValueError(f"DenseQP supports at most {MAX_VARS} variables and {MAX_CONSTRAINTS} constraints")
        diag = H.diagonal()
        if d == 1 or np.count_nonzero(H - np.diag(diag)) == 0:
            # diagonal Hessian, the usual case for min-norm filters
            if not np.all(diag > 0):
                raise ValueError("H must be positive definite")
            H_inv = np.diag(1.0 / diag)
        else:
            if np.abs(H - H.T).max() > 1e-12:
                raise ValueError("H must be symmetric")
            try:
                L_inv = np.linalg.inv(np.linalg.cholesky(H))
            except np.linalg.LinAlgError as exc:
                raise ValueError("H must be positive definite") from exc
            H_inv = L_inv.T @ L_inv
        object.__setattr__(self, "H", H)
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "_H_inv", H_inv)

    @property
    def dim(self) -> int:
        return self.c.shape[0]

    def objective(self, z) -> float:
        z = np.asarray(z, dtype=float)
        return 0.5 * float(z @ self.H @ z) + float(self.c @ z)


@dataclass(frozen=True)
class QPResult:
    status: str  # "optimal" or "infeasible"
    z: np.ndarray | None
    active_set: tuple[int, ...]
    multipliers: np.ndarray | None
    iterations: int

    @property
    def optimal(self) -> bool:
        return self.status == "optimal"


def solve_qp(qp: DenseQP, max_iter: int | None = None) -> QPResult:
    """Solve a strictly convex dense QP with the dual active-set method.

    Starts from the unconstrained minimizer and adds the most violated
    constraint (lowest index on ties) until the primal iterate is feasible.
    Infeasibility is detected when a violated constraint cannot be reached
    by any combination of dual steps.
    """
    H_inv = qp._H_inv
    A, b = qp.A, qp.b
    k = A.shape[0]
    z = -H_inv @ qp.c
    active: list[int] = []
    lam = np.zeros(k)
    max_iter = max_iter or 10 * (k + 1) ** 2
    it = 0
    while True:
        slack = A @ z - b
        if active:
            slack[active] = np.inf
        if k == 0 or slack.min() >= -FEAS_TOL:
            break
        p = int(np.argmin(slack))
        n_p = A[p]
        while True:
            it += 1
            if it > max_iter:
                raise RuntimeError("active-set iteration limit reached")
            if active:
                N = A[active].T
                HN = H_inv @ N
                r = np.linalg.solve(N.T @ HN, HN.T @ n_p)
                dz = H_inv @ n_p - HN @ r
            else:
                r = np.zeros(0)
                dz = H_inv @ n_p
            t_partial, drop = math.inf, None
            for idx, j in enumerate(active):
                if r[idx] > 0:
                    ratio = lam[j] / r[idx]
                    if ratio < t_partial:
                        t_partial, drop = ratio, idx
            curvature = float(n_p @ dz)
            if curvature <= 1e-14 * float(n_p @ H_inv @ n_p):
                # n_p is spanned by the active normals: only a dual step is possible
                if drop is None:
                    return QPResult("infeasible", None, (), None, it)
                t = t_partial
            else:
                t_full = -(float(n_p @ z) - b[p]) / curvature
                t = min(t_full, t_partial)
                z = z + t * dz
            for idx, j in enumerate(active):
                lam[j] -= t * r[idx]
            lam[p] += t
            if drop is None or t < t_partial:
                active.append(p)
                break
            lam[active[drop]] = 0.0
            del active[drop]
    lam = np.where(lam > 0, lam, 0.0)
    return QPResult("optimal", z, tuple(sorted(active)), lam, it)


def kkt_residuals(qp: DenseQP, res: QPResult) -> dict[str, float]:
    """Primal infeasibility, stationarity and complementarity of a QP solution."""
    z, lam = res.z, res.multipliers
    slack = qp.A @ z - qp.b
    return {
        "primal": float(max(0.0, -slack.min())) if slack.size else 0.0,
        "stationarity": float(np.linalg.norm(qp.H @ z + qp.c - qp.A.T @ lam)),
        "complementarity": float(np.abs(lam * slack).max()) if slack.size else 0.0,
        "dual": float(max(0.0, -lam.min())) if lam.size else 0.0,
    }


@dataclass(frozen=True)
class ScalarConeConstraint:
    """``a + b u - cnorm * ||v0 + v1 u|| >= 0`` for scalar ``u``."""

    a: float
    b: float
    cnorm: float
    v0: np.ndarray
    v1: np.ndarray

    def __post_init__(self):
        if self.cnorm < 0:
            raise ValueError("cnorm must be non-negative")
        v0 = np.asarray(self.v0, dtype=float).reshape(-1)
        v1 = np.asarray(self.v1, dtype=float).reshape(-1)
        if v0.shape != v1.shape:
            raise ValueError("v0 and v1 must have the same length")
        object.__setattr__(self, "a", float(self.a))
        object.__setattr__(self, "b", float(self.b))
        object.__setattr__(self, "cnorm", float(self.cnorm))
        object.__setattr__(self, "v0", v0)
        object.__setattr__(self, "v1", v1)

    def value(self, u):
        u = np.asarray(u, dtype=float)
        w = self.v0[:, None] + self.v1[:, None] * u.reshape(1, -1)
        out = self.a + self.b * u.reshape(-1) - self.cnorm * np.sqrt((w * w).sum(axis=0))
        return float(out[0]) if u.ndim == 0 else out.reshape(u.shape)

    def slope(self, u: float) -> float:
        w = self.v0 + self.v1 * u
        nw = float(np.linalg.norm(w))
        if nw == 0.0:
            return self.b
        return self.b - self.cnorm * float(self.v1 @ w) / nw


@dataclass(frozen=True)
class Interval:
    """Closed interval ``[lo, hi]``; infinite ends mark unbounded sides."""

    lo: float
    hi: float

    @classmethod
    def empty(cls) -> "Interval":
        return cls(math.inf, -math.inf)

    @property
    def is_empty(self) -> bool:
        return self.lo > self.hi

    @property
    def lower_unbounded(self) -> bool:
        return self.lo == -math.inf

    @property
    def upper_unbounded(self) -> bool:
        return self.hi == math.inf

    def contains(self, u: float) -> bool:
        return self.lo <= u <= self.hi

    def intersect(self, other: "Interval") -> "Interval":
        out = Interval(max(self.lo, other.lo), min(self.hi, other.hi))
        return Interval.empty() if out.is_empty else out


def half_line(coef: float, bound: float) -> Interval:
    """Feasible set of ``coef * u >= bound``."""
    if coef > 0:
        return Interval(bound / coef, math.inf)
    if coef < 0:
        return Interval(-math.inf, bound / coef)
    return Interval(-math.inf, math.inf) if bound <= 0 else Interval.empty()


def _quadratic_roots(qa: float, qb: float, qc: float, lin_scale: float) -> list[float]:
    if abs(qa) <= 1e-13 * lin_scale:
        if qb == 0.0:
            return []
        return [-qc / qb]
    disc = qb * qb - 4.0 * qa * qc
    if disc < 0.0:
        if disc > -1e-12 * qb * qb:
            return [-qb / (2.0 * qa)]
        return []
    sq = math.sqrt(disc)
    q = -0.5 * (qb + math.copysign(sq, qb))
    if q == 0.0:
        return [0.0]
    return sorted({q / qa, qc / q})


def _polish(cone: ScalarConeConstraint, r: float, inward: float) -> float:
    """Move a boundary root onto the feasible side (``inward`` is +1 or -1)."""
    for _ in range(3):
        val = cone.value(r)
        if val >= 0.0:
            break
        d = cone.slope(r)
        if d * inward <= 0.0:
            break
        r = r - val / d
    step = max(abs(r), 1.0) * 1e-15
    for _ in range(60):
        if cone.value(r) >= 0.0:
            return r
        r += inward * step
        step *= 2.0
    return r


def feasible_interval(cone: ScalarConeConstraint) -> Interval:
    """Exact set ``{u : a + b u >= cnorm * ||v0 + v1 u||}``.

    The constraint function is concave in ``u``, so the set is an interval
    (possibly empty, a half-line, or all of R). Its finite ends solve the
    squared boundary equation with ``a + b u >= 0``.
    """
    a, b, c = cone.a, cone.b, cone.cnorm
    if c == 0.0:
        return half_line(b, -a)
    A2 = float(cone.v1 @ cone.v1)
    B = float(cone.v0 @ cone.v1)
    C = float(cone.v0 @ cone.v0)
    qa = b * b - c * c * A2
    qb = 2.0 * (a * b - c * c * B)
    qc = a * a - c * c * C
    roots = _quadratic_roots(qa, qb, qc, max(b * b, c * c * A2))
    scale = lambda r: 1e-9 * (abs(a) + abs(b * r) + 1.0)  # noqa: E731
    roots = [r for r in roots if math.isfinite(r) and a + b * r >= -scale(r)]
    slope_up = b - c * math.sqrt(A2)
    slope_down = -b - c * math.sqrt(A2)
    if len(roots) == 2 and roots[1] - roots[0] > 1e-12 * max(1.0, abs(roots[0])):
        lo, hi = roots
        if cone.value(0.5 * (lo + hi)) >= 0.0:
            return Interval(_polish(cone, lo, +1.0), _polish(cone, hi, -1.0))
        roots = [0.5 * (lo + hi)]
    if roots:
        r = roots[0] if len(roots) == 1 else 0.5 * (roots[0] + roots[1])
        if slope_up > 0.0:
            return Interval(_polish(cone, r, +1.0), math.inf)
        if slope_down > 0.0:
            return Interval(-math.inf, _polish(cone, r, -1.0))
        delta = max(1.0, abs(r)) * 1e-6
        up_ok = cone.value(r + delta) >= 0.0
        down_ok = cone.value(r - delta) >= 0.0
        if up_ok and down_ok:
            return Interval(-math.inf, math.inf)
        if up_ok:
            return Interval(_polish(cone, r, +1.0), math.inf)
        if down_ok:
            return Interval(-math.inf, _polish(cone, r, -1.0))
        return Interval(r, r) if cone.value(r) >= -FEAS_TOL else Interval.empty()
    return Interval(-math.inf, math.inf) if cone.value(0.0) >= 0.0 else Interval.empty()


def project_to_interval(u_des: float, interval: Interval) -> float | None:
    """Euclidean projection of ``u_des`` onto ``interval``; ``None`` when empty."""
    if interval.is_empty:
        return None
    return min(max(float(u_des), interval.lo), interval.hi)


@dataclass(frozen=True)
class RotatedConeSOCP:
    """Slack form of ``min ||u - u_des||^2  s.t.  cone``.

    Variables ``(u, q)``; objective ``q - u_des . u``; constraints are the
    original cone plus ``||[sqrt(2) u, q - 1]|| <= q + 1``, which is the
    rotated-cone statement of ``||u||^2 / 2 <= q``.
    """

    cone: ScalarConeConstraint
    u_des: float

    def objective(self, u, q):
        return np.asarray(q) - self.u_des * np.asarray(u)

    @staticmethod
    def rotated_cone_residual(u, q):
        u = np.asarray(u, dtype=float)
        q = np.asarray(q, dtype=float)
        return (q + 1.0) - np.sqrt(2.0 * u * u + (q - 1.0) ** 2)

    @staticmethod
    def min_slack(u):
        return 0.5 * np.asarray(u, dtype=float) ** 2

    def feasible(self, u, q, tol: float = FEAS_TOL):
        return (self.cone.value(u) >= -tol) & (self.rotated_cone_residual(u, q) >= -tol)

    def solve(self) -> tuple[float, float] | None:
        u = project_to_interval(self.u_des, feasible_interval(self.cone))
        if u is None:
            return None
        return u, float(self.min_slack(u))
