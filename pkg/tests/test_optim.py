import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ercbf.optim import (
    FEAS_TOL,
    STAT_TOL,
    DenseQP,
    Interval,
    RotatedConeSOCP,
    ScalarConeConstraint,
    feasible_interval,
    half_line,
    kkt_residuals,
    project_to_interval,
    solve_qp,
)


def random_qp(rng, d=2, k=4, margin=0.2):
    """Strictly convex QP whose feasible set contains a ball around a random point."""
    # eigenvalues in [0.5, 2] keep the argument well resolved by a 1e-3 grid
    R, _ = np.linalg.qr(rng.normal(size=(d, d)))
    H = R @ np.diag(rng.uniform(0.5, 2.0, size=d)) @ R.T
    H = 0.5 * (H + H.T)
    z_u = rng.uniform(-1.5, 1.5, size=d)
    c = -H @ z_u
    A = rng.normal(size=(k, d))
    z0 = rng.uniform(-1.0, 1.0, size=d)
    b = A @ z0 - margin * np.linalg.norm(A, axis=1)
    return DenseQP(H, c, A, b)


def assert_kkt(qp, res):
    r = kkt_residuals(qp, res)
    assert r["primal"] <= FEAS_TOL
    assert r["stationarity"] <= STAT_TOL
    assert r["complementarity"] <= STAT_TOL
    assert r["dual"] == 0.0


# ---------------------------------------------------------------------------
# DenseQP / solve_qp


def test_unconstrained_optimum_feasible():
    res = solve_qp(DenseQP([[1.0]], [0.0], [[1.0]], [-1.0]))
    assert res.optimal
    assert res.z[0] == 0.0
    assert res.active_set == ()


def test_projection_onto_half_line():
    res = solve_qp(DenseQP([[1.0]], [0.0], [[1.0]], [2.0]))
    assert res.z[0] == pytest.approx(2.0, abs=1e-12)
    assert res.active_set == (0,)
    assert res.multipliers[0] == pytest.approx(2.0)


def test_conflicting_constraints_infeasible():
    # u >= 1 and -u >= 0 cannot both hold
    res = solve_qp(DenseQP([[1.0]], [0.0], [[1.0], [-1.0]], [1.0, 0.0]))
    assert res.status == "infeasible"
    assert res.z is None


def test_rejects_bad_hessians():
    with pytest.raises(ValueError, match="symmetric"):
        DenseQP([[1.0, 0.5], [0.0, 1.0]], [0.0, 0.0], np.zeros((0, 2)), [])
    with pytest.raises(ValueError, match="positive definite"):
        DenseQP([[1.0, 2.0], [2.0, 1.0]], [0.0, 0.0], np.zeros((0, 2)), [])
    with pytest.raises(ValueError, match="positive definite"):
        DenseQP([[0.0]], [0.0], [[1.0]], [0.0])


def test_size_limits():
    with pytest.raises(ValueError, match="at most"):
        DenseQP(np.eye(5), np.zeros(5), np.zeros((0, 5)), [])
    with pytest.raises(ValueError, match="at most"):
        DenseQP(np.eye(1), [0.0], np.ones((9, 1)), np.zeros(9))


def test_inactive_constraints_give_unconstrained_minimizer():
    rng = np.random.default_rng(3)
    for _ in range(50):
        M = rng.normal(size=(3, 3))
        H = M @ M.T + np.eye(3)
        c = rng.normal(size=3)
        z_u = -np.linalg.solve(H, c)
        A = rng.normal(size=(4, 3))
        b = A @ z_u - 1.0 - rng.uniform(size=4)
        res = solve_qp(DenseQP(H, c, A, b))
        np.testing.assert_allclose(res.z, z_u, atol=1e-10)
        assert res.active_set == ()


def test_tie_broken_by_lowest_index():
    # two identical violated constraints: the first one enters the active set
    res = solve_qp(DenseQP([[1.0]], [0.0], [[1.0], [1.0]], [1.0, 1.0]))
    assert res.active_set == (0,)


def test_matches_grid_search():
    rng = np.random.default_rng(11)
    for _ in range(20):
        qp = random_qp(rng)
        res = solve_qp(qp)
        assert res.optimal
        assert_kkt(qp, res)
        # convexity: a grid minimum strictly inside a box around z* is global
        step, half = 1e-3, 0.25
        ax = np.arange(-half, half + step / 2, step)
        Z1, Z2 = np.meshgrid(res.z[0] + ax, res.z[1] + ax, indexing="ij")
        Z = np.stack([Z1.ravel(), Z2.ravel()], axis=1)
        obj = 0.5 * np.einsum("ni,ij,nj->n", Z, qp.H, Z) + Z @ qp.c
        feas = (Z @ qp.A.T - qp.b >= 0).all(axis=1)
        obj[~feas] = np.inf
        i = int(np.argmin(obj))
        best, f_star = Z[i], qp.objective(res.z)
        gap = obj[i] - f_star
        # nothing feasible on the grid beats the solver, and the grid gets close
        assert gap >= -1e-12
        # an active constraint pushes the nearest feasible grid point O(step) off z*
        grad = np.linalg.norm(qp.H @ res.z + qp.c)
        assert gap <= 4 * step * (grad + 1.0)
        # strong convexity: |z - z*|^2 <= 2 (f(z) - f*) / mu for every feasible z
        mu = np.linalg.eigvalsh(qp.H).min()
        assert np.linalg.norm(best - res.z) <= math.sqrt(2.0 * max(gap, 0.0) / mu) + 1e-9
        assert np.all(np.abs(best - res.z) < half - step)
        if not res.active_set:
            assert np.linalg.norm(best - res.z) <= 5e-3


@settings(max_examples=150, deadline=None, derandomize=True)
@given(seed=st.integers(0, 2**31 - 1), d=st.integers(1, 4), k=st.integers(0, 8))
def test_kkt_certificate(seed, d, k):
    rng = np.random.default_rng(seed)
    qp = random_qp(rng, d, k, margin=0.05)
    res = solve_qp(qp)
    assert res.optimal
    assert_kkt(qp, res)


@settings(max_examples=100, deadline=None, derandomize=True)
@given(seed=st.integers(0, 2**31 - 1))
def test_infeasible_is_reported_not_raised(seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=2)
    # a.z >= 1 and -a.z >= 0 plus two random constraints
    A = np.vstack([a, -a, rng.normal(size=(2, 2))])
    b = np.array([1.0, 0.0, *rng.normal(size=2)])
    assert solve_qp(DenseQP(np.eye(2), rng.normal(size=2), A, b)).status == "infeasible"


# ---------------------------------------------------------------------------
# scalar cone


def test_linear_cone_is_half_line():
    cone = ScalarConeConstraint(1.0, 2.0, 0.0, [0.0], [0.0])
    assert feasible_interval(cone) == Interval(-0.5, math.inf)


def test_unit_interval():
    cone = ScalarConeConstraint(1.0, 0.0, 1.0, [0.0, 0.0], [1.0, 0.0])
    iv = feasible_interval(cone)
    assert iv.lo == pytest.approx(-1.0, abs=1e-12)
    assert iv.hi == pytest.approx(1.0, abs=1e-12)


def test_empty_and_whole_line():
    # -1 >= |u| is empty; 1 + 0u >= 0.5 |1| always holds
    assert feasible_interval(ScalarConeConstraint(-1.0, 0.0, 1.0, [0.0], [1.0])).is_empty
    iv = feasible_interval(ScalarConeConstraint(1.0, 0.0, 0.5, [1.0], [0.0]))
    assert iv.lower_unbounded and iv.upper_unbounded


def test_single_point_set():
    # 0 >= |u| holds only at u = 0
    iv = feasible_interval(ScalarConeConstraint(0.0, 0.0, 1.0, [0.0], [1.0]))
    assert iv.lo == iv.hi == 0.0


def test_half_line_signs():
    assert half_line(-2.0, 4.0) == Interval(-math.inf, -2.0)
    assert half_line(0.0, 1.0).is_empty
    assert half_line(0.0, -1.0) == Interval(-math.inf, math.inf)


def test_projection():
    iv = Interval(-1.0, 1.0)
    assert project_to_interval(0.5, iv) == 0.5
    assert project_to_interval(3.0, iv) == 1.0
    assert project_to_interval(3.0, Interval.empty()) is None


def random_cone(rng):
    n = int(rng.integers(1, 4))
    return ScalarConeConstraint(rng.normal() * 3, rng.normal() * 2, abs(rng.normal()),
                                rng.normal(size=n), rng.normal(size=n))


def test_interval_membership_matches_pointwise_evaluation():
    rng = np.random.default_rng(5)
    kinds = set()
    for _ in range(400):
        cone = random_cone(rng)
        iv = feasible_interval(cone)
        if iv.is_empty:
            kinds.add("empty")
            grid = np.linspace(-50, 50, 10_000)
        else:
            kinds.add((iv.lower_unbounded, iv.upper_unbounded))
            lo = iv.lo if not iv.lower_unbounded else -50.0
            hi = iv.hi if not iv.upper_unbounded else 50.0
            grid = np.linspace(lo - 1.0, hi + 1.0, 10_000)
            for end in (iv.lo, iv.hi):
                if math.isfinite(end):
                    assert cone.value(end) >= -1e-9
        vals = cone.value(grid)
        clear = np.abs(vals) > 1e-9 * (1.0 + np.abs(grid))
        inside = np.array([iv.contains(u) for u in grid])
        assert np.array_equal(inside[clear], (vals >= 0)[clear])
    assert {"empty", (False, False)} <= kinds


def grid_projection(cone, u_des):
    """Two-level grid minimisation of (u - u_des)^2 over the cone; None if no grid point is feasible."""
    coarse = np.arange(-60.0, 60.0, 1e-2)
    ok = cone.value(coarse) >= 0
    if not ok.any():
        return None
    u0 = coarse[ok][np.argmin((coarse[ok] - u_des) ** 2)]
    fine = u0 + np.arange(-2e-2, 2e-2, 1e-6)
    ok = cone.value(fine) >= 0
    return fine[ok][np.argmin((fine[ok] - u_des) ** 2)]


def test_projection_matches_grid_minimizer():
    rng = np.random.default_rng(17)
    checked = 0
    while checked < 500:
        cone = random_cone(rng)
        u_des = rng.uniform(-20, 20)
        iv = feasible_interval(cone)
        ref = grid_projection(cone, u_des)
        if ref is None:
            assert iv.is_empty or iv.hi - iv.lo < 1e-2 or iv.lo > 60 or iv.hi < -60
            continue
        u = project_to_interval(u_des, iv)
        assert abs(u - ref) <= 1e-6
        checked += 1


def test_rotated_cone_rewrite_preserves_optimizer():
    rng = np.random.default_rng(23)
    for _ in range(30):
        cone = random_cone(rng)
        u_des = rng.uniform(-5, 5)
        prob = RotatedConeSOCP(cone, u_des)
        sol = prob.solve()
        if sol is None:
            assert feasible_interval(cone).is_empty
            continue
        u, q = sol
        assert prob.feasible(u, q)
        # the rotated cone is exactly q >= u^2 / 2
        us = rng.uniform(-10, 10, size=200)
        qs = rng.uniform(0, 60, size=200)
        np.testing.assert_array_equal(prob.rotated_cone_residual(us, qs) >= -1e-12, qs >= 0.5 * us * us - 1e-12)
        # grid over (u, q): nothing feasible beats the slack-form optimum
        U, Q = np.meshgrid(np.linspace(u - 3, u + 3, 601), np.linspace(0, q + 10, 601), indexing="ij")
        ok = prob.feasible(U, Q)
        assert ok.any()
        assert prob.objective(U, Q)[ok].min() >= prob.objective(u, q) - 1e-9
        # and the slack form has the same minimiser as the original objective
        assert prob.objective(u, q) == pytest.approx(0.5 * (u - u_des) ** 2 - 0.5 * u_des**2, abs=1e-12)
