"""Closed-loop adaptive cruise control simulation.

The controller runs at a fixed period and its input is held (zero-order
hold) while both vehicles are integrated with fixed-step RK4.  Every tick
records the states, the measurement, the applied input and the barrier
diagnostics, including the band ``h(x, x_s_hat) + [min e_h, max e_h]``.
"""
from __future__ import annotations

import csv
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import acc
from .acc import AccErrorBounds, HdvModel, LeadState, VehicleParams, VelocityHistory
from .controllers import (
    DegenerateDenominatorError,
    ErrorExpressions,
    WorstCaseErrors,
    barrier_constraint,
    cbf_qp_closed_form,
    cbf_qp_numeric,
    clf_desired_input,
    er_cbf_qp,
    er_cbf_qp_closed_form,
    er_cbf_socp,
    extremize,
    u_delta_bound,
    worst_case_errors,
)
from .core import BarrierSpec, EnvironmentEstimate, barrier_terms, robust_residual

log = logging.getLogger(__name__)

CONTROLLERS = ("nominal", "socp", "qp")
VIOLATION_TOL = 1e-6


class DivergenceError(RuntimeError):
    """The integrated state became non-finite."""


# ---------------------------------------------------------------------------
# integration


def integrate_step(dynamics: Callable, state, u_held, dt: float):
    """One classic RK4 step of ``dynamics(state, u)`` with the input held."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    s = [float(v) for v in state]
    k1 = dynamics(s, u_held)
    k2 = dynamics([a + 0.5 * dt * b for a, b in zip(s, k1)], u_held)
    k3 = dynamics([a + 0.5 * dt * b for a, b in zip(s, k2)], u_held)
    k4 = dynamics([a + dt * b for a, b in zip(s, k3)], u_held)
    out = [a + dt / 6.0 * (b1 + 2.0 * b2 + 2.0 * b3 + b4) for a, b1, b2, b3, b4 in zip(s, k1, k2, k3, k4)]
    if not all(math.isfinite(v) for v in out):
        raise DivergenceError("non-finite state after integration step")
    if isinstance(state, np.ndarray):
        return np.array(out)
    return tuple(out) if isinstance(state, tuple) else out


def integrate(dynamics: Callable, state, u_held, dt: float, substeps: int = 1):
    h = dt / substeps
    for _ in range(substeps):
        state = integrate_step(dynamics, state, u_held, h)
    return state


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class Scenario:
    """Physical setup of the cruise-control experiment (SI units)."""

    vehicle: VehicleParams = field(default_factory=VehicleParams)
    bounds: AccErrorBounds = field(default_factory=AccErrorBounds)
    hdv_lam: float = 0.309
    hdv_v_desired: float = 100.0 / 3.6
    hdv_tau: float = 0.0
    hdv_sigma: float = 1.13
    v_d: float = 110.0 / 3.6
    v_max: float = 120.0 / 3.6
    v_min: float = 60.0 / 3.6
    nu: float = 5.0
    c3: float = 5.0
    gap0: float = 80.0
    v0: float = 100.0 / 3.6
    v_s0: float = 100.0 / 3.6

    def __post_init__(self):
        if self.v_max <= self.v_min:
            raise ValueError("v_max must exceed v_min")
        if self.c3 <= 0 or self.nu < 0:
            raise ValueError("c3 must be positive and nu non-negative")


@dataclass(frozen=True)
class SimConfig:
    scenario: Scenario = field(default_factory=Scenario)
    controller: str = "socp"
    dt_control: float = 0.01
    substeps: int = 10
    horizon: float = 20.0
    seed: int = 0
    seeds: tuple[int, ...] = ()  # Monte Carlo seed list; empty means seed, seed + 1, ...
    measurement: str = "uniform"  # zero | uniform | corner
    resample: str = "tick"  # tick: fresh error every tick; hold: one error per run
    corner_signs: tuple[float, float, float] = (-1.0, -1.0, -1.0)
    on_infeasible: str = "hold"  # hold | abort
    clf_mode: str = "two_stage"  # two_stage | soft
    clf_weight: float = 1e4
    closed_form: bool = False

    def __post_init__(self):
        if self.controller not in CONTROLLERS:
            raise ValueError(f"controller must be one of {CONTROLLERS}")
        if self.horizon <= 0 or self.dt_control <= 0 or self.substeps < 1:
            raise ValueError("horizon, dt_control and substeps must be positive")
        if self.measurement not in acc.MEASUREMENT_POLICIES:
            raise ValueError(f"measurement must be one of {acc.MEASUREMENT_POLICIES}")
        if self.resample not in ("tick", "hold"):
            raise ValueError("resample must be 'tick' or 'hold'")
        if self.on_infeasible not in ("hold", "abort"):
            raise ValueError("on_infeasible must be 'hold' or 'abort'")
        if self.clf_mode not in ("two_stage", "soft"):
            raise ValueError("clf_mode must be 'two_stage' or 'soft'")

    @property
    def dt_integrator(self) -> float:
        return self.dt_control / self.substeps

    @property
    def n_ticks(self) -> int:
        return int(round(self.horizon / self.dt_control))


# ---------------------------------------------------------------------------
# trajectory


COLUMNS = (
    "t", "p", "v", "p_s", "v_s", "v_s_dot", "p_s_hat", "v_s_hat", "v_s_dot_hat",
    "u", "u_des", "u_nom", "gap", "h_nominal", "h_true", "h_band_lo", "h_band_hi", "V",
    "phi_nom", "phi_rob", "phi_rob_hat", "u_delta", "u_delta_bar", "u_delta_hat",
    "e_h_star", "e_grad_h_star", "e_dhdt_star",
)


@dataclass
class Trajectory:
    columns: dict[str, np.ndarray]
    status: list[str]
    events: list[str] = field(default_factory=list)
    aborted: str | None = None

    def __len__(self) -> int:
        return len(self.status)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.columns[name]

    def metrics(self) -> dict:
        finite = lambda a: a[np.isfinite(a)]  # noqa: E731
        return {
            "min_h_true": float(self["h_true"].min()),
            "min_h_band_lo": float(self["h_band_lo"].min()),
            "min_h_nominal": float(self["h_nominal"].min()),
            "min_gap": float(self["gap"].min()),
            "infeasible_steps": int(sum(s == "infeasible" for s in self.status)),
            "violating_steps": int((self["h_true"] < -VIOLATION_TOL).sum()),
            "mean_abs_u": float(np.mean(np.abs(finite(self["u"])))) if len(self) else math.nan,
            "steps": len(self),
            "aborted": self.aborted,
        }

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow([*COLUMNS, "status"])
            for i in range(len(self)):
                w.writerow([format(float(self.columns[c][i]), ".17g") for c in COLUMNS] + [self.status[i]])

    @classmethod
    def from_csv(cls, path) -> "Trajectory":
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        cols = {name: np.array([float(r[i]) for r in body]) for i, name in enumerate(header) if name != "status"}
        status = [r[header.index("status")] for r in body]
        return cls(cols, status)


# ---------------------------------------------------------------------------
# closed loop


@dataclass(frozen=True)
class AccModels:
    """Everything the controllers need, built once per run."""

    params: VehicleParams
    sys: object
    barrier: BarrierSpec
    speed_limits: tuple[BarrierSpec, BarrierSpec]
    clf: object
    errors: ErrorExpressions

    @classmethod
    def from_scenario(cls, sc: Scenario) -> "AccModels":
        return cls(sc.vehicle, acc.acc_system(sc.vehicle), acc.acc_barrier(sc.vehicle, sc.nu),
                   acc.speed_limit_barriers(sc.v_max, sc.v_min, sc.nu), acc.acc_clf(sc.v_d, sc.c3),
                   acc.acc_error_expressions(sc.vehicle))


def h_uncertainty_band(bar: BarrierSpec, x, est: EnvironmentEstimate, err_fn_eh, bounds) -> tuple[float, float]:
    """``h(x, x_s_hat) + [min e_h, max e_h]`` over the error box."""
    if isinstance(bounds, AccErrorBounds):
        bounds = bounds.to_error_bounds()
    ext = extremize(err_fn_eh, x, est, bounds)
    h_hat = float(bar.h(x, est.x_s_hat))
    return h_hat + ext.lo, h_hat + ext.hi


@dataclass
class _Step:
    u: float
    u_des: float
    u_nom: float
    status: str
    u_delta_hat: float = math.nan
    u_delta_bar: float = math.nan


def _control(cfg: SimConfig, mdl: AccModels, x, est: EnvironmentEstimate, wce: WorstCaseErrors) -> _Step:
    sys, bar = mdl.sys, mdl.barrier
    xs, xsd = est.x_s_hat, est.x_s_hat_dot
    # speed-limit rows do not depend on the filter, so they are built once per tick
    limits = [] if cfg.closed_form else [barrier_constraint(sys, b, x, xs, xsd) for b in mdl.speed_limits]
    if cfg.clf_mode == "soft":
        u_des = np.zeros(1)
        nom = cbf_qp_numeric(sys, [bar, *mdl.speed_limits], x, xs, xsd, u_des, clf=mdl.clf, clf_weight=cfg.clf_weight)
    else:
        u_des = clf_desired_input(sys, mdl.clf, x)
        if cfg.closed_form:
            nom = cbf_qp_closed_form(sys, bar, x, xs, xsd, u_des)
        else:
            nom = cbf_qp_numeric(sys, [bar], x, xs, xsd, u_des, extra_constraints=limits)
    if not nom.optimal:
        return _Step(math.nan, float(u_des[0]), math.nan, "infeasible")
    u_nom = nom.u
    if cfg.controller == "nominal":
        return _Step(float(u_nom[0]), float(u_des[0]), float(u_nom[0]), "optimal")
    if cfg.controller == "socp":
        res = er_cbf_socp(sys, bar, x, est, wce, u_nom, limits)
        delta_hat = math.nan
    else:
        closed = er_cbf_qp_closed_form(sys, bar, x, est, wce, u_nom)
        res = closed if cfg.closed_form else er_cbf_qp(sys, bar, x, est, wce, u_nom, limits,
                                                       u_delta_bar=closed.u_delta_bar)
        delta_hat = closed.u_delta
    if not res.optimal:
        return _Step(math.nan, float(u_des[0]), float(u_nom[0]), "infeasible", delta_hat, res.u_delta_bar)
    return _Step(float(res.u[0]), float(u_des[0]), float(u_nom[0]), "optimal", delta_hat, res.u_delta_bar)


def _joint_stepper(par: VehicleParams) -> Callable:
    """Scalar RK4 step for ``(p, v, p_s, v_s)``; same scheme as :func:`integrate_step`, unrolled."""
    m, c0, c1, c2 = par.m, par.c0, par.c1, par.c2

    def step(s, u, lam, v_ref, eps, v_del, h):
        # the lead accelerates toward v_ref from v_del, or from its own speed when v_del is None
        p, v, ps, vs = s

        def acc(v_, vs_):
            a_ego = (u - c0 - c1 * v_ - c2 * v_ * v_) / m
            return a_ego, lam * (v_ref - (vs_ if v_del is None else v_del)) + eps

        a1, b1 = acc(v, vs)
        v2, vs2 = v + 0.5 * h * a1, vs + 0.5 * h * b1
        a2, b2 = acc(v2, vs2)
        v3, vs3 = v + 0.5 * h * a2, vs + 0.5 * h * b2
        a3, b3 = acc(v3, vs3)
        v4, vs4 = v + h * a3, vs + h * b3
        a4, b4 = acc(v4, vs4)
        out = (p + h / 6.0 * (v + 2.0 * v2 + 2.0 * v3 + v4),
               v + h / 6.0 * (a1 + 2.0 * a2 + 2.0 * a3 + a4),
               ps + h / 6.0 * (vs + 2.0 * vs2 + 2.0 * vs3 + vs4),
               vs + h / 6.0 * (b1 + 2.0 * b2 + 2.0 * b3 + b4))
        if not all(math.isfinite(c) for c in out):
            raise DivergenceError("non-finite state after integration step")
        return list(out)

    return step


def _record_conditions(row, k, mdl: AccModels, x, est: EnvironmentEstimate, wce: WorstCaseErrors,
                       u: float, u_nom: float, u_bar: float = math.nan) -> None:
    """Barrier-condition diagnostics at the applied input, from one evaluation of the barrier terms."""
    drift, lgh, fx, gx = barrier_terms(mdl.sys, mdl.barrier, x, est.x_s_hat, est.x_s_hat_dot)
    lg, g0, g1 = float(lgh[0]), float(gx[0, 0]), float(gx[1, 0])
    nu = mdl.barrier.nu
    row["phi_nom"][k] = drift + lg * u
    row["phi_rob"][k] = drift + lg * u + robust_residual(wce, nu, math.hypot(fx[0] + g0 * u, fx[1] + g1 * u))
    if not math.isfinite(u_nom):
        return
    row["u_delta"][k] = u - u_nom
    if not math.isfinite(u_bar):
        try:
            u_bar = u_delta_bound(mdl.sys, mdl.barrier, x, est, wce, np.array([u_nom]))
        except DegenerateDenominatorError:
            return
    row["u_delta_bar"][k] = u_bar
    flow_bound = math.hypot(fx[0] + g0 * u_nom, fx[1] + g1 * u_nom) + u_bar * math.hypot(g0, g1)
    row["phi_rob_hat"][k] = drift + lg * u + robust_residual(wce, nu, flow_bound)


def run_closed_loop(config: SimConfig) -> Trajectory:
    """Simulate one seeded run; deterministic given the configuration."""
    sc = config.scenario
    mdl = AccModels.from_scenario(sc)
    par = sc.vehicle
    bounds = sc.bounds
    err_bounds = bounds.to_error_bounds()
    hdv_seq, meas_seq = np.random.SeedSequence(config.seed).spawn(2)
    hdv = HdvModel(sc.hdv_lam, sc.hdv_v_desired, sc.hdv_tau, sc.hdv_sigma, seed=hdv_seq)
    meas_rng = np.random.default_rng(meas_seq)
    history = VelocityHistory()
    # lead speed is taken as constant before t = 0 for the reaction delay
    history.append(-max(sc.hdv_tau, config.dt_integrator), sc.v_s0)

    state = [0.0, sc.v0, sc.gap0, sc.v_s0]
    stepper = _joint_stepper(par)
    history.append(0.0, sc.v_s0)
    n = config.n_ticks + 1
    cols = {c: np.full(n, np.nan) for c in COLUMNS}
    status: list[str] = []
    events: list[str] = []
    aborted = None
    u_prev = 0.0
    held_error = None

    for k in range(n):
        t = k * config.dt_control
        p, v, p_s, v_s = state
        eps = hdv.draw_noise()
        v_del = history.at(t - sc.hdv_tau) if sc.hdv_tau > 0 else v_s
        v_s_dot = hdv.acceleration(v_del, eps)
        lead = LeadState(p_s, v_s, v_s_dot)
        if config.resample == "hold" and held_error is not None:
            e = held_error
            est = EnvironmentEstimate(np.array([p_s - e[0], v_s - e[1]]), np.array([v_s - e[1], v_s_dot - e[2]]))
        else:
            est, e = acc.measure_lead(lead, bounds, config.measurement, meas_rng, config.corner_signs)
            held_error = e
        x = np.array([p, v])
        wce = worst_case_errors(mdl.errors, err_bounds, x, est)

        try:
            step = _control(config, mdl, x, est, wce)
        except (ValueError, ArithmeticError) as exc:
            step = _Step(math.nan, math.nan, math.nan, "infeasible")
            events.append(f"t={t:.4f}: controller error: {exc}")
        if step.status == "infeasible":
            events.append(f"t={t:.4f}: infeasible, holding previous input")
            log.info("infeasible filter at t=%.4f", t)
            u = u_prev
        else:
            u = step.u

        h_hat = float(mdl.barrier.h(x, est.x_s_hat))
        x_s_true = np.array([p_s, v_s])
        row = cols
        row["t"][k] = t
        row["p"][k], row["v"][k], row["p_s"][k], row["v_s"][k], row["v_s_dot"][k] = p, v, p_s, v_s, v_s_dot
        row["p_s_hat"][k], row["v_s_hat"][k], row["v_s_dot_hat"][k] = est.x_s_hat[0], est.x_s_hat[1], est.x_s_hat_dot[1]
        row["u"][k], row["u_des"][k], row["u_nom"][k] = u, step.u_des, step.u_nom
        row["gap"][k] = p_s - p
        row["h_nominal"][k] = h_hat
        row["h_true"][k] = float(mdl.barrier.h(x, x_s_true))
        row["h_band_lo"][k] = h_hat + wce.e_h_star
        row["h_band_hi"][k] = h_hat + wce.e_h_max
        row["V"][k] = float(mdl.clf.V(x))
        row["e_h_star"][k], row["e_grad_h_star"][k], row["e_dhdt_star"][k] = wce.e_h_star, wce.e_grad_h_star, wce.e_dhdt_star
        _record_conditions(row, k, mdl, x, est, wce, u, step.u_nom, step.u_delta_bar)
        row["u_delta_hat"][k] = step.u_delta_hat
        status.append(step.status)
        if step.status == "infeasible" and config.on_infeasible == "abort":
            aborted = "infeasible"
            break
        u_prev = u
        if k == n - 1:
            break

        t_sub = t
        h_int = config.dt_integrator
        for _ in range(config.substeps):
            v_del = history.at(t_sub - sc.hdv_tau) if sc.hdv_tau > 0.0 else None
            try:
                state = stepper(state, u, hdv.lam, hdv.v_desired, eps, v_del, h_int)
            except DivergenceError as exc:
                aborted = "divergence"
                events.append(f"t={t_sub:.4f}: {exc}")
                break
            t_sub += h_int
            if sc.hdv_tau > 0.0:
                history.append(t_sub, state[3])
        if aborted:
            break

    n_rec = len(status)
    cols = {c: a[:n_rec] for c, a in cols.items()}
    return Trajectory(cols, status, events, aborted)


# ---------------------------------------------------------------------------
# Monte Carlo


@dataclass
class MonteCarloSummary:
    runs: list[dict]
    aggregate: dict


def _run_metrics(config: SimConfig) -> dict:
    traj = run_closed_loop(config)
    return {"seed": config.seed, **traj.metrics()}


def monte_carlo(config: SimConfig, n_runs: int, workers: int | None = None,
                seeds: Sequence[int] | None = None) -> MonteCarloSummary:
    """Run ``n_runs`` seeded simulations and summarise safety statistics.

    Seeds come from ``seeds``, then ``config.seeds``, then default to
    ``config.seed, config.seed + 1, ...``.  Runs may be dispatched to worker
    processes, at most ``workers`` (default: CPU count) further capped by the
    ``ERCBF_THREADS`` environment variable; results are ordered by seed.
    """
    if n_runs < 1:
        raise ValueError("n_runs must be at least 1")
    if seeds is None:
        seeds = config.seeds or [config.seed + i for i in range(n_runs)]
    seeds = list(seeds)
    if len(seeds) < n_runs:
        raise ValueError(f"{n_runs} runs requested but only {len(seeds)} seeds given")
    configs = [replace(config, seed=s) for s in seeds[:n_runs]]
    workers = workers or os.cpu_count() or 1
    cap = os.environ.get("ERCBF_THREADS")
    if cap:
        workers = min(workers, int(cap))
    workers = max(1, min(workers, len(configs)))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            runs = list(pool.map(_run_metrics, configs))
    else:
        runs = [_run_metrics(c) for c in configs]
    runs.sort(key=lambda r: r["seed"])
    min_h = np.array([r["min_h_true"] for r in runs])
    agg = {
        "n_runs": len(runs),
        "controller": config.controller,
        "violation_rate": float(np.mean([r["violating_steps"] > 0 for r in runs])),
        "violating_steps": int(sum(r["violating_steps"] for r in runs)),
        "infeasible_steps": int(sum(r["infeasible_steps"] for r in runs)),
        "min_h_true": {
            "min": float(min_h.min()),
            "p05": float(np.percentile(min_h, 5)),
            "median": float(np.median(min_h)),
            "max": float(min_h.max()),
        },
        "min_gap": [r["min_gap"] for r in runs],
    }
    return MonteCarloSummary(runs, agg)
