"""Environmentally robust control barrier function (ER-CBF) safety filters.

The filters keep ``h(x, x_s) >= 0`` for a controlled system whose safety
depends on an environment state ``x_s`` that is only known up to bounded
measurement errors.  :mod:`ercbf.acc` provides an adaptive cruise control
testbed, :mod:`ercbf.sim` the closed-loop simulator and :mod:`ercbf.cli` the
``ercbf`` command.
"""
from .controllers import (
    DegenerateBarrierError,
    DegenerateDenominatorError,
    ErrorBounds,
    ErrorExpressions,
    FilterResult,
    LinearConstraint,
    UnsupportedDegreeError,
    WorstCaseErrors,
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
from .core import (
    BarrierSpec,
    ControlAffineSystem,
    EnvironmentEstimate,
    LyapunovSpec,
    ShapeError,
    phi_nominal,
    phi_robust,
    phi_robust_hat,
)
from .optim import DenseQP, QPResult, solve_qp
from .sim import MonteCarloSummary, Scenario, SimConfig, Trajectory, monte_carlo, run_closed_loop

__version__ = "0.1.0"

__all__ = [
    "BarrierSpec", "ControlAffineSystem", "DegenerateBarrierError", "DegenerateDenominatorError", "DenseQP",
    "EnvironmentEstimate", "ErrorBounds", "ErrorExpressions", "FilterResult", "LinearConstraint", "LyapunovSpec",
    "MonteCarloSummary", "QPResult", "Scenario", "ShapeError", "SimConfig", "Trajectory", "UnsupportedDegreeError",
    "WorstCaseErrors", "cbf_qp_closed_form", "cbf_qp_numeric", "clf_desired_input", "er_cbf_qp",
    "er_cbf_qp_closed_form", "er_cbf_socp", "extremize", "monte_carlo", "phi_nominal", "phi_robust",
    "phi_robust_hat", "run_closed_loop", "solve_qp", "u_delta_bound", "worst_case_errors",
]
