"""
Worst-case barrier errors over a measurement box
================================================

The robust filters need the smallest barrier error, the smallest
time-derivative error and the largest gradient error over all measurement
errors in a box.  For the cruise-control barrier these are low-degree
polynomials, so the extremes sit at corners or at stationary points and can
be enumerated exactly.  Here the exact values are compared with a brute
force grid.
"""

# %%
import numpy as np

from ercbf import acc
from ercbf.controllers import worst_case_errors
from ercbf.core import EnvironmentEstimate

params = acc.VehicleParams()
exprs = acc.acc_error_expressions(params)
bounds = acc.AccErrorBounds(E_p=1.0, E_v=1.0, E_vdot=0.0).to_error_bounds()

# %%
# A few relative speeds
# ---------------------
# When the lead is measured faster than the ego, a speed error hurts more
# because it enters the braking-distance term linearly.
x = np.array([0.0, 27.78])
grid = np.linspace(-1, 1, 201)
EP, EV = np.meshgrid(grid, grid, indexing="ij")
e = np.stack([EP.ravel(), EV.ravel()])
ed = np.stack([EV.ravel(), np.zeros(EV.size)])

for dv in (-5.0, 0.0, 5.0):
    est = EnvironmentEstimate([80.0, 27.78 + dv], [27.78 + dv, 0.0])
    wce = worst_case_errors(exprs, bounds, x, est)
    brute = exprs.e_h(x, est.x_s_hat, est.x_s_hat_dot, e, ed).min()
    print(f"v_s_hat - v = {dv:+.0f} m/s: e_h* = {wce.e_h_star:+.5f} (grid {brute:+.5f}), "
          f"e_grad_h* = {wce.e_grad_h_star:.5f}, e_dhdt* = {wce.e_dhdt_star:+.5f}")
