"""
Barrier uncertainty bands under the three filters
=================================================

The ego car follows a human driver whose position and speed are measured
with bounded error.  The barrier value at the measured lead state is only
known up to a band; this script simulates the bundled ``paper_fig2`` setup
with each filter and plots the band together with the true barrier value.

Run with ``python3 demos/plot_uncertainty_bands.py``; figures are written
next to the script when matplotlib is installed.
"""

# %%
# Simulate
# --------
# One seeded run per filter.  Everything except the filter is shared,
# including the driver noise stream.
from dataclasses import replace
from pathlib import Path

from ercbf.cli import build_config, load_document
from ercbf.sim import run_closed_loop

cfg = build_config(load_document("paper_fig2"))
runs = {c: run_closed_loop(replace(cfg, controller=c)) for c in ("nominal", "socp", "qp")}

for name, traj in runs.items():
    m = traj.metrics()
    print(f"{name:8s} min h_band_lo = {m['min_h_band_lo']:7.3f}   min h_true = {m['min_h_true']:7.3f}"
          f"   min gap = {m['min_gap']:6.2f} m")

# %%
# The nominal filter drives the barrier at the measured state to zero, so
# the lower edge of the band goes negative: the true state may be unsafe.
# The robust filters keep a margin that covers the whole band.

# %%
# Plot
# ----
try:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
except ImportError:
    plt = None

if plt is not None:
    fig, axes = plt.subplots(3, 1, sharex=True, figsize=(7, 7))
    for ax, (name, traj) in zip(axes, runs.items()):
        t = traj["t"]
        ax.fill_between(t, traj["h_band_lo"], traj["h_band_hi"], alpha=0.3, label="band")
        ax.plot(t, traj["h_true"], lw=1, label="h at true lead state")
        ax.axhline(0.0, color="k", lw=0.5)
        ax.set_ylabel(f"{name}: h [m]")
    axes[0].legend(loc="upper right")
    axes[-1].set_xlabel("t [s]")
    out = Path(__file__).with_name("uncertainty_bands.png")
    fig.tight_layout()
    fig.savefig(out, dpi=120)
    print(f"wrote {out}")
