"""``ercbf run|compare|montecarlo``: JSON-configured experiments with CSV/JSON output.

Config files are JSON objects.  Keys carry their unit as a suffix
(``_s``, ``_m``, ``_kg``, ``_mps``, ``_mps2``); speeds may be given either in
``_kmh`` or ``_mps``.  Keys starting with ``_note_`` are free-form comments and
are ignored.  Any other unknown key is an error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
import time
from dataclasses import replace
from importlib import resources
from pathlib import Path

import jsonschema

from .acc import KMH, AccErrorBounds, VehicleParams
from .sim import CONTROLLERS, MonteCarloSummary, Scenario, SimConfig, Trajectory, monte_carlo, run_closed_loop

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INFEASIBLE = 3
EXIT_DIVERGENCE = 4

log = logging.getLogger("ercbf")

_NUM = {"type": "number"}
_POS = {"type": "number", "exclusiveMinimum": 0}
_NONNEG = {"type": "number", "minimum": 0}
_NOTES = {"^_note_": {}}


def _section(props: dict, speeds: tuple[str, ...] = ()) -> dict:
    """Object schema with fixed keys, optional speed keys in either unit, and notes."""
    props = dict(props)
    exclusive = []
    for name in speeds:
        props[f"{name}_kmh"] = _NUM
        props[f"{name}_mps"] = _NUM
        exclusive.append({"not": {"required": [f"{name}_kmh", f"{name}_mps"]}})
    schema = {"type": "object", "properties": props, "patternProperties": _NOTES, "additionalProperties": False}
    if exclusive:
        schema["allOf"] = exclusive
    return schema


SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "additionalProperties": False,
    "patternProperties": _NOTES,
    "properties": {
        "controller": {"enum": list(CONTROLLERS)},
        "seed": {"type": "integer", "minimum": 0},
        "seeds": {"type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 1},
        "runs": {"type": "integer", "minimum": 1},
        "horizon_s": _POS,
        "dt_control_s": _POS,
        "dt_integrator_s": _POS,
        "substeps": {"type": "integer", "minimum": 1},
        "measurement": {"enum": ["zero", "uniform", "corner"]},
        "resample": {"enum": ["tick", "hold"]},
        "corner_signs": {"type": "array", "items": {"enum": [-1, 1]}, "minItems": 3, "maxItems": 3},
        "on_infeasible": {"enum": ["hold", "abort"]},
        "clf_mode": {"enum": ["two_stage", "soft"]},
        "clf_weight": _POS,
        "closed_form": {"type": "boolean"},
        "vehicle": _section({
            "m_kg": _POS, "c0": _NONNEG, "c1": _NONNEG, "c2": _NONNEG, "c_d": _POS,
            "grav_mps2": _POS, "T_h_s": _NONNEG,
        }),
        "hdv": _section({"lam": _NONNEG, "tau_s": _NONNEG, "sigma": _NONNEG}, speeds=("v_desired",)),
        "bounds": _section({"E_p_m": _NONNEG, "E_v_mps": _NONNEG, "E_vdot_mps2": _NONNEG}),
        "scenario": _section({"nu": _NONNEG, "c3": _POS, "gap0_m": _NUM},
                             speeds=("v_d", "v_max", "v_min", "v0", "v_s0")),
        "output": _section({"dir": {"type": "string"}}),
    },
    "not": {"required": ["dt_integrator_s", "substeps"]},
}


class ConfigError(ValueError):
    """Invalid experiment configuration; the message names the offending key."""


def _key_path(parts) -> str:
    return "$" + "".join(f"[{p}]" if isinstance(p, int) else f".{p}" for p in parts)


def _speed(section: dict, name: str, default: float) -> float:
    if f"{name}_kmh" in section:
        return section[f"{name}_kmh"] * KMH
    return section.get(f"{name}_mps", default)


def bundled_configs() -> list[str]:
    return sorted(p.name for p in resources.files("ercbf").joinpath("configs").iterdir() if p.name.endswith(".json"))


def resolve_config(ref: str) -> Path | None:
    """A filesystem path, or the name of a bundled config with or without ``.json``."""
    path = Path(ref)
    if path.is_file():
        return path
    name = ref if ref.endswith(".json") else ref + ".json"
    bundled = resources.files("ercbf").joinpath("configs").joinpath(name)
    return Path(str(bundled)) if bundled.is_file() else None


def load_document(ref: str) -> dict:
    path = resolve_config(ref)
    if path is None:
        raise ConfigError(f"config not found: {ref!r} (bundled: {', '.join(bundled_configs())})")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    validate_document(doc)
    return doc


def validate_document(doc) -> None:
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        where = _key_path(err.absolute_path)
        if err.validator == "additionalProperties":
            extra = sorted(set(err.instance) - set(err.schema.get("properties", {})))
            extra = [k for k in extra if not k.startswith("_note_")]
            where = _key_path([*err.absolute_path, extra[0]]) if extra else where
            raise ConfigError(f"{where}: unknown key")
        if err.validator == "not" and "required" in err.validator_value:
            keys = err.validator_value["required"]
            raise ConfigError(f"{_key_path([*err.absolute_path, keys[0]])}: give only one of {', '.join(keys)}")
        raise ConfigError(f"{where}: {err.message}")


def build_config(doc: dict) -> SimConfig:
    """Translate a validated document into a :class:`SimConfig` (SI units)."""
    try:
        return _build_config(doc)
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"$: {exc}") from exc


def _build_config(doc: dict) -> SimConfig:
    d_sc, d_veh = Scenario(), VehicleParams()
    veh = doc.get("vehicle", {})
    vehicle = VehicleParams(
        m=veh.get("m_kg", d_veh.m), c0=veh.get("c0", d_veh.c0), c1=veh.get("c1", d_veh.c1),
        c2=veh.get("c2", d_veh.c2), c_d=veh.get("c_d", d_veh.c_d), grav=veh.get("grav_mps2", d_veh.grav),
        T_h=veh.get("T_h_s", d_veh.T_h))
    b = doc.get("bounds", {})
    d_b = AccErrorBounds()
    bounds = AccErrorBounds(b.get("E_p_m", d_b.E_p), b.get("E_v_mps", d_b.E_v), b.get("E_vdot_mps2", d_b.E_vdot))
    hdv = doc.get("hdv", {})
    sc = doc.get("scenario", {})
    scenario = Scenario(
        vehicle=vehicle, bounds=bounds,
        hdv_lam=hdv.get("lam", d_sc.hdv_lam), hdv_v_desired=_speed(hdv, "v_desired", d_sc.hdv_v_desired),
        hdv_tau=hdv.get("tau_s", d_sc.hdv_tau), hdv_sigma=hdv.get("sigma", d_sc.hdv_sigma),
        v_d=_speed(sc, "v_d", d_sc.v_d), v_max=_speed(sc, "v_max", d_sc.v_max), v_min=_speed(sc, "v_min", d_sc.v_min),
        nu=sc.get("nu", d_sc.nu), c3=sc.get("c3", d_sc.c3), gap0=sc.get("gap0_m", d_sc.gap0),
        v0=_speed(sc, "v0", d_sc.v0), v_s0=_speed(sc, "v_s0", d_sc.v_s0))
    d = SimConfig()
    dt = doc.get("dt_control_s", d.dt_control)
    substeps = doc.get("substeps", d.substeps)
    if "dt_integrator_s" in doc:
        ratio = dt / doc["dt_integrator_s"]
        if ratio < 1.0 - 1e-9 or abs(ratio - round(ratio)) > 1e-9:
            raise ConfigError("$.dt_integrator_s: must divide dt_control_s and not exceed it")
        substeps = int(round(ratio))
    horizon = doc.get("horizon_s", d.horizon)
    if abs(horizon / dt - round(horizon / dt)) > 1e-9:
        raise ConfigError("$.horizon_s: must be a whole number of control periods")
    return SimConfig(
        scenario=scenario, controller=doc.get("controller", d.controller), dt_control=dt, substeps=substeps,
        horizon=horizon, seed=doc.get("seed", d.seed), seeds=tuple(doc.get("seeds", ())),
        measurement=doc.get("measurement", d.measurement), resample=doc.get("resample", d.resample),
        corner_signs=tuple(float(v) for v in doc.get("corner_signs", d.corner_signs)),
        on_infeasible=doc.get("on_infeasible", d.on_infeasible), clf_mode=doc.get("clf_mode", d.clf_mode),
        clf_weight=doc.get("clf_weight", d.clf_weight), closed_form=doc.get("closed_form", d.closed_form))


# ---------------------------------------------------------------------------
# output


def _clean(obj):
    """JSON-safe copy: non-finite floats become null."""
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if hasattr(obj, "tolist"):
        return _clean(obj.tolist())
    return obj


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(_clean(obj), indent=2, allow_nan=False) + "\n", encoding="utf-8")


def _exit_code(traj: Trajectory) -> int:
    return {"infeasible": EXIT_INFEASIBLE, "divergence": EXIT_DIVERGENCE}.get(traj.aborted, EXIT_OK)


def _timed_run(cfg: SimConfig) -> tuple[Trajectory, dict]:
    t0 = time.perf_counter()
    traj = run_closed_loop(cfg)
    metrics = {"controller": cfg.controller, "seed": cfg.seed, **traj.metrics(),
               "wall_time_s": time.perf_counter() - t0, "events": traj.events}
    return traj, metrics


def _out_dir(args, doc: dict) -> Path:
    out = Path(args.out or doc.get("output", {}).get("dir") or "ercbf_out")
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_run(args) -> int:
    doc = load_document(args.config)
    cfg = build_config(doc)
    overrides = {k: v for k, v in (("controller", args.controller), ("seed", args.seed)) if v is not None}
    cfg = replace(cfg, **overrides)
    out = _out_dir(args, doc)
    traj, metrics = _timed_run(cfg)
    traj.to_csv(out / "trajectory.csv")
    _write_json(out / "metrics.json", metrics)
    log.info("wrote %s", out)
    return _exit_code(traj)


def compare_trajectories(trajs: dict[str, Trajectory]) -> dict:
    """Paired-run deltas and the closed-form decomposition of the robust QP input."""
    socp, qp, nom = trajs["socp"], trajs["qp"], trajs["nominal"]
    n = min(len(t) for t in trajs.values())

    def delta(a, b, col):
        return (a[col][:n] - b[col][:n]).tolist()

    d_u = [abs(v) for v in delta(qp, socp, "u")]
    d_gap = [abs(v) for v in delta(qp, socp, "gap")]
    return {
        "t": socp["t"][:n].tolist(),
        "max_abs_u_qp_minus_socp": max(d_u),
        "max_abs_gap_qp_minus_socp": max(d_gap),
        "min_gap": {name: float(t["gap"].min()) for name, t in trajs.items()},
        "deltas": {
            "u_qp_minus_socp": delta(qp, socp, "u"),
            "gap_qp_minus_socp": delta(qp, socp, "gap"),
            "h_qp_minus_socp": delta(qp, socp, "h_true"),
            "u_socp_minus_nominal": delta(socp, nom, "u"),
            "gap_socp_minus_nominal": delta(socp, nom, "gap"),
            "h_socp_minus_nominal": delta(socp, nom, "h_true"),
        },
        # u_rob = u_nom + u_delta_hat for the closed-form robust QP
        "qp_decomposition": {
            "u_nom": qp["u_nom"][:n].tolist(),
            "u_delta_hat": qp["u_delta_hat"][:n].tolist(),
            "u_rob": qp["u"][:n].tolist(),
        },
    }


def cmd_compare(args) -> int:
    doc = load_document(args.config)
    cfg = build_config(doc)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    out = _out_dir(args, doc)
    trajs, metrics = {}, {}
    for name in CONTROLLERS:
        trajs[name], metrics[name] = _timed_run(replace(cfg, controller=name))
        trajs[name].to_csv(out / f"trajectory_{name}.csv")
    report = {"seed": cfg.seed, "metrics": metrics, **compare_trajectories(trajs)}
    _write_json(out / "comparison.json", report)
    codes = [_exit_code(t) for t in trajs.values()]
    return max(codes)


def write_runs_csv(path: Path, summary: MonteCarloSummary) -> None:
    fields = [k for k in summary.runs[0] if k != "events"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(fields)
        for r in summary.runs:
            w.writerow([format(r[k], ".17g") if isinstance(r[k], float) else ("" if r[k] is None else r[k])
                        for k in fields])


def cmd_montecarlo(args) -> int:
    doc = load_document(args.config)
    cfg = build_config(doc)
    overrides = {k: v for k, v in (("controller", args.controller), ("seed", args.seed)) if v is not None}
    cfg = replace(cfg, **overrides)
    n_runs = args.runs or doc.get("runs") or (len(cfg.seeds) if cfg.seeds else 100)
    out = _out_dir(args, doc)
    t0 = time.perf_counter()
    try:
        summary = monte_carlo(cfg, n_runs)
    except ValueError as exc:
        raise ConfigError(f"$.seeds: {exc}") from exc
    agg = {**summary.aggregate, "wall_time_s": time.perf_counter() - t0}
    _write_json(out / "summary.json", agg)
    write_runs_csv(out / "runs.csv", summary)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ercbf", description="Robust CBF adaptive cruise control experiments.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress and controller events")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("config", help="config file path or bundled config name (e.g. paper_fig2)")
        p.add_argument("--out", help="output directory (default: config output.dir, else ./ercbf_out)")
        p.add_argument("--seed", type=int)

    run = sub.add_parser("run", help="one closed-loop run")
    common(run)
    run.add_argument("--controller", choices=CONTROLLERS)
    run.set_defaults(func=cmd_run)

    cmp_ = sub.add_parser("compare", help="nominal, socp and qp on the same seed")
    common(cmp_)
    cmp_.set_defaults(func=cmd_compare)

    mc = sub.add_parser("montecarlo", help="seeded batch of runs")
    common(mc)
    mc.add_argument("--controller", choices=CONTROLLERS)
    mc.add_argument("--runs", type=int, help="number of runs (default: config runs, else 100)")
    mc.set_defaults(func=cmd_montecarlo)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if getattr(args, "runs", None) is not None and args.runs < 1:
        print("error: --runs must be at least 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
