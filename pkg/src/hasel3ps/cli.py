"""Command-line front end.

Subcommands ``simulate``, ``identify``, ``validate``, ``fkm`` and ``ikm``.
All files are written to the configured output directory, or to
``$HASEL3PS_OUTPUT_DIR`` when set. Exit codes:

==  ========================================================
0   success
2   usage error
3   configuration or dataset error
4   simulation failure
5   identification failure (at least one actuator failed)
6   kinematic singularity
==  ========================================================
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, ExperimentConfig, load_config
from .core import PARAM_NAMES, ActuatorParams, DomainError, rest_state
from .datasets import (
    MonotonicityError,
    ParseError,
    TimeSeries,
    format_float,
    load_dataset,
    save_dataset,
)
from .identification import (
    DegenerateSignal,
    IdentProblem,
    heights_from_tip,
    identify,
    nrmse_fit,
    pooled_fit,
    simulate_heights,
)
from .integrator import StiffnessFailure, integrate
from .kinematics import DegenerateGeometry, PlatformGeometry, SingularNormal, fkm, fkm_batch, ikm

__all__ = ["main", "run_simulate", "run_identify", "run_validate", "load_params_table",
           "EXIT_OK", "EXIT_USAGE", "EXIT_DATA", "EXIT_SIM", "EXIT_OPT", "EXIT_GEOM"]

log = logging.getLogger("hasel3ps")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_SIM, EXIT_OPT, EXIT_GEOM = 0, 2, 3, 4, 5, 6

PARAM_UNITS = {"K": "N/m", "K_b": "N*m/rad", "b": "kg*s", "R0": "ohm", "R1": "ohm",
               "R2": "ohm", "C1": "F", "gamma1": "-", "gamma2": "-"}
STATE_NAMES = ("theta", "l_p", "p", "Q1", "Q2")
PARAMS_SCHEMA_HEADER = ["parameter", "unit", "actuator_1", "actuator_2", "actuator_3"]


# --------------------------------------------------------------------------
# output helpers


def _provenance(cfg: ExperimentConfig, command: str) -> list[str]:
    return [f"hasel3ps {__version__}", f"config_sha256={cfg.sha256}", f"command={command}"]


def _write_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n")
    return path


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_manifest(out: Path, cfg: ExperimentConfig, command: str, files: list[Path],
                    extra: dict | None = None) -> Path:
    man = {
        "toolkit": "hasel3ps",
        "version": __version__,
        "command": command,
        "config_sha256": cfg.sha256,
        "config": cfg.resolved,
        "outputs": {p.name: _sha256(p) for p in files},
    }
    if extra:
        man.update(extra)
    return _write_json(out / f"manifest_{command}.json", man)


def _normals(h: np.ndarray, tips: np.ndarray, geom: PlatformGeometry) -> np.ndarray:
    cp = np.column_stack([np.broadcast_to(geom.xy.mean(axis=0), (h.shape[0], 2)), h.mean(axis=1)])
    return (tips - cp) / geom.L


# --------------------------------------------------------------------------
# simulate


def run_simulate(cfg: ExperimentConfig) -> dict[str, Path]:
    """Simulate the configured experiment and write trajectory, sensor and manifest files."""
    out = cfg.output_path()
    out.mkdir(parents=True, exist_ok=True)
    ts = cfg.sample_times
    tr = integrate(rest_state(cfg.constants), cfg.excitation, (0.0, float(ts[-1])), cfg.solver,
                   sample_times=ts, params=cfg.actuators, consts=cfg.constants)
    tips = fkm_batch(tr.h_p, cfg.geometry)
    nrm = _normals(tr.h_p, tips, cfg.geometry)
    u = np.array([cfg.excitation(t) for t in ts])

    cols = {"t": ts}
    for j, name in enumerate(STATE_NAMES):
        for i in range(3):
            cols[f"{name}_{i + 1}"] = tr.states[:, 3 * j + i]
    for i in range(3):
        cols[f"h_{i + 1}"] = tr.h_p[:, i]
    for k, ax in enumerate("xyz"):
        cols[f"tip_{ax}"] = tips[:, k]
    for k, ax in enumerate("xyz"):
        cols[f"n_{ax}"] = nrm[:, k]
    cols["H"] = tr.H
    for i in range(3):
        cols[f"y_{i + 1}"] = tr.y[:, i]
    prov = _provenance(cfg, "simulate")
    f_traj = save_dataset(out / "trajectory.csv", TimeSeries(cols), prov)

    sensor = {"t": ts, "tip_x": tips[:, 0], "tip_y": tips[:, 1], "tip_z": tips[:, 2],
              "u1": u[:, 0], "u2": u[:, 1], "u3": u[:, 2]}
    f_sens = save_dataset(out / "sensor.csv", TimeSeries(sensor), prov)
    stats = {"n_steps": tr.n_steps, "n_rejected": tr.n_rejected,
             "n_samples": int(ts.size), "saturated_samples": int(tr.saturated.any(axis=1).sum())}
    f_man = _write_manifest(out, cfg, "simulate", [f_traj, f_sens], {"solver_stats": stats})
    return {"trajectory": f_traj, "sensor": f_sens, "manifest": f_man}


# --------------------------------------------------------------------------
# datasets -> per-actuator problems


def _measured(cfg: ExperimentConfig, data: TimeSeries):
    """Tip positions, IKM heights and inputs at the usable samples."""
    if cfg.z_policy is None:
        raise ConfigError("dataset.z_policy must be declared ('fixed' or 'column')")
    if not cfg.geometry_declared:
        raise ConfigError("measured data needs geometry.antenna_length_m and the anchor layout")
    if cfg.z_policy == "column":
        if "tip_z" not in data:
            raise ConfigError("z_policy 'column' but the dataset has no tip_z column")
        z = data["tip_z"]
    else:
        z = np.full(len(data), cfg.nominal_tip_z)
    tips = np.column_stack([data["tip_x"], data["tip_y"], z])
    h, singular = heights_from_tip(tips, cfg.geometry)
    keep = ~singular
    if keep.sum() < 2:
        raise ConfigError("fewer than two samples survive the inverse kinematics")
    t = data.t[keep]
    if all(f"u{i}" in data for i in (1, 2, 3)):
        u = np.column_stack([data[f"u{i}"] for i in (1, 2, 3)])[keep]
        source = "dataset"
    else:
        u = np.array([cfg.excitation(tt) for tt in t])
        source = "config"
    return t, tips[keep], h[keep], u, {"n_rows": len(data), "n_singular": int(singular.sum()),
                                       "n_gaps": int(data.gaps().size), "input_source": source}


def _problems(cfg: ExperimentConfig, t, h, u, initial) -> list[IdentProblem]:
    return [IdentProblem(t, u[:, i], h[:, i], initial[i], cfg.constants, free=cfg.free,
                         bounds=cfg.bounds or None, detrend=cfg.detrend) for i in range(3)]


def _identify_one(args):
    problem, lm, solver = args
    try:
        res = identify(problem, lm, solver)
    except (DomainError, StiffnessFailure, DegenerateSignal, ValueError,
            np.linalg.LinAlgError) as exc:
        return None, f"failed: {type(exc).__name__}: {exc}"
    return res, res.status


def _simulated_heights(problems, params, solver) -> np.ndarray:
    cols = []
    for pb, p in zip(problems, params):
        h, _ = simulate_heights(p, pb, solver)
        cols.append(h)
    return np.column_stack(cols)


def _fit_rows(problems, h_sim, tips_meas, geom):
    fits = []
    for i, pb in enumerate(problems):
        try:
            fits.append(nrmse_fit(pb.h_meas, h_sim[:, i]))
        except DegenerateSignal:
            fits.append(float("nan"))
    tips_sim = fkm_batch(h_sim, geom)
    try:
        xy = pooled_fit(tips_meas[:, :2], tips_sim[:, :2])
    except DegenerateSignal:
        xy = float("nan")
    return fits, xy, tips_sim


def _overlay(t, pbs, h_sim, tips_meas, tips_sim) -> TimeSeries:
    cols = {"t": t}
    for i in range(3):
        cols[f"h_meas_{i + 1}"] = pbs[i].h_meas
    for i in range(3):
        cols[f"h_sim_{i + 1}"] = h_sim[:, i]
    cols.update(tip_x_meas=tips_meas[:, 0], tip_y_meas=tips_meas[:, 1],
                tip_x_sim=tips_sim[:, 0], tip_y_sim=tips_sim[:, 1])
    return TimeSeries(cols)


def write_params_table(path: Path, params, comments: list[str]) -> Path:
    lines = [f"# {c}" for c in comments] + [",".join(PARAMS_SCHEMA_HEADER)]
    for n in PARAM_NAMES:
        lines.append(",".join([n, PARAM_UNITS[n]] + [format_float(getattr(p, n)) for p in params]))
    path.write_text("\n".join(lines) + "\n")
    return path


def load_params_table(path) -> tuple[ActuatorParams, ActuatorParams, ActuatorParams]:
    """Read a ``params.csv`` written by ``identify``."""
    path = Path(path)
    rows = {}
    header = None
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        f = [s.strip() for s in line.split(",")]
        if header is None:
            if f != PARAMS_SCHEMA_HEADER:
                raise ParseError(f"expected header {','.join(PARAMS_SCHEMA_HEADER)}", lineno)
            header = f
            continue
        if len(f) != 5 or f[0] not in PARAM_NAMES:
            raise ParseError("malformed parameter row", lineno)
        try:
            rows[f[0]] = [float(v) for v in f[2:]]
        except ValueError as exc:
            raise ParseError(str(exc), lineno) from None
    missing = [n for n in PARAM_NAMES if n not in rows]
    if missing:
        raise ParseError(f"parameter table misses {missing}")
    try:
        return tuple(ActuatorParams(**{n: rows[n][i] for n in PARAM_NAMES}) for i in range(3))
    except ValueError as exc:
        raise ParseError(str(exc)) from None


def _fit_table(path: Path, rows: list[dict], comments: list[str]) -> Path:
    keys = ["channel", "fit_percent", "status", "initial_fit_percent", "iterations",
            "n_simulations"]
    lines = [f"# {c}" for c in comments] + [",".join(keys)]
    for r in rows:
        vals = []
        for k in keys:
            v = r.get(k, "")
            vals.append(format_float(v) if isinstance(v, float) else str(v))
        lines.append(",".join(vals))
    path.write_text("\n".join(lines) + "\n")
    return path


# --------------------------------------------------------------------------
# identify / validate


def run_identify(cfg: ExperimentConfig, data_path, workers: int = 3) -> tuple[dict[str, Path], bool]:
    """Identify all three actuators; returns written files and whether all succeeded."""
    data = load_dataset(data_path)
    t, tips, h, u, info = _measured(cfg, data)
    problems = _problems(cfg, t, h, u, cfg.actuators)
    lm = replace(cfg.lm, workers=1)
    jobs = [(pb, lm, cfg.ident_solver) for pb in problems]
    if workers > 1:
        with ProcessPoolExecutor(min(workers, 3)) as ex:
            outcomes = list(ex.map(_identify_one, jobs))
    else:
        outcomes = [_identify_one(j) for j in jobs]

    est = [res.params if res is not None else cfg.actuators[i] for i, (res, _) in enumerate(outcomes)]
    ok = all(res is not None for res, _ in outcomes)
    out = cfg.output_path()
    out.mkdir(parents=True, exist_ok=True)
    prov = _provenance(cfg, "identify")
    files = [write_params_table(out / "params.csv", est, prov)]
    try:
        h_sim = _simulated_heights(problems, est, cfg.ident_solver)
        fits, xy, tips_sim = _fit_rows(problems, h_sim, tips, cfg.geometry)
        files.append(save_dataset(out / "overlay.csv", _overlay(t, problems, h_sim, tips, tips_sim), prov))
    except (DomainError, StiffnessFailure) as exc:
        log.error("final simulation failed: %s", exc)
        fits, xy, ok = [float("nan")] * 3, float("nan"), False
    rows, per_act = [], []
    for i, (res, status) in enumerate(outcomes):
        row = {"channel": f"h_{i + 1}", "fit_percent": fits[i], "status": status}
        entry = {"actuator": i + 1, "status": status, "fit_percent": fits[i],
                 "params": est[i].to_dict()}
        if res is not None:
            row.update(initial_fit_percent=res.initial_fit_percent, iterations=res.iterations,
                       n_simulations=res.n_simulations)
            entry.update(initial_fit_percent=res.initial_fit_percent, iterations=res.iterations,
                         n_simulations=res.n_simulations, converged=res.converged,
                         stderr=res.stderr, cost_history=res.history)
        rows.append(row)
        per_act.append(entry)
    rows.append({"channel": "xy", "fit_percent": xy, "status": "pooled"})
    files.append(_fit_table(out / "fit.csv", rows, prov))
    report = {"version": __version__, "config_sha256": cfg.sha256, "dataset": info,
              "actuators": per_act, "pooled_xy_fit_percent": xy, "success": ok}
    files.append(_write_json(out / "identify_report.json", report))
    man = _write_manifest(out, cfg, "identify", files)
    return {p.stem: p for p in files + [man]}, ok


def run_validate(cfg: ExperimentConfig, params_path, data_path) -> dict[str, Path]:
    """Simulate fixed parameters against a dataset and report fits."""
    params = load_params_table(params_path)
    data = load_dataset(data_path)
    t, tips, h, u, info = _measured(cfg, data)
    problems = _problems(cfg, t, h, u, params)
    h_sim = _simulated_heights(problems, params, cfg.ident_solver)
    fits, xy, tips_sim = _fit_rows(problems, h_sim, tips, cfg.geometry)
    out = cfg.output_path()
    out.mkdir(parents=True, exist_ok=True)
    prov = _provenance(cfg, "validate")
    rows = [{"channel": f"h_{i + 1}", "fit_percent": fits[i], "status": "ok"} for i in range(3)]
    rows.append({"channel": "xy", "fit_percent": xy, "status": "pooled"})
    files = [_fit_table(out / "validation_fit.csv", rows, prov),
             save_dataset(out / "validation_overlay.csv",
                          _overlay(t, problems, h_sim, tips, tips_sim), prov)]
    report = {"version": __version__, "config_sha256": cfg.sha256, "dataset": info,
              "fit_percent": fits, "pooled_xy_fit_percent": xy,
              "params": [p.to_dict() for p in params]}
    files.append(_write_json(out / "validation_report.json", report))
    man = _write_manifest(out, cfg, "validate", files)
    return {p.stem: p for p in files + [man]}


# --------------------------------------------------------------------------
# argument parsing


def _triple(text: str) -> np.ndarray:
    try:
        v = np.array([float(s) for s in text.split(",")])
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected three comma-separated numbers, got {text!r}")
    if v.shape != (3,) or not np.all(np.isfinite(v)):
        raise argparse.ArgumentTypeError(f"expected three comma-separated numbers, got {text!r}")
    return v


def _geometry_from_args(args) -> PlatformGeometry:
    if args.config:
        return load_config(args.config).geometry
    return PlatformGeometry.equilateral(args.circumradius, args.antenna_length)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hasel3ps", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"hasel3ps {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="simulate the configured experiment")
    s.add_argument("--config", required=True)

    s = sub.add_parser("identify", help="estimate actuator parameters from a sensor dataset")
    s.add_argument("--config", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--workers", type=int, default=min(3, os.cpu_count() or 1),
                   help="concurrent actuator jobs")

    s = sub.add_parser("validate", help="score fixed parameters on a dataset")
    s.add_argument("--config", required=True)
    s.add_argument("--params", required=True)
    s.add_argument("--data", required=True)

    for name, arg, hlp in (("fkm", "--heights", "corner heights h1,h2,h3 in m"),
                           ("ikm", "--tip", "tip position x,y,z in m")):
        s = sub.add_parser(name, help=f"{name.upper()} of the platform")
        s.add_argument(arg, required=True, type=_triple, help=hlp)
        s.add_argument("--config", help="take the geometry from this config")
        s.add_argument("--circumradius", type=float, default=0.023, help="anchor circle radius, m")
        s.add_argument("--antenna-length", type=float, default=0.05, help="antenna length, m")
    return p


def _dispatch(args) -> int:
    if args.command == "simulate":
        files = run_simulate(load_config(args.config))
        for p in files.values():
            print(p)
        return EXIT_OK
    if args.command == "identify":
        files, ok = run_identify(load_config(args.config), args.data, workers=args.workers)
        for p in files.values():
            print(p)
        return EXIT_OK if ok else EXIT_OPT
    if args.command == "validate":
        files = run_validate(load_config(args.config), args.params, args.data)
        for p in files.values():
            print(p)
        return EXIT_OK
    geom = _geometry_from_args(args)
    if args.command == "fkm":
        pose = fkm(args.heights, geom)
        print("tip_x,tip_y,tip_z,n_x,n_y,n_z")
        print(",".join(format_float(v) for v in np.concatenate([pose.position, pose.normal])))
        return EXIT_OK
    h = ikm(args.tip, geom)
    print("h_1,h_2,h_3")
    print(",".join(format_float(v) for v in h))
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _dispatch(args)
    except (ConfigError, ParseError, MonotonicityError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (DomainError, StiffnessFailure) as exc:
        print(f"simulation error: {exc}", file=sys.stderr)
        return EXIT_SIM
    except (SingularNormal, DegenerateGeometry) as exc:
        print(f"geometry error: {exc}", file=sys.stderr)
        return EXIT_GEOM


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
