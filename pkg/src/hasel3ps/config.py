"""Experiment configuration.

A single YAML (or JSON) file whose keys carry their units, e.g.
``L_p_m`` or ``omega_rad_s``. Unknown keys are rejected. The resolved
configuration (defaults filled in) has a canonical JSON form whose SHA-256
is embedded in every output file.

Sections, all optional except ``excitation`` and ``simulation``::

    constants:      L_p_m, L_v_m, L_e_m, X_h_m, m_kg, eps_r, eps_0_F_per_m,
                    w_m, t_m, g_grav_m_per_s2, A_T_m2 (null -> default)
    actuators:      list of 3 dicts with K_N_per_m, K_b_Nm_per_rad, b_kg_s,
                    R0_ohm, R1_ohm, R2_ohm, C1_F, gamma1, gamma2
                    (default: the reference parameter set)
    geometry:       circumradius_m or anchors_m (3 x [x, y]); antenna_length_m
    excitation:     U0_V, omega_rad_s, phases_deg
    simulation:     t_end_s, sample_time_s
    solver:         abs_tol, rel_tol, max_step_s, initial_step_s,
                    max_newton_iters, max_steps
    identification: free, bounds, detrend, max_iter, gtol, ftol, xtol,
                    fd_step, workers, abs_tol, rel_tol
    dataset:        z_policy ("fixed" or "column"), nominal_tip_z_m
    output_dir:     path (overridden by $HASEL3PS_OUTPUT_DIR)
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from .core import PARAM_NAMES, TABLE1_PARAMS, ActuatorParams, SharedConstants
from .dynamics import SineInput
from .identification import LMConfig
from .integrator import SolverConfig
from .kinematics import PlatformGeometry

__all__ = ["ConfigError", "ExperimentConfig", "load_config", "config_hash",
           "OUTPUT_DIR_ENV", "CONST_KEYS", "PARAM_KEYS"]

OUTPUT_DIR_ENV = "HASEL3PS_OUTPUT_DIR"

CONST_KEYS = {
    "L_p_m": "L_p", "L_v_m": "L_v", "L_e_m": "L_e", "X_h_m": "X_h", "m_kg": "m",
    "eps_r": "eps_r", "eps_0_F_per_m": "eps_0", "w_m": "w", "t_m": "t",
    "g_grav_m_per_s2": "g_grav", "A_T_m2": "A_T",
}
PARAM_KEYS = {
    "K_N_per_m": "K", "K_b_Nm_per_rad": "K_b", "b_kg_s": "b", "R0_ohm": "R0",
    "R1_ohm": "R1", "R2_ohm": "R2", "C1_F": "C1", "gamma1": "gamma1", "gamma2": "gamma2",
}
_SECTIONS = {"constants", "actuators", "geometry", "excitation", "simulation", "solver",
             "identification", "dataset", "output_dir"}
_GEOM_KEYS = {"circumradius_m", "anchors_m", "antenna_length_m"}
_EXC_KEYS = {"U0_V", "omega_rad_s", "phases_deg"}
_SIM_KEYS = {"t_end_s", "sample_time_s"}
_SOLVER_KEYS = {"abs_tol": "abs_tol", "rel_tol": "rel_tol", "max_step_s": "max_step",
                "initial_step_s": "initial_step", "max_newton_iters": "max_newton_iters",
                "max_steps": "max_steps"}
_ID_KEYS = {"free", "bounds", "detrend", "max_iter", "gtol", "ftol", "xtol", "fd_step",
            "workers", "abs_tol", "rel_tol"}
_DATA_KEYS = {"z_policy", "nominal_tip_z_m"}


class ConfigError(ValueError):
    """Invalid or incomplete configuration."""


def _check_keys(section: str, d, allowed) -> dict:
    if d is None:
        return {}
    if not isinstance(d, dict):
        raise ConfigError(f"section {section!r} must be a mapping")
    extra = sorted(set(d) - set(allowed))
    if extra:
        raise ConfigError(f"unknown keys in {section!r}: {extra}")
    return d


def _num(section: str, key: str, v, positive: bool = False) -> float:
    # YAML 1.1 reads exponents without a decimal point ("5e4") as strings
    if isinstance(v, str):
        try:
            v = float(v)
        except ValueError:
            pass
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"{section}.{key} must be a number, got {v!r}")
    v = float(v)
    if math.isnan(v) or (positive and not v > 0):
        raise ConfigError(f"{section}.{key} must be {'positive' if positive else 'a number'}")
    return v


@dataclass(frozen=True)
class ExperimentConfig:
    constants: SharedConstants
    actuators: tuple[ActuatorParams, ActuatorParams, ActuatorParams]
    geometry: PlatformGeometry
    excitation: SineInput
    t_end: float
    sample_time: float
    solver: SolverConfig
    lm: LMConfig
    ident_solver: SolverConfig
    free: tuple[str, ...]
    bounds: dict
    detrend: bool
    z_policy: str | None
    nominal_tip_z: float | None
    output_dir: Path
    resolved: dict
    geometry_declared: bool = False

    @property
    def sample_times(self) -> np.ndarray:
        n = int(round(self.t_end / self.sample_time))
        return np.arange(n + 1) * self.sample_time

    @property
    def sha256(self) -> str:
        return config_hash(self.resolved)

    def output_path(self) -> Path:
        env = os.environ.get(OUTPUT_DIR_ENV)
        return Path(env) if env else self.output_dir

    def with_actuators(self, actuators) -> "ExperimentConfig":
        res = dict(self.resolved)
        res["actuators"] = [params_to_keys(p) for p in actuators]
        kw = {f: getattr(self, f) for f in self.__dataclass_fields__}
        kw.update(actuators=tuple(actuators), resolved=res)
        return ExperimentConfig(**kw)


def params_to_keys(p: ActuatorParams) -> dict:
    return {k: float(getattr(p, f)) for k, f in PARAM_KEYS.items()}


def config_hash(resolved: dict) -> str:
    blob = json.dumps(resolved, sort_keys=True, separators=(",", ":"), allow_nan=True)
    return hashlib.sha256(blob.encode()).hexdigest()


def parse_config(raw: dict, base_dir: Path | None = None) -> ExperimentConfig:
    """Validate a raw mapping and fill in defaults."""
    if not isinstance(raw, dict):
        raise ConfigError("configuration must be a mapping")
    _check_keys("<root>", raw, _SECTIONS)
    for sec in ("excitation", "simulation"):
        if sec not in raw:
            raise ConfigError(f"missing mandatory section {sec!r}")

    cs = _check_keys("constants", raw.get("constants"), CONST_KEYS)
    ckw = {}
    for k, f in CONST_KEYS.items():
        if k in cs and cs[k] is not None:
            ckw[f] = _num("constants", k, cs[k], positive=(f != "g_grav"))
    try:
        consts = SharedConstants(**ckw)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None

    acts_raw = raw.get("actuators")
    if acts_raw is None:
        acts = TABLE1_PARAMS
    else:
        if not isinstance(acts_raw, list) or len(acts_raw) != 3:
            raise ConfigError("actuators must be a list of three parameter sets")
        acts = []
        for i, a in enumerate(acts_raw):
            a = _check_keys(f"actuators[{i}]", a, PARAM_KEYS)
            missing = [k for k in PARAM_KEYS if k not in a]
            if missing:
                raise ConfigError(f"actuators[{i}] misses {missing}")
            try:
                acts.append(ActuatorParams(**{f: _num(f"actuators[{i}]", k, a[k])
                                              for k, f in PARAM_KEYS.items()}))
            except ValueError as exc:
                raise ConfigError(f"actuators[{i}]: {exc}") from None
        acts = tuple(acts)

    gs = _check_keys("geometry", raw.get("geometry"), _GEOM_KEYS)
    L = _num("geometry", "antenna_length_m", gs.get("antenna_length_m", 0.05), positive=True)
    if "anchors_m" in gs and "circumradius_m" in gs:
        raise ConfigError("give either geometry.anchors_m or geometry.circumradius_m")
    try:
        if "anchors_m" in gs:
            geom = PlatformGeometry(tuple(tuple(float(v) for v in row) for row in gs["anchors_m"]), L)
        else:
            r = _num("geometry", "circumradius_m", gs.get("circumradius_m", 0.023), positive=True)
            geom = PlatformGeometry.equilateral(r, L)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"geometry: {exc}") from None

    es = _check_keys("excitation", raw["excitation"], _EXC_KEYS)
    phases = es.get("phases_deg", [0.0, 120.0, 240.0])
    if not isinstance(phases, list) or len(phases) != 3:
        raise ConfigError("excitation.phases_deg must list three angles")
    U0 = _num("excitation", "U0_V", es.get("U0_V", 100.0))
    if U0 < 0:
        raise ConfigError("excitation.U0_V must be non-negative")
    exc = SineInput(U0, _num("excitation", "omega_rad_s", es.get("omega_rad_s", 3 * math.pi)),
                    tuple(_num("excitation", "phases_deg", p) for p in phases))

    ss = _check_keys("simulation", raw["simulation"], _SIM_KEYS)
    if "t_end_s" not in ss:
        raise ConfigError("missing simulation.t_end_s")
    t_end = _num("simulation", "t_end_s", ss["t_end_s"], positive=True)
    dt = _num("simulation", "sample_time_s", ss.get("sample_time_s", 1e-3), positive=True)

    sv = _check_keys("solver", raw.get("solver"), _SOLVER_KEYS)
    skw = {}
    for k, f in _SOLVER_KEYS.items():
        if k in sv and sv[k] is not None:
            if k == "abs_tol" and isinstance(sv[k], list):
                skw[f] = tuple(_num("solver", k, v, positive=True) for v in sv[k])
            elif k in ("max_newton_iters", "max_steps"):
                skw[f] = int(_num("solver", k, sv[k], positive=True))
            else:
                skw[f] = _num("solver", k, sv[k], positive=True)
    try:
        solver = SolverConfig(**skw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"solver: {exc}") from None

    ids = _check_keys("identification", raw.get("identification"), _ID_KEYS)
    free = tuple(ids.get("free", PARAM_NAMES))
    if not set(free) <= set(PARAM_NAMES) or not free:
        raise ConfigError(f"identification.free must be a non-empty subset of {list(PARAM_NAMES)}")
    bounds = ids.get("bounds") or {}
    if not isinstance(bounds, dict) or not set(bounds) <= set(PARAM_NAMES):
        raise ConfigError("identification.bounds maps parameter names to [lo, hi]")
    bounds = {k: (None if v[0] is None else float(v[0]), None if v[1] is None else float(v[1]))
              for k, v in sorted(bounds.items())}
    lm_kw = {}
    for k in ("max_iter", "gtol", "ftol", "xtol", "fd_step", "workers"):
        if k in ids:
            v = _num("identification", k, ids[k], positive=True)
            lm_kw[k] = int(v) if k in ("max_iter", "workers") else v
    lm = LMConfig(**lm_kw)
    ident_solver = SolverConfig(
        abs_tol=_num("identification", "abs_tol", ids.get("abs_tol", 1e-3), positive=True),
        rel_tol=_num("identification", "rel_tol", ids.get("rel_tol", 1e-3), positive=True))

    ds = _check_keys("dataset", raw.get("dataset"), _DATA_KEYS)
    z_policy = ds.get("z_policy")
    if z_policy not in (None, "fixed", "column"):
        raise ConfigError("dataset.z_policy must be 'fixed' or 'column'")
    z_nom = ds.get("nominal_tip_z_m")
    if z_policy == "fixed":
        z_nom = geom.L if z_nom is None else _num("dataset", "nominal_tip_z_m", z_nom, positive=True)

    out = Path(raw.get("output_dir", "out"))
    if base_dir is not None and not out.is_absolute():
        out = base_dir / out

    resolved = {
        "constants": {k: getattr(consts, f) for k, f in CONST_KEYS.items()},
        "actuators": [params_to_keys(p) for p in acts],
        "geometry": {"anchors_m": [list(a) for a in geom.anchors], "antenna_length_m": geom.L},
        "excitation": {"U0_V": exc.U0, "omega_rad_s": exc.omega, "phases_deg": list(exc.phases_deg)},
        "simulation": {"t_end_s": t_end, "sample_time_s": dt},
        "solver": {"abs_tol": solver.abs_tol, "rel_tol": solver.rel_tol,
                   "max_step_s": solver.max_step, "initial_step_s": solver.initial_step,
                   "max_newton_iters": solver.max_newton_iters, "max_steps": solver.max_steps},
        "identification": {"free": list(free), "bounds": {k: list(v) for k, v in bounds.items()},
                           "detrend": bool(ids.get("detrend", False)),
                           **{k: getattr(lm, k) for k in ("max_iter", "gtol", "ftol", "xtol",
                                                          "fd_step")},
                           "abs_tol": ident_solver.abs_tol, "rel_tol": ident_solver.rel_tol},
        "dataset": {"z_policy": z_policy, "nominal_tip_z_m": z_nom},
    }
    # the worker count does not change results, so it stays out of the hash
    return ExperimentConfig(
        constants=consts, actuators=acts, geometry=geom, excitation=exc, t_end=t_end,
        sample_time=dt, solver=solver, lm=lm, ident_solver=ident_solver, free=free,
        bounds=bounds, detrend=bool(ids.get("detrend", False)), z_policy=z_policy,
        nominal_tip_z=z_nom, output_dir=out, resolved=resolved,
        geometry_declared="antenna_length_m" in gs and ("anchors_m" in gs or "circumradius_m" in gs),
    )


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return parse_config(raw, base_dir=path.parent)
