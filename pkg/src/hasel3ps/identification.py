"""Nonlinear grey-box identification of one actuator's parameters.

Residuals compare simulated and measured heights at the dataset
timestamps. The optimiser is Levenberg-Marquardt over the free parameters
in a scaled space (log for strictly positive ones), with a forward
difference Jacobian. Jacobian columns are evaluated on the step sequence
of the base simulation (mesh replay), which keeps the difference
quotients free of step-size-selection noise.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import PARAM_NAMES, ActuatorParams, DomainError, SharedConstants
from .dynamics import TabulatedInput
from .integrator import SolverConfig, StiffnessFailure, integrate_actuator
from .kinematics import PlatformGeometry, SingularNormal, ikm

__all__ = [
    "DegenerateSignal",
    "IdentProblem",
    "IdentResult",
    "LMConfig",
    "nrmse_fit",
    "pooled_fit",
    "simulate_heights",
    "residuals",
    "identify",
    "heights_from_tip",
]

log = logging.getLogger(__name__)


class DegenerateSignal(ValueError):
    """Measured series is constant, so the fit is undefined."""


def nrmse_fit(measured, simulated) -> float:
    """Fit in percent, ``100 (1 - |y - y_sim| / |y - mean(y)|)``."""
    y = np.asarray(measured, dtype=float).ravel()
    ys = np.asarray(simulated, dtype=float).ravel()
    if y.shape != ys.shape or y.size < 2:
        raise ValueError("series must have equal length >= 2")
    den = np.linalg.norm(y - y.mean())
    if den == 0.0:
        raise DegenerateSignal("measured series is constant")
    return float(100.0 * (1.0 - np.linalg.norm(y - ys) / den))


def pooled_fit(measured_xy, simulated_xy) -> float:
    """Two-dimensional fit of an (n, 2) trajectory, deviations pooled over both axes."""
    m = np.asarray(measured_xy, dtype=float)
    s = np.asarray(simulated_xy, dtype=float)
    if m.shape != s.shape or m.ndim != 2:
        raise ValueError("expected matching (n, d) arrays")
    den = np.linalg.norm(m - m.mean(axis=0))
    if den == 0.0:
        raise DegenerateSignal("measured trajectory is a single point")
    return float(100.0 * (1.0 - np.linalg.norm(m - s) / den))


@dataclass(frozen=True, eq=False)
class IdentProblem:
    """One actuator's estimation problem.

    ``bounds`` maps parameter names to ``(lo, hi)`` in physical units.
    ``log_scale`` defaults to every free parameter except ``gamma2``.
    """

    t: np.ndarray
    u: np.ndarray
    h_meas: np.ndarray
    initial: ActuatorParams
    consts: SharedConstants = field(default_factory=SharedConstants)
    free: tuple[str, ...] = PARAM_NAMES
    bounds: dict | None = None
    log_scale: tuple[str, ...] | None = None
    detrend: bool = False

    def __post_init__(self):
        t = np.asarray(self.t, dtype=float)
        u = np.asarray(self.u, dtype=float)
        h = np.asarray(self.h_meas, dtype=float)
        if t.ndim != 1 or t.size < 2 or u.shape != t.shape or h.shape != t.shape:
            raise ValueError("t, u and h_meas must be 1-D arrays of equal length >= 2")
        if np.any(np.diff(t) <= 0):
            raise ValueError("dataset time grid must be strictly increasing")
        if not (np.all(np.isfinite(h)) and np.all(np.isfinite(u))):
            raise ValueError("dataset contains non-finite values")
        unknown = set(self.free) - set(PARAM_NAMES)
        if unknown:
            raise ValueError(f"unknown free parameters {sorted(unknown)}")
        if self.detrend:
            h = h - np.polyval(np.polyfit(t, h, 1), t)
        logs = self.log_scale
        if logs is None:
            logs = tuple(n for n in self.free if n != "gamma2")
        if "gamma2" in logs:
            raise ValueError("gamma2 may be negative and cannot be log-scaled")
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "h_meas", h)
        object.__setattr__(self, "free", tuple(self.free))
        object.__setattr__(self, "log_scale", tuple(logs))

    @property
    def input_signal(self) -> TabulatedInput:
        return TabulatedInput(self.t, self.u)

    def to_scaled(self, params: ActuatorParams) -> np.ndarray:
        z = []
        for n in self.free:
            v = getattr(params, n)
            z.append(math.log(v) if n in self.log_scale else v)
        return np.array(z)

    def from_scaled(self, z: np.ndarray) -> ActuatorParams:
        changes = {}
        for n, v in zip(self.free, z):
            changes[n] = math.exp(v) if n in self.log_scale else float(v)
        return self.initial.replace(**changes)

    def scaled_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        lo = np.full(len(self.free), -np.inf)
        hi = np.full(len(self.free), np.inf)
        for k, n in enumerate(self.free):
            if self.bounds and n in self.bounds:
                a, b = self.bounds[n]
                if n in self.log_scale:
                    lo[k] = math.log(a) if a is not None and a > 0 else -np.inf
                    hi[k] = math.log(b) if b is not None else np.inf
                else:
                    lo[k] = -np.inf if a is None else a
                    hi[k] = np.inf if b is None else b
        return lo, hi


@dataclass(frozen=True)
class LMConfig:
    max_iter: int = 50
    gtol: float = 1e-8
    ftol: float = 1e-10
    xtol: float = 1e-12
    fd_step: float = 1e-6
    lambda0: float = 1e-3
    lambda_max: float = 1e16
    penalty_factor: float = 1e3
    workers: int = 1


@dataclass
class IdentResult:
    """Outcome of :func:`identify`.

    ``status`` is one of ``"gtol"``, ``"ftol"``, ``"xtol"``, ``"max_iter"``,
    ``"no_progress"`` (no acceptable step from the initial point) or
    ``"lambda_max"``. ``covariance`` is the Gauss-Newton estimate in
    physical units for the free parameters, in ``free`` order.
    """

    params: ActuatorParams
    fit_percent: float
    initial_fit_percent: float
    cost: float
    initial_cost: float
    iterations: int
    n_simulations: int
    converged: bool
    status: str
    free: tuple[str, ...]
    covariance: np.ndarray
    history: list[float]

    @property
    def stderr(self) -> dict[str, float]:
        d = np.sqrt(np.clip(np.diag(self.covariance), 0.0, None))
        return dict(zip(self.free, d))


# --------------------------------------------------------------------------
# residual evaluation


def _rest_x0(consts: SharedConstants) -> np.ndarray:
    return np.array([0.0, consts.L_p, 0.0, 0.0, 0.0])


def simulate_heights(params: ActuatorParams, problem: IdentProblem, cfg: SolverConfig,
                     mesh: np.ndarray | None = None):
    """Heights at the dataset timestamps and the accepted mesh.

    Heights depend on ``theta`` only, which Hermite dense output resolves
    accurately, so the step sequence is not forced onto the sample grid.
    """
    tr = integrate_actuator(_rest_x0(problem.consts), problem.input_signal.channel(0),
                            (float(problem.t[0]), float(problem.t[-1])), params,
                            problem.consts, cfg, sample_times=problem.t, mesh=mesh,
                            dense="hermite")
    return tr.heights(problem.consts), tr.mesh


def residuals(candidate: ActuatorParams, problem: IdentProblem,
              cfg: SolverConfig | None = None) -> np.ndarray:
    """Simulated minus measured heights, m.

    The simulation starts from rest at ``problem.t[0]`` under the recorded
    input. Failures propagate as :class:`DomainError` or
    :class:`StiffnessFailure`; :func:`identify` maps them to a penalty.
    """
    h, _ = simulate_heights(candidate, problem, cfg or SolverConfig())
    return h - problem.h_meas


class _Objective:
    """Scaled residual ``(h_sim - h_meas) / |h_meas - mean|`` as a function of z."""

    def __init__(self, problem: IdentProblem, cfg: SolverConfig, penalty: float):
        self.problem = problem
        self.cfg = cfg
        den = np.linalg.norm(problem.h_meas - problem.h_meas.mean())
        if den == 0.0:
            raise DegenerateSignal("measured heights are constant")
        self.den = den
        self.penalty = penalty  # set after the first evaluation
        self.n_sim = 0

    def __call__(self, z, mesh=None):
        self.n_sim += 1
        try:
            h, m = simulate_heights(self.problem.from_scaled(z), self.problem, self.cfg, mesh)
        except (DomainError, StiffnessFailure, ValueError) as exc:
            log.debug("simulation failed at z=%s: %s", z, exc)
            return None, None
        if not np.all(np.isfinite(h)):
            return None, None
        return (h - self.problem.h_meas) / self.den, m

    def penalised(self, r):
        if r is None:
            n = self.problem.t.size
            return np.full(n, self.penalty / math.sqrt(n))
        return r


def _fd_column(args):
    obj, z, j, step, mesh, r0 = args
    zj = z.copy()
    dz = step * max(1.0, abs(z[j])) if obj.problem.free[j] not in obj.problem.log_scale else step
    zj[j] += dz
    r, _ = obj(zj, mesh=mesh)
    if r is None:
        zj[j] = z[j] - dz
        r, _ = obj(zj, mesh=mesh)
        if r is None:
            return np.zeros_like(r0), 2
        return (r0 - r) / dz, 2
    return (r - r0) / dz, 1


def _jacobian(obj, z, r0, mesh, step, pool):
    tasks = [(obj, z, j, step, mesh, r0) for j in range(z.size)]
    if pool is None:
        cols = [_fd_column(t) for t in tasks]
    else:
        cols = list(pool.map(_fd_column, tasks))
        obj.n_sim += sum(c[1] for c in cols)
    return np.column_stack([c[0] for c in cols])


def _to_physical_cov(problem, z, cov_z):
    jac = np.array([math.exp(v) if n in problem.log_scale else 1.0
                    for n, v in zip(problem.free, z)])
    return cov_z * np.outer(jac, jac)


def identify(problem: IdentProblem, lm_cfg: LMConfig | None = None,
             cfg: SolverConfig | None = None) -> IdentResult:
    """Estimate the free parameters of ``problem`` by Levenberg-Marquardt.

    Terminates when the scaled gradient drops below ``gtol``, the relative
    cost decrease of an accepted step below ``ftol``, the step below
    ``xtol``, or after ``max_iter`` iterations. The returned parameters
    never have a higher cost than the initial guess.
    """
    lm = lm_cfg or LMConfig()
    cfg = cfg or SolverConfig()
    obj = _Objective(problem, cfg, penalty=0.0)
    lo, hi = problem.scaled_bounds()
    z = np.clip(problem.to_scaled(problem.initial), lo, hi)
    r, mesh = obj(z)
    if r is None:
        raise StiffnessFailure("simulation failed at the initial guess", float(problem.t[0]))
    obj.penalty = lm.penalty_factor * max(np.linalg.norm(r), 1e-12)
    cost = 0.5 * float(r @ r)
    cost0 = cost
    history = [cost]
    pool = ProcessPoolExecutor(lm.workers) if lm.workers > 1 else None
    lam = lm.lambda0
    nu = 2.0
    status = "max_iter"
    accepted_any = False
    it = 0
    J = None
    try:
        while it < lm.max_iter:
            it += 1
            J = _jacobian(obj, z, r, mesh, lm.fd_step, pool)
            g = J.T @ r
            if np.max(np.abs(g)) < lm.gtol:
                status = "gtol"
                break
            A = J.T @ J
            step_taken = False
            while lam <= lm.lambda_max:
                # damped normal equations solved as an augmented least-squares problem
                aug = np.vstack([J, math.sqrt(lam) * np.eye(z.size)])
                rhs = np.concatenate([-r, np.zeros(z.size)])
                dz = np.linalg.lstsq(aug, rhs, rcond=None)[0]
                z_new = np.clip(z + dz, lo, hi)
                dz = z_new - z
                if np.linalg.norm(dz) <= lm.xtol * (lm.xtol + np.linalg.norm(z)):
                    status = "xtol" if accepted_any else "no_progress"
                    break
                r_new, mesh_new = obj(z_new)
                r_eval = obj.penalised(r_new)
                cost_new = 0.5 * float(r_eval @ r_eval)
                pred = -(g @ dz) - 0.5 * float(dz @ A @ dz)
                rho = (cost - cost_new) / pred if pred > 0 else -1.0
                if r_new is not None and cost_new < cost and rho > 0:
                    rel = (cost - cost_new) / max(cost, 1e-300)
                    z, r, mesh, cost = z_new, r_new, mesh_new, cost_new
                    lam *= max(1.0 / 3.0, 1.0 - (2.0 * rho - 1.0) ** 3)
                    nu = 2.0
                    step_taken = accepted_any = True
                    history.append(cost)
                    if rel < lm.ftol:
                        status = "ftol"
                    break
                lam *= nu
                nu *= 2.0
            if status in ("xtol", "ftol", "no_progress"):
                break
            if not step_taken:
                status = "lambda_max" if accepted_any else "no_progress"
                break
    finally:
        if pool is not None:
            pool.shutdown()

    if status == "no_progress":
        log.warning("identification made no progress from the initial point")
    if J is None or status != "gtol":
        J = _jacobian(obj, z, r, mesh, lm.fd_step, None)
    n, p = J.shape
    dof = max(n - p, 1)
    sigma2 = float(r @ r) * obj.den**2 / dof
    cov_z = np.linalg.pinv(J.T @ J * obj.den**2) * sigma2
    params = problem.from_scaled(z)
    return IdentResult(
        params=params,
        fit_percent=100.0 * (1.0 - math.sqrt(2.0 * cost)),
        initial_fit_percent=100.0 * (1.0 - math.sqrt(2.0 * cost0)),
        cost=cost,
        initial_cost=cost0,
        iterations=it,
        n_simulations=obj.n_sim,
        converged=status in ("gtol", "ftol", "xtol"),
        status=status,
        free=problem.free,
        covariance=_to_physical_cov(problem, z, cov_z),
        history=history,
    )


def heights_from_tip(tips, geom: PlatformGeometry) -> tuple[np.ndarray, np.ndarray]:
    """Apply :func:`ikm` per sample.

    Returns ``(heights, singular)``: an (n, 3) array with NaN rows where
    the normal was singular, and the boolean flags for those rows.
    """
    tips = np.atleast_2d(np.asarray(tips, dtype=float))
    out = np.full((tips.shape[0], 3), np.nan)
    flags = np.zeros(tips.shape[0], dtype=bool)
    for k, tip in enumerate(tips):
        try:
            out[k] = ikm(tip, geom)
        except SingularNormal:
            flags[k] = True
    if flags.any():
        log.warning("%d of %d tip samples singular for the IKM", int(flags.sum()), flags.size)
    return out, flags
