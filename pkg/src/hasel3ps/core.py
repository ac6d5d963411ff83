"""Port-Hamiltonian core of the HASEL actuator model.

Domain types, the stored energy and its analytic gradient, and the
geometric/electrical nonlinearities (internal angle, shell area, zipped
electrode length, dynamic capacitance).

The scalar kernels are compiled with numba and take packed float arrays
so the integrator can call them in its inner loop. Layouts:

* per-actuator state ``x = [theta, l_p, p, Q1, Q2]``
* parameters ``prm = [K, K_b, b, R0, R1, R2, C1, gamma1, gamma2]``
* constants ``c = [L_p, L_v, L_e, X_h, m, eps_r, eps_0, w, t, g, A_T]``

The 15-dimensional system vector is stacked by variable, as
``[theta_1..3, l_p_1..3, p_1..3, Q1_1..3, Q2_1..3]``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Sequence

import numpy as np
from numba import njit

__all__ = [
    "DomainError",
    "ActuatorState",
    "SystemState",
    "ActuatorParams",
    "SharedConstants",
    "GeomEval",
    "PARAM_NAMES",
    "TABLE1_PARAMS",
    "rest_state",
    "delta1",
    "shell_area",
    "zipped_length",
    "dynamic_capacitance",
    "geometry",
    "inertia",
    "hamiltonian",
    "grad_hamiltonian",
]

ASIN_SLACK = 1e-12


class DomainError(ValueError):
    """State outside the geometrically feasible set (arcsin argument > 1)."""

    def __init__(self, message: str, time: float | None = None):
        super().__init__(message if time is None else f"{message} (t = {time:.6g} s)")
        self.time = time


# --------------------------------------------------------------------------
# domain types


@dataclass(frozen=True)
class ActuatorState:
    """State of one actuator.

    Attributes
    ----------
    theta : float
        Angular deformation, rad.
    l_p : float
        Top-film chord length, m.
    p : float
        Angular momentum.
    Q1, Q2 : float
        Charges on the static and dynamic capacitances, C.
    """

    theta: float
    l_p: float
    p: float = 0.0
    Q1: float = 0.0
    Q2: float = 0.0

    def __post_init__(self):
        vals = self.as_array()
        if not np.all(np.isfinite(vals)):
            raise ValueError(f"non-finite actuator state {vals}")
        if not self.l_p > 0:
            raise ValueError(f"l_p must be positive, got {self.l_p}")

    def as_array(self) -> np.ndarray:
        return np.array([self.theta, self.l_p, self.p, self.Q1, self.Q2], dtype=float)

    @classmethod
    def from_array(cls, x: Sequence[float]) -> "ActuatorState":
        return cls(*(float(v) for v in x))


@dataclass(frozen=True)
class SystemState:
    """Ordered triple of actuator states (actuator 1, 2, 3)."""

    actuators: tuple[ActuatorState, ActuatorState, ActuatorState]

    def __post_init__(self):
        if len(self.actuators) != 3:
            raise ValueError("a system state holds exactly 3 actuators")
        object.__setattr__(self, "actuators", tuple(self.actuators))

    def blocks(self) -> np.ndarray:
        """Per-actuator states as a (3, 5) array."""
        return np.stack([a.as_array() for a in self.actuators])

    def to_vector(self) -> np.ndarray:
        """15-vector stacked by variable (theta, l_p, p, Q1, Q2)."""
        return self.blocks().T.reshape(15).copy()

    @classmethod
    def from_blocks(cls, xb: np.ndarray) -> "SystemState":
        xb = np.asarray(xb, dtype=float).reshape(3, 5)
        return cls(tuple(ActuatorState.from_array(row) for row in xb))

    @classmethod
    def from_vector(cls, x: Sequence[float]) -> "SystemState":
        return cls.from_blocks(np.asarray(x, dtype=float).reshape(5, 3).T)

    @property
    def theta(self) -> np.ndarray:
        return self.blocks()[:, 0]


PARAM_NAMES = ("K", "K_b", "b", "R0", "R1", "R2", "C1", "gamma1", "gamma2")


@dataclass(frozen=True)
class ActuatorParams:
    """The nine identifiable parameters of one actuator.

    ``b`` keeps the unit printed in the parameter table (kg*s); its value is
    used as the damping coefficient on the angular momentum.
    """

    K: float  # N/m
    K_b: float  # N*m/rad
    b: float
    R0: float  # ohm
    R1: float
    R2: float
    C1: float  # F
    gamma1: float
    gamma2: float

    def __post_init__(self):
        vals = self.as_array()
        if not np.all(np.isfinite(vals)):
            raise ValueError(f"non-finite parameter in {self}")
        for name in PARAM_NAMES[:-1]:
            if not getattr(self, name) > 0:
                raise ValueError(f"parameter {name} must be strictly positive, got {getattr(self, name)}")

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, n) for n in PARAM_NAMES], dtype=float)

    @classmethod
    def from_array(cls, v: Sequence[float]) -> "ActuatorParams":
        return cls(*(float(x) for x in v))

    def replace(self, **changes) -> "ActuatorParams":
        return replace(self, **changes)

    def to_dict(self) -> dict[str, float]:
        return asdict(self)


# Identified values, one entry per actuator.
TABLE1_PARAMS: tuple[ActuatorParams, ActuatorParams, ActuatorParams] = (
    ActuatorParams(K=0.250, K_b=0.305, b=0.129, R0=600.0, R1=99.98, R2=5.385e4,
                   C1=2.15e-10, gamma1=118.4, gamma2=58.0),
    ActuatorParams(K=0.200, K_b=0.300, b=0.010, R0=600.0, R1=112.7, R2=5.60e4,
                   C1=2.00e-10, gamma1=131.9, gamma2=30.5),
    ActuatorParams(K=0.250, K_b=0.300, b=0.015, R0=600.0, R1=100.0, R2=5.5e4,
                   C1=2.20e-10, gamma1=118.4, gamma2=25.0),
)


@dataclass(frozen=True)
class SharedConstants:
    """Geometric and physical constants common to all actuators (SI units).

    ``A_T`` is the constant liquid cross-section. When left as ``None`` it
    is set so that the rest configuration (``theta = 0``, ``l_p = L_p``) sits
    half-zipped, ``l_e = L_e / 2``, which keeps the clamp on ``l_e`` inactive
    over the operating range.
    """

    L_p: float = 0.014
    L_v: float = 0.012
    L_e: float = 0.020
    X_h: float = 0.002
    m: float = 0.001133
    eps_r: float = 2.2
    eps_0: float = 8.854e-12
    w: float = 0.025
    t: float = 18e-6
    g_grav: float = 9.8
    A_T: float | None = field(default=None)

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "A_T" and v is None:
                continue
            if f.name == "g_grav":
                if not (math.isfinite(v) and v >= 0):
                    raise ValueError("g_grav must be finite and non-negative")
                continue
            if not (math.isfinite(v) and v > 0):
                raise ValueError(f"constant {f.name} must be strictly positive, got {v}")
        if self.L_v > self.L_p:
            raise ValueError("rest top-film length L_p must not be shorter than L_v")
        if self.A_T is None:
            s = self.L_v / self.L_p
            d1 = math.pi / 2 - math.asin(s)
            a_rest = 0.25 * self.L_p * self.L_v * math.sin(d1)
            object.__setattr__(self, "A_T", a_rest + 0.5 * self.X_h * self.L_e)

    def packed(self) -> np.ndarray:
        return np.array([self.L_p, self.L_v, self.L_e, self.X_h, self.m, self.eps_r,
                         self.eps_0, self.w, self.t, self.g_grav, self.A_T], dtype=float)

    def replace(self, **changes) -> "SharedConstants":
        return replace(self, **changes)

    def to_dict(self) -> dict[str, float]:
        return asdict(self)


@dataclass(frozen=True)
class GeomEval:
    """Geometric quantities and their partial derivatives at one state.

    ``saturated`` is true when the zipped length was clamped to
    ``[0, L_e]``; the derivatives of ``l_e`` and ``C2`` are zero there.
    """

    delta1: float
    A_s: float
    l_e: float
    C2: float
    ddelta1_dtheta: float
    ddelta1_dlp: float
    dA_s_dtheta: float
    dA_s_dlp: float
    dl_e_dtheta: float
    dl_e_dlp: float
    dC2_dtheta: float
    dC2_dlp: float
    saturated: bool


def rest_state(consts: SharedConstants | None = None) -> SystemState:
    """De-energised rest: theta = 0, l_p = L_p, zero momentum and charge."""
    consts = consts or SharedConstants()
    a = ActuatorState(0.0, consts.L_p, 0.0, 0.0, 0.0)
    return SystemState((a, a, a))


# --------------------------------------------------------------------------
# compiled scalar kernels


@njit(cache=True)
def _geom(theta, lp, c):
    """Return (values[12], status). status: 0 ok, 1 l_e clamped, -1 infeasible."""
    out = np.empty(12)
    Lv = c[1]
    Le = c[2]
    Xh = c[3]
    AT = c[10]
    s = Lv / lp * math.cos(0.5 * theta)
    status = 0
    if s > 1.0 or s < -1.0:
        if abs(s) - 1.0 > 1e-12:
            out[:] = np.nan
            return out, -1
        s = 1.0 if s > 0 else -1.0
    root = math.sqrt(1.0 - s * s)
    ds_dth = -0.5 * Lv / lp * math.sin(0.5 * theta)
    ds_dlp = -s / lp
    if root > 0.0:
        dd_dth = 0.5 - ds_dth / root
        dd_dlp = -ds_dlp / root
    else:
        dd_dth = math.inf
        dd_dlp = math.inf
    d1 = 0.5 * (math.pi + theta) - math.asin(s)
    sd = math.sin(d1)
    cd = math.cos(d1)
    As = 0.25 * lp * Lv * sd
    dAs_dth = 0.25 * lp * Lv * cd * dd_dth
    dAs_dlp = 0.25 * Lv * sd + 0.25 * lp * Lv * cd * dd_dlp
    le = Le - (AT - As) / Xh
    dle_dth = dAs_dth / Xh
    dle_dlp = dAs_dlp / Xh
    if le < 0.0:
        le = 0.0
        dle_dth = 0.0
        dle_dlp = 0.0
        status = 1
    elif le > Le:
        le = Le
        dle_dth = 0.0
        dle_dlp = 0.0
        status = 1
    pref = c[6] * c[5] * c[7]
    gap = 2.0 * c[8] + Xh
    C2 = pref * (le / (2.0 * c[8]) + (Le - le) / gap)
    kC = pref * (1.0 / (2.0 * c[8]) - 1.0 / gap)
    out[0] = d1
    out[1] = As
    out[2] = le
    out[3] = C2
    out[4] = dd_dth
    out[5] = dd_dlp
    out[6] = dAs_dth
    out[7] = dAs_dlp
    out[8] = dle_dth
    out[9] = dle_dlp
    out[10] = kC * dle_dth
    out[11] = kC * dle_dlp
    return out, status


@njit(cache=True)
def _energy5(x, prm, c):
    g, st = _geom(x[0], x[1], c)
    if st < 0:
        return np.nan
    Lv = c[1]
    m = c[4]
    inert = Lv * m / 24.0
    dl = x[1] - c[0]
    return (0.5 * prm[1] * x[0] * x[0]
            + 0.5 * c[9] * Lv * m * math.sin(x[0])
            + 0.25 * prm[0] * dl * dl
            + 0.5 * x[2] * x[2] / inert
            + 0.5 * x[3] * x[3] / prm[6]
            + 0.5 * x[4] * x[4] / g[3])


@njit(cache=True)
def _grad5_from_geom(x, prm, c, g):
    e = np.empty(5)
    Lv = c[1]
    m = c[4]
    inert = Lv * m / 24.0
    C2 = g[3]
    q2c = 0.5 * x[4] * x[4] / (C2 * C2)
    e[0] = prm[1] * x[0] + 0.5 * c[9] * Lv * m * math.cos(x[0]) - q2c * g[10]
    e[1] = 0.5 * prm[0] * (x[1] - c[0]) - q2c * g[11]
    e[2] = x[2] / inert
    e[3] = x[3] / prm[6]
    e[4] = x[4] / C2
    return e


@njit(cache=True)
def _grad5(x, prm, c):
    g, st = _geom(x[0], x[1], c)
    if st < 0:
        e = np.empty(5)
        e[:] = np.nan
        return e
    return _grad5_from_geom(x, prm, c, g)


# --------------------------------------------------------------------------
# public numpy-facing API


def _vectorize(fn, theta, l_p, consts, idx):
    c = consts.packed()
    th = np.asarray(theta, dtype=float)
    lp = np.asarray(l_p, dtype=float)
    th, lp = np.broadcast_arrays(th, lp)
    out = np.empty(th.shape)
    for k in np.ndindex(th.shape):
        g, st = _geom(float(th[k]), float(lp[k]), c)
        if st < 0:
            raise DomainError(
                f"arcsin argument out of range at theta={th[k]:.6g}, l_p={lp[k]:.6g}")
        out[k] = g[idx]
    return out if out.ndim else float(out)


def delta1(theta, l_p, consts: SharedConstants):
    """Internal shell angle ``(pi + theta)/2 - asin(L_v/l_p * sin((pi - theta)/2))``.

    Accepts scalars or broadcastable arrays. Raises :class:`DomainError`
    when the arcsin argument leaves [-1, 1] by more than 1e-12.
    """
    return _vectorize(_geom, theta, l_p, consts, 0)


def shell_area(theta, l_p, consts: SharedConstants):
    """Shell cross-section ``l_p * L_v * sin(delta1) / 4``, m^2."""
    return _vectorize(_geom, theta, l_p, consts, 1)


def zipped_length(theta, l_p, consts: SharedConstants):
    """Zipped electrode length, clamped to ``[0, L_e]``, m."""
    return _vectorize(_geom, theta, l_p, consts, 2)


def dynamic_capacitance(theta, l_p, consts: SharedConstants):
    """Series zipped/unzipped electrode capacitance ``C2``, F."""
    return _vectorize(_geom, theta, l_p, consts, 3)


def geometry(theta: float, l_p: float, consts: SharedConstants) -> GeomEval:
    """All geometric quantities and partial derivatives at a single state."""
    g, st = _geom(float(theta), float(l_p), consts.packed())
    if st < 0:
        raise DomainError(f"arcsin argument out of range at theta={theta:.6g}, l_p={l_p:.6g}")
    return GeomEval(*(float(v) for v in g), saturated=bool(st == 1))


def capacitance_from_zipped(l_e, consts: SharedConstants):
    """``C2`` as a function of the zipped length alone (no clamping)."""
    gap = 2.0 * consts.t + consts.X_h
    return consts.eps_0 * consts.eps_r * consts.w * (
        np.asarray(l_e) / (2.0 * consts.t) + (consts.L_e - np.asarray(l_e)) / gap)


def inertia(consts: SharedConstants) -> float:
    """Rotational inertia ``L_v * m / 24`` of one actuator."""
    return consts.L_v * consts.m / 24.0


def _params_matrix(params) -> np.ndarray:
    if isinstance(params, ActuatorParams):
        params = (params, params, params)
    if len(params) != 3:
        raise ValueError("expected one ActuatorParams per actuator")
    return np.stack([p.as_array() for p in params])


def _blocks(state) -> np.ndarray:
    if isinstance(state, SystemState):
        return state.blocks()
    x = np.asarray(state, dtype=float)
    if x.shape == (15,):
        return x.reshape(5, 3).T.copy()
    return x.reshape(3, 5)


def hamiltonian(state, params, consts: SharedConstants) -> float:
    """Total stored energy of the three-actuator system, J.

    ``state`` may be a :class:`SystemState` or a stacked 15-vector;
    ``params`` a triple of :class:`ActuatorParams` (a single instance is
    broadcast to all three actuators).
    """
    xb = _blocks(state)
    pm = _params_matrix(params)
    c = consts.packed()
    total = 0.0
    for i in range(3):
        h = _energy5(xb[i], pm[i], c)
        if not math.isfinite(h):
            raise DomainError(f"infeasible geometry in actuator {i + 1}")
        total += h
    return total


def grad_hamiltonian(state, params, consts: SharedConstants) -> np.ndarray:
    """Analytic gradient of :func:`hamiltonian` as a stacked 15-vector."""
    xb = _blocks(state)
    pm = _params_matrix(params)
    c = consts.packed()
    eb = np.empty((3, 5))
    for i in range(3):
        eb[i] = _grad5(xb[i], pm[i], c)
        if not np.all(np.isfinite(eb[i])):
            raise DomainError(f"infeasible geometry in actuator {i + 1}")
    return eb.T.reshape(15).copy()
