"""Port-Hamiltonian vector field of the three-actuator system.

The interconnection, dissipation and input matrices are block-diagonal
over actuators, so the integrator works on a per-actuator 5-state kernel
(:func:`actuator_rhs`, :func:`actuator_jacobian`). The dense 15x15
assembly in :func:`structure_matrices` is kept for inspection and checks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numba import njit

from .core import (
    ActuatorParams,
    DomainError,
    SharedConstants,
    SystemState,
    _blocks,
    _geom,
    _grad5_from_geom,
    _params_matrix,
    grad_hamiltonian,
    shell_area,
)

__all__ = [
    "InputSignal",
    "SineInput",
    "TabulatedInput",
    "StructureMatrices",
    "coupling_d",
    "input_gain_ga",
    "structure_matrices",
    "vector_field",
    "output_y",
    "prismatic_heights",
    "actuator_rhs",
    "actuator_jacobian",
    "DEFAULT_U0",
]

# Drive amplitude for synthetic runs, in units of the model input.
DEFAULT_U0 = 100.0


class InputSignal:
    """Per-actuator input voltages ``U_in(t)``; subclasses return a 3-vector."""

    def __call__(self, t: float) -> np.ndarray:  # pragma: no cover - interface
        raise NotImplementedError

    def derivative(self, t: float) -> np.ndarray:  # pragma: no cover - interface
        raise NotImplementedError

    def channel(self, i: int) -> "InputChannel":
        return InputChannel(self, i)


@dataclass(frozen=True)
class SineInput(InputSignal):
    """``U0 * sin(omega * t + phi_i)`` with phases in degrees (default 0/120/240)."""

    U0: float = DEFAULT_U0
    omega: float = 3 * math.pi
    phases_deg: tuple[float, float, float] = (0.0, 120.0, 240.0)

    def __post_init__(self):
        if not self.U0 >= 0:
            raise ValueError("U0 must be non-negative")
        object.__setattr__(self, "phases_deg", tuple(float(p) for p in self.phases_deg))
        if len(self.phases_deg) != 3:
            raise ValueError("need one phase per actuator")

    @property
    def _phi(self) -> np.ndarray:
        return np.radians(np.asarray(self.phases_deg))

    def __call__(self, t):
        return self.U0 * np.sin(self.omega * t + self._phi)

    def derivative(self, t):
        return self.U0 * self.omega * np.cos(self.omega * t + self._phi)


@dataclass(frozen=True, eq=False)
class TabulatedInput(InputSignal):
    """Recorded inputs, linearly interpolated; held constant outside the grid.

    ``values`` has shape (n, 3), or (n,) for a single channel which is then
    applied to every actuator.
    """

    times: np.ndarray
    values: np.ndarray
    _slopes: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        v = np.asarray(self.values, dtype=float)
        if v.ndim == 1:
            v = np.repeat(v[:, None], 3, axis=1)
        if t.ndim != 1 or v.shape != (t.size, 3) or t.size < 2:
            raise ValueError("need n >= 2 samples and values of shape (n, 3)")
        if np.any(np.diff(t) <= 0):
            raise ValueError("input times must be strictly increasing")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "_slopes", np.diff(v, axis=0) / np.diff(t)[:, None])

    def __call__(self, t):
        t = float(t)
        k = np.searchsorted(self.times, t, side="right") - 1
        if k < 0:
            return self.values[0].copy()
        if k >= self.times.size - 1:
            return self.values[-1].copy()
        return self.values[k] + self._slopes[k] * (t - self.times[k])

    def derivative(self, t):
        t = float(t)
        k = np.searchsorted(self.times, t, side="right") - 1
        if k < 0 or k >= self.times.size - 1:
            return np.zeros(3)
        return self._slopes[k].copy()


@dataclass(frozen=True, eq=False)
class InputChannel:
    """Scalar view on one channel of an :class:`InputSignal`."""

    signal: InputSignal
    index: int

    def __call__(self, t: float) -> float:
        return float(self.signal(t)[self.index])

    def derivative(self, t: float) -> float:
        return float(self.signal.derivative(t)[self.index])


def _as_signal(u) -> InputSignal | None:
    if u is None or isinstance(u, InputSignal):
        return u
    v = np.asarray(u, dtype=float)
    if v.shape != (3,):
        raise ValueError("input must be an InputSignal or a constant 3-vector")
    return TabulatedInput(np.array([0.0, 1.0]), np.vstack([v, v]))


# --------------------------------------------------------------------------
# compiled per-actuator kernels


@njit(cache=True)
def _rhs5_geom(x, prm, c, u):
    f = np.empty(5)
    g, st = _geom(x[0], x[1], c)
    if st < 0:
        f[:] = np.nan
        return f
    e = _grad5_from_geom(x, prm, c, g)
    d = 2.0 * g[1] / x[1]
    r0 = 1.0 / prm[3]
    r1 = 1.0 / prm[4]
    r2 = 1.0 / prm[5]
    gu = r0 * prm[7] * math.cos(prm[8] * x[0]) * u
    f[0] = e[2]
    f[1] = d * e[2]
    f[2] = -e[0] - d * e[1] - prm[2] * e[2]
    f[3] = -(r0 + r1) * e[3] - r0 * e[4] + gu
    f[4] = -r0 * e[3] - (r0 + r2) * e[4] + gu
    return f


@njit(cache=True)
def _jac5(x, prm, c, u):
    """Jacobian of the 5-state kernel.

    Columns for p, Q1 and Q2 are analytic; theta and l_p use central
    differences.
    """
    jac = np.zeros((5, 5))
    g, st = _geom(x[0], x[1], c)
    if st < 0:
        jac[:, :] = np.nan
        return jac
    inert = c[1] * c[4] / 24.0
    d = 2.0 * g[1] / x[1]
    C2 = g[3]
    r0 = 1.0 / prm[3]
    r1 = 1.0 / prm[4]
    r2 = 1.0 / prm[5]
    jac[0, 2] = 1.0 / inert
    jac[1, 2] = d / inert
    jac[2, 2] = -prm[2] / inert
    jac[3, 3] = -(r0 + r1) / prm[6]
    jac[4, 3] = -r0 / prm[6]
    jac[2, 4] = x[4] / (C2 * C2) * (g[10] + d * g[11])
    jac[3, 4] = -r0 / C2
    jac[4, 4] = -(r0 + r2) / C2
    for k in range(2):
        hk = 1e-7 * (1.0 + abs(x[k])) if k == 0 else 1e-7 * x[1]
        xp = x.copy()
        xm = x.copy()
        xp[k] += hk
        xm[k] -= hk
        fp = _rhs5_geom(xp, prm, c, u)
        fm = _rhs5_geom(xm, prm, c, u)
        if np.isnan(fp[0]) or np.isnan(fm[0]):
            # one-sided near the feasibility boundary
            f0 = _rhs5_geom(x, prm, c, u)
            if np.isnan(fp[0]):
                for r in range(5):
                    jac[r, k] = (f0[r] - fm[r]) / hk
            else:
                for r in range(5):
                    jac[r, k] = (fp[r] - f0[r]) / hk
        else:
            for r in range(5):
                jac[r, k] = (fp[r] - fm[r]) / (2.0 * hk)
    return jac


@njit(cache=True)
def _dfdt5(x, prm, du):
    out = np.zeros(5)
    gu = prm[7] * math.cos(prm[8] * x[0]) * du / prm[3]
    out[3] = gu
    out[4] = gu
    return out


@njit(cache=True)
def _power5(x, prm, c, u):
    """(supplied power y*u, dissipated power grad^T R grad) for one actuator."""
    g, st = _geom(x[0], x[1], c)
    if st < 0:
        return np.nan, np.nan
    e = _grad5_from_geom(x, prm, c, g)
    r0 = 1.0 / prm[3]
    y = r0 * prm[7] * math.cos(prm[8] * x[0]) * (e[3] + e[4])
    diss = (prm[2] * e[2] * e[2]
            + (r0 + 1.0 / prm[4]) * e[3] * e[3]
            + 2.0 * r0 * e[3] * e[4]
            + (r0 + 1.0 / prm[5]) * e[4] * e[4])
    return y * u, diss


def actuator_rhs(t: float, x, params: ActuatorParams, consts: SharedConstants, u: float) -> np.ndarray:
    """Time derivative of one actuator's 5-state ``[theta, l_p, p, Q1, Q2]``.

    ``u`` is the instantaneous input voltage of that actuator.
    """
    f = _rhs5_geom(np.asarray(x, dtype=float), params.as_array(), consts.packed(), float(u))
    if np.isnan(f[0]):
        raise DomainError("infeasible actuator geometry", t)
    return f


def actuator_jacobian(t: float, x, params: ActuatorParams, consts: SharedConstants, u: float) -> np.ndarray:
    jac = _jac5(np.asarray(x, dtype=float), params.as_array(), consts.packed(), float(u))
    if np.isnan(jac[0, 2]):
        raise DomainError("infeasible actuator geometry", t)
    return jac


# --------------------------------------------------------------------------
# system-level operators


def coupling_d(state, consts: SharedConstants) -> np.ndarray:
    """Diagonal 3x3 coupling ``diag(2 A_s^i / l_p^i)``."""
    xb = _blocks(state)
    return np.diag(2.0 * shell_area(xb[:, 0], xb[:, 1], consts) / xb[:, 1])


def input_gain_ga(theta, params) -> np.ndarray:
    """Diagonal 3x3 input gain ``diag(gamma1^i cos(gamma2^i theta_i))``."""
    pm = _params_matrix(params)
    theta = np.asarray(theta, dtype=float).reshape(3)
    return np.diag(pm[:, 7] * np.cos(pm[:, 8] * theta))


@dataclass(frozen=True)
class StructureMatrices:
    """Dense interconnection ``J``, dissipation ``R`` and input map ``G``."""

    J: np.ndarray
    R: np.ndarray
    G: np.ndarray


def structure_matrices(state, params, consts: SharedConstants) -> StructureMatrices:
    """Assemble the 15x15 ``J`` and ``R`` and the 15x3 ``G`` at a state.

    Block rows/columns follow the stacking ``(theta, l_p, p, Q1, Q2)``.
    """
    xb = _blocks(state)
    pm = _params_matrix(params)
    eye = np.eye(3)
    dmat = coupling_d(xb, consts)
    bmat = np.diag(pm[:, 2])
    r0 = np.diag(1.0 / pm[:, 3])
    r1 = np.diag(1.0 / pm[:, 4])
    r2 = np.diag(1.0 / pm[:, 5])
    z = np.zeros((3, 3))
    J = np.block([
        [z, z, eye, z, z],
        [z, z, dmat, z, z],
        [-eye, -dmat, z, z, z],
        [z, z, z, z, z],
        [z, z, z, z, z],
    ])
    R = np.block([
        [z, z, z, z, z],
        [z, z, z, z, z],
        [z, z, bmat, z, z],
        [z, z, z, r0 + r1, r0],
        [z, z, z, r0, r0 + r2],
    ])
    ga = input_gain_ga(xb[:, 0], params)
    G = np.vstack([z, z, z, r0 @ ga, r0 @ ga])
    return StructureMatrices(J=J, R=R, G=G)


def vector_field(t: float, state, params, consts: SharedConstants, u) -> np.ndarray:
    """``(J - R) grad H + G U_in(t)`` as a stacked 15-vector.

    ``u`` is an :class:`InputSignal` or a constant 3-vector of voltages.
    """
    xb = _blocks(state)
    pm = _params_matrix(params)
    c = consts.packed()
    sig = _as_signal(u)
    uu = np.zeros(3) if sig is None else np.asarray(sig(t), dtype=float)
    fb = np.empty((3, 5))
    for i in range(3):
        fb[i] = _rhs5_geom(xb[i], pm[i], c, float(uu[i]))
        if np.isnan(fb[i, 0]):
            raise DomainError(f"infeasible geometry in actuator {i + 1}", t)
    return fb.T.reshape(15).copy()


def output_y(state, params, consts: SharedConstants) -> np.ndarray:
    """Power-conjugate output ``(R0^-1 ga)^T (C1^-1 Q1 + C2^-1 Q2)``."""
    e = grad_hamiltonian(state, params, consts)
    xb = _blocks(state)
    pm = _params_matrix(params)
    ga = pm[:, 7] * np.cos(pm[:, 8] * xb[:, 0])
    return ga / pm[:, 3] * (e[9:12] + e[12:15])


def prismatic_heights(state, consts: SharedConstants) -> np.ndarray:
    """Vertical elongation ``L_v sin(theta_i) / 2`` of each actuator, m."""
    if isinstance(state, SystemState):
        theta = state.theta
    else:
        theta = np.asarray(state, dtype=float)
        if theta.shape == (15,):
            theta = theta[:3]
    return 0.5 * consts.L_v * np.sin(theta)
