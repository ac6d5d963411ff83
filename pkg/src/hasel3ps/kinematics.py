"""Forward and inverse kinematics of the 3PS platform.

Corner ``i`` sits above base anchor ``(X_i, Y_i)`` at height ``h_i``. The
antenna is rigid, of length ``L``, and perpendicular to the platform.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "DegenerateGeometry",
    "SingularNormal",
    "PlatformGeometry",
    "TipPose",
    "fkm",
    "ikm",
    "EPS_NZ",
]

EPS_NZ = 1e-6
EPS_CROSS = 1e-15


class DegenerateGeometry(ValueError):
    """Platform corners are (numerically) collinear."""


class SingularNormal(ValueError):
    """Estimated platform normal is (nearly) horizontal."""


@dataclass(frozen=True)
class PlatformGeometry:
    """Base anchors (counter-clockwise seen from +Z) and antenna length, m."""

    anchors: tuple[tuple[float, float], tuple[float, float], tuple[float, float]]
    L: float = 0.05

    def __post_init__(self):
        a = np.asarray(self.anchors, dtype=float)
        if a.shape != (3, 2) or not np.all(np.isfinite(a)):
            raise ValueError("need three finite (X, Y) anchors")
        if not self.L > 0:
            raise ValueError("antenna length must be positive")
        v1, v2 = a[1] - a[0], a[2] - a[0]
        if abs(v1[0] * v2[1] - v1[1] * v2[0]) < EPS_CROSS:
            raise DegenerateGeometry("base anchors are collinear")
        object.__setattr__(self, "anchors", tuple(tuple(float(v) for v in row) for row in a))

    @classmethod
    def equilateral(cls, circumradius: float = 0.023, L: float = 0.05,
                    center: tuple[float, float] = (0.0, 0.0)) -> "PlatformGeometry":
        """Anchors at 90, 210 and 330 degrees on a circle about ``center``."""
        ang = np.radians([90.0, 210.0, 330.0])
        pts = np.column_stack([center[0] + circumradius * np.cos(ang),
                               center[1] + circumradius * np.sin(ang)])
        return cls(tuple(map(tuple, pts)), L)

    @classmethod
    def from_side(cls, side: float, L: float = 0.05) -> "PlatformGeometry":
        return cls.equilateral(side / math.sqrt(3.0), L)

    @property
    def xy(self) -> np.ndarray:
        return np.asarray(self.anchors, dtype=float)

    @property
    def base_centroid(self) -> np.ndarray:
        return np.append(self.xy.mean(axis=0), 0.0)


@dataclass(frozen=True)
class TipPose:
    position: np.ndarray
    normal: np.ndarray
    centroid: np.ndarray


def fkm(h, geom: PlatformGeometry) -> TipPose:
    """Antenna tip pose from the three corner heights."""
    h = np.asarray(h, dtype=float).reshape(3)
    P = np.column_stack([geom.xy, h])
    cp = P.mean(axis=0)
    cr = np.cross(P[1] - P[0], P[2] - P[0])
    nrm = np.linalg.norm(cr)
    if nrm < EPS_CROSS:
        raise DegenerateGeometry("platform corners are collinear")
    n = cr / nrm
    if n[2] < 0:
        n = -n
    return TipPose(position=cp + geom.L * n, normal=n, centroid=cp)


def fkm_batch(h: np.ndarray, geom: PlatformGeometry) -> np.ndarray:
    """Tip positions for an (m, 3) array of heights; returns (m, 3)."""
    h = np.atleast_2d(np.asarray(h, dtype=float))
    xy = geom.xy
    P = np.concatenate([np.broadcast_to(xy, (h.shape[0], 3, 2)), h[:, :, None]], axis=2)
    cp = P.mean(axis=1)
    cr = np.cross(P[:, 1] - P[:, 0], P[:, 2] - P[:, 0])
    nrm = np.linalg.norm(cr, axis=1)
    if np.any(nrm < EPS_CROSS):
        raise DegenerateGeometry("platform corners are collinear")
    n = cr / nrm[:, None]
    n *= np.where(n[:, 2:3] < 0, -1.0, 1.0)
    return cp + geom.L * n


def ikm(tip, geom: PlatformGeometry) -> np.ndarray:
    """Corner heights from a tip position, using the base-centroid-to-tip direction as normal.

    This estimate coincides with the true platform normal only when the
    platform is level; for tilted platforms ``ikm(fkm(h))`` differs from
    ``h`` by a residual that is quadratic in the tilt.
    """
    tip = np.asarray(tip, dtype=float).reshape(3)
    v = tip - geom.base_centroid
    nv = np.linalg.norm(v)
    if nv == 0.0:
        raise SingularNormal("tip coincides with the base centroid")
    n = v / nv
    if n[2] <= EPS_NZ:
        raise SingularNormal(f"normal z-component {n[2]:.3g} below {EPS_NZ:g}")
    cp = tip - geom.L * n
    xy = geom.xy
    return cp[2] - (n[0] * (xy[:, 0] - cp[0]) + n[1] * (xy[:, 1] - cp[1])) / n[2]
