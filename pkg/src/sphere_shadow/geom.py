"""Sphere and rotation primitives."""

from dataclasses import dataclass

import numpy as np

UNIT_TOL = 1e-12


def normalize(v):
    v = np.asarray(v, dtype=float)
    n = np.linalg.norm(v)
    if n == 0.0:
        raise ValueError("cannot normalize the zero vector")
    return v / n


@dataclass(frozen=True)
class SpherePoint:
    """A point of the unit sphere S^2 in R^3."""

    coords: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "coords", normalize(self.coords))

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.coords, dtype=dtype)

    def __neg__(self):
        return SpherePoint(-self.coords)


@dataclass(frozen=True)
class TangentVector:
    base: SpherePoint
    vec: np.ndarray

    def __post_init__(self):
        vec = np.asarray(self.vec, dtype=float)
        b = self.base.coords
        if abs(b @ vec) > UNIT_TOL * max(1.0, np.linalg.norm(vec)):
            raise ValueError("vector is not tangent at its base point")
        object.__setattr__(self, "vec", vec)


@dataclass(frozen=True)
class AxisAngle:
    """Rotation by |u| about u/|u|."""

    axis_times_angle: np.ndarray

    def __call__(self, q):
        return rotate(self.axis_times_angle, q)


def rotate(u, q):
    """Rotate ``q`` by the rotation vector ``u`` (three-term Rodrigues formula)."""
    u = np.asarray(getattr(u, "axis_times_angle", u), dtype=float)
    q = np.asarray(q, dtype=float)
    ang = np.linalg.norm(u)
    if ang == 0.0:
        return q.copy()
    k = u / ang
    c, s = np.cos(ang), np.sin(ang)
    return q * c + np.cross(k, q) * s + k * (k @ q) * (1.0 - c)


def sphere_distance(x, y):
    """Great-circle distance in [0, pi]."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    c = float(np.clip(x @ y, -1.0, 1.0))
    s = np.linalg.norm(np.cross(x, y))
    # atan2 keeps full precision near 0 and pi where arccos loses half the digits
    return float(np.arctan2(s, c))


def tangent_project(x, v):
    x = SpherePoint(np.asarray(x, dtype=float)) if not isinstance(x, SpherePoint) else x
    v = np.asarray(v, dtype=float)
    b = x.coords
    return TangentVector(x, v - (v @ b) * b)


def tangent_frame(x):
    """Orthonormal pair spanning the tangent plane at ``x``."""
    x = np.asarray(x, dtype=float)
    trial = np.eye(3)[np.argmin(np.abs(x))]
    u1 = normalize(trial - (trial @ x) * x)
    u2 = np.cross(x, u1)
    return u1, u2


def exp_map(x, u):
    """Geodesic from ``x`` with initial tangent ``u`` evaluated at unit time."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    r = np.linalg.norm(u)
    if r == 0.0:
        return x.copy()
    return np.cos(r) * x + np.sin(r) * u / r
