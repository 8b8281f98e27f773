"""Restricted two-body problem on the sphere in the rescaled rotating frame.

Lagrangian ``L = 1/2 |xdot + rot e x x|^2 + eps V(x)`` with the cotangent
potential ``V = cot(dist(x, a))``, attracting at ``+a`` and repelling at
``-a``.  The Jacobi integral is ``E = 1/2|xdot|^2 - 1/2 rot^2 |e x x|^2 - eps V``.
"""

import csv
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from .geom import SpherePoint, TangentVector, sphere_distance

SINGULAR_TOL = 1e-12
DELTA_REG = 0.05
DEFAULT_TOL = 1e-12


class SingularInputError(ValueError):
    """Evaluation requested at (or numerically at) a singular point."""


class IntegrationError(RuntimeError):
    def __init__(self, msg, closest_approach=None, state=None):
        super().__init__(msg)
        self.closest_approach = closest_approach
        self.state = state


class StepUnderflowError(IntegrationError):
    pass


class CollisionError(IntegrationError):
    pass


class EscapeError(ValueError):
    pass


@dataclass(frozen=True)
class SystemParams:
    eps: float
    h: float
    a: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0]))
    e: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))
    rot: float = 1.0
    delta_reg: float = DELTA_REG

    def __post_init__(self):
        a = SpherePoint(self.a).coords
        e = SpherePoint(self.e).coords
        if abs(a @ e) > 1e-12:
            raise ValueError("singularity must lie on the equator of the rotation axis")
        if self.eps < 0:
            raise ValueError("eps must be nonnegative")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "e", e)

    @property
    def j(self):
        return np.cross(self.e, self.a)

    def replace(self, **kw):
        d = dict(eps=self.eps, h=self.h, a=self.a, e=self.e, rot=self.rot,
                 delta_reg=self.delta_reg)
        d.update(kw)
        return SystemParams(**d)

    def as_array(self, sigma=0.0):
        p = np.zeros(10)
        p[0] = self.eps
        p[1] = self.rot
        # without the potential there is nothing to regularize
        p[2] = self.delta_reg if self.eps > 0.0 else 0.0
        p[3:6] = self.a
        p[6:9] = self.e
        p[9] = sigma
        return p


@dataclass(frozen=True)
class SingularityDescriptor:
    location: SpherePoint
    strength: float


def singularities(params):
    """The singular set {+a, -a} with the local strength f of V ~ f/dist."""
    return (SingularityDescriptor(SpherePoint(params.a), 1.0),
            SingularityDescriptor(SpherePoint(-params.a), -1.0))


@dataclass(frozen=True)
class State:
    x: np.ndarray
    xdot: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        v = np.asarray(self.xdot, dtype=float)
        if abs(np.linalg.norm(x) - 1.0) > 1e-10 or abs(x @ v) > 1e-10 * max(1.0, np.linalg.norm(v)):
            raise ValueError("state violates |x| = 1 or <x, xdot> = 0")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "xdot", v)

    @property
    def tangent(self):
        return TangentVector(SpherePoint(self.x), self.xdot)

    def as_array(self, t=0.0):
        return np.concatenate([self.x, self.xdot, [t]])


@dataclass
class Trajectory:
    t: np.ndarray
    states: np.ndarray  # rows (x1, x2, x3, xdot1, xdot2, xdot3)
    min_delta_distance: float
    jacobi_drift: float
    params: SystemParams = None

    def state(self, i):
        return State(self.states[i, :3], self.states[i, 3:])

    @property
    def final(self):
        return self.state(-1)

    def to_csv(self, path):
        a = self.params.a
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "x1", "x2", "x3", "xdot1", "xdot2", "xdot3",
                        "rho_to_a", "rho_to_minus_a", "E_eps"])
            for t, row in zip(self.t, self.states):
                ra = sphere_distance(row[:3], a)
                w.writerow([repr(float(t))] + [repr(float(c)) for c in row]
                           + [repr(ra), repr(np.pi - ra),
                              repr(jacobi_array(row, self.params))])


def _check_regular(x, a):
    s = np.linalg.norm(np.cross(a, x))
    if s < SINGULAR_TOL:
        raise SingularInputError("point coincides with a singularity")
    return float(np.asarray(x) @ a), s


def potential_V(x, a):
    """cot of the geodesic distance from ``a``."""
    x = np.asarray(x, dtype=float)
    a = np.asarray(a, dtype=float)
    c, s = _check_regular(x, a)
    # |a x x| rather than sqrt(1 - c^2): no cancellation near the singularities
    return c / s


def potential_U(q1, q2, k):
    return k * potential_V(q2, q1)


def grad_V(x, a):
    """Tangential gradient of V at x."""
    x = np.asarray(x, dtype=float)
    a = np.asarray(a, dtype=float)
    c, s = _check_regular(x, a)
    return TangentVector(SpherePoint(x), np.cross(x, np.cross(a, x)) / s ** 3)


def eom(state, params):
    """Acceleration in physical time, including the constraint force."""
    _check_regular(state.x, params.a)
    p = params.as_array()
    p[2] = 0.0
    z = state.as_array()
    return K.restricted_field(z, p)[3:6]


def jacobi_array(z, params):
    x = np.asarray(z[:3])
    v = np.asarray(z[3:6])
    ex = np.cross(params.e, x)
    V = potential_V(x, params.a) if params.eps != 0.0 else 0.0
    return 0.5 * v @ v - 0.5 * params.rot ** 2 * (ex @ ex) - params.eps * V


def jacobi(state, params):
    return jacobi_array(np.concatenate([state.x, state.xdot]), params)


def _raise_status(status, z, min_rho, where="integration"):
    if status == K.COLLISION:
        raise CollisionError(f"{where}: numerical collision (rho={min_rho:.3e})", min_rho, z)
    if status == K.UNDERFLOW:
        raise StepUnderflowError(f"{where}: step size underflow", min_rho, z)
    if status == K.MAX_STEPS:
        raise IntegrationError(f"{where}: step budget exhausted", min_rho, z)
    if status == K.NO_EVENT:
        raise IntegrationError(f"{where}: termination event not reached", min_rho, z)


def rho_min_for(eps):
    return 1e-3 * eps


def integrate(state, params, t_end, tol=DEFAULT_TOL, max_steps=200000):
    """Integrate from ``state`` over physical time [0, t_end].

    Sundman rescaling is blended in near the singular pair so close passes
    are resolved; every step is retracted onto T S^2.
    """
    z0 = state.as_array() if isinstance(state, State) else np.asarray(state, float)
    p = params.as_array()
    if params.eps > 0.0 and K.near_distance(z0, p) < SINGULAR_TOL:
        raise SingularInputError("initial state on the singular set")
    V0 = np.zeros((7, 1))
    status, z, _, s, n, min_rho, s_rec, z_rec, nrec = K.propagate(
        K.restricted_field, p, z0, V0, False, K.MODE_TIME, np.zeros(3), 0.0,
        0.0, float(t_end), np.inf, tol, tol, 1e-3, rho_min_for(params.eps),
        max_steps, True)
    _raise_status(status, z, min_rho)
    return _trajectory_from_records(z_rec, params, min_rho)


def _trajectory_from_records(z_rec, params, min_rho):
    E = np.array([jacobi_array(r, params) for r in z_rec])
    return Trajectory(t=z_rec[:, 6].copy(), states=z_rec[:, :6].copy(),
                      min_delta_distance=float(min_rho),
                      jacobi_drift=float(np.max(np.abs(E - E[0]))),
                      params=params)


# ---------------------------------------------------------------------------
# Kepler problem on the sphere (rot = 0): closure of bounded orbits

def _kepler_integrals(z, params):
    x, v, a = z[:3], z[3:6], params.a
    E = 0.5 * v @ v - params.eps * potential_V(x, a)
    C = abs(np.cross(x, v) @ a)
    return E, C


def kepler_turning_points(E, C, eps):
    """Radial turning points (rho_min, rho_max) of the spherical Kepler problem.

    With u = cot(rho) the radial equation reduces to
    C^2 u^2 - 2 eps u + C^2 - 2E = 0.
    """
    disc = eps * eps - C * C * (C * C - 2.0 * E)
    if C == 0.0 or disc < 0.0:
        raise EscapeError("no bounded radial motion")
    r = np.sqrt(disc)
    u_hi = (eps + r) / (C * C)
    u_lo = (eps - r) / (C * C)
    if u_lo <= 0.0:
        raise EscapeError("orbit reaches the rho = pi/2 boundary")
    return np.arctan2(1.0, u_hi), np.arctan2(1.0, u_lo)


def kepler_radial_period(E, C, eps):
    """Radial period by quadrature between the turning points."""
    from scipy.integrate import quad

    r0, r1 = kepler_turning_points(E, C, eps)
    mid, amp = 0.5 * (r0 + r1), 0.5 * (r1 - r0)
    if amp < 1e-7:
        # circular orbit: radial and angular periods coincide
        return 2.0 * np.pi * np.sin(mid) ** 2 / C

    def integrand(th):
        rho = mid - amp * np.cos(th)
        u = 1.0 / np.tan(rho)
        rad = 2.0 * (E + eps * u) - C * C * (1.0 + u * u)
        return amp * np.sin(th) / np.sqrt(max(rad, 1e-300))

    val, _ = quad(integrand, 0.0, np.pi, epsabs=1e-14, epsrel=1e-13, limit=200)
    return 2.0 * val


def circular_kepler_state(rho, params):
    """Relative equilibrium at distance ``rho`` from ``a`` (rot = 0)."""
    a = params.a
    if not 0.0 < rho < np.pi / 2:
        raise EscapeError("circular orbits exist only for 0 < rho < pi/2")
    b = params.j
    x = np.cos(rho) * a + np.sin(rho) * b
    w = np.sqrt(params.eps / (np.sin(rho) ** 3 * np.cos(rho)))
    tang = np.cross(a, x)
    tang = tang / np.linalg.norm(tang)
    return State(x, np.sin(rho) * w * tang)


def kepler_closure_check(params, state, tol=DEFAULT_TOL):
    """Phase-space gap after one radial period of the Kepler problem (rot = 0).

    Returns ``(gap, period, trajectory)``.
    """
    if params.rot != 0.0:
        raise ValueError("closure check applies to the non-rotating problem")
    z0 = state.as_array()
    if params.eps == 0.0:
        period = 2.0 * np.pi / np.linalg.norm(state.xdot)
    else:
        E, C = _kepler_integrals(z0, params)
        period = kepler_radial_period(E, C, params.eps)
    traj = integrate(state, params, period, tol=tol)
    zf = np.concatenate([traj.states[-1]])
    gap = float(np.linalg.norm(zf - z0[:6]))
    return gap, period, traj
