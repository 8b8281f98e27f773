"""Fixed-energy boundary value problems and the Maupertuis action at eps = 0.

For ``L = 1/2|q'|^2 + <w(q), q'> + W(q)`` at energy ``h`` the trajectories are
critical curves of

    J(gamma) = int sqrt(2 (h + W)) |q'| + <w, q'> dt,

which does not depend on the parametrization.  The metric factor is fixed by
the kinetic term 1/2|q'|^2: on shell it reduces to |q'|^2.  On the sphere problem
``W = 1/2|e x x|^2`` and ``w = e x x``.  The discrete Lagrangian ``L(x, y)`` is
the action of the trajectory joining ``x`` and ``y`` near a collision orbit;
its gradients are the boundary momenta ``q' + w`` (on shell).
"""

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .dynamics import SystemParams
from .geom import sphere_distance, tangent_frame

DELTA = 0.1
_GL_X, _GL_W = np.polynomial.legendre.leggauss(24)


class NoConvergenceError(RuntimeError):
    def __init__(self, msg, residual=None):
        super().__init__(msg)
        self.residual = residual


class HintTooFarError(ValueError):
    pass


class DomainError(ValueError):
    pass


@dataclass(frozen=True)
class MaupertuisProblem:
    h: float
    W: Callable
    w: Callable

    def check(self, x):
        if self.h + self.W(x) <= 0.0:
            raise DomainError("h + W must be positive along the path")


def sphere_problem(params):
    """Maupertuis data of the rotating-frame problem (eps = 0)."""
    e = params.e
    if params.h <= -0.5:
        raise DomainError("the energy domain must contain the singular pair (h > -1/2)")
    return MaupertuisProblem(
        h=params.h,
        W=lambda x: 0.5 * _dot(np.cross(e, x), np.cross(e, x)),
        w=lambda x: np.cross(e, x))


def _dot(u, v):
    return np.sum(u * v, axis=-1)


def _rot(u, q):
    """Vectorized Rodrigues rotation; complex-step safe (no abs or norm)."""
    ang = np.sqrt(_dot(u, u))
    ang = np.where(ang == 0, 1e-300, ang)
    k = u / ang[..., None]
    c, s = np.cos(ang), np.sin(ang)
    return (q * c[..., None] + np.cross(k, q) * s[..., None]
            + k * _dot(k, q)[..., None] * (1.0 - c)[..., None])


@dataclass(frozen=True)
class Path:
    """Closed-form eps = 0 trajectory x(t) = R(-t e) R(t w) x0 on [0, T]."""

    x0: np.ndarray
    omega: np.ndarray
    e: np.ndarray
    T: float

    def position(self, t):
        t = np.atleast_1d(np.asarray(t))
        q = _rot(t[:, None] * self.omega[None, :], np.broadcast_to(self.x0, (len(t), 3)))
        return _rot(-t[:, None] * self.e[None, :], q)

    def velocity(self, t):
        t = np.atleast_1d(np.asarray(t))
        x = self.position(t)
        w_rot = _rot(-t[:, None] * self.e[None, :], np.broadcast_to(self.omega, (len(t), 3)))
        return -np.cross(self.e, x) + np.cross(w_rot, x)

    @property
    def end(self):
        return self.position(self.T)[0]


def path_from_state(x, v, e, T):
    """Path through x with rotating-frame velocity v."""
    return Path(np.asarray(x), np.cross(x, v + np.cross(e, x)), np.asarray(e), T)


def _nodes(t0, t1, panels):
    edges = np.linspace(t0, t1, panels + 1)
    half = 0.5 * np.diff(edges)
    mid = 0.5 * (edges[1:] + edges[:-1])
    t = (mid[:, None] + half[:, None] * _GL_X[None, :]).ravel()
    wts = (half[:, None] * _GL_W[None, :]).ravel()
    return t, wts


def action_terms(path, problem, panels=16, reparam=None):
    """(metric term, gyroscopic term) of the action.

    ``reparam`` = (phi, dphi) evaluates the path as s -> path(phi(s)) on [0, 1].
    """
    if reparam is None:
        t, wts = _nodes(0.0, path.T, panels)
        x = path.position(t)
        v = path.velocity(t)
    else:
        phi, dphi = reparam
        s, wts = _nodes(0.0, 1.0, panels)
        x = path.position(phi(s))
        v = path.velocity(phi(s)) * dphi(s)[:, None]
    hw = problem.h + np.array([problem.W(xi) for xi in x])
    if np.any(hw <= 0.0):
        raise DomainError("h + W must be positive along the path")
    metric = np.sqrt(2.0 * hw) * np.sqrt(_dot(v, v))
    gyro = _dot(np.array([problem.w(xi) for xi in x]), v)
    return float(metric @ wts), float(gyro @ wts)


def maupertuis_action(path, problem, panels=16, reparam=None):
    m, g = action_terms(path, problem, panels, reparam)
    return m + g


def reversed_action(path, problem, panels=16):
    """Action of the path traversed backwards."""
    T = path.T
    return maupertuis_action(path, problem, panels,
                             reparam=(lambda s: T * (1.0 - s), lambda s: -T + 0.0 * s))


# ---------------------------------------------------------------------------
# boundary value problem

def _speed(x, params):
    ex = np.cross(params.e, x)
    return np.sqrt(2.0 * (params.h + 0.5 * _dot(ex, ex)))


def _shoot_residual(beta, T, x, y, params, frame_x, frame_y):
    f1, f2 = frame_x
    v = _speed(x, params) * (np.cos(beta) * f1 + np.sin(beta) * f2)
    p = path_from_state(x, v, params.e, T)
    d = p.position(T)[0] - y
    return np.array([_dot(d, frame_y[0]), _dot(d, frame_y[1])]), p


def _shoot(x, y, beta0, T0, params, tol=1e-13, max_iter=50):
    fx = tangent_frame(x)
    fy = tangent_frame(y)
    beta, T = float(beta0), float(T0)
    F, p = _shoot_residual(beta, T, x, y, params, fx, fy)
    h = 1e-20
    for it in range(max_iter):
        if np.max(np.abs(F)) < tol:
            return p, beta, it
        Fb = _shoot_residual(beta + 1j * h, T, x, y, params, fx, fy)[0].imag / h
        FT = _shoot_residual(beta, T + 1j * h, x, y, params, fx, fy)[0].imag / h
        step = np.linalg.solve(np.column_stack([Fb, FT]), -F)
        lam = 1.0
        nrm = np.max(np.abs(F))
        for _ in range(30):
            Fn, pn = _shoot_residual(beta + lam * step[0], T + lam * step[1], x, y, params, fx, fy)
            if np.max(np.abs(Fn)) < nrm or lam < 1e-6:
                break
            lam *= 0.5
        beta, T = beta + lam * step[0], T + lam * step[1]
        F, p = Fn.real, pn
    if np.max(np.abs(F)) < 1e-10:
        return p, beta, max_iter
    raise NoConvergenceError(f"shooting did not converge (residual {np.max(np.abs(F)):.2e})",
                             float(np.max(np.abs(F))))


def _hint_time(hint, params, target, lo, hi):
    """Time on the hint orbit closest to ``target`` within [lo, hi]."""
    from scipy.optimize import minimize_scalar
    p = Path(hint.start, hint.omega_vec, params.e, hint.tau)
    ts = np.linspace(lo, hi, 400)
    d = np.linalg.norm(p.position(ts) - target, axis=1)
    k = int(np.argmin(d))
    a, b = ts[max(k - 1, 0)], ts[min(k + 1, len(ts) - 1)]
    r = minimize_scalar(lambda t: np.linalg.norm(p.position(t)[0] - target),
                        bounds=(a, b), method="bounded", options={"xatol": 1e-12})
    return float(r.x), p


def _seed(hint, params, x, y):
    tx, p = _hint_time(hint, params, x, 0.0, 0.5 * hint.tau)
    ty, _ = _hint_time(hint, params, y, 0.5 * hint.tau, hint.tau)
    v = p.velocity(tx)[0]
    f1, f2 = tangent_frame(x)
    beta = np.arctan2(v @ f2, v @ f1)
    return beta, ty - tx


@dataclass
class BVPSolution:
    path: Path
    transit_time: float
    iterations: int
    residual: float


def bvp_fixed_energy(x, y, orbit_hint, params, delta=DELTA):
    """Trajectory of energy params.h from x to y near the hint collision orbit (eps = 0)."""
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    if (sphere_distance(x, orbit_hint.start) > delta + 1e-9
            or sphere_distance(y, orbit_hint.end) > delta + 1e-9):
        raise HintTooFarError("endpoints are not within delta of the hint orbit's ends")
    beta, T = _seed(orbit_hint, params, x, y)
    path, beta, it = _shoot(x, y, beta, T, params)
    res = float(np.linalg.norm(path.end - y))
    return BVPSolution(path, path.T, it, res)


# ---------------------------------------------------------------------------
# discrete Lagrangian

def vertex_frame(point, params):
    """Fixed orthonormal tangent frame at a vertex (section coordinates)."""
    f1 = params.e.copy()
    return f1, np.cross(point, f1)


def section_point(vertex, xi, params):
    """exp map at the vertex of xi in section coordinates."""
    f1, f2 = vertex_frame(vertex, params)
    u = xi[0] * f1 + xi[1] * f2
    r = np.sqrt(u @ u)
    if r == 0:
        return vertex.copy()
    return np.cos(r) * vertex + np.sin(r) * u / r


def section_coords(vertex, x, params):
    f1, f2 = vertex_frame(vertex, params)
    r = sphere_distance(vertex, x)
    u = x - (x @ vertex) * vertex
    n = np.linalg.norm(u)
    if n == 0:
        return np.zeros(2)
    return r * np.array([u @ f1, u @ f2]) / n


def _dexp(vertex, xi, params, h=1e-7):
    """3x2 derivative of the section chart (central differences)."""
    D = np.zeros((3, 2))
    for k in range(2):
        dxi = np.zeros(2)
        dxi[k] = h
        D[:, k] = (section_point(vertex, xi + dxi, params)
                   - section_point(vertex, xi - dxi, params)) / (2 * h)
    return D


@dataclass
class DiscreteLagrangianValue:
    x: np.ndarray
    y: np.ndarray
    value: float
    grad_x: np.ndarray
    grad_y: np.ndarray
    transit_time: float
    momentum_x: np.ndarray
    momentum_y: np.ndarray


def momentum(path, t, params):
    """Maupertuis momentum q' + w(q) (on shell) projected to the tangent plane."""
    x = path.position(t)[0]
    v = path.velocity(t)[0]
    p = v + np.cross(params.e, x)
    return p - (p @ x) * x


def discrete_lagrangian(x, y, orbit_hint, params, delta=DELTA, panels=16):
    """L(x, y) with gradients in the section coordinates of the hint's vertices."""
    sol = bvp_fixed_energy(x, y, orbit_hint, params, delta)
    prob = sphere_problem(params)
    val = maupertuis_action(sol.path, prob, panels)
    px = momentum(sol.path, 0.0, params)
    py = momentum(sol.path, sol.path.T, params)
    xi_x = section_coords(orbit_hint.start, x, params)
    xi_y = section_coords(orbit_hint.end, y, params)
    gx = -_dexp(orbit_hint.start, xi_x, params).T @ px
    gy = _dexp(orbit_hint.end, xi_y, params).T @ py
    return DiscreteLagrangianValue(np.asarray(x), np.asarray(y), val, gx, gy, sol.transit_time,
                                   px, py)


def lagrangian_in_coords(xi_x, xi_y, orbit_hint, params, delta=DELTA):
    x = section_point(orbit_hint.start, np.asarray(xi_x), params)
    y = section_point(orbit_hint.end, np.asarray(xi_y), params)
    return discrete_lagrangian(x, y, orbit_hint, params, delta)


def fd_gradients(xi_x, xi_y, orbit_hint, params, h=1e-6, delta=DELTA):
    """Central finite-difference gradients of L in section coordinates."""
    g = np.zeros(4)
    base = np.concatenate([xi_x, xi_y])
    for k in range(4):
        d = np.zeros(4)
        d[k] = h
        up = base + d
        dn = base - d
        lu = lagrangian_in_coords(up[:2], up[2:], orbit_hint, params, delta + 2 * h).value
        ld = lagrangian_in_coords(dn[:2], dn[2:], orbit_hint, params, delta + 2 * h).value
        g[k] = (lu - ld) / (2 * h)
    return g[:2], g[2:]


# ---------------------------------------------------------------------------
# interior problem on the section circles

def _vertex_leg(vertex, x, hint, params, at_start):
    """Trajectory between a vertex and a point of its delta-circle, seeded by the hint."""
    if at_start:
        t, p = _hint_time(hint, params, x, 0.0, 0.5 * hint.tau)
        v = p.velocity(0.0)[0]
        f1, f2 = tangent_frame(vertex)
        path, _, _ = _shoot(vertex, x, np.arctan2(v @ f2, v @ f1), t, params)
    else:
        t, p = _hint_time(hint, params, x, 0.5 * hint.tau, hint.tau)
        v = p.velocity(t)[0]
        f1, f2 = tangent_frame(x)
        path, _, _ = _shoot(x, vertex, np.arctan2(v @ f2, v @ f1), hint.tau - t, params)
    return path


def _circle_point(vertex, phi, delta, params):
    return section_point(vertex, delta * np.array([np.cos(phi), np.sin(phi)]), params)


def _circle_tangent(vertex, phi, delta, params):
    h = 1e-7
    return (_circle_point(vertex, phi + h, delta, params)
            - _circle_point(vertex, phi - h, delta, params)) / (2 * h)


def interior_gradient(phis, hint, params, delta=DELTA):
    """Gradient of J(a -> x) + L(x, y) + J(y -> b) in the circle angles of x and y.

    It is the momentum jump at x and y projected on the circles, and vanishes
    exactly when the broken path is the collision orbit.
    """
    A, B = hint.start, hint.end
    x = _circle_point(A, phis[0], delta, params)
    y = _circle_point(B, phis[1], delta, params)
    sol = bvp_fixed_energy(x, y, hint, params, delta)
    leg_a = _vertex_leg(A, x, hint, params, True)
    leg_b = _vertex_leg(B, y, hint, params, False)
    jump_x = momentum(leg_a, leg_a.T, params) - momentum(sol.path, 0.0, params)
    jump_y = momentum(sol.path, sol.path.T, params) - momentum(leg_b, 0.0, params)
    return np.array([jump_x @ _circle_tangent(A, phis[0], delta, params),
                     jump_y @ _circle_tangent(B, phis[1], delta, params)])


def interior_value(phis, hint, params, delta=DELTA, panels=16):
    A, B = hint.start, hint.end
    prob = sphere_problem(params)
    x = _circle_point(A, phis[0], delta, params)
    y = _circle_point(B, phis[1], delta, params)
    sol = bvp_fixed_energy(x, y, hint, params, delta)
    leg_a = _vertex_leg(A, x, hint, params, True)
    leg_b = _vertex_leg(B, y, hint, params, False)
    return sum(maupertuis_action(p, prob, panels) for p in (leg_a, sol.path, leg_b))


@dataclass
class SectionHessian:
    phis: np.ndarray
    gradient: np.ndarray
    hessian: np.ndarray
    min_singular_value: float
    newton_steps: int


def section_hessian(hint, params, delta=DELTA, h=1e-5, tol=1e-11):
    """Critical configuration of the interior problem and its Hessian.

    Newton on the torus of circle angles is started from the hint's crossing
    points; the Hessian is the central-difference Jacobian of the gradient.
    """
    A, B = hint.start, hint.end
    p = Path(hint.start, hint.omega_vec, params.e, hint.tau)
    from .shadow import _crossing_time
    tx = _crossing_time(hint, params, delta, at_end=False)
    ty = hint.tau - _crossing_time(hint, params, delta, at_end=True)
    phis = np.array([np.arctan2(*section_coords(A, p.position(tx)[0], params)[::-1]),
                     np.arctan2(*section_coords(B, p.position(ty)[0], params)[::-1])])

    def hess(ph):
        H = np.zeros((2, 2))
        for k in range(2):
            d = np.zeros(2)
            d[k] = h
            H[:, k] = (interior_gradient(ph + d, hint, params, delta)
                       - interior_gradient(ph - d, hint, params, delta)) / (2 * h)
        return 0.5 * (H + H.T)

    g = interior_gradient(phis, hint, params, delta)
    steps = 0
    while np.max(np.abs(g)) > tol and steps < 10:
        phis = phis - np.linalg.solve(hess(phis), g)
        g = interior_gradient(phis, hint, params, delta)
        steps += 1
    H = hess(phis)
    return SectionHessian(phis, g, H, float(np.linalg.svd(H, compute_uv=False)[-1]), steps)
