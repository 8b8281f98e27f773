"""Shadowing of collision chains for eps > 0.

A chain of collision orbits is continued to a true trajectory by multiple
shooting between small section circles of radius ``delta`` around the
vertices.  Each section state is charted by its azimuth ``phi`` on the circle
and the direction ``psi`` of its velocity (measured from the outward radial
direction); the speed follows from the energy level.  Every arc between two
consecutive section circles is an event-terminated boundary value problem in
``psi`` for prescribed endpoint azimuths, so the outer Newton iteration only
has to match velocity directions.
"""

from dataclasses import dataclass, field
import math

import numpy as np
from scipy.optimize import brentq, minimize_scalar
from scipy.stats import linregress

from . import _kernels as K
from .dynamics import (CollisionError, IntegrationError, State, SystemParams,
                       _raise_status, rho_min_for)
from .geom import rotate, sphere_distance
from .skeleton import (ChainGraph, CollisionOrbit, _flow, arrival_velocity,
                       unperturbed_flow)

DELTA = 0.1
EPS_MAX = 1e-2
CSTEP = 1e-20


class ShadowError(RuntimeError):
    pass


class NoConvergenceError(ShadowError):
    def __init__(self, msg, residual=None, iterate=None):
        super().__init__(msg)
        self.residual = residual
        self.iterate = iterate


class NumericalCollisionError(ShadowError):
    def __init__(self, msg, vertex=None):
        super().__init__(msg)
        self.vertex = vertex


class EpsTooLargeError(ShadowError):
    pass


class NonPeriodicError(ValueError):
    pass


class MultiplierExtractionError(ShadowError):
    pass


class FitError(ValueError):
    pass


def wrap(a):
    return (a + np.pi) % (2.0 * np.pi) - np.pi


def _cangle(X, Y):
    """atan2(Y, X) that carries a complex-step perturbation."""
    X = complex(X)
    Y = complex(Y)
    ang = math.atan2(Y.real, X.real)
    r2 = X.real ** 2 + Y.real ** 2
    d = (X.real * Y.imag - Y.real * X.imag) / r2
    return ang + 1j * d if d != 0.0 else complex(ang)


# ---------------------------------------------------------------------------
# flows

@dataclass
class FlowSystem:
    """A flow on T S^2 together with the chart conventions used for shooting.

    ``chart_c`` fixes the velocity-like part of the state as
    ``w = s d + chart_c (e_sys x x)``; ``flip`` maps vertices and section
    frames of the restricted problem to this system's coordinates.
    """

    fun: object
    p: np.ndarray
    level: float
    energy: object
    chart_c: float
    e_sys: np.ndarray
    flip: int
    params: SystemParams
    sigma: float = 0.0

    @property
    def eps(self):
        return self.params.eps

    def frame(self, sign):
        a, e = self.params.a, self.params.e
        A = sign * a
        return (self.flip * A, self.flip * e, self.flip * np.cross(A, e))

    def velocity(self, z):
        f = self.fun(np.asarray(z, float), self.p)
        return f[0:3] / f[6]

    def to_restricted(self, z):
        """(x, xdot, t) of the restricted problem for a state of this system."""
        z = np.asarray(z, float)
        out = np.empty(7)
        out[0:3] = self.flip * z[0:3]
        out[3:6] = self.flip * self.velocity(z)
        out[6] = z[6]
        return out


def restricted_energy(z, params):
    x = z[0:3]
    v = z[3:6]
    ex = np.cross(params.e, x)
    ax = np.cross(params.a, x)
    E = 0.5 * (v @ v) - 0.5 * params.rot ** 2 * (ex @ ex)
    if params.eps != 0.0:
        E = E - params.eps * (params.a @ x) / np.sqrt(ax @ ax)
    return E


def restricted_system(params):
    return FlowSystem(
        fun=K.restricted_field, p=params.as_array(), level=params.h,
        energy=lambda z: restricted_energy(z, params), chart_c=0.0,
        e_sys=params.e, flip=1, params=params)


# ---------------------------------------------------------------------------
# section charts

def _chart_point(system, frame, phi, psi, s, delta):
    A, u1, u2 = frame
    cd, sd = np.cos(delta), np.sin(delta)
    rho = np.cos(phi) * u1 + np.sin(phi) * u2
    tang = -np.sin(phi) * u1 + np.cos(phi) * u2
    x = cd * A + sd * rho
    rhat = -sd * A + cd * rho
    d = np.cos(psi) * rhat + np.sin(psi) * tang
    w = s * d
    if system.chart_c != 0.0:
        w = w + system.chart_c * np.cross(system.e_sys, x)
    return np.concatenate([x, w])


def _chart_coords(system, frame, z6):
    A, u1, u2 = frame
    x = z6[0:3]
    v = z6[3:6]
    if system.chart_c != 0.0:
        v = v - system.chart_c * np.cross(system.e_sys, x)
    phi = _cangle(x @ u1, x @ u2)
    radial = (x @ A) * x - A
    # azimuthal direction of the frame (frames of the reduced system are left-handed)
    hand = np.sign(np.cross(A, u1) @ u2)
    psi = _cangle(v @ radial, hand * (v @ np.cross(A, x)))
    return phi, psi


def _speed(system, frame, phi, psi, delta):
    x = _chart_point(system, frame, phi, psi, 0.0, delta)[0:3]
    ex = np.cross(system.params.e, x)
    s = np.sqrt(max(2.0 * system.level + ex @ ex, 1e-6))
    for _ in range(50):
        z = _chart_point(system, frame, phi, psi, s + 1j * CSTEP, delta)
        E = system.energy(z)
        f = E.real - system.level
        ds = f / (E.imag / CSTEP)
        s -= ds
        if not np.isfinite(s) or s <= 0.0:
            raise ShadowError("energy level not reachable on the section")
        if abs(ds) < 1e-15 * max(1.0, s):
            break
    return s


def section_state(system, frame, phi, psi, delta, with_jac=False):
    """Phase-space state for chart values (phi, psi) on the energy level."""
    s = _speed(system, frame, phi, psi, delta)
    z = _chart_point(system, frame, phi, psi, s, delta).real
    if not with_jac:
        return z
    zp = _chart_point(system, frame, phi + 1j * CSTEP, psi, s, delta).imag / CSTEP
    zq = _chart_point(system, frame, phi, psi + 1j * CSTEP, s, delta).imag / CSTEP
    zs = _chart_point(system, frame, phi, psi, s + 1j * CSTEP, delta).imag / CSTEP

    def dE(v):
        return system.energy(z + 1j * CSTEP * v).imag / CSTEP

    es = dE(zs)
    Jz = np.column_stack([zp - zs * dE(zp) / es, zq - zs * dE(zq) / es])
    return z, Jz


def chart_coords(system, frame, z6, with_jac=False):
    phi, psi = _chart_coords(system, frame, np.asarray(z6[:6], float))
    if not with_jac:
        return phi.real, psi.real
    G = np.zeros((2, 6))
    for i in range(6):
        dz = np.zeros(6, complex)
        dz[:6] = z6[:6]
        dz[i] += 1j * CSTEP
        a, b = _chart_coords(system, frame, dz)
        G[0, i] = a.imag / CSTEP
        G[1, i] = b.imag / CSTEP
    return phi.real, psi.real, G


# ---------------------------------------------------------------------------
# chains

@dataclass(frozen=True)
class ChainSpec:
    edges: tuple
    periodic: bool = True

    def __post_init__(self):
        if not self.edges:
            raise ValueError("empty chain")
        for o1, o2 in zip(self.edges[:-1], self.edges[1:]):
            if o1.end_sign != o2.start_sign:
                raise ValueError("consecutive edges do not share a vertex")
        if self.periodic and self.edges[-1].end_sign != self.edges[0].start_sign:
            raise ValueError("periodic chain does not close")

    @classmethod
    def from_word(cls, graph: ChainGraph, word, start_sign=1, periodic=True):
        return cls(tuple(graph.resolve_word(word, start_sign, periodic)), periodic)

    @property
    def word(self):
        return [o.letter for o in self.edges]

    @property
    def vertex_signs(self):
        s = [o.start_sign for o in self.edges]
        if not self.periodic:
            s.append(self.edges[-1].end_sign)
        return s

    @property
    def label(self):
        return " ".join(f"{o.omega}{'+' if o.branch > 0 else '-'}" for o in self.edges)

    def __len__(self):
        return len(self.edges)


@dataclass(frozen=True)
class _Point:
    vertex: int   # vertex index into chain.vertex_signs
    kind: str     # "entry" or "exit"


@dataclass(frozen=True)
class _Arc:
    kind: str     # "pass" or "outer"
    start: int
    end: int
    vertex_from: int
    vertex_to: int
    edge: int


def _layout(chain):
    L = len(chain)
    pts = []
    arcs = []
    if chain.periodic:
        for i in range(L):
            pts += [_Point(i, "entry"), _Point(i, "exit")]
        for j in range(2 * L):
            i = j // 2
            if j % 2 == 0:
                arcs.append(_Arc("pass", j, j + 1, i, i, i))
            else:
                arcs.append(_Arc("outer", j, (j + 1) % (2 * L), i, (i + 1) % L, i))
    else:
        pts.append(_Point(0, "exit"))
        for i in range(1, L):
            pts += [_Point(i, "entry"), _Point(i, "exit")]
        pts.append(_Point(L, "entry"))
        for j in range(2 * L - 1):
            if j % 2 == 0:
                i = j // 2
                arcs.append(_Arc("outer", j, j + 1, i, i + 1, i))
            else:
                i = (j + 1) // 2
                arcs.append(_Arc("pass", j, j + 1, i, i, None))
    return pts, arcs


def _crossing_time(orbit, params, delta, at_end):
    """Time at which the eps = 0 orbit crosses the delta-circle of its start/end."""
    A = orbit.start
    B = orbit.end
    tau = orbit.tau

    def f(t):
        x = _flow(orbit.omega_vec, A, t, params.e)[0]
        return sphere_distance(x, B if at_end else A) - delta

    hi = 0.0
    step = delta / max(np.linalg.norm(orbit.v0), 1e-3) / 4.0
    while True:
        hi += step
        t = tau - hi if at_end else hi
        if f(t) > 0.0:
            break
    lo = hi - step
    if at_end:
        return brentq(lambda u: f(tau - u), lo, hi, xtol=1e-15)
    return brentq(f, lo, hi, xtol=1e-15)


def initial_guess(chain, eps, params, delta=DELTA):
    """eps = 0 section states of the chain (two per vertex visit).

    For eps = 0 these are intersections of the collision orbits with the
    delta-circles about their endpoints; the velocities come from the
    closed-form flow.  Returns a list of ``State`` in section order.
    """
    pts, _ = _layout(chain)
    L = len(chain)
    p0 = params.replace(eps=0.0)
    out = []
    for pt in pts:
        if pt.kind == "exit":
            o = chain.edges[pt.vertex]
            t = _crossing_time(o, p0, delta, at_end=False)
        else:
            o = chain.edges[(pt.vertex - 1) % L]
            t = o.tau - _crossing_time(o, p0, delta, at_end=True)
        out.append(unperturbed_flow(o, t, p0))
    return out


def _guess_chart(chain, params, delta):
    """Chart values (phi, psi) of the eps = 0 section states."""
    sysr = restricted_system(params.replace(eps=0.0))
    pts, _ = _layout(chain)
    signs = chain.vertex_signs
    phis, psis = [], []
    for pt, st in zip(pts, initial_guess(chain, 0.0, params, delta)):
        frame = sysr.frame(signs[pt.vertex])
        phi, psi = chart_coords(sysr, frame, np.concatenate([st.x, st.xdot]))
        phis.append(phi)
        psis.append(psi)
    return np.array(phis), np.array(psis)


def _pass_impact_guess(chain, i, params):
    """Signed impact parameter of a Kepler flyby producing the skeleton turn at vertex i."""
    L = len(chain)
    o_in = chain.edges[(i - 1) % L]
    o_out = chain.edges[i]
    A = o_out.start
    u_in = arrival_velocity(o_in, params.replace(eps=0.0))
    u_out = o_out.v0
    cosang = u_in @ u_out / (np.linalg.norm(u_in) * np.linalg.norm(u_out))
    turn = float(np.arccos(np.clip(cosang, -1.0, 1.0)))
    turn_sign = np.sign(A @ np.cross(u_in, u_out))
    v2 = u_out @ u_out
    b = params.eps / (v2 * np.tan(0.5 * max(turn, 1e-3)))
    attracting = (A @ params.a) > 0
    side = turn_sign if attracting else -turn_sign
    return side * b


def _psi_for_impact(system, frame, phi, b, delta):
    """Inward direction whose impact parameter about the vertex is b."""
    A = system.flip * frame[0]
    x = system.flip * _chart_point(system, frame, phi, np.pi, 1.0, delta)[0:3].real
    A_, u1, u2 = frame
    tang = system.flip * (-np.sin(phi) * u1 + np.cos(phi) * u2)
    lever = tang @ np.cross(A, x)
    return np.pi - np.arcsin(np.clip(b / lever, -1.0, 1.0))


# ---------------------------------------------------------------------------
# arc propagation

@dataclass
class ArcResult:
    z0: np.ndarray
    z1: np.ndarray
    phi1: float
    psi1: float
    J: np.ndarray
    dT: np.ndarray
    T: float
    min_rho: float


@dataclass
class SolveOptions:
    delta: float = DELTA
    tol: float = 1e-12
    newton_tol: float = 1e-10
    max_iter: int = 40
    inner_max_iter: int = 60
    max_halvings: int = 20
    eps_max: float = EPS_MAX
    max_steps: int = 200000
    monodromy: bool = True


class _Shooter:
    def __init__(self, system, chain, opts):
        self.system = system
        self.chain = chain
        self.opts = opts
        self.pts, self.arcs = _layout(chain)
        self.signs = chain.vertex_signs
        self.frames = [system.frame(s) for s in self.signs]
        self.rho_min = rho_min_for(system.eps)
        self.cosd = np.cos(opts.delta)

    def _arc_setup(self, arc):
        o = self.chain.edges[arc.edge] if arc.edge is not None else None
        if arc.kind == "pass":
            return K.MODE_EXIT_BALL, 0.0, 10.0
        return K.MODE_ENTER_BALL, 0.5 * o.tau, 1.5 * o.tau + 2.0

    def propagate(self, arc, phi, psi, record=False, with_var=True):
        sysm = self.system
        f0 = self.frames[arc.vertex_from]
        f1 = self.frames[arc.vertex_to]
        z6, Jz = section_state(sysm, f0, phi, psi, self.opts.delta, with_jac=True)
        z0 = np.concatenate([z6, [0.0]])
        V0 = np.zeros((7, 2))
        V0[:6] = Jz
        mode, t_arm, s_max = self._arc_setup(arc)
        out = K.propagate(sysm.fun, sysm.p, z0, V0, with_var, mode, f1[0], self.cosd,
                          t_arm, 0.0, s_max, self.opts.tol, self.opts.tol, 1e-3,
                          self.rho_min, self.opts.max_steps, record)
        status, z, V, s, n, min_rho, s_rec, z_rec, nrec = out
        _raise_status(status, z, min_rho, where=f"{arc.kind} arc {arc.start}->{arc.end}")
        phi1, psi1, G = chart_coords(sysm, f1, z, with_jac=True)
        res = ArcResult(z0, z, phi1, psi1, G @ V[:6], V[6].copy(), float(z[6]), float(min_rho))
        if record:
            return res, s_rec, z_rec
        return res

    # inner boundary value problem in psi -------------------------------------------------
    def _residual(self, arc, phi0, psi, phi_target):
        r = self.propagate(arc, phi0, psi)
        return wrap(r.phi1 - phi_target), r

    def solve_arc(self, arc, phi0, phi_target, psi0, bracket=None):
        """Find the start direction so the arc lands at ``phi_target``."""
        try:
            f, r = self._residual(arc, phi0, psi0, phi_target)
            psi = psi0
        except IntegrationError:
            r = None
        if r is None or (bracket is not None and abs(f) > 0.3):
            if bracket is None:
                psi, f, r = self._window_search(arc, phi0, phi_target, psi0)
            else:
                psi, f, r = self._bracket_search(arc, phi0, phi_target, bracket)
        for _ in range(self.opts.inner_max_iter):
            if abs(f) < 5e-13:
                return psi, r
            step = -f / r.J[0, 1]
            lam = 1.0
            for _ in range(self.opts.max_halvings):
                cand = psi + lam * step
                try:
                    fn, rn = self._residual(arc, phi0, cand, phi_target)
                    if abs(fn) < abs(f):
                        break
                except IntegrationError:
                    pass
                lam *= 0.5
            else:
                break
            psi, f, r = cand, fn, rn
        if abs(f) < 1e-10:
            return psi, r
        raise ShadowError(f"inner solve failed on arc {arc.start}->{arc.end} (|f|={abs(f):.2e}, b={r.J[0, 1]:.2e}, psi={psi!r})")

    def _scan(self, arc, phi0, phi_target, grid):
        prev = None
        for psi in grid:
            try:
                f, r = self._residual(arc, phi0, psi, phi_target)
            except IntegrationError:
                prev = None
                continue
            if prev is not None and np.sign(f) != np.sign(prev[1]) and abs(f - prev[1]) < np.pi:
                try:
                    root = brentq(lambda q: self._residual(arc, phi0, q, phi_target)[0],
                                  prev[0], psi, xtol=1e-15, rtol=1e-15, maxiter=200)
                    fr, rr = self._residual(arc, phi0, root, phi_target)
                    return root, fr, rr
                except (ValueError, IntegrationError):
                    pass
            prev = (psi, f, r)
        return None

    def _window_search(self, arc, phi0, phi_target, psi0):
        """Expanding scans around ``psi0`` when the arc misses its target ball."""
        for width in (0.05, 0.15, 0.4):
            out = self._scan(arc, phi0, phi_target, psi0 + np.linspace(-width, width, 31))
            if out is not None:
                return out
        raise ShadowError(f"arc {arc.start}->{arc.end} failed at its start direction")

    def _collision_direction(self, arc, phi0, center, width=0.4, n=41):
        """Start direction of closest approach to the vertex (coarse scan, then refinement)."""
        def closest(psi):
            try:
                return self.propagate(arc, phi0, psi, with_var=False).min_rho
            except CollisionError:
                return 0.0
            except IntegrationError:
                return np.inf

        grid = np.linspace(center - width, center + width, n)
        vals = [closest(q) for q in grid]
        k = int(np.argmin(vals))
        lo, hi = grid[max(k - 1, 0)], grid[min(k + 1, n - 1)]
        r = minimize_scalar(closest, bounds=(lo, hi), method="bounded",
                            options={"xatol": 1e-10})
        return float(r.x)

    def _bracket_search(self, arc, phi0, phi_target, bracket):
        """Scan the impact window of a vertex pass for a landing direction.

        ``bracket`` holds the expected collision direction and the signed
        offset of the flyby estimate; if the window around the expected
        direction fails, the collision direction is relocated first.
        """
        base, off = bracket
        fine = base + off * np.geomspace(0.2, 5.0, 25)
        out = self._scan(arc, phi0, phi_target, fine)
        if out is not None:
            return out
        psi_c = self._collision_direction(arc, phi0, base)
        for lo, hi in ((0.05, 20.0), (-20.0, -0.05)):
            grid = psi_c + np.sign(lo) * off * np.geomspace(abs(lo), abs(hi), 60)
            out = self._scan(arc, phi0, phi_target, grid)
            if out is not None:
                return out
        raise ShadowError(f"no landing direction found on arc {arc.start}->{arc.end}")


# ---------------------------------------------------------------------------
# solver

@dataclass
class ShadowOrbit:
    eps: float
    h: float
    chain: ChainSpec
    phis: np.ndarray
    psis: np.ndarray
    section_states: list
    crossing_times: np.ndarray
    min_distances: np.ndarray
    residual: float
    measured_c: float
    measured_C: float
    period: float
    arc_times: np.ndarray
    arc_jacobians: list
    energy_drift: float
    iterations: int
    sigma: float = 0.0
    monodromy: np.ndarray = None
    monodromy_full: np.ndarray = None
    samples: np.ndarray = field(default=None, repr=False)
    arc_samples: list = field(default=None, repr=False)
    system: FlowSystem = field(default=None, repr=False)
    delta: float = DELTA
    crossing_vertices: list = None
    # largest |z[3:6]| of the system's own states (|y| for the reduced flow)
    max_momentum: float = float("nan")

    def section_array(self):
        return np.array([np.concatenate([s.x, s.xdot]) for s in self.section_states])


def _outer_residual(arcs, psis_start, psis_end, free_pts):
    r = []
    for j in free_pts:
        j_in = next(k for k, a in enumerate(arcs) if a.end == j)
        r.append(wrap(psis_end[j_in] - psis_start[j]))
    return np.array(r)


def _arc_sensitivities(J):
    a, b = J[0]
    c, d = J[1]
    return {"s_s": -a / b, "s_e": 1.0 / b, "e_s": c - d * a / b, "e_e": d / b}


def solve(chain, eps, params, opts=None, system=None, initial_phis=None, initial_psis=None):
    """Continue ``chain`` to a trajectory of the eps-problem at Jacobi level params.h."""
    opts = opts or SolveOptions()
    if not 0.0 < eps <= opts.eps_max:
        raise EpsTooLargeError(f"eps = {eps} outside (0, {opts.eps_max}]")
    params = params.replace(eps=eps)
    system = system or restricted_system(params)
    sh = _Shooter(system, chain, opts)
    pts, arcs = sh.pts, sh.arcs
    npts = len(pts)
    gphi, gpsi = _guess_chart(chain, params, opts.delta)
    phis = np.array(gphi if initial_phis is None else initial_phis, float)
    psi_start = np.array(gpsi if initial_psis is None else initial_psis, float)
    if chain.periodic:
        free = list(range(npts))
    else:
        free = list(range(1, npts - 1))
    brackets = {}
    for j, arc in enumerate(arcs):
        if arc.kind == "pass":
            i = arc.vertex_from
            b = _pass_impact_guess(chain, i, params) if chain.periodic or i > 0 else None
            if b is None:
                continue
            frame = sh.frames[i]
            # offsets are taken from the eps = 0 direction, which aims at the vertex
            base = gpsi[arc.start] - np.pi

            def aim(bb):
                return base + _psi_for_impact(system, frame, gphi[arc.start], bb, opts.delta)

            brackets[j] = (base + np.pi, aim(b) - base - np.pi)
            if initial_psis is None:
                psi_start[arc.start] = aim(b)

    def evaluate(phis, psi_start):
        ps = psi_start.copy()
        res = []
        for j, arc in enumerate(arcs):
            psi, r = sh.solve_arc(arc, phis[arc.start], phis[arc.end], ps[arc.start],
                                  brackets.get(j))
            ps[arc.start] = psi
            res.append(r)
        pe = np.array([r.psi1 for r in res])
        return ps, res, _outer_residual(arcs, ps, pe, free)

    try:
        psi_start, results, F = evaluate(phis, psi_start)
    except (ShadowError, IntegrationError) as exc:
        raise _classify(exc, phis, None)
    it = 0
    for it in range(1, opts.max_iter + 1):
        nrm = np.max(np.abs(F)) if len(F) else 0.0
        if nrm < opts.newton_tol:
            break
        Jm = np.zeros((len(free), npts))
        sens = [_arc_sensitivities(r.J) for r in results]
        for row, j in enumerate(free):
            k_in = next(k for k, a in enumerate(arcs) if a.end == j)
            k_out = next(k for k, a in enumerate(arcs) if a.start == j)
            ai, ao = arcs[k_in], arcs[k_out]
            Jm[row, ai.start] += sens[k_in]["e_s"]
            Jm[row, ai.end] += sens[k_in]["e_e"]
            Jm[row, ao.start] -= sens[k_out]["s_s"]
            Jm[row, ao.end] -= sens[k_out]["s_e"]
        Jf = Jm[:, free]
        dphi = np.zeros(npts)
        dphi[free] = np.linalg.solve(Jf, -F)
        lam = 1.0
        accepted = False
        for _ in range(opts.max_halvings):
            trial = phis + lam * dphi
            try:
                ps_n, res_n, F_n = evaluate(trial, psi_start)
                if np.max(np.abs(F_n)) < (1.0 - 1e-4 * lam) * nrm or nrm < 1e-8:
                    accepted = True
                    break
            except (ShadowError, IntegrationError):
                pass
            lam *= 0.5
        if not accepted:
            raise NoConvergenceError(f"line search failed (|F| = {nrm:.3e})", nrm, phis)
        phis, psi_start, results, F = trial, ps_n, res_n, F_n
    else:
        nrm = np.max(np.abs(F))
        if nrm >= opts.newton_tol:
            raise NoConvergenceError(f"no convergence after {opts.max_iter} iterations "
                                     f"(|F| = {nrm:.3e})", nrm, phis)
    return _assemble(sh, chain, params, phis, psi_start, results, it, opts)


def _classify(exc, phis, residual):
    if isinstance(exc, CollisionError):
        return NumericalCollisionError(str(exc))
    return NoConvergenceError(str(exc), residual, phis)


def _periapsis(system, A, s_rec, z_rec):
    """Refined time and state of the closest approach to A along recorded steps."""
    d = np.array([np.arccos(np.clip(system.flip * z[:3] @ A, -1, 1)) for z in z_rec])
    k = int(np.argmin(d))
    Asys = system.flip * A

    def radial(j, hs):
        zt = K.rk_step(system.fun, system.p, z_rec[j], hs) if hs > 0 else z_rec[j]
        return system.fun(zt, system.p)[0:3] @ Asys, zt

    best = (d[k], z_rec[k])
    for j in (k - 1, k):
        if j < 0 or j + 1 >= len(z_rec):
            continue
        hstep = s_rec[j + 1] - s_rec[j]
        g0 = radial(j, 0.0)[0]
        g1 = radial(j, hstep)[0]
        if g0 >= 0.0 >= g1:
            hs = brentq(lambda q: radial(j, q)[0], 0.0, hstep, xtol=1e-16, rtol=1e-15)
            zt = radial(j, hs)[1]
            dd = sphere_distance(system.flip * zt[:3], A)
            if dd <= best[0]:
                best = (dd, zt)
    return best


def _densify(system, s_rec, z_rec, per_step=4):
    out = [z_rec[0]]
    for j in range(len(z_rec) - 1):
        hstep = s_rec[j + 1] - s_rec[j]
        for q in range(1, per_step):
            out.append(K.rk_step(system.fun, system.p, z_rec[j], hstep * q / per_step))
        out.append(z_rec[j + 1])
    return np.array(out)


def _assemble(sh, chain, params, phis, psi_start, results, iters, opts):
    system = sh.system
    arcs = sh.arcs
    L = len(chain)
    # residual as a state-space matching defect
    defect = 0.0
    for k, arc in enumerate(arcs):
        nxt = [m for m, a in enumerate(arcs) if a.start == arc.end]
        if not nxt:
            continue
        z_next = results[nxt[0]].z0
        defect = max(defect, float(np.max(np.abs(results[k].z1[:6] - z_next[:6]))))
    # recorded trajectory, one arc at a time, in restricted coordinates
    t0 = 0.0
    samples = []
    arc_samples = []
    drift = 0.0
    peak = 0.0
    peri = {}
    for k, arc in enumerate(arcs):
        r, s_rec, z_rec = sh.propagate(arc, phis[arc.start], psi_start[arc.start], record=True)
        E = np.array([system.energy(z).real for z in z_rec])
        drift = max(drift, float(np.max(np.abs(E - system.level))))
        peak = max(peak, float(np.max(np.linalg.norm(z_rec[:, 3:6], axis=1))))
        dense = _densify(system, s_rec, z_rec)
        rz = np.array([system.to_restricted(z) for z in dense])
        rz[:, 6] += t0
        arc_samples.append(rz)
        samples.append(rz if k == 0 else rz[1:])
        if arc.kind == "pass":
            A = chain.vertex_signs[arc.vertex_from] * params.a
            dist, zp = _periapsis(system, A, s_rec, z_rec)
            peri[arc.vertex_from] = (t0 + zp[6], dist)
        t0 += r.T
    period = t0
    samples = np.vstack(samples)
    verts = sorted(peri)
    crossing = np.array([peri[i][0] for i in verts])
    dmin = np.array([peri[i][1] for i in verts])
    states = []
    for k, arc in enumerate(arcs):
        rz = system.to_restricted(results[k].z0)
        states.append(State(rz[:3], rz[3:6]))
    if not chain.periodic:
        rz = system.to_restricted(results[-1].z1)
        states.append(State(rz[:3], rz[3:6]))
    dev = _max_skeleton_deviation(chain, params, arcs, arc_samples)
    shadow = ShadowOrbit(
        eps=params.eps, h=params.h, chain=chain, phis=np.array(phis),
        psis=np.array(psi_start), section_states=states, crossing_times=crossing,
        min_distances=dmin, residual=defect,
        measured_c=float(np.min(dmin) / params.eps) if len(dmin) else float("nan"),
        measured_C=float(dev / params.eps), period=period,
        arc_times=np.array([r.T for r in results]),
        arc_jacobians=[r.J for r in results], energy_drift=drift, iterations=iters,
        sigma=system.sigma, samples=samples, arc_samples=arc_samples, system=system,
        delta=opts.delta, crossing_vertices=verts, max_momentum=peak)
    if chain.periodic:
        M = np.eye(2)
        for r in results:
            M = r.J @ M
        shadow.monodromy = M
    return shadow


def _skeleton_curve(orbit, params, n_per_pi=1500):
    ts = np.linspace(0.0, orbit.tau, int(n_per_pi * orbit.omega.n) + 1)
    return np.array([_flow(orbit.omega_vec, orbit.start, t, params.e)[0] for t in ts])


def curve_distance(points, curve):
    """Chordal distance from each point to a densely sampled polyline."""
    P0 = curve[:-1]
    D = curve[1:] - P0
    dd = np.einsum("ij,ij->i", D, D)
    out = np.empty(len(points))
    for i, x in enumerate(points):
        w = x - P0
        u = np.clip(np.einsum("ij,ij->i", w, D) / dd, 0.0, 1.0)
        r = w - u[:, None] * D
        out[i] = np.sqrt(np.min(np.einsum("ij,ij->i", r, r)))
    return out


def _max_skeleton_deviation(chain, params, arcs, arc_samples):
    L = len(chain)
    p0 = params.replace(eps=0.0)
    curves = [_skeleton_curve(o, p0) for o in chain.edges]
    dev = 0.0
    for arc, rz in zip(arcs, arc_samples):
        if arc.kind == "outer":
            d = curve_distance(rz[:, :3], curves[arc.edge])
        else:
            i = arc.vertex_from
            cands = [curves[i % L]] if chain.periodic or i < L else []
            if chain.periodic or i > 0:
                cands.append(curves[(i - 1) % L])
            d = np.min([curve_distance(rz[:, :3], c) for c in cands], axis=0)
        dev = max(dev, float(np.max(d)))
    return dev


# ---------------------------------------------------------------------------
# diagnostics

def section_distance(s1, s2, shift=0):
    """Max over section states of max(position distance, velocity-direction angle)."""
    a = s1.section_states
    b = s2.section_states
    if len(a) != len(b):
        return np.inf
    out = 0.0
    n = len(a)
    for i in range(n):
        p, q = a[i], b[(i + shift) % n]
        dx = sphere_distance(p.x, q.x)
        dv = sphere_distance(p.xdot / np.linalg.norm(p.xdot), q.xdot / np.linalg.norm(q.xdot))
        out = max(out, dx, dv)
    return out


def orbit_separation(s1, s2):
    """Section distance minimized over cyclic relabelings of periodic orbits."""
    n = len(s1.section_states)
    shifts = range(0, n, 2) if s1.chain.periodic else [0]
    return min(section_distance(s1, s2, k) for k in shifts)


def guess_distance(shadow, params):
    g = initial_guess(shadow.chain, 0.0, params, shadow.delta)
    out = 0.0
    for p, q in zip(shadow.section_states, g):
        dx = sphere_distance(p.x, q.x)
        dv = sphere_distance(p.xdot / np.linalg.norm(p.xdot), q.xdot / np.linalg.norm(q.xdot))
        out = max(out, dx, dv)
    return out


@dataclass
class BoundsReport:
    eps: float
    vertex_ratio: np.ndarray
    edge_plane_deviation: np.ndarray
    edge_skeleton_deviation: np.ndarray
    edge_inclination_deviation: np.ndarray
    winding: np.ndarray
    revolutions: np.ndarray
    expected_revolutions: np.ndarray
    time_gaps: np.ndarray
    time_defect_pi_n: np.ndarray
    time_defect_n: np.ndarray
    min_distance_ratio: float
    flags: list

    @property
    def ok(self):
        return not self.flags

    def to_dict(self):
        return {k: (v.tolist() if isinstance(v, np.ndarray) else v)
                for k, v in self.__dict__.items()}


def verify_bounds(shadow, chain, params):
    """Measure the distance, inclination, revolution and timing predictions."""
    eps = shadow.eps
    L = len(chain)
    S = shadow.samples
    T = shadow.period
    if chain.periodic:
        S = np.vstack([S, S[1:] + np.r_[np.zeros(6), T][None, :]])
    tc = dict(zip(shadow.crossing_vertices, shadow.crossing_times))
    if chain.periodic:
        edge_ids = list(range(L))
    else:
        edge_ids = [i for i in range(L) if i in tc and i + 1 in tc]
    plane_dev, skel_dev, incl_dev, wind, revs, exp_revs, gaps = [], [], [], [], [], [], []
    p0 = params.replace(eps=0.0)
    for i in edge_ids:
        o = chain.edges[i]
        t_a = tc[i]
        if chain.periodic and i == L - 1:
            t_b = tc[0] + T
        else:
            t_b = tc[i + 1]
        m = (S[:, 6] >= t_a) & (S[:, 6] <= t_b)
        X = S[m, :3]
        t = S[m, 6] - t_a
        w_hat = o.omega_vec / np.linalg.norm(o.omega_vec)
        Y = np.array([rotate(tt * params.e, x) for tt, x in zip(t, X)])
        plane_dev.append(float(np.max(np.abs(np.arcsin(np.clip(Y @ w_hat, -1, 1))))))
        skel_dev.append(float(np.max(curve_distance(X, _skeleton_curve(o, p0)))))
        # the node of the plane drifts with the pass times; its inclination does not
        far = np.minimum(np.arccos(np.clip(X @ params.a, -1, 1)),
                         np.arccos(np.clip(-X @ params.a, -1, 1))) > shadow.delta
        n_fit = np.linalg.svd(Y[far])[2][-1]
        n_fit *= np.sign(n_fit @ w_hat)
        incl_dev.append(float(abs(np.arccos(np.clip(n_fit @ params.e, -1, 1)) - o.theta)))
        A = o.start
        B = np.cross(w_hat, A)
        ang = np.unwrap(np.arctan2(Y @ B, Y @ A))
        w = abs(ang[-1] - ang[0]) / (2.0 * np.pi)
        wind.append(float(w))
        revs.append(int(np.floor(w + 1e-9)))
        exp_revs.append(o.omega.k // 2)
        gaps.append(t_b - t_a)
    gaps = np.array(gaps)
    ns = np.array([chain.edges[i].omega.n for i in edge_ids], float)
    vr = shadow.min_distances / eps
    flags = []
    if np.any(shadow.min_distances <= rho_min_for(eps)):
        flags.append("numerical collision")
    for i, (r, e) in enumerate(zip(revs, exp_revs)):
        if abs(r - e) > 1:
            flags.append(f"edge {i}: revolution count {r} vs {e}")
    return BoundsReport(
        eps=eps, vertex_ratio=vr, edge_plane_deviation=np.array(plane_dev) / eps,
        edge_skeleton_deviation=np.array(skel_dev) / eps,
        edge_inclination_deviation=np.array(incl_dev) / eps, winding=np.array(wind),
        revolutions=np.array(revs), expected_revolutions=np.array(exp_revs),
        time_gaps=gaps, time_defect_pi_n=(gaps - np.pi * ns) / eps,
        time_defect_n=(gaps - ns) / eps, min_distance_ratio=float(np.min(vr)),
        flags=flags)


@dataclass
class ScalingReport:
    eps: np.ndarray
    min_distance: np.ndarray
    slope: float
    intercept: float
    slope_stderr: float
    intercept_stderr: float
    measured_c: float
    measured_C: float
    shadows: list = field(repr=False, default=None)

    def to_dict(self):
        d = {k: (v.tolist() if isinstance(v, np.ndarray) else v)
             for k, v in self.__dict__.items() if k != "shadows"}
        return d


def loglog_fit(x, y):
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    if len(x) < 2 or len(np.unique(x)) < 2:
        raise FitError("at least two distinct points are needed for a fit")
    return linregress(np.log(x), np.log(y))


def epsilon_scaling(chain, eps_list, params, opts=None, shadows=None):
    """Regress log(min distance to the singular set) on log(eps)."""
    eps_list = sorted(eps_list, reverse=True)
    if len(eps_list) < 2:
        raise FitError("at least two eps values are required")
    if shadows is None:
        shadows = [solve(chain, e, params, opts) for e in eps_list]
    dmin = np.array([np.min(s.min_distances) for s in shadows])
    fit = loglog_fit(eps_list, dmin)
    return ScalingReport(
        eps=np.array(eps_list), min_distance=dmin, slope=float(fit.slope),
        intercept=float(fit.intercept), slope_stderr=float(fit.stderr),
        intercept_stderr=float(fit.intercept_stderr),
        measured_c=float(min(s.measured_c for s in shadows)),
        measured_C=float(max(s.measured_C for s in shadows)), shadows=shadows)


# ---------------------------------------------------------------------------
# monodromy

@dataclass
class MonodromyReport:
    multipliers: np.ndarray
    mu: float
    lyapunov: float
    period: float
    det_reduced: float
    det_direct: float
    hyperbolic: bool
    full_multipliers: np.ndarray = None

    def to_dict(self):
        def enc(v):
            if isinstance(v, np.ndarray):
                if np.iscomplexobj(v):
                    return [[float(z.real), float(z.imag)] for z in v]
                return v.tolist()
            return v
        return {k: enc(v) for k, v in self.__dict__.items()}


def _tangent_basis(z):
    """4 columns spanning T(T S^2) at z = (x, w) in R^6."""
    from .geom import tangent_frame
    x, w = z[:3], z[3:6]
    u1, u2 = tangent_frame(x)
    B = np.zeros((6, 4))
    B[:3, 0] = u1
    B[3:6, 0] = -(u1 @ w) * x
    B[:3, 1] = u2
    B[3:6, 1] = -(u2 @ w) * x
    B[3:6, 2] = u1
    B[3:6, 3] = u2
    return B


def full_monodromy(shadow, opts=None):
    """4x4 linearized period map on T S^2 (contains the trivial pair)."""
    opts = opts or SolveOptions()
    system = shadow.system
    sh = _Shooter(system, shadow.chain, opts)
    arc = sh.arcs[0]
    z6 = section_state(system, sh.frames[arc.vertex_from], shadow.phis[arc.start],
                       shadow.psis[arc.start], opts.delta)
    z0 = np.concatenate([z6, [0.0]])
    B = _tangent_basis(z6)
    V0 = np.zeros((7, 4))
    V0[:6] = B
    out = K.propagate(system.fun, system.p, z0, V0, True, K.MODE_TIME, np.zeros(3), 0.0,
                      0.0, shadow.period, np.inf, opts.tol, opts.tol, 1e-3,
                      rho_min_for(system.eps), opts.max_steps * 4, False)
    status, z, V = out[0], out[1], out[2]
    _raise_status(status, z, out[5], where="monodromy")
    Bend = _tangent_basis(z[:6])
    return np.linalg.lstsq(Bend, V[:6], rcond=None)[0]


def monodromy_and_lyapunov(shadow, params=None, with_full=False):
    """Nontrivial multiplier pair of a periodic shadow and its Lyapunov exponent."""
    if not shadow.chain.periodic or shadow.monodromy is None:
        raise NonPeriodicError("monodromy requires a periodic shadow orbit")
    M = shadow.monodromy
    ev = np.linalg.eigvals(M)
    top = ev[np.argmax(np.abs(ev))]
    # the small multiplier is lost to cancellation once |mu| is large; the
    # pair is reciprocal on the energy level
    mult = np.array([top, 1.0 / top])
    mu = float(np.abs(top))
    # det of a product of large matrices cancels catastrophically, the
    # product of per-arc determinants does not
    det_arcs = float(np.prod([np.linalg.det(J) for J in shadow.arc_jacobians]))
    lam = float(np.log(mu) / shadow.period)
    full = None
    if with_full:
        M4 = full_monodromy(shadow)
        ev = np.linalg.eigvals(M4)
        trivial = np.argsort(np.abs(ev - 1.0))[:2]
        if np.max(np.abs(ev[trivial] - 1.0)) > 1e-4 * max(1.0, mu):
            raise MultiplierExtractionError("trivial multiplier pair not separated")
        full = ev[np.argsort(-np.abs(ev))]
    return MonodromyReport(
        multipliers=mult, mu=mu, lyapunov=lam, period=shadow.period,
        det_reduced=det_arcs, det_direct=float(np.linalg.det(M)),
        hyperbolic=bool(mu > 1.0 + 1e-6), full_multipliers=full)


def lyapunov_fit(eps_list, lambdas):
    """Regression of the Lyapunov exponent on |ln eps|."""
    x = np.abs(np.log(np.asarray(eps_list, float)))
    if len(x) < 2:
        raise FitError("at least two points are needed")
    return linregress(x, np.asarray(lambdas, float))
