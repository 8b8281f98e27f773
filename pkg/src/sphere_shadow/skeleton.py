"""Collision orbits of the unperturbed (eps = 0) problem and their graph.

At eps = 0 the rescaled rotating-frame motion is explicit: a particle leaving
``A`` with relative velocity ``v`` moves as ``x(t) = R(-t e) R(t w) A`` with
inertial angular velocity ``w = A x v + e``.  For ``|w| = k/n`` the particle
is back on the singular pair after time ``pi n`` at ``(-1)^(k+n) A``.
"""

from dataclasses import dataclass, field
from fractions import Fraction
from math import gcd
import warnings

import numpy as np
from scipy.optimize import minimize_scalar

from .dynamics import State, SystemParams
from .geom import rotate, sphere_distance

THETA_GUARD = 1e-9
DIRECTION_TOL = 1e-3
NONDEGENERACY_TOL = 1e-6
FD_STEP = 1e-6


class InadmissibleFrequencyError(ValueError):
    pass


class ReducibleFractionError(ValueError):
    pass


class DegenerateOrbitError(ValueError):
    pass


class EndpointMismatchError(ValueError):
    pass


class EmptyGraphWarning(UserWarning):
    pass


@dataclass(frozen=True, order=True)
class RationalOmega:
    k: int
    n: int

    def __post_init__(self):
        if self.k <= 0 or self.n <= 0:
            raise ValueError("k and n must be positive")
        if gcd(self.k, self.n) != 1:
            raise ReducibleFractionError(f"{self.k}/{self.n} is not irreducible")

    @property
    def value(self):
        return self.k / self.n

    def __str__(self):
        return f"{self.k}/{self.n}"


@dataclass(frozen=True)
class CollisionOrbit:
    omega: RationalOmega
    branch: int
    start_sign: int
    h: float
    theta: float
    alpha: float
    omega_vec: np.ndarray = field(repr=False)
    start: np.ndarray = field(repr=False)
    v0: np.ndarray = field(repr=False)
    tau: float
    end_sign: int
    margin: float = float("nan")

    @property
    def key(self):
        return (self.omega.k, self.omega.n, self.branch, self.start_sign)

    @property
    def letter(self):
        return (self.omega.k, self.omega.n, self.branch)

    @property
    def end(self):
        return self.end_sign * self.start_sign * self.start

    def with_margin(self, margin):
        d = dict(self.__dict__)
        d["margin"] = margin
        return CollisionOrbit(**d)

    def to_record(self):
        return {
            "k": self.omega.k,
            "n": self.omega.n,
            "branch": self.branch,
            "start_sign": self.start_sign,
            "theta": self.theta,
            "alpha": self.alpha,
            "tau": self.tau,
            "omega_vec": [float(c) for c in self.omega_vec],
            "v0": [float(c) for c in self.v0],
            "margin": self.margin,
        }


def admissible_interval(h):
    """Open interval of frequencies whose collision orbits reach Jacobi constant h."""
    if h <= -0.5:
        raise ValueError("admissible frequencies require h > -1/2")
    r = np.sqrt(2.0 * h + 1.0)
    if h < 0:
        return (1.0 - r, 1.0 + r)
    return (-1.0 + r, 1.0 + r)


def cos_theta(omega, h):
    return omega / 2.0 - h / omega


def cos_alpha(omega, h):
    return (omega * omega / 2.0 - h - 1.0) / np.sqrt(2.0 * h + 1.0)


def make_collision_orbit(h, k, n, branch=1, start_sign=1, params=None):
    params = params or SystemParams(eps=0.0, h=h)
    if branch not in (1, -1) or start_sign not in (1, -1):
        raise ValueError("branch and start_sign must be +1 or -1")
    om = RationalOmega(k, n)
    w = om.value
    lo, hi = admissible_interval(h)
    ct = cos_theta(w, h)
    if not lo < w < hi or abs(ct) >= 1.0 - THETA_GUARD:
        raise InadmissibleFrequencyError(f"omega = {om} not admissible at h = {h}")
    theta = float(np.arccos(ct))
    A = start_sign * params.a
    jp = np.cross(params.e, A)
    omega_vec = w * (ct * params.e + branch * np.sin(theta) * jp)
    v0 = np.cross(omega_vec - params.e, A)
    alpha = float(np.arccos(np.clip(cos_alpha(w, h), -1.0, 1.0)))
    return CollisionOrbit(
        omega=om, branch=branch, start_sign=start_sign, h=h, theta=theta,
        alpha=alpha, omega_vec=omega_vec, start=A, v0=v0, tau=np.pi * n,
        end_sign=(-1) ** (k + n) * start_sign,
    )


def _flow(omega_vec, A, t, e):
    q = rotate(t * omega_vec, A)
    x = rotate(-t * e, q)
    xdot = -np.cross(e, x) + np.cross(rotate(-t * e, omega_vec), x)
    return x, xdot


def unperturbed_flow(orbit, t, params):
    """Closed-form eps = 0 state on the orbit at time ``t``."""
    x, xdot = _flow(orbit.omega_vec, orbit.start, t, params.e)
    return State(x, xdot - (xdot @ x) * x)


def flow_positions(orbit, ts, params):
    return np.array([_flow(orbit.omega_vec, orbit.start, t, params.e)[0] for t in ts])


def distance_to_delta(x, params):
    d = sphere_distance(x, params.a)
    return min(d, np.pi - d)


@dataclass
class CollisionCheck:
    ok: bool
    min_interior: float
    local_minima: list


def early_collision_free(orbit, params, samples_per_pi=400):
    """Check the orbit avoids the singular pair strictly between its endpoints.

    ``min_interior`` is the minimum over the open interval of the distance to
    the singular pair divided by the distance a free departure (or arrival)
    along the initial (final) speed would have covered; it is bounded away
    from zero exactly when there is no interior collision.  Interior local
    minima of the raw distance are refined and returned as (t, distance).
    """
    tau = orbit.tau
    speed = np.linalg.norm(orbit.v0)
    N = int(samples_per_pi * orbit.omega.n) + 1
    ts = np.linspace(0.0, tau, N)[1:-1]
    d = np.array([distance_to_delta(x, params) for x in flow_positions(orbit, ts, params)])

    def dist(t):
        return distance_to_delta(_flow(orbit.omega_vec, orbit.start, t, params.e)[0], params)

    def ratio(t):
        return dist(t) / (speed * min(t, tau - t))

    minima = []
    for i in range(1, len(ts) - 1):
        if d[i] <= d[i - 1] and d[i] <= d[i + 1]:
            r = minimize_scalar(dist, bounds=(ts[i - 1], ts[i + 1]), method="bounded",
                                options={"xatol": 1e-12})
            minima.append((float(r.x), float(r.fun)))
    rat = d / (speed * np.minimum(ts, tau - ts))
    i = int(np.argmin(rat))
    lo, hi = ts[max(i - 1, 0)], ts[min(i + 1, len(ts) - 1)]
    r = minimize_scalar(ratio, bounds=(lo, hi), method="bounded", options={"xatol": 1e-12})
    m = float(min(r.fun, rat[i]))
    ok = m > 1e-9 and all(dm > 1e-9 for _, dm in minima)
    return CollisionCheck(ok, m, minima)


def _return_residual(omega_vec, tau, orbit, params, frame):
    """Constraint map of the nondegeneracy test: (tangent endpoint error, <a,w>, energy)."""
    A = orbit.start
    x, _ = _flow(omega_vec, A, tau, params.e)
    dx = x - orbit.end
    f1, f2 = frame
    return np.array([dx @ f1, dx @ f2, omega_vec @ A,
                     0.5 * omega_vec @ omega_vec - omega_vec @ params.e - orbit.h])


def nondegeneracy_matrix(orbit, params, step=FD_STEP):
    """4x4 central-difference Jacobian of the return map in (w, tau)."""
    B = orbit.end
    f1 = params.e.copy()
    f2 = np.cross(B, f1)
    frame = (f1, f2)
    base = np.concatenate([orbit.omega_vec, [orbit.tau]])
    J = np.zeros((4, 4))
    for c in range(4):
        dp = np.zeros(4)
        dp[c] = step
        up = base + dp
        dn = base - dp
        J[:, c] = (_return_residual(up[:3], up[3], orbit, params, frame)
                   - _return_residual(dn[:3], dn[3], orbit, params, frame)) / (2 * step)
    return J


def nondegeneracy(orbit, params, duplicate_row=False, raise_on_degenerate=False):
    """Smallest singular value of the linearized collision equations."""
    J = nondegeneracy_matrix(orbit, params)
    if duplicate_row:
        J[3] = J[2]
    margin = float(np.linalg.svd(J, compute_uv=False)[-1])
    if raise_on_degenerate and margin <= NONDEGENERACY_TOL:
        raise DegenerateOrbitError(f"orbit {orbit.omega} degenerate (margin {margin:.3e})")
    return margin


def arrival_velocity(orbit, params):
    return unperturbed_flow(orbit, orbit.tau, params).xdot


def changing_direction(o1, o2, params, tol=DIRECTION_TOL):
    """Angle between the arrival velocity of o1 and the departure velocity of o2."""
    if np.linalg.norm(o1.end - o2.start) > 1e-12:
        raise EndpointMismatchError("o1 does not end where o2 starts")
    u = arrival_velocity(o1, params)
    v = o2.v0
    ang = float(np.arctan2(np.linalg.norm(np.cross(u, v)), u @ v))
    return (tol <= ang <= np.pi - tol), ang


@dataclass
class ChainGraph:
    h: float
    params: SystemParams
    edges: list
    adjacency: dict
    angles: dict

    @property
    def vertices(self):
        return (1, -1)

    def edge(self, k, n, branch, start_sign):
        for o in self.edges:
            if o.key == (k, n, branch, start_sign):
                return o
        raise KeyError((k, n, branch, start_sign))

    def letters(self):
        return sorted({o.letter for o in self.edges})

    def resolve_word(self, word, start_sign=1, periodic=True):
        """Turn a word of letters (k, n, branch) into catalog edges.

        Raises ValueError when an edge is missing or a transition is not admissible.
        """
        edges = []
        s = start_sign
        for k, n, b in word:
            try:
                o = self.edge(k, n, b, s)
            except KeyError:
                raise ValueError(f"letter {(k, n, b)} from vertex {s:+d} not in catalog")
            edges.append(o)
            s = o.end_sign
        if periodic and s != start_sign:
            raise ValueError("periodic word does not return to its starting vertex")
        pairs = list(zip(edges[:-1], edges[1:]))
        if periodic:
            pairs.append((edges[-1], edges[0]))
        for o1, o2 in pairs:
            if o2.key not in self.adjacency.get(o1.key, ()):
                raise ValueError(f"transition {o1.key} -> {o2.key} not admissible")
        return edges

    def to_records(self):
        return [o.to_record() for o in self.edges]


def enumerate_frequencies(h, max_n):
    lo, hi = admissible_interval(h)
    out = set()
    for n in range(1, max_n + 1):
        for k in range(1, int(np.ceil(hi * n)) + 1):
            if gcd(k, n) == 1 and lo < k / n < hi:
                out.add(Fraction(k, n))
    return sorted(out)


def build_graph(h, max_n, params=None, tol=DIRECTION_TOL):
    params = params or SystemParams(eps=0.0, h=h)
    if h <= -0.5:
        raise ValueError("h must exceed -1/2")
    edges = []
    for fr in enumerate_frequencies(h, max_n):
        for branch in (1, -1):
            for sign in (1, -1):
                try:
                    o = make_collision_orbit(h, fr.numerator, fr.denominator, branch, sign, params)
                except InadmissibleFrequencyError:
                    continue
                if not early_collision_free(o, params).ok:
                    continue
                m = nondegeneracy(o, params)
                if m <= NONDEGENERACY_TOL:
                    continue
                edges.append(o.with_margin(m))
    if not edges:
        warnings.warn(f"no admissible collision orbits at h = {h}", EmptyGraphWarning)
    adjacency = {}
    angles = {}
    for o1 in edges:
        nxt = []
        for o2 in edges:
            if o2.start_sign != o1.end_sign:
                continue
            ok, ang = changing_direction(o1, o2, params, tol)
            angles[(o1.key, o2.key)] = ang
            if ok:
                nxt.append(o2.key)
        adjacency[o1.key] = nxt
    return ChainGraph(h, params, edges, adjacency, angles)


def _is_power(seq):
    L = len(seq)
    return any(L % d == 0 and seq == seq[:d] * (L // d) for d in range(1, L))


def periodic_words(graph, alphabet, max_len):
    """Primitive admissible cycles of the graph restricted to ``alphabet``.

    Returns ``(word, start_sign)`` pairs, one per cycle up to rotation; cycles
    that repeat a shorter one are omitted (they trace the same orbit).
    """
    letters = set(alphabet)
    keys = [o.key for o in graph.edges if o.letter in letters]
    out = []
    seen = set()

    def extend(path):
        if len(path) > max_len:
            return
        last = path[-1]
        if path[0] in graph.adjacency.get(last, ()):
            rots = [tuple(path[i:] + path[:i]) for i in range(len(path))]
            canon = min(rots)
            if canon not in seen and not _is_power(list(canon)):
                seen.add(canon)
                out.append(canon)
        for nxt in graph.adjacency.get(last, ()):
            if nxt in keys:
                extend(path + [nxt])

    for k in keys:
        extend([k])
    out.sort(key=lambda c: (len(c), c))
    return [([key[:3] for key in c], c[0][3]) for c in out]
