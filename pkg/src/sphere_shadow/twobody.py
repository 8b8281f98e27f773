"""Reduced two-body problem on the sphere and continuation in the mass ratio.

The reduced Hamiltonian on T*S^2 is

    H(x, y) = 1/2|y|^2 + <y, e x x> + eps V(x)
              + sigma (1/2|y|^2 - Q^2 - sigma Q^2 P / (sqrt(1 - sigma^2 Q^2) + 1))

with ``P = <y, e x x>`` and ``Q = <y, a x x>``.  At sigma = 0 it is the
restricted problem written in the coordinates ``x' = -x``,
``y' = -(xdot + e x x)`` with rotation axis ``-e``; the maps below implement
that correspondence.
"""

from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from .dynamics import (SingularInputError, State, SystemParams, _raise_status,
                       potential_V, rho_min_for)
from .shadow import (FlowSystem, NoConvergenceError, ShadowError, SolveOptions,
                     monodromy_and_lyapunov, solve)
from .dynamics import IntegrationError


class DomainError(ValueError):
    pass


@dataclass(frozen=True)
class PhysicalParams:
    m1: float
    m2: float
    k_grav: float
    h_phys: float
    M0: float

    def __post_init__(self):
        for name in ("m1", "m2", "k_grav", "M0"):
            if not getattr(self, name) > 0:
                raise DomainError(f"{name} must be positive")

    @property
    def sigma(self):
        return self.m2 / self.m1

    @property
    def Omega(self):
        return self.M0 / self.m1

    @property
    def eps(self):
        return self.m1 ** 2 * self.k_grav / (self.m2 * self.M0 ** 2)

    @property
    def h_hat(self):
        return self.m1 ** 2 * self.h_phys / (self.m2 * self.M0 ** 2)

    @property
    def h_hat_via_omega(self):
        return self.h_phys / (self.m2 * self.Omega ** 2)

    @property
    def eps_via_omega(self):
        return self.k_grav / (self.m2 * self.Omega ** 2)

    @property
    def reduced_mass(self):
        return self.m1 * self.m2 / (self.m1 + self.m2)


def physical_to_scaled(p):
    """(eps, sigma, h_hat) of the rescaled problem."""
    return p.eps, p.sigma, p.h_hat


def scaled_to_physical(eps, sigma, h_hat, m1=1.0, M0=1.0):
    """Physical data realizing (eps, sigma, h_hat) for given m1 and M0."""
    if not (m1 > 0 and M0 > 0 and sigma > 0 and eps > 0):
        raise DomainError("m1, M0, sigma and eps must be positive")
    m2 = sigma * m1
    om2 = (M0 / m1) ** 2
    return PhysicalParams(m1=m1, m2=m2, k_grav=eps * m2 * om2, h_phys=h_hat * m2 * om2, M0=M0)


@dataclass(frozen=True)
class ReducedState:
    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.x, float)
        y = np.asarray(self.y, float)
        if abs(np.linalg.norm(x) - 1.0) > 1e-10 or abs(x @ y) > 1e-10 * max(1.0, np.linalg.norm(y)):
            raise ValueError("state violates |x| = 1 or <x, y> = 0")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    def as_array(self, t=0.0):
        return np.concatenate([self.x, self.y, [t]])


def reduced_params(params):
    """Parameters of the reduced problem matching ``params`` at sigma = 0."""
    return params.replace(e=-params.e)


def _hamiltonian(x, y, sigma, eps, a, e):
    ex = np.cross(e, x)
    ax = np.cross(a, x)
    P = y @ ex
    Q = y @ ax
    yy = y @ y
    H = 0.5 * yy + P
    if eps != 0.0:
        H = H + eps * (a @ x) / np.sqrt(ax @ ax)
    if sigma != 0.0:
        R = np.sqrt(1.0 - sigma ** 2 * Q * Q)
        H = H + sigma * (0.5 * yy - Q * Q - sigma * Q * Q * P / (R + 1.0))
    return H


def _check(state, sigma, params):
    if sigma < 0:
        raise DomainError("sigma must be nonnegative")
    if sigma > 0 and np.linalg.norm(state.y) * sigma >= 1.0:
        raise DomainError("|y| must be below 1/sigma")
    if np.linalg.norm(np.cross(params.a, state.x)) < 1e-12:
        raise SingularInputError("point coincides with a singularity")


def reduced_hamiltonian(state, sigma, eps, params):
    """Value of the reduced Hamiltonian (axis and singularity taken from params)."""
    _check(state, sigma, params)
    return float(_hamiltonian(state.x, state.y, sigma, eps, params.a, params.e))


def restricted_hamiltonian(state, eps, params):
    """1/2|y|^2 + <y, e x x> + eps V(x)."""
    return (0.5 * state.y @ state.y + state.y @ np.cross(params.e, state.x)
            + eps * potential_V(state.x, params.a))


def _param_array(params, sigma, eps, regularize=False):
    p = params.replace(eps=eps).as_array(sigma)
    if not regularize:
        p[2] = 0.0
    return p


def reduced_vector_field(state, sigma, eps, params):
    """(xdot, ydot) of the constrained Hamilton equations."""
    _check(state, sigma, params)
    f = K.reduced_field(state.as_array(), _param_array(params, sigma, eps))
    return f[0:3], f[3:6]


@dataclass
class ReducedTrajectory:
    t: np.ndarray
    states: np.ndarray
    energy_drift: float
    constraint_drift: float


def integrate_reduced(state, sigma, eps, params, t_end, tol=1e-12, max_steps=400000):
    _check(state, sigma, params)
    p = _param_array(params, sigma, eps, regularize=eps > 0)
    V0 = np.zeros((7, 1))
    status, z, _, s, n, min_rho, s_rec, z_rec, nrec = K.propagate(
        K.reduced_field, p, state.as_array(), V0, False, K.MODE_TIME, np.zeros(3), 0.0,
        0.0, float(t_end), np.inf, tol, tol, 1e-3, rho_min_for(eps), max_steps, True)
    _raise_status(status, z, min_rho)
    H = np.array([_hamiltonian(r[:3], r[3:6], sigma, eps, params.a, params.e) for r in z_rec])
    cons = max(float(np.max(np.abs(np.linalg.norm(z_rec[:, :3], axis=1) - 1.0))),
               float(np.max(np.abs(np.einsum("ij,ij->i", z_rec[:, :3], z_rec[:, 3:6])))))
    return ReducedTrajectory(z_rec[:, 6].copy(), z_rec[:, :6].copy(),
                             float(np.max(np.abs(H - H[0]))), cons)


def restricted_to_reduced(state, params):
    """Map a restricted state to the reduced coordinates (and parameters)."""
    x = -state.x
    y = -(state.xdot + np.cross(params.e, state.x))
    return ReducedState(x, y), reduced_params(params)


def reduced_to_restricted(rstate, params):
    """Inverse of :func:`restricted_to_reduced` at sigma = 0 (params: restricted)."""
    x = -rstate.x
    xdot = -rstate.y - np.cross(params.e, x)
    return State(x, xdot)


def reduced_system(params, sigma):
    """Shooting system for the reduced flow at level params.h (params: restricted)."""
    rp = reduced_params(params)
    p = rp.as_array(sigma)
    eps = params.eps
    a, e = rp.a, rp.e

    def energy(z):
        return _hamiltonian(z[0:3], z[3:6], sigma, eps, a, e)

    return FlowSystem(fun=K.reduced_field, p=p, level=params.h, energy=energy,
                      chart_c=-1.0, e_sys=e, flip=-1, params=params, sigma=sigma)


@dataclass
class ContinuationReport:
    word: list
    eps: float
    h_hat: float
    sigma_list: list
    accepted: list = field(default_factory=list)
    residuals: list = field(default_factory=list)
    multipliers: list = field(default_factory=list)
    hyperbolic: list = field(default_factory=list)
    energy_errors: list = field(default_factory=list)
    max_sigma_y: list = field(default_factory=list)
    breakdown_sigma: float = None
    failure: str = None
    shadows: list = field(default_factory=list, repr=False)

    @property
    def ok(self):
        return self.breakdown_sigma is None

    def to_dict(self):
        return {k: v for k, v in self.__dict__.items() if k != "shadows"}


def continue_in_sigma(shadow, sigma_list, eps, params, opts=None):
    """Re-solve a periodic shadow orbit under the reduced flow for increasing sigma.

    Each step is warm-started from the previous solution; a failed step is
    retried once after an intermediate half step.  A converged orbit that
    leaves the smoothness domain |y| < 1/sigma counts as a failure.
    """
    opts = opts or SolveOptions()
    params = params.replace(eps=eps)
    chain = shadow.chain
    sigmas = sorted(float(s) for s in sigma_list)
    rep = ContinuationReport(word=[list(w) for w in chain.word], eps=eps, h_hat=params.h,
                             sigma_list=sigmas)
    phis, psis = shadow.phis.copy(), shadow.psis.copy()
    prev = 0.0

    def attempt(sig, phis, psis):
        s = solve(chain, eps, params, opts, system=reduced_system(params, sig),
                  initial_phis=phis, initial_psis=psis)
        # the reduced Hamiltonian is only smooth for |y| < 1/sigma
        if sig * s.max_momentum >= 1.0:
            raise DomainError(f"orbit leaves |y| < 1/sigma (sigma |y| = {sig * s.max_momentum:.3f})")
        return s, monodromy_and_lyapunov(s)

    for sig in sigmas:
        try:
            s, m = attempt(sig, phis, psis)
        except (ShadowError, IntegrationError, DomainError, FloatingPointError) as exc:
            mid = 0.5 * (prev + sig)
            try:
                s_mid, _ = attempt(mid, phis, psis)
                s, m = attempt(sig, s_mid.phis, s_mid.psis)
            except (ShadowError, IntegrationError, DomainError, FloatingPointError) as exc2:
                rep.breakdown_sigma = sig
                rep.failure = str(exc2)
                break
        rep.accepted.append(sig)
        rep.max_sigma_y.append(sig * s.max_momentum)
        rep.residuals.append(s.residual)
        rep.multipliers.append(m.mu)
        rep.hyperbolic.append(m.hyperbolic)
        rep.energy_errors.append(s.energy_drift)
        rep.shadows.append(s)
        phis, psis, prev = s.phis.copy(), s.psis.copy(), sig
    return rep
