import numpy as np
import pytest

from sphere_shadow.dynamics import State, SystemParams, integrate
from sphere_shadow.twobody import (DomainError, PhysicalParams, ReducedState,
                                   continue_in_sigma, integrate_reduced, physical_to_scaled,
                                   reduced_hamiltonian, reduced_params, reduced_to_restricted,
                                   reduced_vector_field, restricted_hamiltonian,
                                   restricted_to_reduced, scaled_to_physical)
from sphere_shadow.dynamics import jacobi


def random_reduced(rng, p, ymax=2.0):
    while True:
        x = rng.normal(size=3)
        x /= np.linalg.norm(x)
        if np.linalg.norm(np.cross(p.a, x)) > 1e-3:
            break
    y = rng.normal(size=3)
    y -= (y @ x) * x
    y *= rng.uniform(0, ymax) / np.linalg.norm(y)
    return ReducedState(x, y)


def test_sigma_zero_is_restricted_hamiltonian(rng):
    p = SystemParams(eps=1e-3, h=0.0)
    for _ in range(1000):
        s = random_reduced(rng, p)
        H = restricted_hamiltonian(s, 1e-3, p)
        assert abs(reduced_hamiltonian(s, 0.0, 1e-3, p) - H) <= 1e-14 * max(1.0, abs(H))


def test_correction_collapses_without_q(rng):
    p = SystemParams(eps=1e-3, h=0.0)
    x = np.cos(0.7) * p.a + np.sin(0.7) * p.j
    y = 0.8 * np.cross(p.a, x)
    y = np.cross(x, y)  # orthogonal to a x x and tangent
    s = ReducedState(x, y)
    assert abs(y @ np.cross(p.a, x)) < 1e-15
    sig = 1e-2
    assert reduced_hamiltonian(s, sig, 1e-3, p) == pytest.approx(
        restricted_hamiltonian(s, 1e-3, p) + sig * 0.5 * y @ y, abs=1e-15)


def test_correction_bound(rng):
    p = SystemParams(eps=1e-3, h=0.0)
    for _ in range(200):
        s = random_reduced(rng, p)
        sig = rng.uniform(0, 1e-2)
        yy = s.y @ s.y
        diff = abs(reduced_hamiltonian(s, sig, 1e-3, p) - restricted_hamiltonian(s, 1e-3, p))
        assert diff <= sig * (0.5 * yy + yy * (1 + np.sqrt(yy))) + 1e-15


def test_domain_errors(rng):
    p = SystemParams(eps=1e-3, h=0.0)
    s = ReducedState(p.j, 2.0 * p.e)
    with pytest.raises(DomainError):
        reduced_hamiltonian(s, 0.6, 1e-3, p)
    with pytest.raises(DomainError):
        reduced_vector_field(s, -0.1, 1e-3, p)


def test_legendre_correspondence_flow():
    p = SystemParams(eps=1e-3, h=0.0)
    s0 = State(p.j, np.array([0.3, 0.0, 0.9]))
    traj = integrate(s0, p, 2 * np.pi)
    r0, rp = restricted_to_reduced(s0, p)
    rt = integrate_reduced(r0, 0.0, 1e-3, rp, 2 * np.pi)
    end = reduced_to_restricted(ReducedState(rt.states[-1, :3], rt.states[-1, 3:]), p)
    assert np.linalg.norm(end.x - traj.final.x) < 1e-8
    assert np.linalg.norm(end.xdot - traj.final.xdot) < 1e-8
    # the reduced Hamiltonian is the Jacobi constant of the restricted state
    assert reduced_hamiltonian(r0, 0.0, 1e-3, rp) == pytest.approx(jacobi(s0, p), abs=1e-15)


def test_reduced_flow_conservation():
    p = SystemParams(eps=1e-3, h=0.0)
    s = ReducedState(p.j, np.array([0.3, 0.0, 0.9]))
    rt = integrate_reduced(s, 1e-2, 1e-3, p, 10 * np.pi)
    assert rt.energy_drift <= 1e-8
    assert rt.constraint_drift <= 1e-10


def test_physical_parameters():
    pp = PhysicalParams(m1=1.0, m2=1e-3, k_grav=1e-6, h_phys=0.0, M0=1.0)
    eps, sigma, h_hat = physical_to_scaled(pp)
    assert sigma == pytest.approx(1e-3) and pp.Omega == 1.0
    assert eps == pytest.approx(1e-3) and h_hat == 0.0
    with pytest.raises(DomainError):
        PhysicalParams(m1=-1.0, m2=1.0, k_grav=1.0, h_phys=0.0, M0=1.0)


def test_scaling_identities_and_round_trip(rng):
    for _ in range(100):
        m1, m2, k, M0 = rng.uniform(0.1, 3.0, 4)
        h = rng.uniform(-1, 1)
        pp = PhysicalParams(m1, m2, k, h, M0)
        assert abs(pp.h_hat - pp.h_hat_via_omega) <= 1e-12 * max(1, abs(pp.h_hat))
        assert abs(pp.eps - pp.eps_via_omega) <= 1e-12 * pp.eps
        back = scaled_to_physical(*physical_to_scaled(pp), m1=m1, M0=M0)
        for name in ("m1", "m2", "k_grav", "h_phys", "M0"):
            assert getattr(back, name) == pytest.approx(getattr(pp, name), rel=1e-12, abs=1e-15)


def test_reduced_params_flip_axis():
    p = SystemParams(eps=1e-3, h=0.0)
    assert np.allclose(reduced_params(p).e, -p.e)


@pytest.fixture(scope="module")
def continuation(sweep_shadows, params0):
    return continue_in_sigma(sweep_shadows[1e-3], [0.0, 1e-4, 1e-3, 1e-2], 1e-3, params0)


def test_continuation(continuation, sweep_shadows):
    rep = continuation
    assert rep.ok and rep.accepted == [0.0, 1e-4, 1e-3, 1e-2]
    assert all(rep.hyperbolic)
    assert max(rep.residuals) <= 1e-9
    assert max(rep.energy_errors) <= 1e-7
    # the sigma = 0 step reproduces the restricted orbit
    base = sweep_shadows[1e-3]
    assert np.allclose(rep.shadows[0].phis, base.phis, atol=1e-8)
    mu = np.array(rep.multipliers)
    d = np.abs(mu - mu[0])
    assert np.all(np.diff(d) > 0)


def test_continuation_energy_level(continuation):
    # energy_drift is max |H_hat - h_hat| over every recorded state of the orbit
    for sig, s in zip(continuation.accepted, continuation.shadows):
        assert s.sigma == sig
        assert s.energy_drift <= 1e-8


def test_large_sigma_breakdown(sweep_shadows, params0):
    rep = continue_in_sigma(sweep_shadows[1e-3], [0.5], 1e-3, params0)
    assert rep.breakdown_sigma == 0.5 and not rep.accepted
    assert "1/sigma" in rep.failure
