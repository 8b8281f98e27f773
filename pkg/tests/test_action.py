import numpy as np
import pytest

from sphere_shadow.action import (DomainError, HintTooFarError, Path, action_terms,
                                  bvp_fixed_energy, discrete_lagrangian, fd_gradients,
                                  lagrangian_in_coords, maupertuis_action, momentum,
                                  reversed_action, section_hessian, section_point, sphere_problem)
from sphere_shadow.dynamics import SystemParams
from sphere_shadow.geom import rotate, sphere_distance

DELTA = 0.1


@pytest.fixture(scope="module")
def orbit11(graph2):
    return graph2.edge(1, 1, 1, 1)


def circle_coords(rng, scale=0.999):
    a = rng.uniform(0, 2 * np.pi)
    return DELTA * scale * np.array([np.cos(a), np.sin(a)])


def test_bvp_reproduces_catalog_orbit(graph2, params0):
    for o in graph2.edges:
        sol = bvp_fixed_energy(o.start, o.end, o, params0)
        assert abs(sol.transit_time - o.tau) < 1e-9
        assert sol.residual < 1e-10
        assert np.allclose(sol.path.omega, o.omega_vec, atol=1e-9)


def test_bvp_perturbed_endpoint(orbit11, params0, rng):
    xi = circle_coords(rng)
    x = section_point(orbit11.start, xi, params0)
    rot = np.array([[np.cos(1e-2), -np.sin(1e-2)], [np.sin(1e-2), np.cos(1e-2)]])
    x2 = section_point(orbit11.start, rot @ xi, params0)
    assert abs(sphere_distance(x, x2) - 1e-3) < 1e-4
    y = section_point(orbit11.end, circle_coords(rng), params0)
    s1 = bvp_fixed_energy(x, y, orbit11, params0)
    s2 = bvp_fixed_energy(x2, y, orbit11, params0)
    assert s1.residual < 1e-10 and s2.residual < 1e-10
    assert abs(s1.transit_time - s2.transit_time) < 1e-2


def test_bvp_hint_too_far(orbit11, params0):
    far = rotate(0.3 * params0.e, orbit11.start)
    with pytest.raises(HintTooFarError):
        bvp_fixed_energy(far, orbit11.end, orbit11, params0)


def test_action_quadrature_and_reparametrization(orbit11, params0):
    prob = sphere_problem(params0)
    path = bvp_fixed_energy(orbit11.start, orbit11.end, orbit11, params0).path
    J = maupertuis_action(path, prob)
    assert abs(maupertuis_action(path, prob, panels=32) - J) <= 1e-10
    T = path.T
    warp = (lambda s: T * (s + 0.2 * np.sin(np.pi * s) / np.pi),
            lambda s: T * (1 + 0.2 * np.cos(np.pi * s)))
    assert abs(maupertuis_action(path, prob, reparam=warp) - J) <= 1e-10


def test_reversal_flips_gyroscopic_term(orbit11, params0):
    prob = sphere_problem(params0)
    path = bvp_fixed_energy(orbit11.start, orbit11.end, orbit11, params0).path
    metric, gyro = action_terms(path, prob)
    assert abs(gyro) > 1e-3
    assert abs(reversed_action(path, prob) - (metric + gyro - 2 * gyro)) < 1e-12


def test_on_shell_identity(graph2, params0):
    from sphere_shadow.action import _nodes
    prob = sphere_problem(params0)
    for o in graph2.edges[::3]:
        path = bvp_fixed_energy(o.start, o.end, o, params0).path
        t, w = _nodes(0.0, path.T, 16)
        x, v = path.position(t), path.velocity(t)
        vv = np.sum(v * v, axis=1)
        assert np.max(np.abs(np.sqrt(2 * (params0.h + 0.5 * np.sum(np.cross(params0.e, x) ** 2, axis=1))) * np.sqrt(vv) - vv)) < 1e-8
        on_shell = (vv + np.sum(np.cross(params0.e, x) * v, axis=1)) @ w
        assert abs(maupertuis_action(path, prob) - on_shell) < 1e-9


def test_domain_errors():
    with pytest.raises(DomainError):
        sphere_problem(SystemParams(eps=0.0, h=-0.6))
    p = SystemParams(eps=0.0, h=-0.45)
    prob = sphere_problem(p)
    # near the poles h + W < 0 for this energy
    path = Path(np.array([0.0, 0.0, 1.0]), np.array([1.0, 0.0, 0.0]), p.e, 0.1)
    with pytest.raises(DomainError):
        maupertuis_action(path, prob)


def test_gradients_match_finite_differences(orbit11, params0, rng):
    for _ in range(5):
        xi, yi = circle_coords(rng), circle_coords(rng)
        L = lagrangian_in_coords(xi, yi, orbit11, params0)
        gx, gy = fd_gradients(xi, yi, orbit11, params0)
        ref = np.concatenate([gx, gy])
        got = np.concatenate([L.grad_x, L.grad_y])
        assert np.max(np.abs(got - ref)) <= 1e-6 * np.max(np.abs(ref))


def test_gradients_are_boundary_momenta(orbit11, params0, rng):
    xi, yi = circle_coords(rng), circle_coords(rng)
    L = lagrangian_in_coords(xi, yi, orbit11, params0)
    sol = bvp_fixed_energy(L.x, L.y, orbit11, params0)
    assert np.allclose(L.momentum_y, momentum(sol.path, sol.path.T, params0), atol=1e-12)
    f1 = params0.e
    f2 = np.cross(orbit11.end, f1)
    # at the vertex the section chart is the identity to first order
    assert abs(L.grad_y[0] - L.momentum_y @ f1) < 0.05 * np.linalg.norm(L.momentum_y)
    assert abs(L.grad_y[1] - L.momentum_y @ f2) < 0.05 * np.linalg.norm(L.momentum_y)


def test_lipschitz_on_section(orbit11, params0, rng):
    yi = circle_coords(rng)
    xs = [circle_coords(rng) for _ in range(6)]
    vals = [lagrangian_in_coords(xi, yi, orbit11, params0) for xi in xs]
    C = 0.0
    for i in range(len(xs)):
        for j in range(i + 1, len(xs)):
            d = np.linalg.norm(vals[i].x - vals[j].x)
            C = max(C, abs(vals[i].value - vals[j].value) / d)
    assert C <= 10


def test_section_hessian_nonsingular(graph2, params0):
    for o in graph2.edges:
        H = section_hessian(o, params0)
        assert np.max(np.abs(H.gradient)) < 1e-8
        assert H.min_singular_value > 1e-6
