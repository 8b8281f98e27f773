import numpy as np
import pytest

from sphere_shadow.geom import (AxisAngle, SpherePoint, TangentVector, exp_map, normalize,
                                rotate, sphere_distance, tangent_frame, tangent_project)

A = np.array([1.0, 0.0, 0.0])
E = np.array([0.0, 0.0, 1.0])
J = np.cross(E, A)


def random_unit(rng, n):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1)[:, None]


def test_half_turn_maps_a_to_antipode():
    assert np.allclose(rotate(np.pi * E, A), -A, atol=1e-15)


def test_zero_rotation_is_identity(rng):
    q = rng.normal(size=3)
    assert np.array_equal(rotate(np.zeros(3), q), q)


def test_quarter_turn_gives_j():
    assert np.allclose(rotate(0.5 * np.pi * E, A), J, atol=1e-15)


def test_rodrigues_two_term_form(rng):
    # for q orthogonal to the axis only the cos and cross terms survive
    for _ in range(50):
        w = rng.normal(size=3)
        q = normalize(np.cross(w, rng.normal(size=3)))
        t = rng.uniform(-5, 5)
        wn = np.linalg.norm(w)
        two_term = q * np.cos(t * wn) + np.cross(w, q) / wn * np.sin(t * wn)
        assert np.allclose(rotate(t * w, q), two_term, atol=1e-14)


def test_rotation_is_isometry_and_composes(rng):
    for _ in range(50):
        u = rng.normal(size=3)
        p, q = rng.normal(size=(2, 3))
        assert abs(rotate(u, p) @ rotate(u, q) - p @ q) < 1e-12
        assert abs(np.linalg.norm(rotate(u, q)) - np.linalg.norm(q)) < 1e-12
        s, t = rng.uniform(-2, 2, 2)
        assert np.allclose(rotate(s * u, rotate(t * u, q)), rotate((s + t) * u, q), atol=1e-12)


def test_axis_angle_callable():
    assert np.allclose(AxisAngle(np.pi * E)(A), -A, atol=1e-15)


@pytest.mark.parametrize("x,y,d", [(A, A, 0.0), (A, -A, np.pi), (A, J, np.pi / 2)])
def test_sphere_distance_examples(x, y, d):
    assert abs(sphere_distance(x, y) - d) < 1e-15


def test_sphere_distance_metric_properties(rng):
    P = random_unit(rng, 60)
    for x, y, z in P.reshape(20, 3, 3):
        assert sphere_distance(x, y) == sphere_distance(y, x)
        assert sphere_distance(x, z) <= sphere_distance(x, y) + sphere_distance(y, z) + 1e-15
        u = rng.normal(size=3)
        assert abs(sphere_distance(rotate(u, x), rotate(u, y)) - sphere_distance(x, y)) < 1e-12


def test_tangent_project_examples(rng):
    x = SpherePoint(rng.normal(size=3))
    w = tangent_project(x, rng.normal(size=3)).vec
    assert np.allclose(tangent_project(x, w).vec, w, atol=1e-15)
    assert np.allclose(tangent_project(x, x.coords).vec, 0.0, atol=1e-15)
    assert np.allclose(tangent_project(x, x.coords + w).vec, w, atol=1e-15)


def test_sphere_point_normalizes():
    p = SpherePoint([3.0, 4.0, 0.0])
    assert abs(np.linalg.norm(p.coords) - 1.0) < 1e-12
    with pytest.raises(ValueError):
        SpherePoint([0.0, 0.0, 0.0])


def test_tangent_vector_rejects_normal_component():
    with pytest.raises(ValueError):
        TangentVector(SpherePoint(A), A)


def test_tangent_frame_and_exp_map(rng):
    for x in random_unit(rng, 10):
        u1, u2 = tangent_frame(x)
        F = np.array([x, u1, u2])
        assert np.allclose(F @ F.T, np.eye(3), atol=1e-14)
        assert abs(sphere_distance(x, exp_map(x, 0.3 * u1)) - 0.3) < 1e-14
