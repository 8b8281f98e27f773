import json
import warnings

import numpy as np
import pytest

from sphere_shadow.dynamics import SystemParams, jacobi
from sphere_shadow.skeleton import (DegenerateOrbitError, EmptyGraphWarning,
                                    EndpointMismatchError, InadmissibleFrequencyError,
                                    RationalOmega, ReducibleFractionError, admissible_interval,
                                    build_graph, changing_direction, cos_alpha, cos_theta,
                                    early_collision_free, make_collision_orbit, nondegeneracy,
                                    periodic_words, unperturbed_flow)

P0 = SystemParams(eps=0.0, h=0.0)


@pytest.mark.parametrize("h,interval", [(0.0, (0.0, 2.0)), (-3 / 8, (0.5, 1.5)), (1.5, (1.0, 3.0))])
def test_admissible_interval(h, interval):
    assert np.allclose(admissible_interval(h), interval, atol=1e-15)


def test_admissible_interval_collapses_and_guards():
    lo, hi = admissible_interval(-0.5 + 1e-12)
    assert hi - lo < 1e-5
    with pytest.raises(ValueError):
        admissible_interval(-0.5)


def test_orbit_one_over_one():
    o = make_collision_orbit(0.0, 1, 1, 1, 1, P0)
    assert np.cos(o.theta) == pytest.approx(0.5, abs=1e-15)
    assert np.linalg.norm(o.v0) == pytest.approx(1.0, abs=1e-15)
    assert np.cos(o.alpha) == pytest.approx(-0.5, abs=1e-15)
    assert o.tau == np.pi and o.end_sign == o.start_sign


def test_orbit_three_over_two():
    o = make_collision_orbit(0.0, 3, 2, 1, 1, P0)
    assert np.cos(o.theta) == pytest.approx(0.75, abs=1e-15)
    assert o.tau == 2 * np.pi and o.end_sign == -o.start_sign
    assert np.cos(o.alpha) == pytest.approx(0.125, abs=1e-15)


def test_boundary_and_reducible_frequencies():
    with pytest.raises(InadmissibleFrequencyError):
        make_collision_orbit(0.0, 2, 1, 1, 1, P0)
    with pytest.raises(ReducibleFractionError):
        make_collision_orbit(0.0, 2, 2, 1, 1, P0)
    with pytest.raises(ReducibleFractionError):
        RationalOmega(4, 6)


@pytest.mark.parametrize("h", [-0.3, 0.0, 0.2])
def test_orbit_invariants(h):
    p = SystemParams(eps=0.0, h=h)
    g = build_graph(h, 3, p)
    assert g.edges
    for o in g.edges:
        w = o.omega.value
        assert abs(np.linalg.norm(o.omega_vec) - w) < 1e-12
        assert abs(o.omega_vec @ p.a) < 1e-12
        ang = np.arccos(np.clip(o.omega_vec @ p.e / w, -1, 1))
        assert abs(ang - o.theta) < 1e-12
        assert abs(jacobi(unperturbed_flow(o, 0.0, p), p) - h) < 1e-12
        assert o.end_sign == (-1) ** (o.omega.k + o.omega.n) * o.start_sign
        assert abs(np.cos(o.alpha) - (w * w / 2 - h - 1) / np.sqrt(2 * h + 1)) < 1e-12
        for t in np.linspace(0, o.tau, 13):
            assert abs(jacobi(unperturbed_flow(o, t, p), p) - h) < 1e-10
        assert np.linalg.norm(unperturbed_flow(o, o.tau, p).x - o.end) < 1e-10


def test_unperturbed_flow_start():
    o = make_collision_orbit(0.0, 1, 1, -1, -1, P0)
    s = unperturbed_flow(o, 0.0, P0)
    assert np.allclose(s.x, o.start) and np.allclose(s.xdot, o.v0, atol=1e-15)


def test_early_collision_free():
    c = early_collision_free(make_collision_orbit(0.0, 1, 1, 1, 1, P0), P0)
    assert c.ok and c.min_interior > 0.1
    assert early_collision_free(make_collision_orbit(0.0, 3, 2, 1, 1, P0), P0).ok


def test_nondegeneracy_and_rank_deficient_control():
    o = make_collision_orbit(0.0, 1, 1, 1, 1, P0)
    assert nondegeneracy(o, P0) > 1e-6
    assert nondegeneracy(o, P0, duplicate_row=True) < 1e-8
    with pytest.raises(DegenerateOrbitError):
        nondegeneracy(o, P0, duplicate_row=True, raise_on_degenerate=True)


def test_nondegeneracy_sweep_h02():
    p = SystemParams(eps=0.0, h=0.2)
    g = build_graph(0.2, 5, p)
    lo, hi = admissible_interval(0.2)
    from math import gcd
    expected = {(k, n) for n in range(1, 6) for k in range(1, 20)
                if gcd(k, n) == 1 and lo < k / n < hi}
    assert {(o.omega.k, o.omega.n) for o in g.edges} == expected
    assert min(o.margin for o in g.edges) > 1e-6


def test_cos_alpha_monotone_in_omega(graph2):
    ws = sorted({o.omega.value for o in graph2.edges})
    ca = [cos_alpha(w, 0.0) for w in ws]
    assert np.all(np.diff(ca) > 0)
    assert cos_theta(1.0, 0.0) == 0.5


def test_changing_direction(graph2, params0):
    a11 = graph2.edge(1, 1, 1, 1)
    ok, ang = changing_direction(a11, graph2.edge(1, 2, 1, 1), params0)
    assert ok
    # the repeated orbit arrives along a different direction than it departs
    ok_rep, ang_rep = changing_direction(a11, a11, params0)
    assert 0 < ang_rep < np.pi
    # the mirror branch departs along the very direction 1/1+ arrives in
    ok_m, ang_m = changing_direction(a11, graph2.edge(1, 1, -1, 1), params0)
    assert ang_m < 1e-9 and not ok_m
    with pytest.raises(EndpointMismatchError):
        changing_direction(a11, graph2.edge(1, 1, 1, -1), params0)


def test_distinct_frequencies_change_direction(graph2, params0):
    for o1 in graph2.edges:
        for o2 in graph2.edges:
            if o2.start_sign == o1.end_sign and o1.omega != o2.omega:
                assert changing_direction(o1, o2, params0)[0]


def test_graph_contents(params0):
    g1 = build_graph(0.0, 1, params0)
    assert {o.omega.value for o in g1.edges} == {1.0}
    g2 = build_graph(0.0, 2, params0)
    assert {str(o.omega) for o in g2.edges} == {"1/2", "1/1", "3/2"}
    assert len(g2.edges) == 12
    for k1, nxt in g2.adjacency.items():
        o1 = g2.edge(*k1)
        for k2 in nxt:
            o2 = g2.edge(*k2)
            assert o2.start_sign == o1.end_sign
            ok, ang = changing_direction(o1, o2, params0)
            assert ok and 1e-3 <= ang <= np.pi - 1e-3


def test_word_sign_rule(graph2):
    # 3/2 flips the vertex, so it must be followed by an edge starting at -a
    edges = graph2.resolve_word([(3, 2, 1), (3, 2, 1)], 1, periodic=True)
    assert [o.start_sign for o in edges] == [1, -1]
    with pytest.raises(ValueError):
        graph2.resolve_word([(3, 2, 1)], 1, periodic=True)


def test_empty_graph_warning():
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        g = build_graph(-0.5 + 1e-12, 1)
    assert not g.edges
    assert any(issubclass(x.category, EmptyGraphWarning) for x in w)


def test_catalog_records_are_json(graph2):
    recs = json.loads(json.dumps(graph2.to_records()))
    assert set(recs[0]) == {"k", "n", "branch", "start_sign", "theta", "alpha", "tau",
                            "omega_vec", "v0", "margin"}


def test_periodic_words(graph2):
    words = periodic_words(graph2, [(1, 1, 1), (3, 2, 1)], 4)
    assert len(words) == 8
    for word, sign in words:
        graph2.resolve_word(word, sign, periodic=True)
    # mirror branches never follow each other
    assert all(len(w) == 1 for w, _ in periodic_words(graph2, [(1, 1, 1), (1, 1, -1)], 4))
