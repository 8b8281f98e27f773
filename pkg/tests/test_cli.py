import json

import pytest

from sphere_shadow.cli import (EXIT_BOUNDS, EXIT_CONFIG, EXIT_EMPTY, EXIT_OK, EXIT_SOLVER,
                               ConfigError, dumps, main, resolve_config)


def run(tmp_path, command, cfg, *extra):
    path = tmp_path / f"{command}.cfg.json"
    path.write_text(json.dumps(cfg))
    return main([command, "--config", str(path), "--out", str(tmp_path), "--workers", "1", *extra])


def test_catalog_lists_frequencies(tmp_path, capsys):
    assert run(tmp_path, "catalog", {"h": 0.0, "max_n": 2}) == EXIT_OK
    out = capsys.readouterr().out
    for w in ("1/2", "1/1", "3/2"):
        assert w in out
    cat = json.loads((tmp_path / "catalog.json").read_text())
    assert {(o["k"], o["n"], o["branch"]) for o in cat["orbits"]} == {
        (k, n, b) for k, n in ((1, 2), (1, 1), (3, 2)) for b in (1, -1)}
    assert cat["config"]["h"] == 0.0


def test_catalog_config_errors(tmp_path):
    assert run(tmp_path, "catalog", {"h": -0.6}) == EXIT_CONFIG
    assert run(tmp_path, "catalog", {"h": 0.0, "colour": "red"}) == EXIT_CONFIG
    assert run(tmp_path, "catalog", {"h": -0.5 + 1e-12, "max_n": 1}) == EXIT_EMPTY


def test_resolve_config_guards():
    with pytest.raises(ConfigError):
        resolve_config({"eps": 0.5})
    with pytest.raises(ConfigError):
        resolve_config({"delta": 0.7})
    with pytest.raises(ConfigError):
        resolve_config({"tolerances": {"foo": 1}})
    cfg = resolve_config({"eps": [1e-2, 1e-3]})
    assert cfg["tolerances"]["integrator_tol"] == 1e-12


def test_shadow_from_catalog(tmp_path):
    assert run(tmp_path, "catalog", {"h": 0.0, "max_n": 2}) == EXIT_OK
    cfg = {"eps": 1e-3, "word": [{"k": 1, "n": 1, "branch": 1}],
           "catalog": str(tmp_path / "catalog.json")}
    assert run(tmp_path, "shadow", cfg, "--emit-svg", "--emit-csv") == EXIT_OK
    rep = json.loads((tmp_path / "shadow.json").read_text())
    run0 = rep["runs"][0]
    assert run0["measured_c"] > 0
    assert run0["residual"] <= 1e-9
    assert run0["monodromy"]["hyperbolic"]
    assert rep["config"]["catalog"] == cfg["catalog"]
    svg = (tmp_path / "shadow_0.svg").read_text()
    assert svg.startswith("<svg") and svg.count("<polyline") >= 3
    csv_lines = (tmp_path / "shadow_0.csv").read_text().splitlines()
    assert csv_lines[0].startswith("t,x1,x2,x3") and len(csv_lines) > 100


def test_shadow_rejects_sign_mismatch(tmp_path, capsys):
    cfg = {"eps": 1e-3, "word": [{"k": 3, "n": 2, "branch": 1}]}
    assert run(tmp_path, "shadow", cfg) == EXIT_CONFIG
    assert "not admissible" in capsys.readouterr().err
    assert not (tmp_path / "shadow.json").exists()


def test_shadow_reports_are_deterministic(tmp_path):
    cfg = {"eps": 1e-2, "word": [{"k": 1, "n": 1, "branch": 1}]}
    assert run(tmp_path, "shadow", cfg) == EXIT_OK
    first = (tmp_path / "shadow.json").read_bytes()
    assert run(tmp_path, "shadow", cfg) == EXIT_OK
    assert (tmp_path / "shadow.json").read_bytes() == first


def test_dumps_float_format():
    assert dumps({"a": 0.1, "b": [1, None, True], "c": float("nan")}) == \
        '{"a": 0.10000000000000001, "b": [1, null, true], "c": null}\n'


def test_sweep(tmp_path):
    assert run(tmp_path, "sweep", {"eps": 1e-3}) == EXIT_CONFIG
    assert run(tmp_path, "sweep", {"eps": [1e-2, 3e-3, 1e-3, 3e-4]}) == EXIT_OK
    rep = json.loads((tmp_path / "sweep.json").read_text())
    assert 0.85 <= rep["scaling"]["slope"] <= 1.15
    assert rep["lyapunov"]["strictly_increasing_as_eps_decreases"]
    assert rep["lyapunov"]["slope"] > 0
    assert not rep["failures"]
    assert run(tmp_path, "lyapunov", {"eps": [1e-2, 3e-3, 1e-3]}) == EXIT_OK
    lyap = json.loads((tmp_path / "lyapunov.json").read_text())
    assert "scaling" not in lyap and len(lyap["lyapunov"]["lyapunov"]) == 3


def test_twobody(tmp_path):
    cfg = {"eps": 1e-3, "sigma_list": [1e-4, 1e-3, 1e-2], "h_interval": [-0.1, 0.1]}
    assert run(tmp_path, "twobody", cfg) == EXIT_OK
    rep = json.loads((tmp_path / "twobody.json").read_text())
    assert all(rep["hyperbolic"]) and rep["breakdown_sigma"] is None
    for echo in rep["physical"]:
        assert echo["in_interval"]
        assert echo["h_hat"] == echo["h_hat_via_omega"]
        m1, m2, M0, h = echo["m1"], echo["m2"], echo["M0"], echo["h_phys"]
        assert -0.1 < m1 ** 2 * h / (m2 * M0 ** 2) < 0.1


def test_twobody_breakdown(tmp_path):
    cfg = {"eps": 1e-3, "sigma_list": [1e-2, 0.5]}
    assert run(tmp_path, "twobody", cfg) == EXIT_SOLVER
    rep = json.loads((tmp_path / "twobody.json").read_text())
    assert rep["breakdown_sigma"] == 0.5 and rep["accepted"] == [1e-2]
    assert rep["failure"]


def test_exit_code_constants():
    assert (EXIT_OK, EXIT_CONFIG, EXIT_EMPTY, EXIT_BOUNDS, EXIT_SOLVER) == (0, 1, 2, 3, 4)
