"""Batch command-line front end.

Subcommands: catalog, shadow, sweep, lyapunov, twobody.  Every subcommand reads
a JSON run configuration, writes a deterministic JSON report (embedding the
resolved configuration) and exits with

    0 ok, 1 configuration error, 2 empty catalog, 3 bound violations, 4 solver failure.
"""

import argparse
import copy
import csv
import json
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from .dynamics import IntegrationError, SystemParams, jacobi_array
from .geom import sphere_distance
from .shadow import (ChainSpec, FitError, ShadowError, SolveOptions, epsilon_scaling,
                     lyapunov_fit, monodromy_and_lyapunov, solve, verify_bounds)
from .skeleton import EmptyGraphWarning, build_graph
from .twobody import continue_in_sigma, scaled_to_physical

log = logging.getLogger("sphere_shadow")

EXIT_OK, EXIT_CONFIG, EXIT_EMPTY, EXIT_BOUNDS, EXIT_SOLVER = 0, 1, 2, 3, 4
DEFAULT_SWEEP = [1e-2, 3e-3, 1e-3, 3e-4]

DEFAULTS = {
    "h": 0.0,
    "eps": 1e-3,
    "max_n": 2,
    "word": [{"k": 1, "n": 1, "branch": 1}],
    "start_sign": 1,
    "periodic": True,
    "delta": 0.1,
    "tolerances": {"integrator_tol": 1e-12, "newton_tol": 1e-10, "max_iter": 40},
    "sigma_list": None,
    "h_interval": None,
    "seed": 0,
    "catalog": None,
    "output": {"dir": ".", "emit_svg": False, "emit_csv": False},
}
_TOL_KEYS = set(DEFAULTS["tolerances"])
_OUT_KEYS = set(DEFAULTS["output"])


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration

def resolve_config(raw, overrides=None):
    """Merge a raw config dict with defaults and validate it."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(raw) - set(DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    cfg = copy.deepcopy(DEFAULTS)
    for k, v in raw.items():
        if k in ("tolerances", "output"):
            allowed = _TOL_KEYS if k == "tolerances" else _OUT_KEYS
            if not isinstance(v, dict) or set(v) - allowed:
                raise ConfigError(f"invalid {k} block")
            cfg[k].update(v)
        else:
            cfg[k] = v
    for k, v in (overrides or {}).items():
        if v is not None:
            cfg["output"][k] = v
    _validate(cfg)
    return cfg


def _validate(cfg):
    try:
        h = float(cfg["h"])
        if not h > -0.5:
            raise ConfigError("h must exceed -1/2")
        eps = cfg["eps"] if isinstance(cfg["eps"], list) else [cfg["eps"]]
        if not eps or any(not 0.0 < float(e) <= 0.1 for e in eps):
            raise ConfigError("eps entries must lie in (0, 0.1]")
        if not 0.0 < float(cfg["delta"]) < 0.5:
            raise ConfigError("delta must lie in (0, 0.5)")
        if int(cfg["max_n"]) < 1:
            raise ConfigError("max_n must be positive")
        if cfg["start_sign"] not in (1, -1):
            raise ConfigError("start_sign must be +1 or -1")
        if not isinstance(cfg["word"], list) or not cfg["word"]:
            raise ConfigError("word must be a nonempty list")
        for letter in cfg["word"]:
            if set(letter) != {"k", "n", "branch"} or letter["branch"] not in (1, -1):
                raise ConfigError(f"bad letter {letter}")
        if cfg["sigma_list"] is not None:
            if any(float(s) < 0 for s in cfg["sigma_list"]):
                raise ConfigError("sigma values must be nonnegative")
        if cfg["h_interval"] is not None:
            lo, hi = (float(v) for v in cfg["h_interval"])
            if not lo < hi:
                raise ConfigError("h_interval must be increasing")
    except (TypeError, KeyError) as exc:
        raise ConfigError(f"malformed config: {exc}") from exc


def load_config(path, overrides=None):
    if path is None:
        raw = {}
    else:
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return resolve_config(raw, overrides)


def eps_list(cfg):
    e = cfg["eps"]
    return [float(v) for v in (e if isinstance(e, list) else [e])]


def word_tuples(cfg):
    return [(int(l["k"]), int(l["n"]), int(l["branch"])) for l in cfg["word"]]


def solve_options(cfg):
    t = cfg["tolerances"]
    return SolveOptions(delta=float(cfg["delta"]), tol=float(t["integrator_tol"]),
                        newton_tol=float(t["newton_tol"]), max_iter=int(t["max_iter"]))


def _catalog_source(cfg):
    """(h, max_n) from an external catalog file, else from the config."""
    if cfg["catalog"] is None:
        return float(cfg["h"]), int(cfg["max_n"]), None
    try:
        with open(cfg["catalog"]) as fh:
            cat = json.load(fh)
        return float(cat["h"]), int(cat["max_n"]), cat
    except (OSError, KeyError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read catalog {cfg['catalog']}: {exc}") from exc


def build_chain(cfg):
    """Graph and admissible chain for the configured word (checked before solving)."""
    h, max_n, cat = _catalog_source(cfg)
    params = SystemParams(eps=0.0, h=h)
    graph = build_graph(h, max_n, params)
    word = word_tuples(cfg)
    if cat is not None:
        listed = {(o["k"], o["n"], o["branch"]) for o in cat["orbits"]}
        missing = [w for w in word if w not in listed]
        if missing:
            raise ConfigError(f"letters {missing} not in catalog")
    try:
        chain = ChainSpec.from_word(graph, word, cfg["start_sign"], bool(cfg["periodic"]))
    except ValueError as exc:
        raise ConfigError(f"word not admissible: {exc}") from exc
    return graph, chain, params


# ---------------------------------------------------------------------------
# output

def _fmt(v):
    if isinstance(v, bool) or v is None:
        return json.dumps(v)
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if not math.isfinite(v):
            return "null"
        return format(v, ".17g")
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, np.ndarray):
        return _fmt(v.tolist())
    if isinstance(v, dict):
        return "{" + ", ".join(f"{json.dumps(str(k))}: {_fmt(x)}" for k, x in v.items()) + "}"
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_fmt(x) for x in v) + "]"
    raise TypeError(f"cannot serialize {type(v)}")


def dumps(obj):
    """Deterministic JSON text with floats at 17 significant digits."""
    return _fmt(obj) + "\n"


def write_json(path, obj):
    with open(path, "w") as fh:
        fh.write(dumps(obj))


def _out_dir(cfg):
    d = cfg["output"]["dir"]
    os.makedirs(d, exist_ok=True)
    return d


def write_csv(path, shadow, params):
    p = params.replace(eps=shadow.eps)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "x1", "x2", "x3", "xdot1", "xdot2", "xdot3", "rho_to_a", "E_eps"])
        for row in shadow.samples:
            w.writerow([format(row[6], ".17g")] + [format(c, ".17g") for c in row[:6]]
                       + [format(sphere_distance(row[:3], p.a), ".17g"),
                          format(float(jacobi_array(row[:6], p)), ".17g")])


def _lonlat(X):
    return np.degrees(np.arctan2(X[:, 1], X[:, 0])), np.degrees(np.arcsin(np.clip(X[:, 2], -1, 1)))


def _polylines(X, width, height):
    lon, lat = _lonlat(X)
    px = (lon + 180.0) / 360.0 * width
    py = (90.0 - lat) / 180.0 * height
    cuts = np.where(np.abs(np.diff(lon)) > 180.0)[0] + 1
    out = []
    for seg in np.split(np.arange(len(lon)), cuts):
        if len(seg) > 1:
            out.append(" ".join(f"{px[i]:.3f},{py[i]:.3f}" for i in seg))
    return out


def write_svg(path, shadow, params, delta, width=720, height=360):
    """Equirectangular chart of the co-rotating path with delta-circles around +-a."""
    lines = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'viewBox="0 0 {width} {height}">',
             f'<rect width="{width}" height="{height}" fill="white" stroke="black"/>']
    a = params.a
    u1 = params.e
    u2 = np.cross(a, u1)
    phi = np.linspace(0.0, 2 * np.pi, 181)
    for sign, color in ((1, "red"), (-1, "blue")):
        c = sign * a
        circ = (np.cos(delta) * c[None, :]
                + np.sin(delta) * (np.cos(phi)[:, None] * u1 + np.sin(phi)[:, None] * u2))
        for pts in _polylines(circ, width, height):
            lines.append(f'<polyline points="{pts}" fill="none" stroke="{color}"/>')
    for pts in _polylines(shadow.samples[:, :3], width, height):
        lines.append(f'<polyline points="{pts}" fill="none" stroke="black" stroke-width="0.7"/>')
    lines.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# reports

def shadow_record(shadow, chain, params):
    b = verify_bounds(shadow, chain, params)
    rec = {
        "eps": shadow.eps,
        "h": shadow.h,
        "word": [list(w) for w in chain.word],
        "periodic": chain.periodic,
        "residual": shadow.residual,
        "iterations": shadow.iterations,
        "measured_c": shadow.measured_c,
        "measured_C": shadow.measured_C,
        "period": shadow.period,
        "phis": shadow.phis,
        "psis": shadow.psis,
        "crossing_times": shadow.crossing_times,
        "min_distances": shadow.min_distances,
        "energy_drift": shadow.energy_drift,
        "bounds": b.to_dict(),
    }
    if chain.periodic:
        rec["monodromy"] = monodromy_and_lyapunov(shadow).to_dict()
    return rec, b


def cmd_catalog(cfg):
    import warnings
    h, max_n = float(cfg["h"]), int(cfg["max_n"])
    params = SystemParams(eps=0.0, h=h)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", EmptyGraphWarning)
        graph = build_graph(h, max_n, params)
    report = {
        "config": cfg,
        "h": h,
        "max_n": max_n,
        "orbits": graph.to_records(),
        "transitions": [[list(k1), list(k2), graph.angles[(k1, k2)], k2 in graph.adjacency[k1]]
                        for (k1, k2) in sorted(graph.angles)],
    }
    write_json(os.path.join(_out_dir(cfg), "catalog.json"), report)
    print(f"{'omega':>6} {'branch':>6} {'sign':>5} {'theta':>10} {'alpha':>10} "
          f"{'tau':>10} {'margin':>10}")
    for o in graph.edges:
        print(f"{str(o.omega):>6} {o.branch:>+6d} {o.start_sign:>+5d} {o.theta:>10.6f} "
              f"{o.alpha:>10.6f} {o.tau:>10.6f} {o.margin:>10.3e}")
    if not graph.edges:
        print("empty catalog", file=sys.stderr)
        return EXIT_EMPTY
    return EXIT_OK


def cmd_shadow(cfg):
    graph, chain, params = build_chain(cfg)
    opts = solve_options(cfg)
    out = _out_dir(cfg)
    runs, failures, code = [], [], EXIT_OK
    for i, eps in enumerate(eps_list(cfg)):
        try:
            s = solve(chain, eps, params, opts)
            rec, b = shadow_record(s, chain, params)
        except (ShadowError, IntegrationError) as exc:
            print(f"eps = {eps:g}: solver failure: {exc}", file=sys.stderr)
            failures.append({"eps": eps, "error": type(exc).__name__, "message": str(exc)})
            code = EXIT_SOLVER
            continue
        if b.flags:
            print(f"eps = {eps:g}: bound flags {b.flags}", file=sys.stderr)
            code = max(code, EXIT_BOUNDS)
        runs.append(rec)
        log.info("eps = %g: residual %.2e, c = %.4f", eps, s.residual, s.measured_c)
        if cfg["output"]["emit_csv"]:
            write_csv(os.path.join(out, f"shadow_{i}.csv"), s, params)
        if cfg["output"]["emit_svg"]:
            write_svg(os.path.join(out, f"shadow_{i}.svg"), s, params.replace(eps=eps),
                      opts.delta)
    write_json(os.path.join(out, "shadow.json"),
               {"config": cfg, "runs": runs, "failures": failures})
    return code


def _solve_one(args):
    chain, eps, params, opts = args
    try:
        s = solve(chain, eps, params, opts)
        return eps, s, None
    except (ShadowError, IntegrationError) as exc:
        return eps, None, f"{type(exc).__name__}: {exc}"


def _run_sweep(cfg, workers):
    eps = eps_list(cfg)
    if len(set(eps)) < 3:
        raise ConfigError("a sweep needs at least three distinct eps values")
    graph, chain, params = build_chain(cfg)
    if not chain.periodic:
        raise ConfigError("sweeps require a periodic word")
    opts = solve_options(cfg)
    jobs = [(chain, e, params, opts) for e in sorted(set(eps), reverse=True)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_solve_one, jobs))
    else:
        results = [_solve_one(j) for j in jobs]
    results.sort(key=lambda r: -r[0])
    # the pool returns pickled copies without the (unpicklable) flow system
    good = [(e, s) for e, s, err in results if s is not None]
    failures = [{"eps": e, "error": err} for e, s, err in results if err is not None]
    return chain, params, opts, good, failures


def _lyapunov_block(good):
    lams = [monodromy_and_lyapunov(s).lyapunov for _, s in good]
    block = {"eps": [e for e, _ in good], "lyapunov": lams,
             "strictly_increasing_as_eps_decreases": bool(np.all(np.diff(lams) > 0))}
    if len(good) >= 2:
        fit = lyapunov_fit(block["eps"], lams)
        block.update(slope=fit.slope, intercept=fit.intercept, slope_stderr=fit.stderr,
                     rvalue=fit.rvalue)
    return block


def cmd_sweep(cfg, workers=1, lyapunov_only=False):
    chain, params, opts, good, failures = _run_sweep(cfg, workers)
    report = {"config": cfg, "failures": failures}
    try:
        lyap = _lyapunov_block(good)
    except (FitError, ShadowError) as exc:
        lyap = {"error": str(exc)}
    report["lyapunov"] = lyap
    if not lyapunov_only:
        try:
            sc = epsilon_scaling(chain, [e for e, _ in good], params, opts,
                                 shadows=[s for _, s in good])
            report["scaling"] = sc.to_dict()
        except FitError as exc:
            report["scaling"] = {"error": str(exc)}
        ratios = []
        for e, s in good:
            b = verify_bounds(s, chain, params)
            ratios.append({"eps": e, "min_distance_ratio": b.min_distance_ratio,
                           "time_defect_pi_n": b.time_defect_pi_n,
                           "plane_deviation": b.edge_plane_deviation,
                           "skeleton_deviation": b.edge_skeleton_deviation})
        report["bounds"] = ratios
    name = "lyapunov.json" if lyapunov_only else "sweep.json"
    write_json(os.path.join(_out_dir(cfg), name), report)
    for f in failures:
        print(f"eps = {f['eps']:g}: {f['error']}", file=sys.stderr)
    return EXIT_SOLVER if failures else EXIT_OK


def cmd_twobody(cfg):
    if not cfg["sigma_list"]:
        raise ConfigError("twobody requires sigma_list")
    eps = eps_list(cfg)
    if len(eps) != 1:
        raise ConfigError("twobody requires a single eps")
    eps = eps[0]
    graph, chain, params = build_chain(cfg)
    if not chain.periodic:
        raise ConfigError("continuation requires a periodic word")
    opts = solve_options(cfg)
    try:
        base = solve(chain, eps, params, opts)
    except (ShadowError, IntegrationError) as exc:
        print(f"base solve failed: {exc}", file=sys.stderr)
        write_json(os.path.join(_out_dir(cfg), "twobody.json"),
                   {"config": cfg, "failure": str(exc)})
        return EXIT_SOLVER
    rep = continue_in_sigma(base, cfg["sigma_list"], eps, params, opts)
    h = float(cfg["h"])
    lo, hi = cfg["h_interval"] if cfg["h_interval"] is not None else (h - 0.1, h + 0.1)
    echo = []
    for sig in rep.sigma_list:
        if sig <= 0.0:
            continue
        pp = scaled_to_physical(eps, sig, h)
        echo.append({"sigma": sig, "m1": pp.m1, "m2": pp.m2, "k": pp.k_grav, "M0": pp.M0,
                     "h_phys": pp.h_phys, "h_hat": pp.h_hat,
                     "h_hat_via_omega": pp.h_hat_via_omega, "eps": pp.eps,
                     "in_interval": bool(lo < pp.h_hat < hi)})
    report = {"config": cfg, **rep.to_dict(), "h_interval": [lo, hi], "physical": echo}
    write_json(os.path.join(_out_dir(cfg), "twobody.json"), report)
    if rep.breakdown_sigma is not None:
        print(f"continuation broke down at sigma = {rep.breakdown_sigma:g}: {rep.failure}",
              file=sys.stderr)
        return EXIT_SOLVER
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="sphere-shadow", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=["catalog", "shadow", "sweep", "lyapunov", "twobody"])
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--out", help="output directory")
    p.add_argument("--emit-svg", action="store_true", default=None)
    p.add_argument("--emit-csv", action="store_true", default=None)
    p.add_argument("--workers", type=int, default=os.cpu_count() or 1)
    p.add_argument("--verbose", action="store_true")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        stream=sys.stderr, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, {"dir": args.out, "emit_svg": args.emit_svg,
                                        "emit_csv": args.emit_csv})
        if args.command == "catalog":
            return cmd_catalog(cfg)
        if args.command == "shadow":
            return cmd_shadow(cfg)
        if args.command in ("sweep", "lyapunov"):
            return cmd_sweep(cfg, max(1, args.workers), args.command == "lyapunov")
        return cmd_twobody(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
