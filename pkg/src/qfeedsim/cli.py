"""Command line driver.

Usage::

    qfeedsim CONFIG.toml [--engine E] [--seed S] [--out DIR] [--format csv|json] [--threads N]

Engines: ``deterministic``, ``trajectories``, ``compare``, ``embed-check``,
``kernel-check``. Exit status is 0 on success, 1 when a numerical threshold
is missed and 2 for configuration errors.
"""
import argparse
import math
import sys
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import backend
from .io import write_json, write_snapshots_csv, write_snapshots_json, write_trajectories_csv
from .models import MODELS, build_model, model_parameters
from .resolved import (
    DEFAULT_MAX_ENTRIES,
    DEFAULT_PRUNE,
    init_resolved,
    propagate,
    signal_distribution,
    total_variation,
)
from .signals import (
    NonMarkovianRule,
    SignalLattice,
    embedded_trajectory,
    history_buffer_trajectory,
    kernel_convergence_table,
    markovian_embed_history,
)
from .trajectories import DEFAULT_PATH_CAP, ensemble_estimate, enumerate_paths, run_trajectory

EXIT_OK, EXIT_THRESHOLD, EXIT_CONFIG = 0, 1, 2
ENGINES = ("deterministic", "trajectories", "compare", "embed-check", "kernel-check")


class ConfigError(ValueError):
    pass


def _num(v):
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _finite(v):
    return _num(v) and math.isfinite(v)


def _int(v):
    return isinstance(v, int) and not isinstance(v, bool)


def _check(cond, key, what):
    if not cond:
        raise ConfigError(f"config key {key!r}: {what}")


def _floats(v, key):
    _check(isinstance(v, list) and v and all(_finite(x) for x in v), key, "expected a list of finite numbers")
    return [float(x) for x in v]


TOP = {
    "engine": lambda v, k: _check(v in ENGINES, k, f"must be one of {ENGINES}") or v,
    "n_steps": lambda v, k: _check(_int(v) and v >= 0, k, "expected a non-negative integer") or v,
    "n_traj": lambda v, k: _check(_int(v) and v >= 1, k, "expected a positive integer") or v,
    "seed": lambda v, k: _check(_int(v) and v >= 0, k, "expected a non-negative integer") or v,
    "prune": lambda v, k: _check(_finite(v) and v >= 0, k, "expected a finite number >= 0") or float(v),
    "max_entries": lambda v, k: _check(_int(v) and v >= 1, k, "expected a positive integer") or v,
    "path_cap": lambda v, k: _check(_int(v) and v >= 1, k, "expected a positive integer") or v,
    "threads": lambda v, k: _check(_int(v) and v >= 1, k, "expected a positive integer") or v,
    "format": lambda v, k: _check(v in ("csv", "json"), k, "must be 'csv' or 'json'") or v,
    "out": lambda v, k: _check(isinstance(v, str) and v, k, "expected a path") or v,
    "snapshot_every": lambda v, k: _check(_int(v) and v >= 1, k, "expected a positive integer") or v,
    "dump_trajectories": lambda v, k: _check(_int(v) and v >= 0, k, "expected a non-negative integer") or v,
}

SECTIONS = {
    "model": {"name": None, "params": None},
    "lattice": {"min": None, "max": None, "step": None},
    "compare": {
        "mode": lambda v, k: _check(v in ("exact", "mc"), k, "must be 'exact' or 'mc'") or v,
        "tolerance": lambda v, k: _check(_finite(v) and v >= 0, k, "expected a finite number >= 0") or float(v),
        "sigma": lambda v, k: _check(_finite(v) and v > 0, k, "expected a positive number") or float(v),
        "tv_max": lambda v, k: _check(_finite(v) and v > 0, k, "expected a positive number") or float(v),
    },
    "embed": {
        "depth": lambda v, k: _check(_int(v) and v >= 0, k, "expected a non-negative integer") or v,
        "n_steps": lambda v, k: _check(_int(v) and v >= 1, k, "expected a positive integer") or v,
        "tolerance": lambda v, k: _check(_finite(v) and v >= 0, k, "expected a finite number >= 0") or float(v),
        "contraction": lambda v, k: _check(_finite(v) and 0 <= v < 1, k, "expected a number in [0, 1)") or float(v),
    },
    "kernel": {
        "gamma": lambda v, k: _check(_finite(v) and v > 0, k, "expected a positive number") or float(v),
        "t_max": lambda v, k: _check(_finite(v) and v > 0, k, "expected a positive number") or float(v),
        "dts": lambda v, k: _floats(v, k),
        "drive": lambda v, k: _check(v in ("constant", "sin"), k, "must be 'constant' or 'sin'") or v,
        "ratio": lambda v, k: _check(_finite(v) and v > 0, k, "expected a positive number") or float(v),
        "ratio_tol": lambda v, k: _check(_finite(v) and v >= 0, k, "expected a number >= 0") or float(v),
    },
}

DEFAULTS = {
    "engine": "deterministic",
    "n_traj": 1000,
    "prune": DEFAULT_PRUNE,
    "max_entries": DEFAULT_MAX_ENTRIES,
    "path_cap": DEFAULT_PATH_CAP,
    "threads": 1,
    "format": "csv",
    "out": "qfeedsim-out",
    "snapshot_every": 1,
    "dump_trajectories": 0,
    "compare": {"mode": "exact", "tolerance": 1e-10, "sigma": 4.0, "tv_max": 0.01},
    "embed": {"depth": 3, "n_steps": 10_000, "tolerance": 1e-12, "contraction": 0.9},
    "kernel": {"gamma": 1.0, "t_max": 2.0, "dts": [0.04, 0.02, 0.01, 0.005], "drive": "constant",
               "ratio": 2.0, "ratio_tol": 0.4},
}


def parse_config(raw):
    """Validate a raw config mapping and fill in defaults.

    Unknown keys anywhere raise :class:`ConfigError` naming the key.
    """
    cfg = {k: (dict(v) if isinstance(v, dict) else v) for k, v in DEFAULTS.items()}
    for key, val in raw.items():
        if key in TOP:
            cfg[key] = TOP[key](val, key)
        elif key in SECTIONS:
            _check(isinstance(val, dict), key, "expected a table")
            allowed = SECTIONS[key]
            section = dict(cfg.get(key, {}))
            for sub, v in val.items():
                dotted = f"{key}.{sub}"
                if sub not in allowed:
                    raise ConfigError(f"unknown config key {dotted!r}")
                check = allowed[sub]
                section[sub] = check(v, dotted) if check else v
            cfg[key] = section
        else:
            raise ConfigError(f"unknown config key {key!r}")

    model = cfg.get("model")
    if model is not None:
        _check("name" in model, "model.name", "missing")
        name = model["name"]
        _check(name in MODELS, "model.name", f"unknown model, choose from {sorted(MODELS)}")
        params = model.get("params", {})
        _check(isinstance(params, dict), "model.params", "expected a table")
        allowed = model_parameters(name)
        for p, v in params.items():
            if p not in allowed:
                raise ConfigError(f"unknown config key 'model.params.{p}' for model {name!r}")
            if _num(v):
                _check(math.isfinite(v), f"model.params.{p}", "must be finite")
        model["params"] = dict(params)

    lat = cfg.get("lattice")
    if lat is not None:
        for sub in ("min", "max", "step"):
            _check(sub in lat, f"lattice.{sub}", "missing")
            lat[sub] = _floats(lat[sub], f"lattice.{sub}")
    return cfg


def load_config(path):
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config {path} is not valid TOML: {exc}") from None
    return parse_config(raw)


def _require(cfg, key):
    if cfg.get(key) is None:
        raise ConfigError(f"config key {key!r} is required for engine {cfg['engine']!r}")
    return cfg[key]


def _model(cfg):
    model = _require(cfg, "model")
    n_steps = _require(cfg, "n_steps")
    try:
        spec = build_model(model["name"], model["params"], n_steps)
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(f"model.params: {exc}") from None
    native = spec
    if cfg.get("lattice") is not None:
        try:
            lat = SignalLattice(**cfg["lattice"])
        except ValueError as exc:
            raise ConfigError(f"lattice: {exc}") from None
        if lat.dim != spec.lattice.dim:
            raise ConfigError(f"lattice: model {spec.name!r} needs {spec.lattice.dim} components, got {lat.dim}")
        spec = spec.with_lattice(lat)
    return spec, native


def _write_snapshots(cfg, out, states, std_err=None):
    path = out / f"snapshots.{cfg['format']}"
    if cfg["format"] == "csv":
        write_snapshots_csv(path, states, std_err)
    else:
        write_snapshots_json(path, states, std_err)
    return path


def _common_summary(cfg, spec=None):
    s = {"engine": cfg["engine"], "backend": backend.NAME, "threads": cfg["threads"]}
    if spec is not None:
        s["model"] = spec.name
        s["params"] = {k: v for k, v in spec.params.items() if v is not None}
        s["lattice"] = spec.lattice.to_dict()
    return s


def cmd_simulate_deterministic(cfg, out):
    spec, _ = _model(cfg)
    every = cfg["snapshot_every"]
    n_steps = spec.n_steps
    snaps = []

    def keep(state):
        if state.step % every == 0 or state.step == n_steps:
            snaps.append(state)

    state = init_resolved(spec.rho0, spec.y0, spec.lattice)
    state = propagate(state, spec.instrument, n_steps, cfg["prune"], cfg["max_entries"], cfg["threads"], keep)
    _write_snapshots(cfg, out, snaps)
    total = state.total_trace
    err = abs(total + state.leaked_mass - 1.0)
    summary = _common_summary(cfg, spec)
    summary.update(n_steps=n_steps, prune=cfg["prune"], support=len(state), final_trace_sum=total,
                   leaked_mass=state.leaked_mass, clip_count=state.clip_count, conservation_error=err,
                   passed=err <= 1e-9)
    write_json(out / "summary.json", summary)
    return EXIT_OK if err <= 1e-9 else EXIT_THRESHOLD


def cmd_simulate_trajectories(cfg, out):
    spec, _ = _model(cfg)
    seed = _require(cfg, "seed")
    est = ensemble_estimate(spec, cfg["n_traj"], spec.n_steps, seed, cfg["threads"])
    _write_snapshots(cfg, out, [est.resolved], est.std_err)
    if cfg["dump_trajectories"]:
        inst = spec.instrument
        trajs = [run_trajectory(spec.rho0, spec.y0, inst, spec.n_steps, seed, k)
                 for k in range(min(cfg["dump_trajectories"], cfg["n_traj"]))]
        write_trajectories_csv(out / "trajectories.csv", trajs)
    summary = _common_summary(cfg, spec)
    summary.update(n_steps=spec.n_steps, n_traj=est.n_traj, seed=seed, support=len(est.resolved),
                   final_trace_sum=est.resolved.total_trace, clip_count=est.resolved.clip_count)
    write_json(out / "summary.json", summary)
    return EXIT_OK


def _by_point(state):
    return {tuple(np.round(p, 9)): m for p, m in zip(state.points, state.states)}


def compare_exact(spec, native, prune=0.0, max_entries=DEFAULT_MAX_ENTRIES, threads=1, cap=DEFAULT_PATH_CAP):
    """Deterministic engine on ``spec``'s lattice against the path sum on ``native``'s."""
    det = propagate(init_resolved(spec.rho0, spec.y0, spec.lattice), spec.instrument, spec.n_steps, prune,
                    max_entries, threads)
    oracle = enumerate_paths(native.rho0, native.y0, native.instrument, native.n_steps, cap)
    a, b = _by_point(det), _by_point(oracle)
    zero = np.zeros((spec.dim, spec.dim))
    diff = max((float(np.max(np.abs(a.get(k, zero) - b.get(k, zero)))) for k in set(a) | set(b)), default=0.0)
    return {
        "max_abs_diff": diff,
        "det_clip_count": det.clip_count,
        "oracle_clip_count": oracle.clip_count,
        "det_support": len(det),
        "oracle_support": len(oracle),
        "n_paths": native.instrument.n_outcomes ** native.n_steps,
        "det_trace_sum": det.total_trace,
        "oracle_trace_sum": oracle.total_trace,
        "leaked_mass": det.leaked_mass,
    }


def compare_monte_carlo(spec, n_traj, seed, sigma=4.0, max_entries=DEFAULT_MAX_ENTRIES, threads=1):
    """Ensemble signal distribution against the deterministic one (no pruning)."""
    det = propagate(init_resolved(spec.rho0, spec.y0, spec.lattice), spec.instrument, spec.n_steps, 0.0,
                    max_entries, threads)
    est = ensemble_estimate(spec, n_traj, spec.n_steps, seed, threads)
    p = signal_distribution(det)
    q = signal_distribution(est.resolved)
    rows = []
    for key in sorted(set(p) | set(q)):
        truth, got = p.get(key, 0.0), q.get(key, 0.0)
        se = math.sqrt(max(truth * (1 - truth), 0.0) / n_traj)
        z = abs(got - truth) / se if se > 0 else (0.0 if got == truth else math.inf)
        rows.append({"index": list(key), "exact": truth, "estimate": got, "std_err": se, "z": z})
    within = sum(r["z"] <= sigma for r in rows)
    return {
        "total_variation": total_variation(p, q),
        "max_z": max(r["z"] for r in rows),
        "fraction_within": within / len(rows),
        "n_traj": n_traj,
        "seed": seed,
        "bins": rows,
    }


def cmd_compare(cfg, out):
    spec, native = _model(cfg)
    opts = cfg["compare"]
    report = _common_summary(cfg, spec)
    report["mode"] = opts["mode"]
    if opts["mode"] == "exact":
        # the path sum never prunes, so neither does the engine it is checked against
        res = compare_exact(spec, native, 0.0, cfg["max_entries"], cfg["threads"], cfg["path_cap"])
        res["tolerance"] = opts["tolerance"]
        res["passed"] = res["max_abs_diff"] <= opts["tolerance"]
    else:
        seed = _require(cfg, "seed")
        res = compare_monte_carlo(spec, cfg["n_traj"], seed, opts["sigma"], cfg["max_entries"], cfg["threads"])
        res["sigma"] = opts["sigma"]
        res["tv_max"] = opts["tv_max"]
        res["passed"] = res["fraction_within"] >= 0.95 and res["total_variation"] <= opts["tv_max"]
    report.update(res)
    write_json(out / "compare_report.json", report)
    return EXIT_OK if report["passed"] else EXIT_THRESHOLD


def random_linear_rule(depth, rng, contraction=0.9):
    """``s_n = sum_k a_k s_{n-1-k} + b x`` with ``sum |a_k| = contraction``."""
    a = rng.uniform(-1.0, 1.0, depth + 1)
    a *= contraction / np.sum(np.abs(a))
    b = rng.uniform(0.5, 1.5)

    def linear(n, x, hist):
        return hist @ a + b * x

    return NonMarkovianRule(depth, linear, name="random_linear"), a, b


def embed_check(depth, n_steps, seed, contraction=0.9):
    """Largest gap between the embedded first component and the buffered recursion."""
    rng = np.random.default_rng(seed)
    rule, a, b = random_linear_rule(depth, rng, contraction)
    xs = rng.choice([-1.0, 1.0], size=n_steps)
    s0 = float(rng.uniform(-1, 1))
    y0 = np.zeros(depth + 1)
    y0[0] = s0
    emb = embedded_trajectory(markovian_embed_history(rule), y0, xs)[:, 0]
    direct = history_buffer_trajectory(rule, s0, xs)
    return float(np.max(np.abs(emb - direct))), a, b


def cmd_embed_check(cfg, out):
    opts = cfg["embed"]
    seed = cfg.get("seed", 0)
    diff, a, b = embed_check(opts["depth"], opts["n_steps"], seed, opts["contraction"])
    report = _common_summary(cfg)
    report.update(depth=opts["depth"], n_steps=opts["n_steps"], seed=seed, coefficients=list(a), outcome_gain=b,
                  max_abs_diff=diff, tolerance=opts["tolerance"], passed=diff <= opts["tolerance"])
    write_json(out / "summary.json", report)
    return EXIT_OK if report["passed"] else EXIT_THRESHOLD


def cmd_kernel_check(cfg, out):
    opts = cfg["kernel"]
    gamma, t_max = opts["gamma"], opts["t_max"]
    if opts["drive"] == "constant":
        drive = lambda u: 1.0  # noqa: E731
    else:
        drive = math.sin
    try:
        rows = kernel_convergence_table(drive, gamma, t_max, opts["dts"])
    except ValueError as exc:
        raise ConfigError(f"kernel: {exc}") from None
    lo, hi = opts["ratio"] - opts["ratio_tol"], opts["ratio"] + opts["ratio_tol"]
    ratios = [r["ratio"] for r in rows if r["ratio"] is not None]
    passed = bool(ratios) and all(lo <= r <= hi for r in ratios)
    report = _common_summary(cfg)
    report.update(gamma=gamma, t_max=t_max, drive=opts["drive"], table=rows, ratio_window=[lo, hi], passed=passed)
    write_json(out / "summary.json", report)
    return EXIT_OK if passed else EXIT_THRESHOLD


COMMANDS = {
    "deterministic": cmd_simulate_deterministic,
    "trajectories": cmd_simulate_trajectories,
    "compare": cmd_compare,
    "embed-check": cmd_embed_check,
    "kernel-check": cmd_kernel_check,
}


def build_parser():
    p = argparse.ArgumentParser(prog="qfeedsim", description="Discrete-time quantum feedback simulator.")
    p.add_argument("config", help="TOML run configuration")
    p.add_argument("--engine", choices=ENGINES)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--format", choices=("csv", "json"))
    p.add_argument("--threads", type=int)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        for key in ("engine", "seed", "out", "format", "threads"):
            val = getattr(args, key)
            if val is not None:
                cfg[key] = TOP[key](val, f"--{key}")
        out = Path(cfg["out"])
        out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[cfg["engine"]](cfg, out)
    except ConfigError as exc:
        print(f"qfeedsim: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ArithmeticError, RuntimeError, ValueError) as exc:
        print(f"qfeedsim: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_THRESHOLD


if __name__ == "__main__":
    sys.exit(main())
