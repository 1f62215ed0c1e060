"""Command-line front end.

Usage::

    posspde converge-time --scheme split2,emi,ema --h 32 --dt 2^-4..2^-9 \\
        --ref-dt 2^-12 --paths 50 --lambda 3 --T 0.5
    posspde nonneg-census --scheme ema,emi,sexp,split2 --lambda 4 --h 16 \\
        --dt 2^-2..2^-8 --T 2 --paths 100
    posspde validate

Settings come from flags and an optional ``key = value`` file (``--config``);
flags win.  Every run writes ``manifest.json`` next to its CSVs.

Exit codes: 0 success, 1 failed validation check, 2 configuration or input
error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import platform
import sys
import time
from dataclasses import asdict, dataclass
from fractions import Fraction

import numpy as np

from . import __version__
from .errors import ConfigurationError, InputError, NumericalError, UnsupportedOperationError
from .experiments import (
    Problem,
    TrajectoryCache,
    convergence_study,
    nonneg_census,
    resolve_threads,
    run_path,
    write_census_csv,
    write_error_csv,
    write_rates_csv,
)
from .assembly import norm_h
from .noise import BrownianLattice
from .schemes import SchemeId

__all__ = ["main", "RunConfig", "parse_grid", "parse_config_file", "build_config"]

log = logging.getLogger(__name__)

EXPERIMENTS = ("converge-time", "converge-space", "nonneg-census", "single-path", "validate")
ALL_SCHEMES = ",".join(s.value for s in SchemeId)

# flag dest -> config key
FLAG_KEYS = {
    "experiment": "experiment",
    "scheme": "scheme.id",
    "h": "mesh.h",
    "ref_h": "mesh.ref_h",
    "dim": "mesh.dim",
    "dt": "time.dt",
    "ref_dt": "time.ref_dt",
    "T": "time.T",
    "paths": "paths",
    "lam": "noise.lambda",
    "noise": "noise.model",
    "modes": "noise.modes",
    "seed": "rng.master_seed",
    "solver": "solver.mode",
    "tol": "solver.tol",
    "max_iter": "solver.max_iter",
    "ref_scheme": "ref.scheme",
    "out": "output.dir",
    "record_runtime": "output.runtime",
    "cache": "cache.dir",
    "threads": "threads",
}
KNOWN_KEYS = set(FLAG_KEYS.values()) | {"scheme.theta"}

COMMON_DEFAULTS = {
    "mesh.dim": "2",
    "rng.master_seed": "0",
    "solver.mode": "auto",
    "solver.tol": "1e-10",
    "noise.modes": "1",
    "scheme.theta": "1",
    "output.dir": "out",
    "output.runtime": "false",
}

DEFAULTS = {
    "converge-time": {"scheme.id": "ema,emi,split2", "mesh.h": "32", "time.dt": "2^-4..2^-9",
                      "time.ref_dt": "2^-12", "paths": "50", "noise.lambda": "3",
                      "time.T": "0.5"},
    "converge-space": {"scheme.id": ALL_SCHEMES, "mesh.h": "2^-2..2^-4", "mesh.ref_h": "2^-5",
                       "time.dt": "2^-12", "paths": "50", "noise.lambda": "3",
                       "time.T": "0.5"},
    "nonneg-census": {"scheme.id": "ema,emi,sexp,split2", "mesh.h": "16",
                      "time.dt": "2^-2..2^-8", "paths": "100", "noise.lambda": "4",
                      "time.T": "2"},
    "single-path": {"scheme.id": "split2", "mesh.h": "16", "time.dt": "2^-8", "paths": "1",
                    "noise.lambda": "3", "time.T": "0.5"},
    "validate": {},
}


# ---------------------------------------------------------------------------
# parsing helpers

def _number(text: str) -> float:
    t = text.strip().replace(" ", "")
    try:
        if "^" in t:
            base, exp = t.split("^", 1)
            return float(base) ** float(exp)
        if "/" in t:
            return float(Fraction(t))
        return float(t)
    except (ValueError, ZeroDivisionError):
        raise ConfigurationError(f"cannot parse number {text!r}") from None


def _log2_exact(x: float, text: str) -> int:
    k = math.log2(x) if x > 0 else float("nan")
    if not math.isfinite(k) or abs(k - round(k)) > 1e-12:
        raise ConfigurationError(f"range endpoint {text!r} is not a power of two")
    return int(round(k))


def parse_grid(text: str) -> list[float]:
    """Expand a comma list of numbers and dyadic ranges ``2^-a..2^-b``.

    Ranges step through consecutive powers of two and include both ends;
    they may run up or down.
    """
    out: list[float] = []
    for item in str(text).split(","):
        item = item.strip()
        if not item:
            raise ConfigurationError(f"empty entry in grid {text!r}")
        if ".." in item:
            lo, hi = item.split("..", 1)
            a, b = _log2_exact(_number(lo), lo), _log2_exact(_number(hi), hi)
            step = 1 if b >= a else -1
            out.extend(2.0 ** k for k in range(a, b + step, step))
        else:
            out.append(_number(item))
    return out


def _subdivisions(value: float) -> int:
    # '32' and '2^-5' both mean 32 subdivisions per axis
    n = value if value >= 1 else 1.0 / value
    ni = int(round(n))
    if ni < 2 or abs(n - ni) > 1e-9 * n:
        raise ConfigurationError(f"mesh size {value:g} does not give an integer n >= 2")
    if ni & (ni - 1):
        raise ConfigurationError(f"n = {ni} is not a power of two")
    return ni


def _bool(text: str) -> bool:
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off", ""):
        return False
    raise ConfigurationError(f"cannot parse boolean {text!r}")


def _int(text: str, key: str) -> int:
    try:
        return int(str(text).strip())
    except ValueError:
        raise ConfigurationError(f"{key} must be an integer, got {text!r}") from None


def parse_config_file(path) -> dict[str, str]:
    """Read ``key = value`` lines; ``#`` starts a comment."""
    try:
        with open(path) as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise ConfigurationError(f"cannot read config file {path}: {exc}") from None
    out: dict[str, str] = {}
    for no, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{path}:{no}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in KNOWN_KEYS:
            raise ConfigurationError(f"{path}:{no}: unknown config key {key!r}")
        out[key] = value
    return out


# ---------------------------------------------------------------------------
# resolved configuration

@dataclass(frozen=True)
class RunConfig:
    """Fully resolved, validated run settings."""

    experiment: str
    schemes: tuple
    ns: tuple
    ref_n: int | None
    dts: tuple
    ref_dt: float | None
    T: float
    paths: int
    lams: tuple
    seed: int
    dim: int
    noise_model: str | None
    modes: int
    solver_mode: str
    tol: float
    max_iter: int | None
    ref_scheme: str | None
    out: str
    record_runtime: bool
    cache: str | None
    threads: int | None

    def to_json(self) -> dict:
        return asdict(self)


def _dyadic_dts(dts, T, key):
    for dt in dts:
        K = T / dt
        Ki = int(round(K))
        if dt <= 0 or Ki < 1 or abs(K - Ki) > 1e-9 * K or Ki & (Ki - 1):
            raise ConfigurationError(f"{key}={dt:g} is not a dyadic fraction T/2^k of T={T:g}")
    return tuple(float(d) for d in dts)


def build_config(values: dict[str, str]) -> RunConfig:
    """Validate raw ``key -> string`` settings into a :class:`RunConfig`."""
    exp = values.get("experiment")
    if exp not in EXPERIMENTS:
        raise ConfigurationError(f"experiment must be one of {', '.join(EXPERIMENTS)}, got {exp!r}")
    v = {**COMMON_DEFAULTS, **DEFAULTS[exp], **values}
    theta = _number(v["scheme.theta"])
    if theta != 1.0:
        raise ConfigurationError("scheme.theta is reserved and must be 1")
    dim = _int(v["mesh.dim"], "mesh.dim")
    if dim not in (1, 2):
        raise ConfigurationError("mesh.dim must be 1 or 2")
    modes = _int(v["noise.modes"], "noise.modes")
    max_iter = _int(v["solver.max_iter"], "solver.max_iter") if v.get("solver.max_iter") else None
    threads = _int(v["threads"], "threads") if v.get("threads") else None
    if threads is not None and threads < 1:
        raise ConfigurationError("threads must be >= 1")
    tol = _number(v["solver.tol"])
    if not tol > 0:
        raise ConfigurationError("solver.tol must be positive")
    common = dict(experiment=exp, seed=_int(v["rng.master_seed"], "rng.master_seed"), dim=dim,
                  noise_model=v.get("noise.model") or None, modes=modes,
                  solver_mode=v["solver.mode"], tol=tol, max_iter=max_iter,
                  out=v["output.dir"], record_runtime=_bool(v["output.runtime"]),
                  cache=v.get("cache.dir") or None, threads=threads)
    if exp == "validate":
        return RunConfig(schemes=(), ns=(), ref_n=None, dts=(), ref_dt=None, T=0.0, paths=0,
                         lams=(), ref_scheme=None, **common)
    if common["seed"] < 0:
        raise ConfigurationError("rng.master_seed must be >= 0")
    schemes = tuple(SchemeId.parse(s).value for s in v["scheme.id"].split(",") if s.strip())
    if not schemes:
        raise ConfigurationError("scheme.id is empty")
    T = _number(v["time.T"])
    if not T > 0:
        raise ConfigurationError("time.T must be positive")
    paths = _int(v["paths"], "paths")
    if paths < 1:
        raise ConfigurationError("paths must be >= 1")
    lams = tuple(parse_grid(v["noise.lambda"]))
    ns = tuple(_subdivisions(x) for x in parse_grid(v["mesh.h"]))
    dts = _dyadic_dts(parse_grid(v["time.dt"]), T, "time.dt")
    ref_n = _subdivisions(parse_grid(v["mesh.ref_h"])[0]) if v.get("mesh.ref_h") else None
    ref_dt = None
    if v.get("time.ref_dt"):
        ref_dt = _dyadic_dts(parse_grid(v["time.ref_dt"]), T, "time.ref_dt")[0]
    ref_scheme = SchemeId.parse(v["ref.scheme"]).value if v.get("ref.scheme") else None

    one_lambda = exp != "nonneg-census"
    if one_lambda and len(lams) != 1:
        raise ConfigurationError(f"{exp} takes a single noise.lambda")
    if exp == "converge-time":
        if len(ns) != 1:
            raise ConfigurationError("converge-time takes a single mesh size")
        if ref_n is not None and ref_n != ns[0]:
            raise ConfigurationError("converge-time runs the reference on the study mesh")
        ref_n = ns[0]
        if ref_dt is None:
            raise ConfigurationError("converge-time needs time.ref_dt")
    elif exp == "converge-space":
        if len(dts) != 1:
            raise ConfigurationError("converge-space takes a single time step")
        if ref_n is None:
            raise ConfigurationError("converge-space needs mesh.ref_h")
        if ref_dt is not None and ref_dt != dts[0]:
            raise ConfigurationError("converge-space runs the reference at the study time step")
        ref_dt = dts[0]
    elif exp == "nonneg-census":
        if len(ns) != 1:
            raise ConfigurationError("nonneg-census takes a single mesh size")
    elif exp == "single-path":
        if len(ns) != 1 or len(dts) != 1 or len(schemes) != 1:
            raise ConfigurationError("single-path takes a single scheme, mesh size and time step")
    return RunConfig(schemes=schemes, ns=ns, ref_n=ref_n, dts=dts, ref_dt=ref_dt, T=T,
                     paths=paths, lams=lams, ref_scheme=ref_scheme, **common)


# ---------------------------------------------------------------------------
# experiment runners; each returns (exit code, output file names)

def _run_convergence(cfg: RunConfig, axis: str):
    grid = cfg.dts if axis == "time" else cfg.ns
    reports = convergence_study(
        axis, cfg.schemes, grid, ref_dt=cfg.ref_dt, ref_n=cfg.ref_n, paths=cfg.paths,
        lam=cfg.lams[0], T=cfg.T, seed=cfg.seed, dim=cfg.dim, ref_scheme=cfg.ref_scheme,
        solver_mode=cfg.solver_mode, tol=cfg.tol, max_iter=cfg.max_iter,
        threads=cfg.threads, noise=cfg.noise_model, modes=cfg.modes)
    write_error_csv(reports, os.path.join(cfg.out, "errors.csv"), cfg.record_runtime)
    write_rates_csv(reports, os.path.join(cfg.out, "rates.csv"))
    param = "dt" if axis == "time" else "h"
    print(f"{'scheme':<10} {'slope vs ' + param:>14} {'residual':>10} {'points':>7}")
    for rep in reports:
        pts = int(rep.used.sum()) if rep.used is not None else 0
        print(f"{rep.scheme.value:<10} {rep.slope:>14.4f} {rep.residual:>10.4f} {pts:>7d}")
    return 0, ["errors.csv", "rates.csv"]


def _run_census(cfg: RunConfig):
    rows = []
    for scheme in cfg.schemes:
        for lam in cfg.lams:
            rows += nonneg_census(scheme, lam, cfg.ns[0], cfg.dts, T=cfg.T, paths=cfg.paths,
                                  seed=cfg.seed, dim=cfg.dim, solver_mode=cfg.solver_mode,
                                  tol=cfg.tol, max_iter=cfg.max_iter, threads=cfg.threads,
                                  noise=cfg.noise_model, modes=cfg.modes)
    write_census_csv(rows, os.path.join(cfg.out, "census.csv"))
    print(f"{'scheme':<10} {'lambda':>7} {'dt':>12} {'k/paths':>9}")
    for r in rows:
        print(f"{r.scheme.value:<10} {r.lam:>7g} {r.dt:>12g} {r.k_nonneg:>5d}/{r.paths}")
    return 0, ["census.csv"]


def _run_single(cfg: RunConfig):
    import csv

    n, dt = cfg.ns[0], cfg.dts[0]
    prob = Problem.builtin(n, cfg.lams[0], cfg.dim, cfg.noise_model, cfg.modes)
    K = int(round(cfg.T / dt))
    cache = TrajectoryCache(cfg.cache) if cfg.cache else None
    files = ["trajectory.csv"]
    with open(os.path.join(cfg.out, "trajectory.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path", "t", "min", "max", "norm_h"])
        for p in range(cfg.paths):
            lat = BrownianLattice(cfg.seed, p, prob.model.M, 2 * K, cfg.T)
            tr = run_path(cfg.schemes[0], prob.mesh, prob.ops, prob.model, lat, dt, cfg.T,
                          solver_mode=cfg.solver_mode, tol=cfg.tol, cache=cache)
            nh = norm_h(tr.snapshots, prob.ops)
            for t, s, e in zip(tr.times, tr.snapshots, nh):
                w.writerow([p, repr(float(t)), repr(float(s.min())), repr(float(s.max())),
                            repr(float(e))])
            print(f"path {p}: watermark {tr.watermark:.3e}, "
                  f"nonnegative {'yes' if tr.nonnegative() else 'no'}, "
                  f"final ||u||_h {nh[-1]:.6e}")
    return 0, files


def _run_validate(cfg: RunConfig):
    from .validation import run_checks

    checks = run_checks()
    for c in checks:
        print(f"{'PASS' if c.passed else 'FAIL'}  {c.name}: {c.detail}")
    failed = sum(not c.passed for c in checks)
    print(f"{len(checks) - failed}/{len(checks)} checks passed")
    return (0 if failed == 0 else 1), []


def _dispatch(cfg: RunConfig):
    if cfg.experiment == "converge-time":
        return _run_convergence(cfg, "time")
    if cfg.experiment == "converge-space":
        return _run_convergence(cfg, "space")
    if cfg.experiment == "nonneg-census":
        return _run_census(cfg)
    if cfg.experiment == "single-path":
        return _run_single(cfg)
    return _run_validate(cfg)


def _write_manifest(cfg: RunConfig, raw: dict, files, elapsed, code):
    manifest = {
        "experiment": cfg.experiment,
        "seed": cfg.seed,
        "version": __version__,
        "settings": raw,
        "config": cfg.to_json(),
        "outputs": files,
        "exit_code": code,
        "timings": {"wall_s": elapsed},
        "threads": resolve_threads(cfg.threads),
        "environment": {"python": platform.python_version(), "numpy": np.__version__},
    }
    with open(os.path.join(cfg.out, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# entry point

def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="posspde",
        description="Positivity-preserving finite element schemes for the stochastic heat "
                    "equation: convergence studies, nonnegativity census, validation.")
    p.add_argument("experiment_pos", nargs="?", choices=EXPERIMENTS, metavar="EXPERIMENT",
                   help=f"one of {', '.join(EXPERIMENTS)}")
    p.add_argument("--experiment", choices=EXPERIMENTS)
    p.add_argument("--config", help="key = value settings file (flags override it)")
    p.add_argument("--scheme", help=f"comma list from {ALL_SCHEMES}")
    p.add_argument("--h", help="mesh size(s): n or 2^-k, lists and ranges like 2^-2..2^-4")
    p.add_argument("--ref-h", dest="ref_h", help="reference mesh size")
    p.add_argument("--dim", help="spatial dimension, 1 or 2")
    p.add_argument("--dt", help="time step(s), e.g. 2^-4..2^-9")
    p.add_argument("--ref-dt", dest="ref_dt", help="reference time step")
    p.add_argument("--T", help="end time")
    p.add_argument("--paths", help="number of Brownian paths")
    p.add_argument("--lambda", dest="lam", help="noise strength (a list for the census)")
    p.add_argument("--noise", help="noise model, sine2d or sine1d")
    p.add_argument("--modes", help="number of noise modes M")
    p.add_argument("--seed", help="master seed")
    p.add_argument("--solver", help="auto, cg or spectral")
    p.add_argument("--tol", help="CG relative tolerance")
    p.add_argument("--max-iter", dest="max_iter", help="CG iteration cap")
    p.add_argument("--ref-scheme", dest="ref_scheme",
                   help="scheme for the reference runs (default: each scheme's own)")
    p.add_argument("--threads", help="worker threads (SPDE_THREADS caps this)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--record-runtime", dest="record_runtime", action="store_const",
                   const="true", help="fill the runtime_s CSV column")
    p.add_argument("--cache", help="trajectory cache directory (single-path)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    """Run the CLI and return the exit code."""
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:               # argparse: usage errors exit 2, --help exits 0
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.experiment_pos and args.experiment and args.experiment_pos != args.experiment:
            raise ConfigurationError("experiment given twice with different values")
        raw = parse_config_file(args.config) if args.config else {}
        flags = vars(args)
        for dest, key in FLAG_KEYS.items():
            if flags.get(dest) is not None:
                raw[key] = flags[dest]
        if args.experiment_pos:
            raw["experiment"] = args.experiment_pos
        cfg = build_config(raw)
        os.makedirs(cfg.out, exist_ok=True)
        t0 = time.perf_counter()
        code, files = _dispatch(cfg)
        _write_manifest(cfg, raw, files, time.perf_counter() - t0, code)
        return code
    except (ConfigurationError, InputError, UnsupportedOperationError) as exc:
        print(f"posspde: error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"posspde: numerical failure: {exc}", file=sys.stderr)
        return 3
