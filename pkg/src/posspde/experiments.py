"""Monte Carlo driver: trajectories, strong error, census, energy check.

Paths are processed in fixed-size chunks (``CHUNK_PATHS``).  Each chunk is a
batch that advances all its paths together; chunks may run on worker
threads, and their partial sums are combined in ascending path-id order.
Chunk composition never depends on the worker count, so every result is
bitwise reproducible for a given seed.

The convergence studies stream: the reference run and all study runs of a
chunk advance in lockstep on the reference time grid, and squared errors
are accumulated per checkpoint on the fly, so no reference trajectory is
ever stored.
"""

from __future__ import annotations

import csv
import hashlib
import logging
import math
import os
import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.integrate import trapezoid

from .assembly import FemOperators, assemble, interpolate, norm_h
from .errors import ConfigurationError, InputError
from .mesh import Mesh, build_interval_mesh, build_unit_square_mesh
from .noise import BrownianLattice, NoiseModel, batch_increments_at, builtin_model, increments_at, lattice_batch
from .schemes import SchemeId, Stepper

__all__ = [
    "Trajectory",
    "ErrorReport",
    "CensusRow",
    "EnergyReport",
    "Problem",
    "run_path",
    "prolong",
    "prolongation_matrix",
    "error_metric",
    "fit_slope",
    "convergence_study",
    "nonneg_census",
    "energy_check",
    "TrajectoryCache",
    "write_error_csv",
    "write_rates_csv",
    "write_census_csv",
    "resolve_threads",
    "POSITIVITY_RTOL",
]

log = logging.getLogger(__name__)

CHUNK_PATHS = 10
POSITIVITY_RTOL = 1e-12


def u0_sine(*xs):
    """``prod_a sin(pi x_a)``, the default initial condition."""
    return np.prod([np.sin(np.pi * x) for x in xs], axis=0)


def _unit_mesh(dim, n):
    return build_unit_square_mesh(n) if dim == 2 else build_interval_mesh(n)


@dataclass(frozen=True, eq=False)
class Problem:
    """Mesh, operators and noise model at one resolution."""

    mesh: Mesh
    ops: FemOperators
    model: NoiseModel

    @classmethod
    def builtin(cls, n: int, lam: float, dim: int = 2, noise: str | None = None,
                modes: int = 1) -> "Problem":
        mesh = _unit_mesh(dim, n)
        noise = noise or ("sine2d" if dim == 2 else "sine1d")
        return cls(mesh, assemble(mesh), builtin_model(noise, mesh, lam, modes))

    def initial_state(self, u0=u0_sine) -> np.ndarray:
        return interpolate(self.mesh, u0).values


def resolve_threads(threads: int | None = None) -> int:
    """Worker count: ``threads`` (default: CPU count), capped by ``SPDE_THREADS``."""
    n = threads or os.cpu_count() or 1
    env = os.environ.get("SPDE_THREADS")
    if env:
        try:
            cap = int(env)
        except ValueError:
            raise ConfigurationError(f"SPDE_THREADS={env!r} is not an integer") from None
        if cap < 1:
            raise ConfigurationError("SPDE_THREADS must be >= 1")
        n = min(n, cap)
    return max(1, int(n))


def _chunks(paths):
    ids = np.arange(paths)
    return [ids[i:i + CHUNK_PATHS] for i in range(0, paths, CHUNK_PATHS)]


def _map_chunks(fn, paths, threads):
    chunks = _chunks(paths)
    workers = min(resolve_threads(threads), len(chunks))
    if workers <= 1:
        return [fn(c) for c in chunks]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, chunks))


def _steps(T, dt, what="T/dt"):
    K = T / dt
    Ki = int(round(K))
    if Ki < 1:
        raise ConfigurationError(f"{what} = {K:g}: need at least one step (T > 0)")
    if abs(K - Ki) > 1e-9 * max(1.0, K):
        raise ConfigurationError(f"{what} = {K:g} is not an integer")
    return Ki


def _pow2(k, what):
    if k < 1 or k & (k - 1):
        raise ConfigurationError(f"{what} = {k} must be a power of two")
    return k


def _rel_min(U):
    # min_i U_i / max_i |U_i| per batch entry; 0 for the zero state
    scale = np.max(np.abs(U), axis=-1)
    return np.min(U, axis=-1) / np.where(scale > 0, scale, 1.0)


# ---------------------------------------------------------------------------
# single trajectories

@dataclass(eq=False)
class Trajectory:
    """Nodal snapshots of one path at checkpoint times.

    ``watermark`` is the minimum nodal value over every step (not only the
    stored snapshots); ``rel_watermark`` the minimum of
    ``min(U_n) / max|U_n|`` over steps.
    """

    scheme: SchemeId
    mesh: Mesh
    dt: float
    T: float
    times: np.ndarray
    snapshots: np.ndarray
    watermark: float
    rel_watermark: float
    path_id: int = 0

    @property
    def final(self) -> np.ndarray:
        return self.snapshots[-1]

    def nonnegative(self, rtol: float = POSITIVITY_RTOL) -> bool:
        return bool(self.rel_watermark >= -rtol)


def _lattice_factor(K_fine, K):
    if K_fine % K:
        raise ConfigurationError(
            f"lattice with {K_fine} fine steps cannot be coarsened to {K} steps")
    return _pow2(K_fine // K, "lattice coarsening factor")


def run_path(scheme, mesh: Mesh, ops: FemOperators, noise_model: NoiseModel,
             lattice: BrownianLattice, dt: float, T: float, u0=u0_sine,
             stride: int = 1, solver_mode: str = "auto", tol: float = 1e-10,
             cache: "TrajectoryCache | None" = None) -> Trajectory:
    """Integrate one path from ``pi_h u0`` over ``K = T / dt`` steps.

    Snapshots are kept every ``stride`` steps (``K`` must be divisible by
    it).  ``lattice`` must cover ``T`` with a power-of-two multiple of
    ``K`` fine steps (twice ``K`` at least for ``strang_b``).
    """
    scheme = SchemeId.parse(scheme)
    K = _steps(T, dt)
    if abs(lattice.T - T) > 1e-12 * T:
        raise ConfigurationError("lattice end time differs from T")
    factor = _lattice_factor(lattice.K_fine, K)
    if K % stride:
        raise ConfigurationError("stride must divide the number of steps")
    stepper = Stepper(scheme, ops, noise_model, dt, solver_mode, tol)
    if stepper.needs_halves and factor < 2:
        raise ConfigurationError("strang_b needs a lattice at least twice as fine as dt")
    U = interpolate(mesh, u0).values if callable(u0) else np.asarray(u0, dtype=float).copy()
    use_cache = cache is not None and stride == 1
    if use_cache:
        snaps = cache.load(mesh, scheme, lattice.master_seed, lattice.path_id, dt, T,
                           noise_model, K)
        if snaps is not None:
            return Trajectory(scheme, mesh, dt, T, np.arange(K + 1) * dt, snaps,
                              float(snaps.min()), float(np.min(_rel_min(snaps))),
                              lattice.path_id)
    noise = increments_at(lattice, factor)
    snaps = [U.copy()]
    wm, rwm = float(U.min()), float(_rel_min(U))
    for n in range(K):
        G = noise.G[:, n]
        G1 = None if noise.G1 is None else noise.G1[:, n]
        G2 = None if noise.G2 is None else noise.G2[:, n]
        U = stepper.step(U, G, G1, G2)
        wm = min(wm, float(U.min()))
        rwm = min(rwm, float(_rel_min(U)))
        if (n + 1) % stride == 0:
            snaps.append(U.copy())
    snaps = np.array(snaps)
    times = np.arange(0, K + 1, stride) * dt
    traj = Trajectory(scheme, mesh, dt, T, times, snaps, wm, rwm, lattice.path_id)
    if use_cache:
        cache.store(traj, lattice.master_seed, noise_model)
    return traj


# ---------------------------------------------------------------------------
# prolongation and the error metric

def prolongation_matrix(coarse: Mesh, fine: Mesh) -> sp.csr_matrix:
    """Sparse map from coarse to fine nodal values (exact P1 evaluation)."""
    if not (coarse.structured and fine.structured) or coarse.dim != fine.dim:
        raise ConfigurationError("prolongation needs structured meshes of equal dimension")
    if fine.n % coarse.n:
        raise ConfigurationError(f"meshes are not nested: n={coarse.n} does not divide {fine.n}")
    r, nc = fine.n // coarse.n, coarse.n
    raw = fine.raw_points[fine.dof_vertices].astype(np.int64)     # fine integer coords
    cell, rem = np.divmod(raw, r)
    loc = rem / r

    def dof(*idx):
        idx = np.stack(idx, axis=-1)
        inside = np.all((idx >= 1) & (idx <= nc - 1), axis=-1)
        if coarse.dim == 1:
            ids = idx[:, 0] - 1
        else:
            ids = (idx[:, 1] - 1) * (nc - 1) + (idx[:, 0] - 1)
        return np.where(inside, ids, -1)

    rows, cols, vals = [], [], []

    def add(ids, w):
        keep = (ids >= 0) & (w != 0)
        rows.append(np.flatnonzero(keep))
        cols.append(ids[keep])
        vals.append(w[keep])

    if coarse.dim == 1:
        c, xi = cell[:, 0], loc[:, 0]
        add(dof(c), 1 - xi)
        add(dof(c + 1), xi)
    else:
        ci, cj = cell[:, 0], cell[:, 1]
        xi, eta = loc[:, 0], loc[:, 1]
        lower = xi >= eta
        add(dof(ci, cj), np.where(lower, 1 - xi, 1 - eta))
        add(dof(ci + 1, cj), np.where(lower, xi - eta, 0.0))
        add(dof(ci, cj + 1), np.where(lower, 0.0, eta - xi))
        add(dof(ci + 1, cj + 1), np.where(lower, eta, xi))
    P = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(fine.num_dofs, coarse.num_dofs),
    ).tocsr()
    P.sort_indices()
    return P


def prolong(coarse_field, coarse_mesh: Mesh, fine_mesh: Mesh) -> np.ndarray:
    """Evaluate a coarse P1 function at the fine DOFs (batched over leading axes)."""
    v = np.asarray(getattr(coarse_field, "values", coarse_field), dtype=float)
    if v.shape[-1] != coarse_mesh.num_dofs:
        raise InputError("field length does not match the coarse mesh")
    if coarse_mesh.n == fine_mesh.n and coarse_mesh.dim == fine_mesh.dim:
        return v.copy()
    P = prolongation_matrix(coarse_mesh, fine_mesh)
    flat = v.reshape(-1, v.shape[-1])
    return (P @ flat.T).T.reshape(v.shape[:-1] + (fine_mesh.num_dofs,))


def _sq_norms(ops, d):
    # per-row squared L2 and H1-seminorm of P1 differences d: (P, N)
    l2 = np.einsum("pi,pi->p", d, (ops.Mc @ d.T).T)
    h1 = np.einsum("pi,pi->p", d, (ops.S @ d.T).T)
    return l2, h1


def _metric(l2_mean, h1_mean, times):
    return float(np.max(l2_mean) + trapezoid(h1_mean, times))


def error_metric(traj, ref_traj, ops_fine: FemOperators) -> float:
    """Strong error: ``sup_n E||e(t_n)||^2 + int_0^T E||grad e||^2 dt``.

    ``traj`` and ``ref_traj`` are trajectories (or equal-length lists of
    them, path by path).  The sup and the trapezium rule run over
    ``traj.times``, which must all be reference checkpoints.  Coarse states
    are prolonged to the reference mesh first.
    """
    trajs = traj if isinstance(traj, (list, tuple)) else [traj]
    refs = ref_traj if isinstance(ref_traj, (list, tuple)) else [ref_traj]
    if len(trajs) != len(refs) or not trajs:
        raise InputError("need one reference trajectory per path")
    times = trajs[0].times
    l2 = np.zeros(times.size)
    h1 = np.zeros(times.size)
    for tr, rf in zip(trajs, refs):
        if tr.times.shape != times.shape or not np.allclose(tr.times, times, rtol=0, atol=1e-12):
            raise InputError("trajectories have different checkpoints")
        idx = np.searchsorted(rf.times, times - 1e-12)
        if np.any(idx >= rf.times.size) or not np.allclose(rf.times[np.minimum(idx, rf.times.size - 1)], times, rtol=0, atol=1e-12):
            raise InputError("checkpoint times are not reference checkpoints")
        if rf.mesh.num_dofs != ops_fine.num_dofs:
            raise InputError("reference trajectory is not on ops_fine's mesh")
        states = prolong(tr.snapshots, tr.mesh, rf.mesh)
        a, b = _sq_norms(ops_fine, states - rf.snapshots[idx])
        l2 += a
        h1 += b
    P = len(trajs)
    return _metric(l2 / P, h1 / P, times)


def fit_slope(params, metrics, solver_tol: float = 1e-10):
    """Least-squares slope of ``log2(metric)`` against ``log2(param)``.

    The two points nearest the reference (smallest parameters) are dropped
    when their metric sits within ``10 * solver_tol``.  Returns
    ``(slope, rms_residual, used_mask)``.
    """
    params = np.asarray(params, dtype=float)
    metrics = np.asarray(metrics, dtype=float)
    use = np.isfinite(metrics) & (metrics > 0)
    for i in np.argsort(params)[:2]:
        if metrics[i] < 10 * solver_tol:
            use[i] = False
    if use.sum() < 3:
        raise InputError("slope fit needs at least 3 usable points")
    x, y = np.log2(params[use]), np.log2(metrics[use])
    coef, res, *_ = np.polyfit(x, y, 1, full=True)
    rms = math.sqrt(float(res[0]) / use.sum()) if res.size else 0.0
    return float(coef[0]), rms, use


# ---------------------------------------------------------------------------
# convergence studies

@dataclass
class ErrorReport:
    """Metric per grid point for one scheme, with the fitted log-log slope."""

    scheme: SchemeId
    axis: str
    hs: np.ndarray
    dts: np.ndarray
    metrics: np.ndarray
    slope: float
    residual: float
    paths: int
    runtime_s: float
    ref_scheme: SchemeId | None = None
    used: np.ndarray | None = None

    @property
    def params(self):
        return self.dts if self.axis == "time" else self.hs

    def running_slopes(self):
        """Least-squares slope over the first ``i+1`` points (nan for i = 0)."""
        out = np.full(self.metrics.size, np.nan)
        x = np.log2(self.params)
        y = np.log2(np.where(self.metrics > 0, self.metrics, np.nan))
        for i in range(1, self.metrics.size):
            xs, ys = x[: i + 1], y[: i + 1]
            ok = np.isfinite(ys)
            if ok.sum() >= 2:
                out[i] = np.polyfit(xs[ok], ys[ok], 1)[0]
        return out


@dataclass
class _Point:
    scheme: SchemeId
    n: int
    dt: float


def _study_chunk(path_ids, *, ref_scheme, ref_prob, dt_ref, points, probs, T, lam,
                 seed, K_fine, solver_mode, tol, max_iter, u0):
    P = len(path_ids)
    dB = lattice_batch(seed, path_ids, ref_prob.model.M, K_fine, T)
    K_ref = _steps(T, dt_ref)
    ref_step = Stepper(ref_scheme, ref_prob.ops, ref_prob.model, dt_ref, solver_mode, tol, max_iter)
    ref_noise = batch_increments_at(dB, K_fine // K_ref, T)
    U_ref = np.tile(ref_prob.initial_state(u0), (P, 1))
    runs = []
    for pt in points:
        prob = probs[pt.n]
        K = _steps(T, pt.dt)
        st = Stepper(pt.scheme, prob.ops, prob.model, pt.dt, solver_mode, tol, max_iter)
        Pm = None if pt.n == ref_prob.mesh.n else prolongation_matrix(prob.mesh, ref_prob.mesh)
        runs.append(dict(step=st, noise=batch_increments_at(dB, K_fine // K, T),
                         ratio=K_ref // K, U=np.tile(prob.initial_state(u0), (P, 1)),
                         Pm=Pm, l2=np.zeros(K + 1), h1=np.zeros(K + 1)))

    def accumulate(run, n):
        U = run["U"] if run["Pm"] is None else (run["Pm"] @ run["U"].T).T
        a, b = _sq_norms(ref_prob.ops, U - U_ref)
        run["l2"][n] = a.sum()
        run["h1"][n] = b.sum()

    for run in runs:
        accumulate(run, 0)
    for j in range(1, K_ref + 1):
        U_ref = _advance(ref_step, U_ref, ref_noise, j - 1)
        for run in runs:
            if j % run["ratio"] == 0:
                n = j // run["ratio"]
                run["U"] = _advance(run["step"], run["U"], run["noise"], n - 1)
                accumulate(run, n)
    return [(run["l2"], run["h1"]) for run in runs]


def _advance(stepper, U, noise, n):
    G = noise.G[..., n]
    G1 = None if noise.G1 is None else noise.G1[..., n]
    G2 = None if noise.G2 is None else noise.G2[..., n]
    return stepper.step(U, G, G1, G2)


def convergence_study(axis: str, schemes, grid, *, ref_dt: float, ref_n: int,
                      n: int | None = None, dt: float | None = None, paths: int = 50,
                      lam: float = 3.0, T: float = 0.5, seed: int = 0, dim: int = 2,
                      ref_scheme=None, solver_mode: str = "auto", tol: float = 1e-10,
                      max_iter: int | None = None, threads: int | None = None, u0=u0_sine,
                      noise: str | None = None, modes: int = 1) -> list[ErrorReport]:
    """Strong-error study along the time or space axis.

    Parameters
    ----------
    axis : {'time', 'space'}
        ``time``: ``grid`` lists time steps at fixed mesh ``n``
        (default ``ref_n``).  ``space``: ``grid`` lists subdivision counts
        at fixed time step ``dt`` (default ``ref_dt``).
    schemes : iterable of scheme names
    ref_dt, ref_n : reference resolution; must be strictly finer than
        every study point along the studied axis.
    ref_scheme : scheme used for the reference, default each scheme's own.

    All runs share the Brownian paths of ``seed`` (common random numbers).
    """
    if axis not in ("time", "space"):
        raise ConfigurationError("axis must be 'time' or 'space'")
    schemes = [SchemeId.parse(s) for s in schemes]
    K_ref = _pow2(_steps(T, ref_dt, "T/ref_dt"), "T/ref_dt")
    if paths < 1:
        raise ConfigurationError("paths must be >= 1")
    if axis == "time":
        n = ref_n if n is None else n
        dts = [float(d) for d in grid]
        if any(d <= ref_dt for d in dts):
            raise ConfigurationError("reference time step must be finer than every study dt")
        if n != ref_n:
            raise ConfigurationError("time study runs on the reference mesh")
        for d in dts:
            _pow2(_steps(T, d), "T/dt")
        pts_per_scheme = [[_Point(s, n, d) for d in dts] for s in schemes]
    else:
        dt = ref_dt if dt is None else dt
        if abs(dt - ref_dt) > 1e-15:
            raise ConfigurationError("space study runs at the reference time step")
        ns = [int(v) for v in grid]
        if any(v >= ref_n or ref_n % v for v in ns):
            raise ConfigurationError("reference mesh must be a strict refinement of every study mesh")
        pts_per_scheme = [[_Point(s, v, dt) for v in ns] for s in schemes]
    K_fine = 2 * K_ref
    levels = {p.n for pts in pts_per_scheme for p in pts} | {ref_n}
    probs = {v: Problem.builtin(v, lam, dim, noise, modes) for v in levels}
    groups = []
    if ref_scheme is None:
        for s, pts in zip(schemes, pts_per_scheme):
            groups.append((s, pts))
    else:
        groups.append((SchemeId.parse(ref_scheme), [p for pts in pts_per_scheme for p in pts]))
    results = {s: [] for s in schemes}
    runtime = {s: 0.0 for s in schemes}
    for rs, pts in groups:
        t0 = time.perf_counter()

        def work(ids, rs=rs, pts=pts):
            return _study_chunk(ids, ref_scheme=rs, ref_prob=probs[ref_n], dt_ref=ref_dt,
                                points=pts, probs=probs, T=T, lam=lam, seed=seed,
                                K_fine=K_fine, solver_mode=solver_mode, tol=tol, max_iter=max_iter,
                                u0=u0)

        parts = _map_chunks(work, paths, threads)
        group_schemes = {p.scheme for p in pts}
        for s in group_schemes:
            runtime[s] += (time.perf_counter() - t0) / len(group_schemes)
        for i, pt in enumerate(pts):
            l2 = sum(part[i][0] for part in parts) / paths
            h1 = sum(part[i][1] for part in parts) / paths
            times = np.arange(l2.size) * pt.dt
            results[pt.scheme].append((pt, _metric(l2, h1, times)))
    out = []
    for s in schemes:
        entries = results[s]
        hs = np.array([1.0 / p.n for p, _ in entries])
        dts = np.array([p.dt for p, _ in entries])
        metrics = np.array([m for _, m in entries])
        params = dts if axis == "time" else hs
        try:
            slope, resid, used = fit_slope(params, metrics, tol)
        except InputError:
            slope, resid, used = float("nan"), float("nan"), None
        out.append(ErrorReport(s, axis, hs, dts, metrics, slope, resid, paths, runtime[s],
                               SchemeId.parse(ref_scheme) if ref_scheme else s, used))
    return out


# ---------------------------------------------------------------------------
# nonnegativity census

@dataclass
class CensusRow:
    scheme: SchemeId
    lam: float
    h: float
    dt: float
    paths: int
    k_nonneg: int


def _census_chunk(path_ids, *, scheme, prob, dts, T, seed, K_fine, solver_mode, tol, max_iter,
                  rtol, u0):
    dB = lattice_batch(seed, path_ids, prob.model.M, K_fine, T)
    U0 = np.tile(prob.initial_state(u0), (len(path_ids), 1))
    out = []
    for dt in dts:
        K = _steps(T, dt)
        st = Stepper(scheme, prob.ops, prob.model, dt, solver_mode, tol, max_iter)
        noise = batch_increments_at(dB, K_fine // K, T)
        U = U0
        ok = _rel_min(U) >= -rtol
        for n in range(K):
            U = _advance(st, U, noise, n)
            ok &= _rel_min(U) >= -rtol
        out.append(ok)
    return out


def nonneg_census(scheme, lam: float, n: int, dts, T: float = 2.0, paths: int = 100,
                  seed: int = 0, dim: int = 2, solver_mode: str = "auto", tol: float = 1e-10,
                  max_iter: int | None = None, threads: int | None = None,
                  rtol: float = POSITIVITY_RTOL, u0=u0_sine, noise: str | None = None,
                  modes: int = 1) -> list[CensusRow]:
    """Count paths whose state stays nonnegative over ``[0, T]``.

    A state passes a step when ``min(U) >= -rtol * max|U|``.  All time steps
    share the same Brownian paths.
    """
    scheme = SchemeId.parse(scheme)
    dts = [float(d) for d in dts]
    K_fine = 2 * max(_pow2(_steps(T, d), "T/dt") for d in dts)
    prob = Problem.builtin(n, lam, dim, noise, modes)

    def work(ids):
        return _census_chunk(ids, scheme=scheme, prob=prob, dts=dts, T=T, seed=seed,
                             K_fine=K_fine, solver_mode=solver_mode, tol=tol,
                             max_iter=max_iter, rtol=rtol, u0=u0)

    parts = _map_chunks(work, paths, threads)
    rows = []
    for i, dt in enumerate(dts):
        k = int(sum(int(np.count_nonzero(part[i])) for part in parts))
        rows.append(CensusRow(scheme, float(lam), 1.0 / n, dt, paths, k))
    return rows


# ---------------------------------------------------------------------------
# energy estimate

@dataclass
class EnergyReport:
    """Mean of ``||u_h(t)||_h^2`` against ``exp(t c_f^2 c_e^2 M) ||u_h(0)||_h^2``."""

    times: np.ndarray
    mean: np.ndarray
    stderr: np.ndarray
    bound: np.ndarray
    paths: int
    monotone: bool
    ok: np.ndarray = field(init=False)

    def __post_init__(self):
        self.ok = self.mean <= self.bound + 3 * self.stderr

    @property
    def passed(self) -> bool:
        return bool(np.all(self.ok))


def _energy_chunk(path_ids, *, scheme, prob, dt, K, checkpoints, T, seed, solver_mode, tol,
                  max_iter, u0):
    P = len(path_ids)
    dB = lattice_batch(seed, path_ids, prob.model.M, 2 * K, T)
    st = Stepper(scheme, prob.ops, prob.model, dt, solver_mode, tol, max_iter)
    noise = batch_increments_at(dB, 2, T)
    U = np.tile(prob.initial_state(u0), (P, 1))
    prev = norm_h(U, prob.ops) ** 2
    monotone = True
    vals = np.zeros((len(checkpoints), P))
    for i, c in enumerate(checkpoints):
        if c == 0:
            vals[i] = prev
    for n in range(1, K + 1):
        U = _advance(st, U, noise, n - 1)
        cur = norm_h(U, prob.ops) ** 2
        monotone &= bool(np.all(cur <= prev))
        prev = cur
        for i, c in enumerate(checkpoints):
            if c == n:
                vals[i] = cur
    return vals, monotone


def energy_check(times, paths: int = 500, scheme="split2", lam: float = 3.0, n: int = 16,
                 dt: float = 2.0**-10, seed: int = 0, dim: int = 2, solver_mode: str = "auto",
                 tol: float = 1e-10, max_iter: int | None = None, threads: int | None = None,
                 u0=u0_sine, noise: str | None = None, modes: int = 1) -> EnergyReport:
    """Compare the sample mean of ``||u_h(t)||_h^2`` with the energy bound.

    Each requested time is rounded to the nearest step ``t_n = n dt`` and
    the bound is evaluated at ``t_n``.  ``monotone`` reports whether
    ``||u_h||_h`` decreased at every step on every path.
    """
    times = np.asarray(times, dtype=float)
    checkpoints = [int(round(t / dt)) for t in times]
    K = max(1, max(checkpoints))
    K = 1 << (K - 1).bit_length()          # lattice needs a power of two
    T = K * dt
    prob = Problem.builtin(n, lam, dim, noise, modes)
    scheme = SchemeId.parse(scheme)

    def work(ids):
        return _energy_chunk(ids, scheme=scheme, prob=prob, dt=dt, K=K, checkpoints=checkpoints,
                             T=T, seed=seed, solver_mode=solver_mode, tol=tol,
                             max_iter=max_iter, u0=u0)

    parts = _map_chunks(work, paths, threads)
    vals = np.concatenate([p[0] for p in parts], axis=1)
    monotone = all(p[1] for p in parts)
    t_n = np.array(checkpoints) * dt
    model = prob.model
    e0 = float(norm_h(prob.initial_state(u0), prob.ops) ** 2)
    growth = model.spec.c_f ** 2 * model.c_e ** 2 * model.M
    stderr = vals.std(axis=1, ddof=1) / np.sqrt(paths) if paths > 1 else np.zeros(len(t_n))
    return EnergyReport(times=t_n, mean=vals.mean(axis=1), stderr=stderr,
                        bound=np.exp(t_n * growth) * e0, paths=paths, monotone=monotone)


# ---------------------------------------------------------------------------
# trajectory cache

class TrajectoryCache:
    """Binary snapshot files keyed by a content hash.

    File layout: ``magic (8 bytes) | version (uint32) | N (uint64) | K
    (uint64)`` followed by ``(K + 1) * N`` little-endian doubles, row-major
    by checkpoint.
    """

    MAGIC = b"SPDETRJ\x00"
    VERSION = 1
    _HEADER = struct.Struct("<8sIQQ")

    def __init__(self, directory):
        self.directory = os.fspath(directory)
        os.makedirs(self.directory, exist_ok=True)

    @staticmethod
    def key(mesh: Mesh, scheme, seed, path_id, dt, T, model: NoiseModel) -> str:
        hsh = hashlib.sha256()
        spec = model.spec
        lam = getattr(spec, "lam", None)
        parts = [mesh.dim, mesh.n, mesh.num_dofs, SchemeId.parse(scheme).value, int(seed),
                 int(path_id), float(dt).hex(), float(T).hex(), repr(lam)]
        hsh.update(repr(parts).encode())
        hsh.update(np.ascontiguousarray(model.E).tobytes())
        return hsh.hexdigest()[:32]

    def path_for(self, key: str) -> str:
        return os.path.join(self.directory, key + ".traj")

    def write(self, path, snapshots: np.ndarray):
        snaps = np.ascontiguousarray(snapshots, dtype="<f8")
        K = snaps.shape[0] - 1
        with open(path, "wb") as fh:
            fh.write(self._HEADER.pack(self.MAGIC, self.VERSION, snaps.shape[1], K))
            fh.write(snaps.tobytes())

    def read(self, path) -> np.ndarray:
        with open(path, "rb") as fh:
            head = fh.read(self._HEADER.size)
            magic, version, N, K = self._HEADER.unpack(head)
            if magic != self.MAGIC or version != self.VERSION:
                raise InputError(f"{path}: not a version-{self.VERSION} trajectory file")
            data = np.frombuffer(fh.read(), dtype="<f8")
        if data.size != (K + 1) * N:
            raise InputError(f"{path}: truncated trajectory file")
        return data.reshape(K + 1, N).astype(float)

    def store(self, traj: Trajectory, seed: int, model: NoiseModel) -> str:
        key = self.key(traj.mesh, traj.scheme, seed, traj.path_id, traj.dt, traj.T, model)
        path = self.path_for(key)
        self.write(path, traj.snapshots)
        return path

    def load(self, mesh, scheme, seed, path_id, dt, T, model, K) -> np.ndarray | None:
        path = self.path_for(self.key(mesh, scheme, seed, path_id, dt, T, model))
        if not os.path.exists(path):
            return None
        snaps = self.read(path)
        if snaps.shape != (K + 1, mesh.num_dofs):
            log.warning("ignoring cache file %s with unexpected shape %s", path, snaps.shape)
            return None
        return snaps


# ---------------------------------------------------------------------------
# CSV output

def _fmt(x):
    if x is None or (isinstance(x, float) and not math.isfinite(x)):
        return ""
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def write_error_csv(reports, path, record_runtime: bool = False):
    """One row per grid point: scheme,axis,h,dt,paths,metric,slope_running,runtime_s.

    ``runtime_s`` is left empty unless ``record_runtime`` is set, which
    keeps the file byte-reproducible.
    """
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scheme", "axis", "h", "dt", "paths", "metric", "slope_running", "runtime_s"])
        for rep in reports:
            running = rep.running_slopes()
            for i in range(rep.metrics.size):
                w.writerow([rep.scheme.value, rep.axis, _fmt(rep.hs[i]), _fmt(rep.dts[i]),
                            rep.paths, _fmt(rep.metrics[i]), _fmt(running[i]),
                            _fmt(rep.runtime_s) if record_runtime else ""])


def write_rates_csv(reports, path):
    """Fitted slope per scheme: scheme,axis,ref_scheme,slope,residual,points."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scheme", "axis", "ref_scheme", "slope", "residual", "points"])
        for rep in reports:
            pts = int(rep.used.sum()) if rep.used is not None else 0
            ref = rep.ref_scheme.value if rep.ref_scheme is not None else ""
            w.writerow([rep.scheme.value, rep.axis, ref, _fmt(rep.slope), _fmt(rep.residual), pts])


def write_census_csv(rows, path):
    """Census table: scheme,lambda,h,dt,paths,k_nonneg."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scheme", "lambda", "h", "dt", "paths", "k_nonneg"])
        for r in rows:
            w.writerow([r.scheme.value, _fmt(r.lam), _fmt(r.h), _fmt(r.dt), r.paths, r.k_nonneg])
