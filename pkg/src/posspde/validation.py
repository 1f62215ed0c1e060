"""Exact structural checks, run by ``posspde validate``.

Each check returns a :class:`Check`; none of them is statistical.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np
import scipy.sparse as sp

from .assembly import assemble, interpolate, norm_h, norm_l2, quasi_interpolate
from .linalg import ImplicitSolver
from .mesh import build_interval_mesh, build_unit_square_mesh, check_weak_acuteness
from .noise import BrownianLattice, increments_at

__all__ = ["Check", "run_checks", "CHECKS"]


class Check(NamedTuple):
    name: str
    passed: bool
    detail: str


def _sine(x, y):
    return np.sin(np.pi * x) * np.sin(np.pi * y)


def check_weak_acuteness_all(ns=(2, 4, 8, 16, 32, 64)):
    worst = -np.inf
    ok = True
    for n in ns:
        for mesh in (build_unit_square_mesh(n), build_interval_mesh(n)):
            rep = check_weak_acuteness(mesh)
            ok &= rep.ok
            worst = max(worst, rep.worst_pair)
    return Check("weak acuteness", bool(ok), f"largest off-diagonal element integral {worst:.3g}")


def check_stencil(ns=(4, 8, 16, 32)):
    ok = True
    for n in ns:
        mesh = build_unit_square_mesh(n)
        ops = assemble(mesh)
        k = n - 1
        # 5-point Laplacian with unit spacing
        T1 = sp.diags([-1, 2, -1], [-1, 0, 1], shape=(k, k))
        I1 = sp.identity(k)
        five = (sp.kron(I1, T1) + sp.kron(T1, I1)).toarray()
        ok &= np.array_equal(ops.S.toarray(), five)
        ok &= bool(np.allclose(ops.m, mesh.h**2, rtol=1e-13, atol=0))
        off = ops.S - sp.diags(ops.S.diagonal())
        ok &= bool(off.max() <= 0)
    return Check("5-point stencil and m_i = h^2", bool(ok), f"n in {list(ns)}")


def check_m_matrix_positivity(n=4, weights=(1e-3, 0.1, 1.0, 10.0), trials=200, seed=0):
    mesh = build_unit_square_mesh(n)
    ops = assemble(mesh)
    rng = np.random.default_rng(seed)
    ok = True
    worst = np.inf
    for w in weights:
        mat = np.diag(ops.m) + w * ops.S.toarray()
        inv = np.linalg.inv(mat)
        ok &= bool(inv.min() >= 0)
        worst = min(worst, inv.min())
        solver = ImplicitSolver(ops, w, mode="cg", tol=1e-12)
        b = rng.random((trials, ops.num_dofs))
        b[rng.random(b.shape) < 0.5] = 0.0
        U = solver.solve(b)
        dense = (inv @ (ops.m * b).T).T
        ok &= bool(np.all(U >= -1e-12 * np.abs(U).max(axis=1, keepdims=True)))
        ok &= bool(np.allclose(U, dense, rtol=1e-9, atol=1e-12))
    return Check("M-matrix inverse positivity (n=4)", bool(ok), f"min inverse entry {worst:.3g}")


def check_spectral_vs_cg(ns=(8, 16, 32), dt=2.0**-6, trials=5, seed=0):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for n in ns:
        ops = assemble(build_unit_square_mesh(n))
        b = rng.standard_normal((trials, ops.num_dofs))
        a = ImplicitSolver(ops, dt, mode="spectral").solve(b)
        c = ImplicitSolver(ops, dt, mode="cg").solve(b)
        worst = max(worst, float(np.max(np.linalg.norm(a - c, axis=1) / np.linalg.norm(a, axis=1))))
    return Check("spectral vs CG solver", worst <= 1e-9, f"max relative difference {worst:.3g}")


def check_lattice_dyadic(K_fine=1024, paths=(0, 1, 7), seed=2024):
    ok = True
    for p in paths:
        lat = BrownianLattice(seed, p, 2, K_fine, 1.0)
        again = BrownianLattice(seed, p, 2, K_fine, 1.0)
        ok &= np.array_equal(lat.dB, again.dB)
        f = 1
        while f < K_fine:
            fine, coarse = increments_at(lat, f), increments_at(lat, 2 * f)
            ok &= np.array_equal(coarse.dB, fine.dB[:, 0::2] + fine.dB[:, 1::2])
            f *= 2
    return Check("Brownian lattice dyadic consistency", bool(ok), "bitwise")


def check_quasi_interpolation(ns=(4, 8, 16, 32)):
    ok = True
    worst = 0.0
    for n in ns:
        mesh = build_unit_square_mesh(n)
        ops = assemble(mesh)
        diff = interpolate(mesh, _sine).values - quasi_interpolate(mesh, _sine).values
        ratio = float(norm_h(diff, ops)) / (mesh.h * np.pi)
        worst = max(worst, ratio)
        ok &= ratio <= 1 + 1e-8
    return Check("quasi-interpolation bound", bool(ok),
                 f"max of ||pi_h g - Q_h g||_h / (h ||grad g||_inf) = {worst:.3g}")


def check_norm_comparison(ns=(4, 8, 16, 32), trials=10_000, seed=0):
    rng = np.random.default_rng(seed)
    ok = True
    worst = 0.0
    for n in ns:
        for mesh in (build_unit_square_mesh(n), build_interval_mesh(n)):
            ops = assemble(mesh)
            v = rng.standard_normal((trials, ops.num_dofs))
            l2, hn = norm_l2(v, ops), norm_h(v, ops)
            ok &= bool(np.all(l2 <= hn * (1 + 1e-12)))
            worst = max(worst, float(np.max(l2 / hn)))
    return Check("L2 norm <= lumped norm", bool(ok), f"max ratio {worst:.6f}")


CHECKS = (
    check_weak_acuteness_all,
    check_stencil,
    check_m_matrix_positivity,
    check_spectral_vs_cg,
    check_lattice_dyadic,
    check_quasi_interpolation,
    check_norm_comparison,
)


def run_checks() -> list[Check]:
    return [fn() for fn in CHECKS]
