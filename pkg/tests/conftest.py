"""Shared fixtures and independent oracles.

The oracles avoid the package's own formulas: element matrices come from
explicit barycentric gradients and a quadrature rule, solves from dense
linear algebra, semigroups from ``scipy.linalg.expm``.
"""

import itertools

import numpy as np
import pytest

from posspde.mesh import mesh_from_arrays

ACCEPTANCE_KEY = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE_KEY] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)


@pytest.fixture
def acceptance_log(request):
    """Record one summary line per acceptance criterion (also printed live)."""
    lines = request.config.stash[ACCEPTANCE_KEY]

    def record(number, passed, detail):
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'} - {detail}"
        lines.append(line)
        print(line)

    return record


# ---------------------------------------------------------------------------
# dense oracles

def p1_gradients(pts):
    """Gradients of the barycentric basis on one simplex, shape (d+1, d)."""
    pts = np.asarray(pts, dtype=float)
    d = pts.shape[1]
    B = (pts[1:] - pts[0]).T                     # columns: edge vectors
    ref = np.vstack([-np.ones(d), np.eye(d)])    # reference gradients
    return ref @ np.linalg.inv(B)


def simplex_measure(pts):
    pts = np.asarray(pts, dtype=float)
    B = (pts[1:] - pts[0]).T
    return abs(np.linalg.det(B)) / np.prod(np.arange(1, pts.shape[1] + 1))


def dense_operators(mesh):
    """Dense (S, m, Mc) on the DOFs by brute-force element loops.

    The consistent mass uses the edge-midpoint rule (exact for quadratics)
    in 2D and Simpson's rule in 1D.
    """
    pts = mesh.points
    nv = len(pts)
    S = np.zeros((nv, nv))
    Mc = np.zeros((nv, nv))
    m = np.zeros(nv)
    d = mesh.dim
    for el in mesh.elements:
        p = pts[el]
        area = simplex_measure(p)
        g = p1_gradients(p)
        S[np.ix_(el, el)] += area * g @ g.T
        if d == 2:
            bary = np.array([[0.5, 0.5, 0.0], [0.0, 0.5, 0.5], [0.5, 0.0, 0.5]])
            w = np.full(3, area / 3)
        else:
            bary = np.array([[1.0, 0.0], [0.5, 0.5], [0.0, 1.0]])
            w = area * np.array([1, 4, 1]) / 6
        Mc[np.ix_(el, el)] += np.einsum("q,qi,qj->ij", w, bary, bary)
        for v in el:
            m[v] += area / (d + 1)
    keep = mesh.dof_vertices
    return S[np.ix_(keep, keep)], m[keep], Mc[np.ix_(keep, keep)]


def p1_eval(mesh, values, x):
    """Evaluate the P1 function with DOF values at points ``x`` (K, d) by search."""
    full = np.zeros(len(mesh.points))
    full[mesh.dof_vertices] = values
    x = np.atleast_2d(x)
    out = np.full(len(x), np.nan)
    for el in mesh.elements:
        p = mesh.points[el]
        B = (p[1:] - p[0]).T
        lam = np.linalg.solve(B, (x - p[0]).T).T
        bary = np.column_stack([1 - lam.sum(axis=1), lam])
        inside = np.all(bary >= -1e-12, axis=1) & np.isnan(out)
        out[inside] = bary[inside] @ full[el]
    return out


def perturbed_square_mesh(n, amount=0.15, seed=0):
    """Friedrichs-Keller vertices with interior nodes jittered (unstructured)."""
    rng = np.random.default_rng(seed)
    i, j = np.meshgrid(np.arange(n + 1), np.arange(n + 1))
    pts = np.stack([i.ravel(), j.ravel()], axis=1).astype(float) / n
    bnd = (i.ravel() == 0) | (i.ravel() == n) | (j.ravel() == 0) | (j.ravel() == n)
    pts[~bnd] += amount / n * rng.uniform(-1, 1, size=(int((~bnd).sum()), 2))
    els = []
    for a, b in itertools.product(range(n), range(n)):
        v00 = b * (n + 1) + a
        els += [[v00, v00 + 1, v00 + n + 2], [v00, v00 + n + 2, v00 + n + 1]]
    return mesh_from_arrays(pts, np.array(els), bnd)
