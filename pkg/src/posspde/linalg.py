"""Implicit diffusion solves and the semigroup action ``exp(-t A)``.

The implicit step ``(I + w A) U = b`` is solved in its symmetric form
``(diag(m) + w S) U = diag(m) b``.  The matrix is SPD and an M-matrix, so a
nonnegative right-hand side gives a nonnegative solution.

Two solution paths exist:

* ``cg``: Jacobi-preconditioned conjugate gradients, vectorized over a batch
  of right-hand sides (each column iterates independently and stops on its
  own, so results do not depend on what else is in the batch);
* ``spectral``: on structured meshes, ``S`` is the 5-point (3-point in 1D)
  stencil and ``m = h^d``, so the orthonormal type-I DST diagonalizes ``A``.
"""

from __future__ import annotations

import weakref

import numpy as np
import scipy.fft
import scipy.linalg
import scipy.sparse as sp

from .assembly import FemOperators
from .errors import ConfigurationError, InputError, NumericalError, UnsupportedOperationError

__all__ = ["ImplicitSolver", "stencil_eigenvalues", "dst_forward", "expm_action",
           "dense_A"]

SOLVER_MODES = ("auto", "cg", "spectral")
DENSE_LIMIT = 2048


def stencil_eigenvalues(ops: FemOperators) -> np.ndarray:
    """Eigenvalues of ``A`` on a structured mesh, shaped like the DOF grid.

    ``mu_p = sum_axes (2 - 2 cos(p_axis pi h)) / h^2`` for ``p = 1..n-1``.
    """
    mesh = ops.mesh
    if not mesh.structured:
        raise UnsupportedOperationError("stencil eigenvalues need a structured mesh")
    h = mesh.h
    p = np.arange(1, mesh.n)
    one = (2.0 - 2.0 * np.cos(p * np.pi * h)) / h**2
    if mesh.dim == 1:
        return one
    return one[:, None] + one[None, :]


def dst_forward(values: np.ndarray, grid_shape) -> np.ndarray:
    """Orthonormal DST-I of nodal vectors ``(..., N)`` on the DOF grid.

    The transform is an involution, so it also serves as its own inverse.
    """
    g = values.reshape(values.shape[:-1] + tuple(grid_shape))
    axes = tuple(range(-len(grid_shape), 0))
    out = scipy.fft.dstn(g, type=1, norm="ortho", axes=axes, workers=1)
    return out.reshape(values.shape)


def _spectral_ok(ops):
    mesh = ops.mesh
    return mesh.structured and np.allclose(ops.m, mesh.h**mesh.dim, rtol=1e-13, atol=0)


class ImplicitSolver:
    """Solver for ``(diag(m) + weight S) U = diag(m) b``.

    Parameters
    ----------
    ops : FemOperators
    weight : float
        ``theta * dt`` (time units), must be >= 0.
    mode : {'auto', 'cg', 'spectral'}
        ``auto`` picks ``spectral`` on structured meshes.
    tol : float
        Relative residual target of the CG path.
    max_iter : int, optional
        CG iteration cap, default ``10 sqrt(N)``.
    """

    def __init__(self, ops: FemOperators, weight: float, mode: str = "auto",
                 tol: float = 1e-10, max_iter: int | None = None):
        if weight < 0:
            raise ConfigurationError("implicit weight must be nonnegative")
        if mode not in SOLVER_MODES:
            raise ConfigurationError(f"solver.mode must be one of {SOLVER_MODES}, got {mode!r}")
        self.ops = ops
        self.weight = float(weight)
        self.tol = float(tol)
        N = ops.num_dofs
        self.max_iter = int(max_iter) if max_iter else max(10, int(np.ceil(10 * np.sqrt(N))))
        if mode == "auto":
            mode = "spectral" if _spectral_ok(ops) else "cg"
        if mode == "spectral":
            if not _spectral_ok(ops):
                raise UnsupportedOperationError("spectral solver needs a structured mesh")
            self._denom = 1.0 + self.weight * stencil_eigenvalues(ops).ravel()
        else:
            self._matrix = (ops.S * self.weight + sp.diags(ops.m)).tocsr()
            self._inv_diag = 1.0 / self._matrix.diagonal()
        self.mode = mode

    def __repr__(self):
        return f"ImplicitSolver(weight={self.weight!r}, mode={self.mode!r})"

    def solve(self, b: np.ndarray) -> np.ndarray:
        """Return ``(I + weight A)^{-1} b`` for nodal vectors ``(..., N)``."""
        b = np.asarray(b, dtype=float)
        if b.shape[-1] != self.ops.num_dofs:
            raise InputError("right-hand side has the wrong length")
        if not np.all(np.isfinite(b)):
            raise InputError("right-hand side is not finite")
        if self.weight == 0.0:
            return b.copy()
        if self.mode == "spectral":
            grid = self.ops.mesh.grid_shape
            return dst_forward(dst_forward(b, grid) / self._denom, grid)
        flat = b.reshape(-1, b.shape[-1])
        return self._pcg(flat * self.ops.m).reshape(b.shape)

    def residual(self, U, b) -> np.ndarray:
        """Relative residual of ``U`` per batch entry."""
        U = np.asarray(U).reshape(-1, self.ops.num_dofs)
        rhs = np.asarray(b).reshape(-1, self.ops.num_dofs) * self.ops.m
        lhs = U * self.ops.m + self.weight * (self.ops.S @ U.T).T
        norm = np.linalg.norm(rhs, axis=1)
        return np.linalg.norm(lhs - rhs, axis=1) / np.where(norm > 0, norm, 1.0)

    def _pcg(self, rhs):
        # rhs: (P, N); one independent PCG per row
        A = self._matrix
        x = np.zeros_like(rhs)
        r = rhs.copy()
        bnorm = np.linalg.norm(rhs, axis=1)
        target = self.tol * np.where(bnorm > 0, bnorm, 1.0)
        active = np.linalg.norm(r, axis=1) > target
        z = r * self._inv_diag
        p = z.copy()
        rz = np.einsum("pi,pi->p", r, z)
        it = 0
        while active.any():
            if it >= self.max_iter:
                res = float(np.max(np.linalg.norm(r, axis=1)[active] / target[active]) * self.tol)
                raise NumericalError(
                    f"CG did not converge in {self.max_iter} iterations "
                    f"(relative residual {res:.3e})", residual=res)
            Ap = (A @ p.T).T
            pAp = np.einsum("pi,pi->p", p, Ap)
            alpha = np.where(active, rz / np.where(active, pAp, 1.0), 0.0)
            x += alpha[:, None] * p
            r -= alpha[:, None] * Ap
            z = r * self._inv_diag
            rz_new = np.einsum("pi,pi->p", r, z)
            beta = np.where(active, rz_new / np.where(active, rz, 1.0), 0.0)
            p = np.where(active[:, None], z + beta[:, None] * p, p)
            rz = np.where(active, rz_new, rz)
            active &= np.linalg.norm(r, axis=1) > target
            it += 1
        return x


def dense_A(ops: FemOperators) -> np.ndarray:
    """Dense ``A = diag(m)^{-1} S`` (small meshes and oracles only)."""
    return ops.S.toarray() / ops.m[:, None]


class _DenseExp:
    def __init__(self, ops):
        # S w = mu diag(m) w with w^T diag(m) w = I
        self.mu, self.W = scipy.linalg.eigh(ops.S.toarray(), np.diag(ops.m))
        self.m = ops.m

    def __call__(self, v, t):
        coef = (v * self.m) @ self.W
        return (coef * np.exp(-t * self.mu)) @ self.W.T


_dense_cache: weakref.WeakKeyDictionary = weakref.WeakKeyDictionary()


def expm_action(ops: FemOperators, v: np.ndarray, t: float) -> np.ndarray:
    """``exp(-t A) v`` for nodal vectors ``(..., N)``.

    Uses the DST on structured meshes, otherwise a dense generalized
    eigendecomposition for ``N <= 2048``.
    """
    v = np.asarray(v, dtype=float)
    if t < 0:
        raise InputError("expm_action needs t >= 0")
    if t == 0:
        return v.copy()
    if _spectral_ok(ops):
        grid = ops.mesh.grid_shape
        decay = np.exp(-t * stencil_eigenvalues(ops).ravel())
        return dst_forward(dst_forward(v, grid) * decay, grid)
    if ops.num_dofs > DENSE_LIMIT:
        raise UnsupportedOperationError(
            f"expm_action on an unstructured mesh is limited to N <= {DENSE_LIMIT}")
    prop = _dense_cache.get(ops)
    if prop is None:
        prop = _dense_cache[ops] = _DenseExp(ops)
    return prop(v, t)
