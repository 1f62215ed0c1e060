"""P1 finite element operators with mass lumping.

The lumped scheme never stores ``A = diag(m)^{-1} S``; it is applied as
``S v / m``.  Nodal vectors may carry leading batch axes, shape ``(..., N)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import InputError
from .mesh import Mesh, local_stiffness

__all__ = [
    "FemOperators",
    "NodalField",
    "assemble",
    "interpolate",
    "quasi_interpolate",
    "inner_h",
    "norm_h",
    "norm_l2",
    "seminorm_h1",
    "apply_A",
]

# Strang-Fix 4-point rule on the reference triangle, exact for cubics.
# Rows: barycentric coordinates; weights sum to 1.
_TRI_BARY = np.array(
    [[1 / 3, 1 / 3, 1 / 3], [0.6, 0.2, 0.2], [0.2, 0.6, 0.2], [0.2, 0.2, 0.6]]
)
_TRI_W = np.array([-27 / 48, 25 / 48, 25 / 48, 25 / 48])
# 2-point Gauss-Legendre on [0, 1], exact for cubics.
_G = 0.5 / np.sqrt(3.0)
_SEG_BARY = np.array([[0.5 + _G, 0.5 - _G], [0.5 - _G, 0.5 + _G]])
_SEG_W = np.array([0.5, 0.5])


@dataclass(frozen=True, eq=False)
class FemOperators:
    """Stiffness ``S``, lumped mass ``m`` and consistent mass ``Mc`` on DOFs."""

    mesh: Mesh
    S: sp.csr_matrix
    m: np.ndarray
    Mc: sp.csr_matrix

    @property
    def num_dofs(self) -> int:
        return self.m.size


@dataclass(frozen=True, eq=False)
class NodalField:
    """Nodal values of ``u_h = sum_j U_j phi_j``, zero on the boundary."""

    values: np.ndarray
    mesh: Mesh

    def __post_init__(self):
        if self.values.shape[-1] != self.mesh.num_dofs:
            raise InputError(
                f"field has {self.values.shape[-1]} values, mesh has {self.mesh.num_dofs} DOFs"
            )


def _values(field):
    return field.values if isinstance(field, NodalField) else np.asarray(field, dtype=float)


def _scatter(mesh, local):
    """Sum element matrices ``local`` (E, d+1, d+1) into a DOF-by-DOF CSR matrix."""
    dofs = mesh.dof_of_vertex[mesh.elements]
    nl = mesh.dim + 1
    rows = np.repeat(dofs, nl, axis=1).ravel()
    cols = np.tile(dofs, (1, nl)).ravel()
    vals = local.reshape(len(dofs), -1).ravel()
    keep = (rows >= 0) & (cols >= 0)
    N = mesh.num_dofs
    mat = sp.coo_matrix((vals[keep], (rows[keep], cols[keep])), shape=(N, N)).tocsr()
    mat.sum_duplicates()
    mat.eliminate_zeros()
    mat.sort_indices()
    return mat


def assemble(mesh: Mesh) -> FemOperators:
    """Assemble ``S``, ``m`` and ``Mc`` for ``mesh``."""
    d = mesh.dim
    k_local = local_stiffness(mesh.raw_points, mesh.elements) * mesh.scale ** (d - 2)
    meas = mesh.element_measures()
    nl = d + 1
    # int_K phi_i phi_j = |K| (1 + delta_ij) / ((d+1)(d+2))
    m_ref = (np.ones((nl, nl)) + np.eye(nl)) / (nl * (nl + 1))
    mc_local = meas[:, None, None] * m_ref
    S = _scatter(mesh, k_local)
    Mc = _scatter(mesh, mc_local)
    lumped = np.repeat(meas / nl, nl)
    dofs = mesh.dof_of_vertex[mesh.elements].ravel()
    keep = dofs >= 0
    m = np.bincount(dofs[keep], weights=lumped[keep], minlength=mesh.num_dofs)
    return FemOperators(mesh=mesh, S=S, m=m, Mc=Mc)


def interpolate(mesh: Mesh, g) -> NodalField:
    """Nodal interpolant: ``values[i] = g(x_i)``.

    ``g`` is called with the coordinate arrays (``g(x)`` in 1D, ``g(x, y)``
    in 2D) and must broadcast.
    """
    xs = mesh.dof_coords.T
    vals = np.broadcast_to(np.asarray(g(*xs), dtype=float), (mesh.num_dofs,)).copy()
    if not np.all(np.isfinite(vals)):
        raise InputError("interpolated function is not finite at every DOF")
    return NodalField(vals, mesh)


def quasi_interpolate(mesh: Mesh, g) -> NodalField:
    """Quasi-interpolant with ``W_j = int g phi_j / int phi_j``.

    Each element integral uses a rule exact for cubics, so the result is
    exact for quadratic ``g``.
    """
    d = mesh.dim
    bary, w = (_SEG_BARY, _SEG_W) if d == 1 else (_TRI_BARY, _TRI_W)
    p = mesh.points[mesh.elements]                     # (E, d+1, d)
    qp = np.einsum("qv,evk->eqk", bary, p)             # (E, Q, d)
    gq = np.asarray(g(*np.moveaxis(qp, -1, 0)), dtype=float)
    gq = np.broadcast_to(gq, qp.shape[:2])
    meas = mesh.element_measures()
    # int_K g phi_v ~ |K| sum_q w_q g(q) bary_qv
    num_local = meas[:, None] * np.einsum("q,eq,qv->ev", w, gq, bary)
    dofs = mesh.dof_of_vertex[mesh.elements].ravel()
    keep = dofs >= 0
    N = mesh.num_dofs
    num = np.bincount(dofs[keep], weights=num_local.ravel()[keep], minlength=N)
    den = np.bincount(dofs[keep], weights=np.repeat(meas / (d + 1), d + 1)[keep],
                      minlength=N)
    return NodalField(num / den, mesh)


def _check(ops, *arrays):
    for a in arrays:
        if a.shape[-1] != ops.num_dofs:
            raise InputError(
                f"dimension mismatch: got {a.shape[-1]} values for {ops.num_dofs} DOFs"
            )


def inner_h(a, b, ops: FemOperators):
    """Lumped inner product ``sum_i m_i a_i b_i`` (batched over leading axes)."""
    a, b = _values(a), _values(b)
    _check(ops, a, b)
    return np.sum(ops.m * a * b, axis=-1)


def norm_h(field, ops: FemOperators):
    """Lumped norm ``sqrt(sum_i m_i v_i^2)``."""
    v = _values(field)
    return np.sqrt(inner_h(v, v, ops))


def _quadratic_form(mat, v):
    # v: (..., N); returns v^T mat v per batch entry
    flat = v.reshape(-1, v.shape[-1])
    out = np.einsum("pi,pi->p", flat, (mat @ flat.T).T)
    return out.reshape(v.shape[:-1])


def norm_l2(field, ops: FemOperators):
    """Exact L2 norm of the P1 function, ``sqrt(v^T Mc v)``."""
    v = _values(field)
    _check(ops, v)
    return np.sqrt(np.maximum(_quadratic_form(ops.Mc, v), 0.0))


def seminorm_h1(field, ops: FemOperators):
    """Exact ``||grad v_h||``, ``sqrt(v^T S v)``."""
    v = _values(field)
    _check(ops, v)
    return np.sqrt(np.maximum(_quadratic_form(ops.S, v), 0.0))


def apply_A(field, ops: FemOperators):
    """``A v = (S v) / m``, i.e. minus the discrete Laplacian of ``v``."""
    v = _values(field)
    _check(ops, v)
    flat = v.reshape(-1, v.shape[-1])
    out = ((ops.S @ flat.T).T / ops.m).reshape(v.shape)
    if isinstance(field, NodalField):
        return NodalField(out, field.mesh)
    return out
