"""Structured simplicial meshes of the unit interval and the unit square.

The 2D mesh is the Friedrichs-Keller triangulation: every grid cell is split
along its lower-left to upper-right diagonal, so the P1 stiffness matrix is
the 5-point Laplacian and every element is weakly acute.

Vertices are stored in *raw* coordinates (integers for structured meshes)
together with a length ``scale``; physical coordinates are
``raw_points * scale``.  Element integrals are evaluated on the raw
coordinates and rescaled, which keeps the structured stiffness entries exact.
"""

from __future__ import annotations

import csv
import itertools
import os
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import ConfigurationError

__all__ = [
    "Mesh",
    "AcutenessReport",
    "build_interval_mesh",
    "build_unit_square_mesh",
    "mesh_from_arrays",
    "check_weak_acuteness",
    "local_stiffness",
]


@dataclass(frozen=True, eq=False)
class Mesh:
    """Simplicial mesh with homogeneous-Dirichlet DOF numbering.

    Attributes
    ----------
    dim : int
        Spatial dimension (1 or 2).
    n : int
        Subdivisions per side for structured meshes, 0 otherwise.
    h : float
        Grid spacing ``1/n`` for structured meshes; maximal edge length
        otherwise.
    raw_points : ndarray, shape (V, dim)
        Vertex coordinates in raw units.
    scale : float
        Length of one raw unit.
    elements : ndarray of int, shape (E, dim + 1)
        Vertex indices of each simplex.
    on_boundary : ndarray of bool, shape (V,)
        Boundary flag per vertex.
    dof_of_vertex : ndarray of int, shape (V,)
        DOF id of each vertex, -1 on the boundary.
    dof_vertices : ndarray of int, shape (N,)
        Vertex index of each DOF.
    grid_shape : tuple of int or None
        Shape of the DOF grid, ``(n-1,)`` or ``(n-1, n-1)`` (row index is
        y), for structured meshes.  ``values.reshape(grid_shape)`` views a
        nodal vector as a grid.
    """

    dim: int
    n: int
    h: float
    raw_points: np.ndarray
    scale: float
    elements: np.ndarray
    on_boundary: np.ndarray
    dof_of_vertex: np.ndarray
    dof_vertices: np.ndarray
    grid_shape: tuple | None = None

    @property
    def structured(self) -> bool:
        return self.grid_shape is not None

    @property
    def num_dofs(self) -> int:
        return int(self.dof_vertices.size)

    @property
    def points(self) -> np.ndarray:
        return self.raw_points * self.scale

    @property
    def dof_coords(self) -> np.ndarray:
        """Physical coordinates of the DOFs, shape (N, dim)."""
        return self.points[self.dof_vertices]

    def element_boundary_flags(self) -> np.ndarray:
        """Boundary flag of every element vertex, shape (E, dim + 1)."""
        return self.on_boundary[self.elements]

    def element_measures(self) -> np.ndarray:
        """Length/area of every element in physical units."""
        return _raw_measures(self.raw_points, self.elements) * self.scale**self.dim

    def dump_csv(self, prefix: str | os.PathLike) -> tuple[str, str]:
        """Write ``<prefix>_vertices.csv`` and ``<prefix>_elements.csv``.

        Returns the two paths written.
        """
        prefix = os.fspath(prefix)
        vpath, epath = prefix + "_vertices.csv", prefix + "_elements.csv"
        axes = ["x", "y"][: self.dim]
        with open(vpath, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["vertex", *axes, "boundary", "dof"])
            for v, (p, b, d) in enumerate(
                zip(self.points, self.on_boundary, self.dof_of_vertex)
            ):
                w.writerow([v, *(repr(float(c)) for c in p), int(b), int(d)])
        with open(epath, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["element", *(f"v{k}" for k in range(self.dim + 1))])
            for e, verts in enumerate(self.elements):
                w.writerow([e, *(int(v) for v in verts)])
        return vpath, epath


def _raw_measures(raw_points, elements):
    p = raw_points[elements]
    if p.shape[-1] == 1:
        return np.abs(p[:, 1, 0] - p[:, 0, 0])
    e1 = p[:, 1] - p[:, 0]
    e2 = p[:, 2] - p[:, 0]
    return 0.5 * np.abs(e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])


def local_stiffness(raw_points: np.ndarray, elements: np.ndarray) -> np.ndarray:
    """Element stiffness matrices ``int_K grad phi_i . grad phi_j`` in raw units.

    Returns an array of shape (E, d+1, d+1).  Multiply by ``scale**(d-2)``
    for physical units.
    """
    p = raw_points[elements].astype(float)
    d = p.shape[-1]
    if d == 1:
        length = p[:, 1, 0] - p[:, 0, 0]
        k = 1.0 / np.abs(length)
        out = np.empty((len(elements), 2, 2))
        out[:, 0, 0] = out[:, 1, 1] = k
        out[:, 0, 1] = out[:, 1, 0] = -k
        return out
    # Edge opposite vertex i is x_{i+2} - x_{i+1}; K_ij = e_i . e_j / (4 |K|).
    edges = np.stack(
        [p[:, 2] - p[:, 1], p[:, 0] - p[:, 2], p[:, 1] - p[:, 0]], axis=1
    )
    area = _raw_measures(raw_points, elements)
    return np.einsum("eik,ejk->eij", edges, edges) / (4.0 * area)[:, None, None]


def _finalize(dim, n, h, raw_points, scale, elements, on_boundary, grid_shape):
    dof_of_vertex = np.full(len(raw_points), -1, dtype=np.int64)
    dof_vertices = np.flatnonzero(~on_boundary)
    dof_of_vertex[dof_vertices] = np.arange(dof_vertices.size)
    return Mesh(
        dim=dim,
        n=n,
        h=h,
        raw_points=raw_points,
        scale=scale,
        elements=elements,
        on_boundary=on_boundary,
        dof_of_vertex=dof_of_vertex,
        dof_vertices=dof_vertices,
        grid_shape=grid_shape,
    )


def build_interval_mesh(n: int) -> Mesh:
    """Uniform mesh of (0, 1) with ``n`` elements and ``n - 1`` DOFs."""
    n = _check_n(n)
    raw = np.arange(n + 1, dtype=float)[:, None]
    elements = np.stack([np.arange(n), np.arange(1, n + 1)], axis=1)
    on_boundary = np.zeros(n + 1, dtype=bool)
    on_boundary[[0, n]] = True
    return _finalize(1, n, 1.0 / n, raw, 1.0 / n, elements, on_boundary, (n - 1,))


def build_unit_square_mesh(n: int) -> Mesh:
    """Friedrichs-Keller triangulation of (0, 1)^2 with ``2 n^2`` triangles.

    Vertex ``(i, j)`` (x index ``i``, y index ``j``) has index ``j (n+1) + i``;
    DOFs are numbered row-major over the interior grid, ``(j-1)(n-1) + (i-1)``.
    """
    n = _check_n(n)
    i, j = np.meshgrid(np.arange(n + 1), np.arange(n + 1))
    raw = np.stack([i.ravel(), j.ravel()], axis=1).astype(float)
    on_boundary = (
        (raw[:, 0] == 0) | (raw[:, 0] == n) | (raw[:, 1] == 0) | (raw[:, 1] == n)
    )
    ci, cj = np.meshgrid(np.arange(n), np.arange(n))
    ci, cj = ci.ravel(), cj.ravel()
    v00 = cj * (n + 1) + ci
    v10 = v00 + 1
    v01 = v00 + (n + 1)
    v11 = v01 + 1
    lower = np.stack([v00, v10, v11], axis=1)
    upper = np.stack([v00, v11, v01], axis=1)
    elements = np.empty((2 * n * n, 3), dtype=np.int64)
    elements[0::2] = lower
    elements[1::2] = upper
    return _finalize(
        2, n, 1.0 / n, raw, 1.0 / n, elements, on_boundary, (n - 1, n - 1)
    )


def mesh_from_arrays(points, elements, on_boundary) -> Mesh:
    """Unstructured mesh from explicit arrays (physical coordinates).

    Used for test fixtures; no structured fast paths apply to it.
    """
    points = np.asarray(points, dtype=float)
    if points.ndim == 1:
        points = points[:, None]
    elements = np.asarray(elements, dtype=np.int64)
    on_boundary = np.asarray(on_boundary, dtype=bool)
    dim = points.shape[1]
    if dim not in (1, 2) or elements.shape[1] != dim + 1:
        raise ConfigurationError("only intervals and triangles are supported")
    if on_boundary.all():
        raise ConfigurationError("no interior vertex")
    p = points[elements]
    edges = [np.linalg.norm(p[:, a] - p[:, b], axis=-1)
             for a, b in itertools.combinations(range(dim + 1), 2)]
    h = float(np.max(edges))
    return _finalize(dim, 0, h, points, 1.0, elements, on_boundary, None)


def _check_n(n):
    if int(n) != n or n < 2:
        raise ConfigurationError(f"n={n!r}: need an integer n >= 2 (no interior vertex)")
    return int(n)


class AcutenessReport(NamedTuple):
    ok: bool
    worst_pair: float


def check_weak_acuteness(mesh: Mesh, tol: float = 1e-14) -> AcutenessReport:
    """Check ``int_K grad phi_i . grad phi_j <= tol`` for all local pairs i != j.

    ``worst_pair`` is the largest off-diagonal element integral (physical
    units).
    """
    k = local_stiffness(mesh.raw_points, mesh.elements) * mesh.scale ** (mesh.dim - 2)
    off = ~np.eye(mesh.dim + 1, dtype=bool)
    worst = float(k[:, off].max())
    return AcutenessReport(worst <= tol, worst)
