"""Uniform P1 finite elements on the unit interval and the unit square.

Only interior nodes carry degrees of freedom (homogeneous Dirichlet
conditions). Nodes are numbered lexicographically with the x index running
fastest, so the interior node ``(i, j)`` (1-based grid indices) has dof
``(i - 1) + (j - 1) * n``.

In 2D every grid cell is split along its lower-left to upper-right diagonal.
"""
from __future__ import annotations

from dataclasses import dataclass
import math

import numpy as np
import scipy.sparse as sp


@dataclass(frozen=True)
class UniformMesh:
    """Uniform simplicial mesh of ``[0, 1]^d`` with ``n`` interior nodes per axis.

    ``mesh_size`` is the largest element diameter: the grid spacing in 1D and
    ``sqrt(2)`` times the grid spacing in 2D.
    """

    d: int
    n: int

    @property
    def grid_spacing(self) -> float:
        return 1.0 / (self.n + 1)

    @property
    def mesh_size(self) -> float:
        return math.sqrt(self.d) * self.grid_spacing

    @property
    def dof_count(self) -> int:
        return self.n ** self.d

    def node_coordinates(self) -> np.ndarray:
        """Interior node coordinates, shape ``(dof_count, d)``, in dof order."""
        axis = np.arange(1, self.n + 1) * self.grid_spacing
        if self.d == 1:
            return axis[:, None]
        xx, yy = np.meshgrid(axis, axis, indexing="xy")
        return np.column_stack([xx.ravel(), yy.ravel()])

    def elements(self) -> np.ndarray:
        """Element-to-dof table, shape ``(n_elements, d + 1)``.

        Vertices on the boundary have no dof and are marked with ``-1``.
        Element ordering matches :func:`locate`.
        """
        n = self.n
        if self.d == 1:
            left = np.arange(n + 1) - 1
            right = np.arange(n + 1)
            right[-1] = -1
            return np.column_stack([left, right])
        p, q = np.meshgrid(np.arange(n + 1), np.arange(n + 1), indexing="xy")
        p, q = p.ravel(), q.ravel()
        v00 = _grid_dof(p, q, n)
        v10 = _grid_dof(p + 1, q, n)
        v11 = _grid_dof(p + 1, q + 1, n)
        v01 = _grid_dof(p, q + 1, n)
        lower = np.column_stack([v00, v10, v11])
        upper = np.column_stack([v00, v11, v01])
        # element 2*c is the lower triangle of cell c, 2*c + 1 the upper one
        return np.stack([lower, upper], axis=1).reshape(-1, 3)


def _grid_dof(i, j, n):
    """Dof of grid vertex ``(i, j)`` (0-based incl. boundary), ``-1`` on the boundary."""
    inside = (i >= 1) & (i <= n) & (j >= 1) & (j <= n)
    return np.where(inside, (i - 1) + (j - 1) * n, -1)


def build_mesh(d: int, n: int) -> UniformMesh:
    if d not in (1, 2):
        raise ValueError(f"dimension must be 1 or 2, got {d}")
    if int(n) != n or n < 1:
        raise ValueError(f"need at least one interior node per axis, got n={n}")
    return UniformMesh(d=int(d), n=int(n))


def _tridiag(n, diag, off):
    return sp.diags([off, diag, off], [-1, 0, 1], shape=(n, n))


def assemble_mass(mesh: UniformMesh) -> sp.csr_matrix:
    """Consistent P1 mass matrix from the closed-form stencil."""
    n, hh = mesh.n, mesh.grid_spacing
    if mesh.d == 1:
        return (_tridiag(n, 4.0, 1.0) * (hh / 6.0)).tocsr()
    eye = sp.identity(n)
    shift = _tridiag(n, 0.0, 1.0)
    up = sp.diags([1.0], [1], shape=(n, n))
    stencil = (
        6.0 * sp.identity(n * n)
        + sp.kron(eye, shift)
        + sp.kron(shift, eye)
        + sp.kron(up, up)
        + sp.kron(up.T, up.T)
    )
    return (stencil * (hh * hh / 12.0)).tocsr()


def assemble_stiffness(mesh: UniformMesh) -> sp.csr_matrix:
    """P1 stiffness matrix; the 2D matrix is the 5-point stencil."""
    n, hh = mesh.n, mesh.grid_spacing
    if mesh.d == 1:
        return (_tridiag(n, 2.0, -1.0) / hh).tocsr()
    lap = _tridiag(n, 2.0, -1.0)
    eye = sp.identity(n)
    return (sp.kron(eye, lap) + sp.kron(lap, eye)).tocsr()


def locate(mesh: UniformMesh, points) -> tuple[np.ndarray, np.ndarray]:
    """Element index and barycentric weights of each point.

    Parameters
    ----------
    mesh : UniformMesh
    points : array_like, shape ``(P, d)`` (or ``(P,)`` in 1D)

    Returns
    -------
    element : int array, shape ``(P,)``
        Row of :meth:`UniformMesh.elements` containing the point.
    weights : float array, shape ``(P, d + 1)``
        Values of the element's vertex hat functions at the point, in the
        vertex order of the element table.
    """
    pts = np.asarray(points, dtype=float)
    if mesh.d == 1 and pts.ndim == 1:
        pts = pts[:, None]
    if pts.ndim != 2 or pts.shape[1] != mesh.d:
        raise ValueError(f"points must have shape (P, {mesh.d})")
    if np.any(pts < 0.0) or np.any(pts > 1.0) or np.any(~np.isfinite(pts)):
        raise ValueError("points must lie in the closed unit cube")
    scaled = pts * (mesh.n + 1)
    cell = np.minimum(np.floor(scaled).astype(np.int64), mesh.n)
    local = scaled - cell
    if mesh.d == 1:
        t = local[:, 0]
        return cell[:, 0], np.column_stack([1.0 - t, t])
    s, t = local[:, 0], local[:, 1]
    c = cell[:, 0] + cell[:, 1] * (mesh.n + 1)
    is_upper = t > s
    w_lower = np.column_stack([1.0 - s, s - t, t])
    w_upper = np.column_stack([1.0 - t, s, t - s])
    weights = np.where(is_upper[:, None], w_upper, w_lower)
    return 2 * c + is_upper, weights


def basis_eval(mesh: UniformMesh, x) -> sp.csr_matrix:
    """Vector of all basis functions at ``x`` as a sparse ``1 x N_h`` row."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    return basis_matrix(mesh, x[None, :])


def basis_matrix(mesh: UniformMesh, points) -> sp.csr_matrix:
    """Sparse ``P x N_h`` matrix whose rows are the basis vectors at ``points``."""
    elem, weights = locate(mesh, points)
    dofs = mesh.elements()[elem]
    keep = dofs >= 0
    rows = np.broadcast_to(np.arange(len(elem))[:, None], dofs.shape)
    return sp.csr_matrix(
        (weights[keep], (rows[keep], dofs[keep])), shape=(len(elem), mesh.dof_count)
    )


def dump_coo(matrix, path) -> None:
    """Write a sparse matrix as ``row col value`` lines (debug aid)."""
    coo = sp.coo_matrix(matrix)
    with open(path, "w") as fh:
        for i, j, v in zip(coo.row, coo.col, coo.data):
            fh.write(f"{i} {j} {v!r}\n")
