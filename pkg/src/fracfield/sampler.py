"""Draw realizations of the finite element field ``Q (g + W_h)``.

The white-noise load is ``b = G z`` with ``G G^T = M`` and ``z`` standard
normal, so ``b ~ N(0, M)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .mesh import UniformMesh, basis_matrix
from .quadrature import _upper_banded, bandwidth

GENERATOR_NAME = "numpy.random.PCG64/standard_normal(ziggurat)"


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


@dataclass(frozen=True)
class NoiseFactor:
    G: sp.csr_matrix

    @property
    def size(self) -> int:
        return self.G.shape[0]


@dataclass
class FieldRealization:
    coefficients: np.ndarray
    mesh: UniformMesh
    seed: int | None = None
    meta: dict = field(default_factory=dict)

    def __call__(self, x):
        return field_eval(self, x)


def cholesky_mass(mass) -> NoiseFactor:
    """Lower-triangular sparse ``G`` with ``G G^T = M`` (no reordering)."""
    mass = sp.csr_matrix(mass)
    n = mass.shape[0]
    bw = bandwidth(mass)
    try:
        cb = sla.cholesky_banded(_upper_banded(mass, bw), lower=False)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError("mass matrix is not positive definite") from exc
    # upper banded U with M = U^T U, so G = U^T
    rows, cols, vals = [], [], []
    for off in range(bw + 1):
        j = np.arange(off, n)
        rows.append(j - off)
        cols.append(j)
        vals.append(cb[bw - off, off:])
    upper = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
    )
    upper.eliminate_zeros()
    return NoiseFactor(G=upper.T.tocsr())


def sample_noise_load(factor: NoiseFactor, rng: np.random.Generator, count: int | None = None):
    """One load vector (or ``count`` of them as rows) distributed as ``N(0, M)``.

    Each realization consumes ``factor.size`` standard normals in index order.
    """
    if count is None:
        return factor.G @ rng.standard_normal(factor.size)
    z = rng.standard_normal((count, factor.size))
    return (factor.G @ z.T).T


def sample_field(g_vec, factor: NoiseFactor, op, rng: np.random.Generator, *,
                 mesh: UniformMesh | None = None, seed: int | None = None,
                 count: int | None = None):
    """Realization(s) of ``Q (g + W_h)`` in the finite element basis.

    With ``count`` given the coefficients come back as an array of shape
    ``(count, N_h)`` instead of a single :class:`FieldRealization`.
    """
    g = np.zeros(factor.size) if g_vec is None else np.asarray(g_vec, dtype=float)
    if g.shape != (factor.size,):
        raise ValueError(f"deterministic load must have length {factor.size}")
    loads = sample_noise_load(factor, rng, count)
    if count is None:
        return FieldRealization(op.apply(g + loads), mesh, seed)
    return op.apply((loads + g).T).T


def field_eval(realization: FieldRealization, x):
    """Piecewise linear interpolant of the coefficients at ``x``."""
    pts = np.asarray(x, dtype=float)
    single = pts.ndim == 0 or (pts.ndim == 1 and realization.mesh.d > 1)
    pts = pts.reshape(-1, realization.mesh.d)
    vals = basis_matrix(realization.mesh, pts) @ realization.coefficients
    return float(vals[0]) if single else vals


_GAUSS_1D = (np.array([0.5 - 0.5 / np.sqrt(3.0), 0.5 + 0.5 / np.sqrt(3.0)]), np.array([0.5, 0.5]))


def _triangle_rule():
    # collapsed 2x2 Gauss-Legendre rule on the reference triangle (0,0),(1,0),(0,1)
    t, w = _GAUSS_1D
    u, v = np.meshgrid(t, t, indexing="ij")
    wu, wv = np.meshgrid(w, w, indexing="ij")
    x = u.ravel()
    y = (v * (1.0 - u)).ravel()
    weights = (wu * wv * (1.0 - u)).ravel()
    return np.column_stack([x, y]), weights


def load_vector(mesh: UniformMesh, g) -> np.ndarray:
    """``g_j = int g phi_j`` by two Gauss points per direction on each element.

    ``g`` is a vectorized callable taking points of shape ``(P, d)``.
    """
    hh = mesh.grid_spacing
    elements = mesh.elements()
    n_el = len(elements)
    if mesh.d == 1:
        t, w = _GAUSS_1D
        left = np.arange(n_el) * hh
        pts = (left[:, None] + hh * t[None, :]).reshape(-1, 1)
        bary = np.stack([1.0 - t, t], axis=1)  # (q, 2)
        jac = hh
    else:
        ref, w = _triangle_rule()
        # vertices of lower/upper triangles in local cell coordinates
        lower = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0]])
        upper = np.array([[0.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
        bary = np.column_stack([1.0 - ref[:, 0] - ref[:, 1], ref[:, 0], ref[:, 1]])
        cells = np.arange(n_el) // 2
        origin = np.column_stack([cells % (mesh.n + 1), cells // (mesh.n + 1)]) * hh
        verts = np.where((np.arange(n_el) % 2 == 1)[:, None, None], upper, lower) * hh
        pts = (origin[:, None, :] + np.einsum("qv,evd->eqd", bary, verts)).reshape(-1, 2)
        jac = hh * hh
    vals = np.asarray(g(pts), dtype=float).reshape(n_el, -1)
    contrib = jac * np.einsum("eq,q,qv->ev", vals, w, bary)
    out = np.zeros(mesh.dof_count)
    keep = elements >= 0
    np.add.at(out, elements[keep], contrib[keep])
    return out


__all__ = [
    "GENERATOR_NAME",
    "NoiseFactor",
    "FieldRealization",
    "cholesky_mass",
    "field_eval",
    "load_vector",
    "make_rng",
    "sample_field",
    "sample_noise_load",
]
