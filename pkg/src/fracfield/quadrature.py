"""Sinc quadrature for the discrete fractional inverse ``L_h^{-beta}``.

With ``M`` the mass matrix and ``K = kappa^2 M + S`` the shifted stiffness
matrix, the quadrature approximation acting on load vectors is

    Q = (2 k sin(pi beta) / pi) * sum_l exp(2 beta y_l) (M + exp(2 y_l) K)^{-1},

with nodes ``y_l = l k`` for ``l = -K^-, ..., K^+``.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
import math

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

DEFAULT_MEMORY_CAP = 4 * 2**30
ORACLE_MAX_DOFS = 4096


class MemoryBudgetError(MemoryError):
    """Raised instead of attempting a dense allocation above the configured cap."""


@dataclass(frozen=True)
class SincScheme:
    beta: float
    k: float
    k_minus: int
    k_plus: int

    @property
    def count(self) -> int:
        return self.k_minus + self.k_plus + 1

    @property
    def nodes(self) -> np.ndarray:
        return np.arange(-self.k_minus, self.k_plus + 1) * self.k

    @property
    def prefactor(self) -> float:
        return 2.0 * self.k * math.sin(math.pi * self.beta) / math.pi

    def shifts(self):
        """Per-node ``(mass_coeff, stiffness_coeff, weight)`` arrays.

        Node ``l`` contributes ``weight * (mass_coeff M + stiffness_coeff K)^{-1}``.
        Positive nodes are rescaled by ``exp(-2 y)`` so nothing overflows.
        """
        y = self.nodes
        neg = y <= 0
        mass_coeff = np.where(neg, 1.0, np.exp(-2.0 * np.abs(y)))
        stiff_coeff = np.where(neg, np.exp(-2.0 * np.abs(y)), 1.0)
        expo = np.where(neg, 2.0 * self.beta * y, 2.0 * (self.beta - 1.0) * y)
        return mass_coeff, stiff_coeff, self.prefactor * np.exp(expo)


def _check_beta(beta):
    if not 0.0 < beta < 1.0:
        raise ValueError(f"beta must lie in (0, 1), got {beta}")


def calibrate_k(h: float, beta: float, strategy: str = "experiment", *, d: int | None = None,
                rho: float | None = None) -> float:
    """Quadrature step for mesh size ``h``.

    ``"experiment"`` gives ``k = -1 / (beta ln h)``. ``"weak-theory"`` balances
    ``exp(-pi^2 / (2k)) = h^rho`` with unit constant; ``rho`` defaults to the
    weak-error target for eigenvalue growth ``alpha = 2 / d``.
    """
    if not 0.0 < h < 1.0:
        raise ValueError(f"mesh size must lie in (0, 1), got {h}")
    _check_beta(beta)
    log_h = math.log(h)
    if strategy == "experiment":
        return -1.0 / (beta * log_h)
    if strategy != "weak-theory":
        raise ValueError(f"unknown calibration strategy {strategy!r}")
    if rho is None:
        if d is None:
            raise ValueError("weak-theory calibration needs d or rho")
        alpha = 2.0 / d
        ab = alpha * beta
        if math.isclose(ab, 1.0):
            # exp(-pi^2/(2k)) max(1, |ln h|) = h^d
            return math.pi**2 / (2.0 * (d * abs(log_h) + math.log(max(1.0, abs(log_h)))))
        rho = d * ab if ab < 1.0 else d * (2.0 * ab - 1.0)
    if rho <= 0:
        raise ValueError("rate exponent rho must be positive")
    return math.pi**2 / (2.0 * rho * abs(log_h))


def build_scheme(beta: float, k: float) -> SincScheme:
    _check_beta(beta)
    if not k > 0:
        raise ValueError(f"quadrature step must be positive, got {k}")
    k_minus = math.ceil(math.pi**2 / (4.0 * beta * k * k))
    k_plus = math.ceil(math.pi**2 / (4.0 * (1.0 - beta) * k * k))
    return SincScheme(beta=beta, k=k, k_minus=k_minus, k_plus=k_plus)


def _upper_banded(matrix, bandwidth):
    """LAPACK upper banded storage ``ab[u + i - j, j] = a[i, j]``."""
    coo = sp.triu(matrix).tocoo()
    ab = np.zeros((bandwidth + 1, matrix.shape[0]))
    ab[bandwidth + coo.row - coo.col, coo.col] = coo.data
    return ab


def bandwidth(matrix) -> int:
    coo = sp.coo_matrix(matrix)
    return int(np.max(np.abs(coo.row - coo.col))) if coo.nnz else 0


class FractionalOperator:
    """Sinc-quadrature approximation of ``L_h^{-beta}`` acting on load vectors.

    In ``"operator"`` mode each quadrature node keeps a banded Cholesky
    factor of its shifted matrix, computed once at construction. In
    ``"dense"`` mode the full matrix ``Q`` is assembled up front.

    Other approximations of ``L_h^{-beta}`` can be used wherever this class
    is expected by providing ``apply(b)`` and ``size``.
    """

    def __init__(self, mass, stiffness, kappa: float, scheme: SincScheme, *,
                 mode: str = "operator", block_size: int | None = None,
                 memory_cap: int = DEFAULT_MEMORY_CAP, threads: int = 1):
        if mass.shape != stiffness.shape or mass.shape[0] != mass.shape[1]:
            raise ValueError("mass and stiffness must be square of equal size")
        self.mass = sp.csr_matrix(mass)
        self.shifted = sp.csr_matrix(kappa**2 * mass + stiffness)
        self.kappa = kappa
        self.scheme = scheme
        self.mode = mode
        self.size = mass.shape[0]
        if mode == "operator":
            self._factors = _factorize_all(self.mass, self.shifted, scheme, threads)
            self.q = None
        elif mode == "dense":
            self._factors = None
            self.q = assemble_q(self.mass, self.shifted, scheme, block_size=block_size,
                                memory_cap=memory_cap)
        else:
            raise ValueError(f"unknown mode {mode!r}")

    def apply(self, b: np.ndarray) -> np.ndarray:
        """Apply the quadrature sum to a load vector or to the columns of a matrix."""
        b = np.asarray(b, dtype=float)
        if b.shape[0] != self.size:
            raise ValueError(f"load has length {b.shape[0]}, operator size is {self.size}")
        if self.q is not None:
            return self.q @ b
        _, _, weights = self.scheme.shifts()
        out = np.zeros_like(b)
        for w, factor in zip(weights, self._factors):
            out += w * sla.cho_solve_banded(factor, b, check_finite=False)
        return out

    __call__ = apply


def _factorize_all(mass, shifted, scheme, threads=1):
    bw = max(bandwidth(mass), bandwidth(shifted))
    ab_m = _upper_banded(mass, bw)
    ab_k = _upper_banded(shifted, bw)
    mass_coeff, stiff_coeff, _ = scheme.shifts()

    def factor(args):
        a, g = args
        try:
            return sla.cholesky_banded(a * ab_m + g * ab_k, lower=False), False
        except np.linalg.LinAlgError as exc:
            raise np.linalg.LinAlgError(
                f"shifted matrix not positive definite (mass coeff {a:g}, stiffness coeff {g:g})"
            ) from exc

    pairs = list(zip(mass_coeff, stiff_coeff))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(factor, pairs))
    return [factor(p) for p in pairs]


def apply_fractional_inverse(op: FractionalOperator, b: np.ndarray) -> np.ndarray:
    return op.apply(b)


def _check_budget(n, memory_cap):
    need = 8 * n * n
    if need > memory_cap:
        raise MemoryBudgetError(
            f"dense {n}x{n} matrix needs {need / 2**30:.2f} GiB, cap is "
            f"{memory_cap / 2**30:.2f} GiB; use operator mode or a coarser mesh"
        )


def assemble_q(mass, shifted, scheme: SincScheme, *, block_size: int | None = None,
               memory_cap: int = DEFAULT_MEMORY_CAP) -> np.ndarray:
    """Dense quadrature matrix ``Q`` (acting on load vectors).

    Every term ``(a M + g K)^{-1}`` is inverted exactly. Tridiagonal matrices
    use the ratio form of the inverse of a tridiagonal matrix; block
    tridiagonal matrices with blocks of ``block_size`` use the block analogue.
    Anything else falls back to solving against unit vectors.
    """
    mass = sp.csr_matrix(mass)
    shifted = sp.csr_matrix(shifted)
    n = mass.shape[0]
    _check_budget(n, memory_cap)
    bw = max(bandwidth(mass), bandwidth(shifted))
    mass_coeff, stiff_coeff, weights = scheme.shifts()
    if bw <= 1:
        q = _tridiagonal_sum(mass, shifted, mass_coeff, stiff_coeff, weights)
        if q is not None:
            return q
    elif block_size and block_size > 1 and _is_block_tridiagonal(mass, shifted, block_size):
        return _block_tridiagonal_sum(mass, shifted, block_size, mass_coeff, stiff_coeff, weights)
    return _columnwise_sum(mass, shifted, scheme)


def _is_block_tridiagonal(mass, shifted, nb):
    if mass.shape[0] % nb:
        return False
    for mat in (mass, shifted):
        coo = sp.coo_matrix(mat)
        if np.any(np.abs(coo.row // nb - coo.col // nb) > 1):
            return False
    return True


def _columnwise_sum(mass, shifted, scheme):
    factors = _factorize_all(mass, shifted, scheme)
    _, _, weights = scheme.shifts()
    n = mass.shape[0]
    q = np.zeros((n, n))
    eye = np.eye(n)
    for w, factor in zip(weights, factors):
        q += w * sla.cho_solve_banded(factor, eye, check_finite=False)
    return 0.5 * (q + q.T)


def _tridiagonal_sum(mass, shifted, mass_coeff, stiff_coeff, weights, leaf=16):
    """Sum of weighted inverses of SPD tridiagonal matrices ``a M + g K``.

    For a tridiagonal ``T`` with forward pivots ``d`` and backward pivots
    ``e``, ``T^{-1}[j, j] = 1 / (d_j + e_j - T[j, j])`` and, for ``i < j``,
    ``T^{-1}[i, j] = T^{-1}[j, j] * prod_{k=i}^{j-1} (-T[k, k+1] / d_k)``.
    The products are carried as exponentials of cumulative log-ratios and
    anchored so that every exponent in a low-rank block is non-positive.
    Returns ``None`` if some ratio exceeds one in magnitude.
    """
    n = mass.shape[0]
    a = mass_coeff[:, None]
    g = stiff_coeff[:, None]
    diag = a * mass.diagonal()[None, :] + g * shifted.diagonal()[None, :]
    off = a * mass.diagonal(1)[None, :] + g * shifted.diagonal(1)[None, :]
    nodes = diag.shape[0]
    fwd = np.empty_like(diag)
    bwd = np.empty_like(diag)
    fwd[:, 0] = diag[:, 0]
    for i in range(1, n):
        fwd[:, i] = diag[:, i] - off[:, i - 1] ** 2 / fwd[:, i - 1]
    bwd[:, -1] = diag[:, -1]
    for i in range(n - 2, -1, -1):
        bwd[:, i] = diag[:, i] - off[:, i] ** 2 / bwd[:, i + 1]
    if np.any(fwd <= 0) or np.any(bwd <= 0):
        raise np.linalg.LinAlgError("shifted matrix not positive definite")
    inv_diag = 1.0 / (fwd + bwd - diag)
    with np.errstate(divide="ignore"):
        log_ratio = np.log(np.abs(off)) - np.log(fwd[:, :-1])
    if np.any(log_ratio > 0):
        return None
    cum = np.zeros((nodes, n))
    np.cumsum(log_ratio, axis=1, out=cum[:, 1:])
    sign = np.ones((nodes, n))
    np.cumprod(-np.sign(off), axis=1, out=sign[:, 1:])
    sign[sign == 0] = 1.0  # paired with a zero ratio, value is irrelevant
    wdiag = weights[:, None] * inv_diag * sign

    q = np.empty((n, n))

    def fill(lo, hi):
        if hi - lo <= leaf:
            idx = np.arange(lo, hi)
            expo = cum[:, None, lo:hi] - cum[:, lo:hi, None]
            expo[:, idx[:, None] > idx[None, :]] = -np.inf
            block = np.einsum("li,lj,lij->ij", sign[:, lo:hi], wdiag[:, lo:hi], np.exp(expo))
            upper = np.triu(block)
            q[lo:hi, lo:hi] = upper + np.triu(upper, 1).T
            return
        mid = (lo + hi) // 2
        fill(lo, mid)
        fill(mid, hi)
        left = sign[:, lo:mid] * np.exp(cum[:, mid, None] - cum[:, lo:mid])
        right = wdiag[:, mid:hi] * np.exp(cum[:, mid:hi] - cum[:, mid, None])
        block = left.T @ right
        q[lo:mid, mid:hi] = block
        q[mid:hi, lo:mid] = block.T

    with np.errstate(under="ignore"):
        fill(0, n)
    return q


def _block_tridiagonal_sum(mass, shifted, nb, mass_coeff, stiff_coeff, weights,
                           workspace=256 * 2**20):
    """Block analogue of :func:`_tridiagonal_sum` with diagonal blocks of size ``nb``.

    With forward Schur complements ``D_I`` and backward ones ``E_I`` of
    ``T = tridiag(B^T, A, B)``, the diagonal blocks of the inverse are
    ``(D_J - B_J E_{J+1}^{-1} B_J^T)^{-1}`` and the blocks above follow from
    ``X_{I,J} = -D_I^{-1} B_I X_{I+1,J}``.
    """
    n = mass.shape[0]
    blocks = n // nb
    def blocks_of(mat):
        mat = sp.csr_matrix(mat)
        diag = np.stack([mat[i * nb:(i + 1) * nb, i * nb:(i + 1) * nb].toarray()
                         for i in range(blocks)])
        upper = np.stack([mat[i * nb:(i + 1) * nb, (i + 1) * nb:(i + 2) * nb].toarray()
                          for i in range(blocks - 1)]) if blocks > 1 else np.zeros((0, nb, nb))
        return diag, upper

    # three stacks of per-node blocks live at once
    chunk = int(max(1, min(32, workspace // (24 * blocks * nb * nb))))
    am, bm = blocks_of(mass)
    ak, bk = blocks_of(shifted)
    q = np.zeros((n, n))
    for start in range(0, len(weights), chunk):
        sl = slice(start, start + chunk)
        a = mass_coeff[sl, None, None]
        g = stiff_coeff[sl, None, None]
        w = weights[sl]
        diag = [a * am[i] + g * ak[i] for i in range(blocks)]
        up = [a * bm[i] + g * bk[i] for i in range(blocks - 1)]
        # forward: D_0 = A_0, D_I = A_I - B_{I-1}^T D_{I-1}^{-1} B_{I-1}
        ratio = [None] * (blocks - 1)  # -D_I^{-1} B_I
        fwd = diag[0]
        fwd_list = [fwd]
        for i in range(blocks - 1):
            sol = np.linalg.solve(fwd, up[i])
            ratio[i] = -sol
            fwd = diag[i + 1] - np.swapaxes(up[i], 1, 2) @ sol
            fwd_list.append(fwd)
        # backward: E_last = A_last, E_I = A_I - B_I E_{I+1}^{-1} B_I^T
        xdiag = [None] * blocks
        xdiag[-1] = np.linalg.inv(fwd_list[-1])
        bwd = diag[-1]
        for i in range(blocks - 2, -1, -1):
            corr = up[i] @ np.linalg.solve(bwd, np.swapaxes(up[i], 1, 2))
            xdiag[i] = np.linalg.inv(fwd_list[i] - corr)
            bwd = diag[i] - corr
        for j in range(blocks):
            x = 0.5 * (xdiag[j] + np.swapaxes(xdiag[j], 1, 2))
            cols = slice(j * nb, (j + 1) * nb)
            q[cols, cols] += np.tensordot(w, x, axes=1)
            for i in range(j - 1, -1, -1):
                x = ratio[i] @ x
                q[i * nb:(i + 1) * nb, cols] += np.tensordot(w, x, axes=1)
    # only the upper block triangle was accumulated
    for j in range(blocks):
        for i in range(j):
            q[j * nb:(j + 1) * nb, i * nb:(i + 1) * nb] = q[i * nb:(i + 1) * nb, j * nb:(j + 1) * nb].T
    return q


def generalized_eigenpairs(mass, shifted):
    """Eigenpairs of ``K v = lambda M v`` with ``M``-orthonormal eigenvectors."""
    n = mass.shape[0]
    if n > ORACLE_MAX_DOFS:
        raise MemoryBudgetError(f"dense eigensolver limited to {ORACLE_MAX_DOFS} dofs, got {n}")
    lam, vec = sla.eigh(_dense(shifted), _dense(mass))
    return lam, vec


def oracle_fractional_inverse(mass, shifted, beta: float) -> np.ndarray:
    """Dense matrix mapping a load ``b`` to the coefficients of ``L_h^{-beta}``
    applied to the function represented by ``b``."""
    lam, vec = generalized_eigenpairs(mass, shifted)
    return (vec * lam ** (-beta)) @ vec.T


def _dense(mat):
    return mat.toarray() if sp.issparse(mat) else np.asarray(mat, dtype=float)
