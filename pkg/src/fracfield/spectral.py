"""Exact spectral quantities for ``(kappa^2 - Laplacian)^beta u = W`` on the unit cube.

The Dirichlet eigenpairs are known in closed form, which gives the pointwise
variance of ``u`` as a series and, through Gaussian moment identities, the
expectations of the integral functionals used in the weak-error study.
"""
from __future__ import annotations

from dataclasses import dataclass
import math
from typing import Union

import numpy as np
from scipy.special import gamma, ndtr

DEFAULT_N_OK = {1: 1 + 2**18, 2: 1 + 2**11}


@dataclass(frozen=True)
class SpectralModel:
    d: int
    kappa: float
    beta: float
    n_ok: int

    def __post_init__(self):
        if self.d not in (1, 2):
            raise ValueError(f"dimension must be 1 or 2, got {self.d}")
        if self.kappa < 0:
            raise ValueError("kappa must be non-negative")
        if not 0.0 < self.beta <= 1.0:
            raise ValueError(f"beta must lie in (0, 1], got {self.beta}")
        if self.n_ok < 1:
            raise ValueError("n_ok must be positive")

    @property
    def converges(self) -> bool:
        """Whether the variance series is summable (``4 beta / d > 1``)."""
        return 4.0 * self.beta / self.d > 1.0


@dataclass(frozen=True)
class AbsPower:
    """``f(u) = |u|^p``."""

    p: int

    def __post_init__(self):
        if int(self.p) != self.p or self.p < 2:
            raise ValueError(f"AbsPower needs an integer p >= 2, got {self.p}")

    @property
    def name(self) -> str:
        return f"abs{self.p}"

    def expected(self, variance: np.ndarray) -> np.ndarray:
        """``E|Z|^p`` for ``Z ~ N(0, variance)``, pointwise."""
        sigma = np.sqrt(np.maximum(variance, 0.0))
        if self.p == 2:
            return np.maximum(variance, 0.0)
        return moment_mu(self.p) * sigma**self.p


@dataclass(frozen=True)
class Probit:
    """``f(u) = Phi(c (u - a))`` with ``Phi`` the standard normal CDF."""

    a: float = 0.5
    c: float = 20.0

    def __post_init__(self):
        if not self.c > 0:
            raise ValueError("Probit slope c must be positive")

    @property
    def name(self) -> str:
        return f"probit:{self.a:g}:{self.c:g}"

    def expected(self, variance: np.ndarray) -> np.ndarray:
        var = np.maximum(variance, 0.0)
        return ndtr(-self.a / np.sqrt(self.c**-2 + var))


FunctionalSpec = Union[AbsPower, Probit]


def parse_functional(text: str):
    """Inverse of ``.name``: ``abs<p>``, ``probit`` or ``probit:<a>:<c>``."""
    text = text.strip()
    try:
        if text.startswith("abs"):
            return AbsPower(int(text[3:]))
        if text == "probit":
            return Probit()
        if text.startswith("probit:"):
            _, a, c = text.split(":")
            return Probit(float(a), float(c))
    except ValueError as exc:
        raise ValueError(f"bad functional {text!r}: {exc}") from None
    raise ValueError(f"unknown functional {text!r}")


def eigenvalue(model: SpectralModel, j) -> float:
    j = np.atleast_1d(np.asarray(j))
    if j.shape != (model.d,):
        raise ValueError(f"multi-index must have {model.d} components")
    if np.any(j < 1):
        raise ValueError("multi-index components must be >= 1")
    return model.kappa**2 + math.pi**2 * float(np.sum(j.astype(float) ** 2))


def eigenpair(model: SpectralModel, j):
    """Eigenvalue and eigenfunction for the multi-index ``j``.

    The eigenfunction accepts points of shape ``(P, d)`` (or a single point)
    and returns the product of ``sqrt(2) sin(pi j_i x_i)``.
    """
    lam = eigenvalue(model, j)
    jj = np.atleast_1d(np.asarray(j, dtype=float))

    def efun(x):
        x = np.asarray(x, dtype=float)
        single = x.ndim <= 1
        pts = x.reshape(-1, model.d)
        vals = np.prod(math.sqrt(2.0) * np.sin(math.pi * jj * pts), axis=1)
        return vals[0] if single else vals

    return lam, efun


@dataclass(frozen=True)
class EvalGrid:
    """Tensor grid of ``points`` equally spaced nodes per axis, endpoints included."""

    d: int
    points: int

    def __post_init__(self):
        if self.points < 2:
            raise ValueError("evaluation grid needs at least the two endpoints")

    @property
    def axis(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.points)

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.points,) * self.d

    def coordinates(self) -> np.ndarray:
        """All grid points, shape ``(points**d, d)``, x fastest."""
        if self.d == 1:
            return self.axis[:, None]
        xx, yy = np.meshgrid(self.axis, self.axis, indexing="xy")
        return np.column_stack([xx.ravel(), yy.ravel()])


def trapezoid(values: np.ndarray, grid: EvalGrid) -> float:
    """Composite (tensorized) trapezoidal rule over the unit cube."""
    values = np.asarray(values, dtype=float)
    if values.shape != grid.shape:
        raise ValueError(f"values of shape {values.shape} do not match grid {grid.shape}")
    w = np.full(grid.points, 1.0 / (grid.points - 1))
    w[0] = w[-1] = 0.5 / (grid.points - 1)
    if grid.d == 1:
        return float(w @ values)
    # rows of a 2D grid array are indexed by y
    return float(w @ values @ w)


def _mode_weights(model: SpectralModel) -> np.ndarray:
    j = np.arange(1, model.n_ok + 1, dtype=float)
    return (model.kappa**2 + math.pi**2 * j**2) ** (-2.0 * model.beta)


def reference_variance_grid(model: SpectralModel, grid: EvalGrid) -> np.ndarray:
    """Truncated series ``sum_j lambda_j^(-2 beta) e_j(x)^2`` on ``grid``.

    Uses ``n_ok`` modes per axis. Returns an array of shape ``grid.shape``
    (indexed ``[y, x]`` in 2D).
    """
    if grid.d != model.d:
        raise ValueError("grid and model dimensions differ")
    if not model.converges:
        raise ValueError(
            f"variance series diverges for beta={model.beta}, d={model.d} (need 4*beta/d > 1)"
        )
    if model.d == 1:
        out = _variance_1d(model, grid)
    else:
        out = _variance_2d(model, grid)
    # eigenfunctions vanish on the boundary; remove round-off there
    if model.d == 1:
        out[[0, -1]] = 0.0
    else:
        out[[0, -1], :] = 0.0
        out[:, [0, -1]] = 0.0
    return np.maximum(out, 0.0)


def _variance_1d(model, grid):
    # e_j(x)^2 = 1 - cos(2 pi j x); on x_m = m / P the cosine sum is the real
    # part of a length-P DFT of the coefficients folded modulo P.
    coeff = _mode_weights(model)
    period = grid.points - 1
    folded = np.zeros(period)
    j = np.arange(1, model.n_ok + 1)
    np.add.at(folded, j % period, coeff)
    cos_sum = np.fft.fft(folded).real
    total = math.fsum(coeff[::-1])
    out = np.empty(grid.points)
    out[:period] = total - cos_sum
    out[period] = total - cos_sum[0]
    return out


def _variance_2d(model, grid, block: int = 512):
    # sigma^2 = sum_{j1, j2} lambda^(-2 beta) s_{j1}(x) s_{j2}(y), s_j = 2 sin^2(pi j t)
    j = np.arange(1, model.n_ok + 1, dtype=float)
    lam = model.kappa**2 + math.pi**2 * (j[:, None] ** 2 + j[None, :] ** 2)
    coeff = lam ** (-2.0 * model.beta)
    axis = grid.axis
    basis = np.empty((grid.points, model.n_ok))
    for start in range(0, grid.points, block):
        sl = slice(start, start + block)
        basis[sl] = 2.0 * np.sin(math.pi * np.outer(axis[sl], j)) ** 2
    # coeff is symmetric, so the [y, x] orientation needs no transpose care
    return basis @ (coeff @ basis.T)


def expectation(spec, variance_grid: np.ndarray, grid: EvalGrid) -> float:
    """``E[ int f(u(x)) dx ]`` for a centred Gaussian field with the given variance."""
    variance_grid = np.asarray(variance_grid, dtype=float)
    if variance_grid.shape != grid.shape:
        raise ValueError(
            f"variance grid of shape {variance_grid.shape} does not match grid {grid.shape}"
        )
    return trapezoid(spec.expected(variance_grid), grid)


reference_expectation = expectation


def moment_mu(p: int) -> float:
    """Absolute moment ``E|Z|^p`` of a standard normal ``Z``."""
    if p <= 0:
        raise ValueError("moment order must be positive")
    return math.sqrt(2.0**p / math.pi) * math.gamma((p + 1) / 2.0)


def matern_scale(sigma_star: float, kappa: float, beta: float, d: int) -> float:
    """Noise scaling giving a Matérn field of marginal std ``sigma_star``."""
    if kappa <= 0:
        raise ValueError("kappa must be positive")
    if 2.0 * beta - d / 2.0 <= 0:
        raise ValueError("need 2*beta > d/2 for a finite Matérn variance")
    if sigma_star < 0:
        raise ValueError("sigma_star must be non-negative")
    return (
        sigma_star
        * (4.0 * math.pi) ** (d / 4.0)
        * kappa ** (2.0 * beta - d / 2.0)
        * math.sqrt(float(gamma(2.0 * beta)) / float(gamma(2.0 * beta - d / 2.0)))
    )
