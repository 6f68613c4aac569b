"""Weak-error study: discrete variances, expectations, errors and fitted rates."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
import csv
import logging
import math

import numpy as np
import scipy.sparse as sp

from . import __version__
from .mesh import UniformMesh, assemble_mass, assemble_stiffness, build_mesh, locate
from .quadrature import DEFAULT_MEMORY_CAP, assemble_q, build_scheme, calibrate_k
from .spectral import (
    DEFAULT_N_OK,
    AbsPower,
    EvalGrid,
    Probit,
    SpectralModel,
    expectation,
    parse_functional,
    reference_variance_grid,
)

log = logging.getLogger(__name__)

DEFAULT_FUNCTIONALS = (AbsPower(2), AbsPower(3), AbsPower(4), Probit(0.5, 20.0))
DEFAULT_BETAS = (0.6, 0.7, 0.8, 0.9)
DEFAULT_MESHES = {1: (511, 1023, 2047, 4095), 2: (15, 31, 63, 127)}

ROW_FIELDS = ("beta", "d", "N_h", "h", "k", "K_minus", "K_plus", "functional",
              "E_ref", "E_disc", "abs_error")
RATE_FIELDS = ("beta", "d", "functional", "rate_observed", "rate_theory", "intercept")


def discrete_variance_grid(q: np.ndarray, mass, mesh: UniformMesh, grid: EvalGrid, *,
                           return_clamped: bool = False, chunk: int = 1 << 19):
    """Pointwise variance ``phi(x)^T Q M Q^T phi(x)`` of the finite element field.

    Only the entries of ``C = Q M Q^T`` on the sparsity pattern of ``M`` are
    formed: these are exactly the vertex pairs that share an element.
    """
    q = np.asarray(q)
    mass = sp.csr_matrix(mass)
    n = mesh.dof_count
    if q.shape != (n, n) or mass.shape != (n, n):
        raise ValueError(f"Q {q.shape} and M {mass.shape} must both be {n}x{n}")
    if grid.d != mesh.d:
        raise ValueError("grid and mesh dimensions differ")
    cov = _pattern_covariance(q, mass)
    blocks = _element_blocks(cov, mesh)
    coords = grid.coordinates()
    out = np.empty(len(coords))
    for start in range(0, len(coords), chunk):
        sl = slice(start, start + chunk)
        elem, w = locate(mesh, coords[sl])
        out[sl] = np.einsum("pr,prs,ps->p", w, blocks[elem], w)
    floor = -1e-12 * max(1.0, float(np.max(np.abs(out), initial=0.0)))
    if np.any(out < floor):
        raise ValueError(f"negative discrete variance {out.min():.3e}; Q is not consistent")
    clamped = int(np.count_nonzero(out < 0))
    out = np.maximum(out, 0.0).reshape(grid.shape)
    return (out, clamped) if return_clamped else out


def _pattern_covariance(q, mass, chunk=1024):
    """``C = Q M Q^T`` restricted to the upper pattern of ``M``, symmetrized.

    Row ``j`` of ``Q M`` is ``M Q[j]`` for symmetric ``Q`` and ``M``, so it is
    formed per chunk instead of as a second dense matrix.
    """
    upper = sp.triu(mass).tocoo()
    rows, cols = upper.row, upper.col
    vals = np.empty(len(rows))
    for start in range(0, len(rows), chunk):
        r = rows[start:start + chunk]
        c = cols[start:start + chunk]
        qr, qc = q[r], q[c]
        qm_r = (mass @ qr.T).T
        qm_c = (mass @ qc.T).T
        vals[start:start + chunk] = 0.5 * (
            np.einsum("ij,ij->i", qr, qm_c) + np.einsum("ij,ij->i", qc, qm_r)
        )
    cov = sp.csr_matrix((vals, (rows, cols)), shape=mass.shape)
    return cov + sp.triu(cov, 1).T


def _element_blocks(cov, mesh):
    elements = mesh.elements()
    verts = np.where(elements >= 0, elements, 0)
    r = np.repeat(verts, verts.shape[1], axis=1)
    c = np.tile(verts, (1, verts.shape[1]))
    vals = np.asarray(cov.tocsr()[r.ravel(), c.ravel()]).reshape(r.shape)
    live = (np.repeat(elements, elements.shape[1], axis=1) >= 0) & (
        np.tile(elements, (1, elements.shape[1])) >= 0
    )
    vals = np.where(live, vals, 0.0)
    m = elements.shape[1]
    return vals.reshape(-1, m, m)


def discrete_expectation(spec, variance_grid, grid: EvalGrid) -> float:
    return expectation(spec, variance_grid, grid)


def weak_error(e_ref: float, e_disc: float) -> float:
    return abs(e_ref - e_disc)


def fit_rate(points):
    """Least-squares line ``ln err = c + r ln h``; returns ``(c, r)``.

    Points with zero error are dropped with a warning.
    """
    pts = [(float(h), float(e)) for h, e in points]
    usable = []
    for h, e in pts:
        if not 0.0 < h < 1.0:
            raise ValueError(f"mesh size {h} outside (0, 1)")
        if e < 0 or not math.isfinite(e):
            raise ValueError(f"invalid error value {e}")
        if e == 0.0:
            log.warning("dropping zero error at h=%g from rate fit", h)
            continue
        usable.append((h, e))
    if len(usable) < 2:
        raise ValueError("fewer than 2 usable points for the rate fit")
    x = np.log([h for h, _ in usable])
    y = np.log([e for _, e in usable])
    design = np.column_stack([np.ones_like(x), x])
    (c, r), *_ = np.linalg.lstsq(design, y, rcond=None)
    return float(c), float(r)


def theory_rate(beta: float, d: int) -> float:
    return round(min(4.0 * beta - d, 2.0), 12)


@dataclass
class StudyConfig:
    d: int = 1
    kappa: float = 0.5
    betas: tuple = DEFAULT_BETAS
    meshes: tuple | None = None
    strategy: str = "experiment"
    n_ok: int | None = None
    functionals: tuple = DEFAULT_FUNCTIONALS
    grid_points: int | None = None
    threads: int = 1
    memory_cap: int = DEFAULT_MEMORY_CAP

    def __post_init__(self):
        if self.d not in (1, 2):
            raise ValueError(f"d must be 1 or 2, got {self.d}")
        if not self.betas:
            raise ValueError("at least one beta is required")
        for b in self.betas:
            if not 0.0 < b < 1.0:
                raise ValueError(f"beta must lie in (0, 1), got {b}")
        if self.meshes is None:
            self.meshes = DEFAULT_MESHES[self.d]
        if not self.meshes:
            raise ValueError("at least one mesh is required")
        self.betas = tuple(float(b) for b in self.betas)
        self.meshes = tuple(int(m) for m in self.meshes)
        self.functionals = tuple(
            parse_functional(f) if isinstance(f, str) else f for f in self.functionals
        )
        if self.n_ok is None:
            self.n_ok = DEFAULT_N_OK[self.d]
        if self.grid_points is None:
            self.grid_points = self.n_ok

    def provenance(self) -> dict:
        out = asdict(self)
        out["functionals"] = [f.name for f in self.functionals]
        out["betas"] = list(self.betas)
        out["meshes"] = list(self.meshes)
        out["version"] = __version__
        out["numpy"] = np.__version__
        return out


@dataclass
class StudyRow:
    beta: float
    d: int
    N_h: int
    h: float
    k: float
    K_minus: int
    K_plus: int
    functional: str
    E_ref: float
    E_disc: float
    abs_error: float


@dataclass
class RateRow:
    beta: float
    d: int
    functional: str
    rate_observed: float
    rate_theory: float
    intercept: float


@dataclass
class StudyResult:
    rows: list = field(default_factory=list)
    rates: list = field(default_factory=list)
    failures: list = field(default_factory=list)
    clamped: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return not self.failures

    def rate(self, beta: float, functional: str) -> RateRow:
        for r in self.rates:
            if math.isclose(r.beta, beta) and r.functional == functional:
                return r
        raise KeyError((beta, functional))


def plan_cells(config: StudyConfig):
    """``(beta, n, mesh_size, k, scheme)`` for every cell, in output order."""
    cells = []
    for beta in config.betas:
        for n in config.meshes:
            mesh = build_mesh(config.d, n)
            k = calibrate_k(mesh.mesh_size, beta, config.strategy, d=config.d)
            cells.append((beta, n, mesh, k, build_scheme(beta, k)))
    return cells


def _run_cell(config, grid, beta, mesh, scheme):
    mass = assemble_mass(mesh)
    stiff = assemble_stiffness(mesh)
    q = assemble_q(mass, config.kappa**2 * mass + stiff, scheme, block_size=mesh.n,
                   memory_cap=config.memory_cap)
    var, clamped = discrete_variance_grid(q, mass, mesh, grid, return_clamped=True)
    del q
    return {f.name: discrete_expectation(f, var, grid) for f in config.functionals}, clamped


def run_study(config: StudyConfig, progress=None) -> StudyResult:
    """Reference and discrete expectations for every (beta, mesh) cell, plus rates.

    A failing cell is recorded in ``failures`` and the remaining cells still
    run; rates are fitted from whatever rows completed.
    """
    grid = EvalGrid(config.d, config.grid_points)
    result = StudyResult(provenance=config.provenance())
    cells = plan_cells(config)
    refs = {}
    for beta in config.betas:
        model = SpectralModel(config.d, config.kappa, beta, config.n_ok)
        var = reference_variance_grid(model, grid)
        refs[beta] = {f.name: expectation(f, var, grid) for f in config.functionals}
        del var

    def work(cell):
        beta, n, mesh, k, scheme = cell
        try:
            out = _run_cell(config, grid, beta, mesh, scheme)
        except Exception as exc:  # recorded per cell, the study continues
            return cell, None, f"{type(exc).__name__}: {exc}"
        if progress:
            progress(f"beta={beta:g} N_h={mesh.dof_count} done")
        return cell, out, None

    if config.threads > 1:
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            outcomes = list(pool.map(work, cells))
    else:
        outcomes = [work(c) for c in cells]

    for (beta, n, mesh, k, scheme), out, err in outcomes:
        if err is not None:
            result.failures.append({"beta": beta, "N_h": mesh.dof_count, "error": err})
            continue
        disc, clamped = out
        result.clamped[(beta, mesh.dof_count)] = clamped
        for f in config.functionals:
            e_ref = refs[beta][f.name]
            e_disc = disc[f.name]
            result.rows.append(StudyRow(beta, config.d, mesh.dof_count, mesh.mesh_size, k,
                                        scheme.k_minus, scheme.k_plus, f.name, e_ref, e_disc,
                                        weak_error(e_ref, e_disc)))
    for beta in config.betas:
        for f in config.functionals:
            pts = [(r.h, r.abs_error) for r in result.rows
                   if r.beta == beta and r.functional == f.name]
            if len(config.meshes) >= 2 and len(pts) < 2 and result.failures:
                continue  # cells failed; the failure list already says why
            c, r = fit_rate(pts)
            result.rates.append(RateRow(beta, config.d, f.name, r, theory_rate(beta, config.d), c))
    return result


def _fmt(value):
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_csv(path, records, fields, header_lines=()):
    """CSV with ``#``-prefixed comment lines before the column header."""
    with open(path, "w", newline="") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(fields)
        for rec in records:
            d = asdict(rec) if not isinstance(rec, dict) else rec
            writer.writerow([_fmt(d[k]) for k in fields])


def plot_errors(result: StudyResult, path_template: str) -> list:
    """One log-log SVG per functional: weak error against h, one series per beta."""
    import matplotlib

    matplotlib.use("svg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "fracfield"
    matplotlib.rcParams["svg.fonttype"] = "none"
    written = []
    functionals = sorted({r.functional for r in result.rows})
    for name in functionals:
        fig, ax = plt.subplots(figsize=(4.5, 3.5))
        for beta in sorted({r.beta for r in result.rows}):
            pts = sorted((r.h, r.abs_error) for r in result.rows
                         if r.functional == name and r.beta == beta)
            ax.loglog(*zip(*pts), marker="o", label=f"beta = {beta:g}")
        ax.set_xlabel("h")
        ax.set_ylabel("weak error")
        ax.set_title(name)
        ax.legend()
        path = path_template.format(functional=name.replace(":", "_"))
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
        written.append(path)
    return written
