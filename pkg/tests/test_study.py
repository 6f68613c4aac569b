import csv
import math

import numpy as np
import pytest

from fracfield.mesh import assemble_mass, assemble_stiffness, basis_matrix, build_mesh
from fracfield.quadrature import assemble_q, build_scheme, oracle_fractional_inverse
from fracfield.spectral import (
    AbsPower,
    EvalGrid,
    Probit,
    SpectralModel,
    expectation,
    reference_variance_grid,
    trapezoid,
)
from fracfield.study import (
    ROW_FIELDS,
    StudyConfig,
    discrete_expectation,
    discrete_variance_grid,
    fit_rate,
    run_study,
    theory_rate,
    weak_error,
    write_csv,
)

KAPPA = 0.5


def test_weak_error_examples():
    assert weak_error(1.0, 1.0) == 0.0
    assert weak_error(0.2, 0.5) == pytest.approx(0.3)
    assert weak_error(0.5, 0.2) == weak_error(0.2, 0.5)


def test_fit_rate_examples():
    hs = [1 / 8, 1 / 16, 1 / 32, 1 / 64]
    c, r = fit_rate([(h, h**2) for h in hs])
    assert r == pytest.approx(2.0, abs=1e-12)
    c, r = fit_rate([(h, 3 * h**1.4) for h in hs])
    assert r == pytest.approx(1.4, abs=1e-12)
    assert c == pytest.approx(math.log(3), abs=1e-12)


def test_fit_rate_errors(caplog):
    with pytest.raises(ValueError, match="fewer than 2 usable points"):
        fit_rate([(0.1, 0.01)])
    with pytest.raises(ValueError, match="fewer than 2 usable points"):
        fit_rate([(0.1, 0.01), (0.05, 0.0)])
    assert "dropping zero error" in caplog.text
    with pytest.raises(ValueError):
        fit_rate([(1.5, 0.1), (0.5, 0.01)])


def test_theory_rate():
    assert theory_rate(0.6, 1) == 1.4
    assert theory_rate(0.7, 1) == 1.8
    assert theory_rate(0.9, 1) == 2.0
    assert theory_rate(0.7, 2) == 0.8


def test_discrete_variance_examples():
    mesh = build_mesh(1, 15)
    mass = assemble_mass(mesh)
    grid = EvalGrid(1, 65)
    assert np.all(discrete_variance_grid(np.zeros((15, 15)), mass, mesh, grid) == 0)
    q = assemble_q(mass, KAPPA**2 * mass + assemble_stiffness(mesh), build_scheme(0.7, 0.3))
    var = discrete_variance_grid(q, mass, mesh, grid)
    assert var[0] == 0 and var[-1] == 0
    with pytest.raises(ValueError):
        discrete_variance_grid(q[:5, :5], mass, mesh, grid)


@pytest.mark.parametrize("d,n", [(1, 9), (2, 5)])
def test_discrete_variance_matches_dense_quadratic_form(d, n):
    mesh = build_mesh(d, n)
    mass = assemble_mass(mesh)
    q = assemble_q(mass, KAPPA**2 * mass + assemble_stiffness(mesh), build_scheme(0.8, 0.4),
                   block_size=n)
    grid = EvalGrid(d, 23)
    phi = basis_matrix(mesh, grid.coordinates()).toarray()
    direct = np.einsum("pi,ij,pj->p", phi, q @ mass.toarray() @ q.T, phi)
    got = discrete_variance_grid(q, mass, mesh, grid)
    np.testing.assert_allclose(got.ravel(), direct, rtol=1e-12, atol=1e-16)


def test_discrete_variance_agrees_with_oracle():
    mesh = build_mesh(1, 63)
    mass = assemble_mass(mesh)
    shifted = KAPPA**2 * mass + assemble_stiffness(mesh)
    k = 0.25
    q = assemble_q(mass, shifted, build_scheme(0.75, k))
    oracle = oracle_fractional_inverse(mass, shifted, 0.75)
    grid = EvalGrid(1, 257)
    v_q = discrete_variance_grid(q, mass, mesh, grid)
    v_o = discrete_variance_grid(oracle, mass, mesh, grid)
    # Q = O + E with |E|_M <= 10 exp(-pi^2 / (2k)); the variance moves by O(|E|)
    assert np.max(np.abs(v_q - v_o)) <= 3 * 10 * math.exp(-math.pi**2 / (2 * k)) * np.max(v_o)


def test_discrete_expectation_examples():
    grid = EvalGrid(1, 129)
    var = reference_variance_grid(SpectralModel(1, KAPPA, 0.7, 2049), grid)
    for spec in (AbsPower(2), AbsPower(3), Probit()):
        assert discrete_expectation(spec, var, grid) == expectation(spec, var, grid)
    assert discrete_expectation(AbsPower(2), var, grid) == trapezoid(var, grid)
    tiny = np.full(grid.shape, 1e-30)
    assert discrete_expectation(Probit(), tiny, grid) == pytest.approx(7.62e-24, rel=1e-3)


def test_config_validation():
    with pytest.raises(ValueError):
        StudyConfig(d=3)
    with pytest.raises(ValueError):
        StudyConfig(betas=(1.2,))
    with pytest.raises(ValueError):
        StudyConfig(betas=())
    cfg = StudyConfig(d=2, functionals=("abs2", "probit"))
    assert cfg.meshes == (15, 31, 63, 127)
    assert StudyConfig(d=1).meshes == (511, 1023, 2047, 4095)
    assert cfg.n_ok == 1 + 2**11 and cfg.grid_points == cfg.n_ok
    assert [f.name for f in cfg.functionals] == ["abs2", "probit:0.5:20"]


def test_single_mesh_config_fails_rate_fit():
    with pytest.raises(ValueError, match="fewer than 2 usable points"):
        run_study(StudyConfig(d=1, betas=(0.7,), meshes=(31,), n_ok=4097, grid_points=513))


def test_small_study_shape_and_failure_reporting():
    cfg = StudyConfig(d=1, betas=(0.6, 0.8), meshes=(15, 31, 63), n_ok=4097, grid_points=513,
                      memory_cap=8 * 40 * 40)
    res = run_study(cfg)
    # only the n = 15 and n = 31 cells fit under the cap
    assert not res.ok
    assert [(f["beta"], f["N_h"]) for f in res.failures] == [(0.6, 63), (0.8, 63)]
    assert "MemoryBudgetError" in res.failures[0]["error"]
    assert len(res.rows) == 2 * 2 * 4
    assert len(res.rates) == 8
    full = run_study(StudyConfig(d=1, betas=(0.6, 0.8), meshes=(15, 31, 63), n_ok=4097,
                                 grid_points=513))
    assert full.ok and len(full.rows) == 24
    assert full.provenance["meshes"] == [15, 31, 63]
    assert all(v == 0 for v in full.clamped.values())


@pytest.mark.slow
def test_reference_fed_as_discrete_is_bitwise(d1_study):
    cfg = StudyConfig(d=1)
    grid = EvalGrid(1, cfg.grid_points)
    var = reference_variance_grid(SpectralModel(1, cfg.kappa, 0.6, cfg.n_ok), grid)
    for f in cfg.functionals:
        assert discrete_expectation(f, var, grid) == d1_study.rows[
            [r.functional for r in d1_study.rows].index(f.name)].E_ref


@pytest.mark.slow
def test_d1_study_monotone_and_unclamped(d1_study):
    assert d1_study.ok
    assert all(v == 0 for v in d1_study.clamped.values())
    for beta in (0.6, 0.7, 0.8, 0.9):
        for name in ("abs2", "abs3", "abs4", "probit:0.5:20"):
            errs = [r.abs_error for r in sorted(d1_study.rows, key=lambda r: -r.h)
                    if r.beta == beta and r.functional == name]
            assert len(errs) == 4
            assert all(b < a for a, b in zip(errs, errs[1:]))


@pytest.mark.slow
def test_write_csv_roundtrip(tmp_path, d1_study):
    path = tmp_path / "rows.csv"
    write_csv(path, d1_study.rows[:3], ROW_FIELDS, ["version x", "params {}"])
    lines = path.read_text().splitlines()
    assert lines[0] == "# version x"
    rows = list(csv.DictReader(lines[2:]))
    assert float(rows[0]["E_ref"]) == d1_study.rows[0].E_ref
