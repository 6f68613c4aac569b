import csv
import subprocess
import sys

import pytest

from conftest import PUBLISHED_NODE_COUNTS
from fracfield.cli import main


def body(path):
    """File contents without the timestamp header line."""
    return [ln for ln in path.read_text().splitlines() if not ln.startswith("# timestamp")]


def read_rows(path):
    return list(csv.DictReader(ln for ln in path.read_text().splitlines() if not ln.startswith("#")))


@pytest.mark.parametrize("d", [1, 2])
def test_scheme_table_defaults(d, capsys):
    assert main(["scheme-table", "--d", str(d)]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0].split("\t") == ["N_h", "0.6", "0.7", "0.8", "0.9"]
    got = {int(ln.split("\t")[0]): tuple(int(v) for v in ln.split("\t")[1:]) for ln in lines[1:]}
    want = {n**d: counts for (dd, n), counts in PUBLISHED_NODE_COUNTS.items() if dd == d}
    assert got == want


def test_scheme_table_empty_betas(capsys):
    assert main(["scheme-table", "--betas", ""]) == 2
    assert "usage error" in capsys.readouterr().err


def test_missing_config_names_path(tmp_path, capsys):
    missing = tmp_path / "nope.toml"
    assert main(["study", "--config", str(missing)]) != 0
    assert str(missing) in capsys.readouterr().err


def test_unknown_config_key(tmp_path, capsys):
    cfg = tmp_path / "c.toml"
    cfg.write_text("d = 1\nbogus = 3\n")
    assert main(["study", "--config", str(cfg)]) == 2
    assert "bogus" in capsys.readouterr().err


def test_dry_run_writes_nothing(tmp_path, capsys):
    assert main(["study", "--d", "2", "--meshes", "15,31", "--output-dir", str(tmp_path),
                 "--dry-run"]) == 0
    out = capsys.readouterr().out
    assert "0.6\t225\t0.686998\t24" in out
    assert list(tmp_path.iterdir()) == []


def test_small_study_outputs(tmp_path):
    cfg = tmp_path / "s.toml"
    cfg.write_text('d = 1\nmeshes = [15, 31]\nn_ok = 4097\ngrid_points = 257\n'
                   f'output_dir = "{tmp_path}"\n')
    assert main(["study", "--config", str(cfg)]) == 0
    rates = read_rows(tmp_path / "rates.csv")
    assert len(rates) == 16
    assert len(read_rows(tmp_path / "rows.csv")) == 32
    header = (tmp_path / "rows.csv").read_text().splitlines()[:5]
    assert header[0].startswith("# fracfield ")
    assert any(h.startswith("# params ") for h in header)
    assert any(h.startswith("# strategy experiment") for h in header)
    assert any(h.startswith("# timestamp ") for h in header)


def test_study_env_output_dir(tmp_path, monkeypatch):
    monkeypatch.setenv("FRACFIELD_OUTPUT_DIR", str(tmp_path))
    assert main(["study", "--meshes", "7,15", "--betas", "0.7", "--n-ok", "1025",
                 "--grid-points", "65"]) == 0
    assert (tmp_path / "rates.csv").exists()


def test_sample_deterministic_and_empty(tmp_path):
    a, b, c = tmp_path / "a", tmp_path / "b", tmp_path / "c"
    for out in (a, b):
        out.mkdir()
        assert main(["sample", "--n", "15", "--count", "2", "--seed", "7",
                     "--output-dir", str(out)]) == 0
    assert body(a / "samples.csv") == body(b / "samples.csv")
    rows = read_rows(a / "samples.csv")
    assert len(rows) == 2 * 15
    assert set(rows[0]) == {"realization", "x", "value"}
    assert any("seed" in ln and "7" in ln for ln in body(a / "samples.csv") if ln.startswith("#"))
    assert any("generator numpy.random.PCG64" in ln for ln in body(a / "samples.csv"))
    c.mkdir()
    assert main(["sample", "--count", "0", "--output-dir", str(c)]) == 0
    assert read_rows(c / "samples.csv") == []


def test_sample_memory_hint(tmp_path, capsys):
    cfg = tmp_path / "m.toml"
    cfg.write_text(f'n = 63\nmemory_cap_gib = 1e-6\noutput_dir = "{tmp_path}"\n')
    assert main(["sample", "--config", str(cfg), "--count", "1"]) == 1
    assert "operator" in capsys.readouterr().err
    assert main(["sample", "--config", str(cfg), "--count", "1", "--mode", "operator"]) == 0


def test_variance_output(tmp_path):
    assert main(["variance", "--n", "31", "--beta", "0.75", "--grid-points", "101",
                 "--n-ok", "4097", "--output-dir", str(tmp_path)]) == 0
    rows = read_rows(tmp_path / "variance.csv")
    assert len(rows) == 101
    for r in (rows[0], rows[-1]):
        assert float(r["sigma2_ref"]) == 0.0 and float(r["sigma2_disc"]) == 0.0
    assert main(["variance", "--d", "2", "--n", "7", "--beta", "0.8", "--grid-points", "9",
                 "--n-ok", "129", "--output-dir", str(tmp_path)]) == 0
    assert len(read_rows(tmp_path / "variance.csv")) == 81


def test_variance_integer_power_path(tmp_path):
    assert main(["variance", "--n", "63", "--beta", "1", "--kappa", "0", "--grid-points", "129",
                 "--n-ok", "16385", "--output-dir", str(tmp_path)]) == 0
    mid = read_rows(tmp_path / "variance.csv")[64]
    assert float(mid["x"]) == 0.5
    # sum_j (pi j)^{-4} e_j(1/2)^2 = x^2 (1 - x)^2 / 3 at x = 1/2
    assert float(mid["sigma2_ref"]) == pytest.approx(1 / 48, abs=1e-12)
    assert float(mid["sigma2_disc"]) == pytest.approx(1 / 48, rel=1e-2)


def test_entry_point_runs():
    out = subprocess.run([sys.executable, "-m", "fracfield.cli", "scheme-table", "--d", "1",
                          "--meshes", "511", "--betas", "0.6"], capture_output=True, text=True)
    assert out.returncode == 0
    assert out.stdout.splitlines()[1] == "511\t146"
