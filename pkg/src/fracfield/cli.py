"""``fracfield`` command line interface.

Subcommands: ``study``, ``sample``, ``variance`` and ``scheme-table``. Each
reads an optional flat TOML config file; command-line flags override it.
"""
from __future__ import annotations

import argparse
import datetime as _dt
import json
import logging
import os
import sys

import numpy as np

from . import __version__
from .mesh import assemble_mass, assemble_stiffness, build_mesh
from .quadrature import (
    DEFAULT_MEMORY_CAP,
    FractionalOperator,
    MemoryBudgetError,
    build_scheme,
    calibrate_k,
    oracle_fractional_inverse,
)
from .sampler import GENERATOR_NAME, cholesky_mass, make_rng, sample_field
from .spectral import DEFAULT_N_OK, EvalGrid, SpectralModel, reference_variance_grid
from .study import (
    DEFAULT_BETAS,
    DEFAULT_MESHES,
    RATE_FIELDS,
    ROW_FIELDS,
    StudyConfig,
    discrete_variance_grid,
    plan_cells,
    plot_errors,
    run_study,
    write_csv,
)

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger("fracfield")

OUTPUT_ENV = "FRACFIELD_OUTPUT_DIR"

# key -> (type, default); ``None`` default means "derived"
COMMON_KEYS = {
    "d": (int, 1),
    "kappa": (float, 0.5),
    "strategy": (str, "experiment"),
    "output_dir": (str, None),
}
STUDY_KEYS = {
    **COMMON_KEYS,
    "betas": (list, None),
    "meshes": (list, None),
    "n_ok": (int, None),
    "grid_points": (int, None),
    "functionals": (list, ["abs2", "abs3", "abs4", "probit:0.5:20"]),
    "memory_cap_gib": (float, DEFAULT_MEMORY_CAP / 2**30),
    "threads": (int, 1),
    "plot": (bool, False),
}
SAMPLE_KEYS = {
    **COMMON_KEYS,
    "n": (int, 63),
    "beta": (float, 0.75),
    "k": (float, None),
    "seed": (int, 0),
    "count": (int, 1),
    "mode": (str, "dense"),
    "memory_cap_gib": (float, DEFAULT_MEMORY_CAP / 2**30),
}
VARIANCE_KEYS = {
    **COMMON_KEYS,
    "n": (int, 63),
    "beta": (float, 0.75),
    "k": (float, None),
    "n_ok": (int, None),
    "grid_points": (int, 1025),
    "memory_cap_gib": (float, DEFAULT_MEMORY_CAP / 2**30),
}
SCHEMA = {"study": STUDY_KEYS, "sample": SAMPLE_KEYS, "variance": VARIANCE_KEYS}


class ConfigError(ValueError):
    pass


def _coerce(key, typ, value):
    if value is None:
        return None
    if typ is list:
        if isinstance(value, str):
            value = [v for v in value.replace(",", " ").split()]
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{key} must be a list")
        return list(value)
    if typ is bool:
        if isinstance(value, str):
            return value.lower() in ("1", "true", "yes")
        return bool(value)
    if typ is int and isinstance(value, float) and not value.is_integer():
        raise ConfigError(f"{key} must be an integer, got {value}")
    try:
        return typ(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: cannot interpret {value!r} as {typ.__name__}") from None


def load_config(command: str, path: str | None, overrides: dict) -> dict:
    """Merge defaults, the config file and flag overrides, with type checks."""
    schema = SCHEMA[command]
    values = {k: default for k, (_, default) in schema.items()}
    if path is not None:
        if not os.path.isfile(path):
            raise ConfigError(f"config file not found: {path}")
        with open(path, "rb") as fh:
            try:
                data = tomllib.load(fh)
            except tomllib.TOMLDecodeError as exc:
                raise ConfigError(f"{path}: {exc}") from None
        unknown = sorted(set(data) - set(schema))
        if unknown:
            raise ConfigError(f"{path}: unknown key(s) {', '.join(unknown)}")
        for key, value in data.items():
            values[key] = _coerce(key, schema[key][0], value)
    for key, value in overrides.items():
        if value is not None:
            values[key] = _coerce(key, schema[key][0], value)
    if values["d"] not in (1, 2):
        raise ConfigError(f"d must be 1 or 2, got {values['d']}")
    if values.get("output_dir") is None:
        values["output_dir"] = os.environ.get(OUTPUT_ENV, ".")
    return values


def _header(command, params, *, generator=None):
    lines = [
        f"fracfield {__version__} {command}",
        "params " + json.dumps(params, sort_keys=True),
        f"strategy {params.get('strategy')}",
        f"generator {generator or 'none'}",
        "timestamp " + _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
    ]
    return lines


def _recorded(params):
    # the output location does not change results
    return {k: v for k, v in params.items() if k != "output_dir"}


def _study_config(p) -> StudyConfig:
    d = p["d"]
    return StudyConfig(
        d=d,
        kappa=p["kappa"],
        betas=tuple(float(b) for b in (p["betas"] or DEFAULT_BETAS)),
        meshes=tuple(int(m) for m in (p["meshes"] or DEFAULT_MESHES[d])),
        strategy=p["strategy"],
        n_ok=p["n_ok"],
        functionals=tuple(p["functionals"]),
        grid_points=p["grid_points"],
        threads=max(1, p["threads"]),
        memory_cap=int(p["memory_cap_gib"] * 2**30),
    )


def cmd_study(args) -> int:
    p = load_config("study", args.config, {
        "d": args.d, "betas": args.betas, "meshes": args.meshes, "n_ok": args.n_ok,
        "grid_points": args.grid_points, "threads": args.threads, "plot": args.plot or None,
        "output_dir": args.output_dir, "strategy": args.strategy, "kappa": args.kappa,
    })
    config = _study_config(p)
    if args.dry_run:
        print("beta\tN_h\tk\tnodes")
        for beta, n, mesh, k, scheme in plan_cells(config):
            print(f"{beta:g}\t{mesh.dof_count}\t{k:.6f}\t{scheme.count}")
        return 0
    os.makedirs(p["output_dir"], exist_ok=True)
    result = run_study(config, progress=lambda msg: log.info(msg))
    params = _recorded(p)
    params.update(n_ok=config.n_ok, grid_points=config.grid_points,
                  betas=list(config.betas), meshes=list(config.meshes))
    params.pop("threads")
    header = _header("study", params)
    rows_path = os.path.join(p["output_dir"], "rows.csv")
    rates_path = os.path.join(p["output_dir"], "rates.csv")
    write_csv(rows_path, result.rows, ROW_FIELDS, header)
    write_csv(rates_path, result.rates, RATE_FIELDS, header)
    if p["plot"]:
        plot_errors(result, os.path.join(p["output_dir"], "errors_{functional}.svg"))
    for fail in result.failures:
        print(f"cell beta={fail['beta']:g} N_h={fail['N_h']} failed: {fail['error']}",
              file=sys.stderr)
    return 0 if result.ok else 1


def cmd_scheme_table(args) -> int:
    d = args.d or 1
    if d not in (1, 2):
        raise ConfigError(f"d must be 1 or 2, got {d}")
    betas = [float(b) for b in (args.betas if args.betas is not None else DEFAULT_BETAS)]
    meshes = [int(m) for m in (args.meshes if args.meshes is not None else DEFAULT_MESHES[d])]
    if not betas:
        raise ConfigError("empty beta list")
    if not meshes:
        raise ConfigError("empty mesh list")
    strategy = args.strategy or "experiment"
    print("N_h\t" + "\t".join(f"{b:g}" for b in betas))
    for n in meshes:
        mesh = build_mesh(d, n)
        counts = []
        for b in betas:
            scheme = build_scheme(b, calibrate_k(mesh.mesh_size, b, strategy, d=d))
            counts.append(scheme.count)
            if args.details:
                print(f"# beta={b:g} N_h={mesh.dof_count} k={scheme.k:.6f} "
                      f"K-={scheme.k_minus} K+={scheme.k_plus} count={scheme.count}")
        print(f"{mesh.dof_count}\t" + "\t".join(str(c) for c in counts))
    return 0


def _operator_for(p, mesh, mass, stiff):
    beta = p["beta"]
    k = p["k"] or calibrate_k(mesh.mesh_size, beta, p["strategy"], d=p["d"])
    scheme = build_scheme(beta, k)
    return FractionalOperator(mass, stiff, p["kappa"], scheme, mode=p.get("mode", "dense"),
                              block_size=mesh.n, memory_cap=int(p["memory_cap_gib"] * 2**30))


def cmd_sample(args) -> int:
    p = load_config("sample", args.config, {
        "d": args.d, "n": args.n, "beta": args.beta, "seed": args.seed, "count": args.count,
        "mode": args.mode, "output_dir": args.output_dir, "kappa": args.kappa, "k": args.k,
    })
    if p["count"] < 0:
        raise ConfigError("count must be non-negative")
    mesh = build_mesh(p["d"], p["n"])
    mass, stiff = assemble_mass(mesh), assemble_stiffness(mesh)
    try:
        op = _operator_for(p, mesh, mass, stiff)
    except MemoryBudgetError as exc:
        print(f"{exc} (hint: set mode = \"operator\")", file=sys.stderr)
        return 1
    os.makedirs(p["output_dir"], exist_ok=True)
    path = os.path.join(p["output_dir"], "samples.csv")
    coords = mesh.node_coordinates()
    cols = ["realization", "x", "y"][: 2 + (mesh.d == 2)]
    header = _header("sample", _recorded(p), generator=GENERATOR_NAME)
    values = np.zeros((0, mesh.dof_count))
    if p["count"]:
        rng = make_rng(p["seed"])
        values = sample_field(None, cholesky_mass(mass), op, rng, count=p["count"])
    with open(path, "w") as fh:
        for line in header:
            fh.write(f"# {line}\n")
        fh.write(",".join(cols + ["value"]) + "\n")
        coord_txt = [",".join(repr(float(c)) for c in row) for row in coords]
        for r, vals in enumerate(values):
            fh.writelines(f"{r},{ct},{v!r}\n" for ct, v in zip(coord_txt, vals.tolist()))
    return 0


def cmd_variance(args) -> int:
    p = load_config("variance", args.config, {
        "d": args.d, "n": args.n, "beta": args.beta, "n_ok": args.n_ok,
        "grid_points": args.grid_points, "output_dir": args.output_dir, "kappa": args.kappa,
        "k": args.k,
    })
    d, beta = p["d"], p["beta"]
    n_ok = p["n_ok"] or DEFAULT_N_OK[d]
    grid = EvalGrid(d, p["grid_points"])
    mesh = build_mesh(d, p["n"])
    mass, stiff = assemble_mass(mesh), assemble_stiffness(mesh)
    if beta >= 1.0:
        # integer power: the discrete inverse itself, no quadrature
        q = oracle_fractional_inverse(mass, p["kappa"] ** 2 * mass + stiff, beta)
    else:
        try:
            q = _operator_for(dict(p, mode="dense"), mesh, mass, stiff).q
        except MemoryBudgetError as exc:
            print(str(exc), file=sys.stderr)
            return 1
    disc = discrete_variance_grid(q, mass, mesh, grid).ravel()
    ref = reference_variance_grid(SpectralModel(d, p["kappa"], beta, n_ok), grid).ravel()
    os.makedirs(p["output_dir"], exist_ok=True)
    path = os.path.join(p["output_dir"], "variance.csv")
    params = dict(_recorded(p), n_ok=n_ok)
    cols = ["x", "y"][:d] + ["sigma2_ref", "sigma2_disc"]
    with open(path, "w") as fh:
        for line in _header("variance", params):
            fh.write(f"# {line}\n")
        fh.write(",".join(cols) + "\n")
        for pt, r, s in zip(grid.coordinates().tolist(), ref.tolist(), disc.tolist()):
            fh.write(",".join(repr(v) for v in (*pt, r, s)) + "\n")
    return 0


def _floats(text):
    return [float(v) for v in text.replace(",", " ").split()] if text.strip() else []


def _ints(text):
    return [int(v) for v in text.replace(",", " ").split()] if text.strip() else []


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fracfield", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"fracfield {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(sp_):
        sp_.add_argument("--config", help="flat TOML config file")
        sp_.add_argument("--d", type=int)
        sp_.add_argument("--kappa", type=float)
        sp_.add_argument("--output-dir", dest="output_dir",
                         help=f"output directory (default: ${OUTPUT_ENV} or .)")

    st = sub.add_parser("study", help="run the weak-error study")
    common(st)
    st.add_argument("--betas", type=_floats)
    st.add_argument("--meshes", type=_ints, help="interior nodes per axis")
    st.add_argument("--n-ok", dest="n_ok", type=int)
    st.add_argument("--grid-points", dest="grid_points", type=int)
    st.add_argument("--strategy", choices=["experiment", "weak-theory"])
    st.add_argument("--threads", type=int)
    st.add_argument("--plot", action="store_true")
    st.add_argument("--dry-run", action="store_true")
    st.set_defaults(func=cmd_study)

    sa = sub.add_parser("sample", help="draw field realizations")
    common(sa)
    sa.add_argument("--n", type=int)
    sa.add_argument("--beta", type=float)
    sa.add_argument("--k", type=float)
    sa.add_argument("--seed", type=int)
    sa.add_argument("--count", type=int)
    sa.add_argument("--mode", choices=["dense", "operator"])
    sa.set_defaults(func=cmd_sample)

    va = sub.add_parser("variance", help="reference and discrete variance on a grid")
    common(va)
    va.add_argument("--n", type=int)
    va.add_argument("--beta", type=float)
    va.add_argument("--k", type=float)
    va.add_argument("--n-ok", dest="n_ok", type=int)
    va.add_argument("--grid-points", dest="grid_points", type=int)
    va.set_defaults(func=cmd_variance)

    sc = sub.add_parser("scheme-table", help="quadrature node counts per mesh and beta")
    sc.add_argument("--d", type=int)
    sc.add_argument("--betas", type=_floats)
    sc.add_argument("--meshes", type=_ints, help="interior nodes per axis")
    sc.add_argument("--strategy", choices=["experiment", "weak-theory"])
    sc.add_argument("--details", action="store_true", help="also print k, K-, K+")
    sc.set_defaults(func=cmd_scheme_table)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"fracfield {args.command}: usage error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
