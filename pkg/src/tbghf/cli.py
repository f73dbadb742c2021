"""Command-line interface: ``tbghf {relax,bands,hf,sweep,ed,validate}``.

Failures print one JSON object ``{"error": <category>, "message": ...}`` to
stderr and exit with the category's status code.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .experiments import ConfigError, RunConfig, detect_transition, interacting_model, load_config, prepare, run_sweep
from .gauge import CANDIDATES, candidate_state, order_parameters, sewing_matrix
from .hamiltonians import BandGapError, BasisError, PlaneWaveBasis, band_path, build_model, magic_coupling

EXIT_CODES = {"usage": 2, "config": 3, "numerical": 4, "dimension": 5, "io": 6}


class CliError(Exception):
    def __init__(self, category: str, message: str):
        super().__init__(message)
        self.category = category


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", f"{self.prog}: {message}")


def _w1(value: str):
    if value == "magic":
        return value
    try:
        return float(value)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"w1 must be a number or 'magic', got {value!r}") from exc


def _add_model_args(p, lam: bool = True):
    p.add_argument("--config", type=Path, help="TOML or JSON run configuration")
    p.add_argument("--family", choices=("bm", "relaxed"))
    p.add_argument("--theta", type=float, help="twist angle in degrees")
    p.add_argument("--w1", type=_w1, help="AB tunneling in meV or 'magic'")
    p.add_argument("--tables", help="hopping-table JSON for the relaxed family")
    p.add_argument("--nk", type=int, help="grid side length (nk x nk)")
    p.add_argument("--epsilon", type=float)
    p.add_argument("--gate", type=float, help="gate distance in Å")
    if lam:
        p.add_argument("--lambda", dest="lam", type=float, default=0.0, help="interpolation value kappa or alpha")


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    over = {}
    for attr, key in (("family", "model.family"), ("theta", "geometry.theta"), ("w1", "model.w1"),
                      ("tables", "model.tables"), ("epsilon", "interaction.epsilon"), ("gate", "interaction.d"),
                      ("steps", "model.steps"), ("workers", "flags.workers"), ("cache_dir", "flags.cache_dir")):
        v = getattr(args, attr, None)
        if v is not None:
            over[key] = v
    if getattr(args, "nk", None) is not None:
        over["grid.nkx"] = over["grid.nky"] = args.nk
    if getattr(args, "range", None) is not None:
        over["model.range"] = list(args.range)
    if getattr(args, "inits", None) is not None:
        over["inits"] = "all" if args.inits == "all" else [s.strip().upper() for s in args.inits.split(",")]
    if getattr(args, "warm_start", False):
        over["flags.warm_start"] = True
    if getattr(args, "ed", False):
        over["flags.ed"] = True
    if over.get("model.family") == "relaxed" and "model.range" not in over:
        over["model.range"] = [0.0, 1.0]
    return cfg.replace(**over) if over else cfg


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, default=float))


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

def cmd_relax(args) -> int:
    from .geometry import build_geometry
    from .relaxation import relax_minimize, relaxed_tables, save_tables, stacking_fractions
    geom = build_geometry(args.theta)
    disp, info = relax_minimize(geom, nG=args.shells, return_info=True)
    tables = relaxed_tables(geom, disp)
    save_tables(tables, args.out)
    _emit({"tables": str(args.out), "iterations": info.iterations, "grad_norm": info.grad_norm,
           "stacking_fractions": stacking_fractions(geom, disp), "first_shell_ratio": tables.first_shell_ratio()})
    return 0


def cmd_bands(args) -> int:
    from .geometry import build_geometry
    from .relaxation import load_tables
    geom = build_geometry(args.theta)
    basis = PlaneWaveBasis(geom, args.cutoff)
    w1 = magic_coupling(geom, basis) if args.w1 == "magic" else args.w1
    if args.model == "chiral":
        model = build_model(geom, basis, "chiral", 0.0, w1=w1)
    elif args.model == "bm":
        model = build_model(geom, basis, "bm", args.kappa, w1=w1)
    else:
        model = build_model(geom, basis, "relaxed", args.alpha, w1=w1,
                            tables=load_tables(args.tables or None, geom=geom))
    bands = band_path(model, resolution=args.resolution)
    bands.to_csv(args.out)
    _emit({"bands": str(args.out), "points": len(bands.kpoints), "model": args.model, "w1": w1})
    return 0


def cmd_hf(args) -> int:
    cfg = _config(args)
    setup = prepare(cfg)
    im = interacting_model(setup, args.lam)
    sewing = {s: sewing_matrix(im.bands, s) for s in ("C2zT", "nuxT", "nuyT")}
    from .hartreefock import scf_solve
    out = {}
    inits = CANDIDATES if args.init == "all" else [s.strip().upper() for s in args.init.split(",")]
    outdir = Path(args.out) if args.out else None
    for name in inits:
        if name not in CANDIDATES:
            raise CliError("usage", f"unknown initial state {name!r}; expected one of {CANDIDATES}")
        s = cfg.scf
        P, rep = scf_solve(im, candidate_state(name, cfg.phi, im.nk), max_iter=s.max_iter, tol=s.tol,
                           energy_tol=s.energy_tol, mixing=s.mixing, diis=s.diis)
        out[name] = {**rep.to_dict(), "order_parameters": order_parameters(P, sewing)}
        if outdir:
            outdir.mkdir(parents=True, exist_ok=True)
            P.save(outdir / f"rdm-{name}.json")
            rep.write_trace(outdir / f"trace-{name}.csv")
    _emit({"lambda": args.lam, "family": cfg.model.family, "w1": setup.w1, "results": out})
    return 0


def cmd_sweep(args) -> int:
    cfg = _config(args)

    def progress(res):
        if not args.quiet:
            print(f"lambda={res.lam:.4f} done ({len(res.rows)} rows)", file=sys.stderr, flush=True)

    result = run_sweep(cfg, progress)
    manifest = result.write(args.out)
    summary = {"rows": len(result.rows), "out": str(args.out), "config_hash": manifest["config_hash"],
               "transitions": {}}
    for name in cfg.inits:
        t = detect_transition(result.rows, name)
        summary["transitions"][name] = t.crossings
    _emit(summary)
    return 0


def _ed_grid(nk: int) -> tuple[int, int]:
    return {1: (1, 1), 2: (2, 1), 3: (3, 1), 4: (2, 2)}.get(nk, (nk, 1))


def cmd_ed(args) -> int:
    from . import ed
    from .hartreefock import scf_solve
    nkx, nky = _ed_grid(args.nk)
    if args.nk > ed.MAX_NK:
        from math import comb
        raise ed.DimensionError(f"ED is limited to nk <= {ed.MAX_NK}; nk={args.nk} gives a Fock-space "
                                f"dimension of {comb(4 * args.nk, 2 * args.nk):,}")
    cfg = _config(args).replace(**{"grid.nkx": nkx, "grid.nky": nky})
    setup = prepare(cfg)
    im = interacting_model(setup, args.lam)
    prob = ed.problem_from_model(im)
    res = ed.ground_state(prob, nroots=args.roots, backend=args.backend)
    hf = {name: scf_solve(im, candidate_state(name, cfg.phi, im.nk))[1].energy_per_site for name in CANDIDATES}
    e_hf = min(hf.values())
    _emit({"nk": args.nk, "grid": [nkx, nky], "lambda": args.lam, "family": cfg.model.family, "w1": setup.w1,
           "dimension": res.meta["dimension"], "backend": res.meta["backend"],
           "lowest_energies_per_site": (res.energies / prob.nk).tolist(),
           "ground_degeneracy": res.degeneracy, "degeneracy_is_lower_bound": res.degeneracy == len(res.energies),
           "hf_energy_per_site": hf, "correlation_energy_per_site": ed.correlation_energy(res, e_hf)})
    return 0


def cmd_validate(args) -> int:
    from .validation import run_validation
    results = run_validation(args.only, report=lambda r: print(r.line(), flush=True))
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tbghf", description="Projected Hartree-Fock for twisted bilayer graphene")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("relax", help="solve the relaxation problem and write hopping tables")
    p.add_argument("--theta", type=float, default=1.05)
    p.add_argument("--shells", type=int, default=8)
    p.add_argument("--out", type=Path, default=Path("relaxed_tables.json"))
    p.set_defaults(func=cmd_relax)

    p = sub.add_parser("bands", help="band structure along K-Gamma-M-K' as CSV")
    p.add_argument("--model", choices=("bm", "chiral", "relaxed"), default="bm")
    p.add_argument("--theta", type=float, default=1.05)
    p.add_argument("--w1", type=_w1, default=113.25)
    p.add_argument("--kappa", type=float, default=0.7)
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--tables")
    p.add_argument("--cutoff", type=float, default=5.0)
    p.add_argument("--resolution", type=int, default=30)
    p.add_argument("--out", type=Path, default=Path("bands.csv"))
    p.set_defaults(func=cmd_bands)

    p = sub.add_parser("hf", help="SCF at one interpolation value")
    _add_model_args(p)
    p.add_argument("--init", default="all", help="'all' or comma-separated subset of " + ",".join(CANDIDATES))
    p.add_argument("--out", help="directory for 1-RDMs and SCF traces")
    p.set_defaults(func=cmd_hf)

    p = sub.add_parser("sweep", help="SCF over an interpolation family")
    _add_model_args(p, lam=False)
    p.add_argument("--steps", type=int)
    p.add_argument("--range", type=float, nargs=2, metavar=("LO", "HI"))
    p.add_argument("--inits", help="'all' or comma-separated subset of " + ",".join(CANDIDATES))
    p.add_argument("--warm-start", action="store_true")
    p.add_argument("--ed", action="store_true", help="attach ED columns (grids with nk <= 4)")
    p.add_argument("--workers", type=int)
    p.add_argument("--cache-dir")
    p.add_argument("--out", type=Path, default=Path("sweep-out"))
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("ed", help="exact diagonalization on a tiny grid")
    _add_model_args(p)
    p.set_defaults(nk=1)
    p.add_argument("--roots", type=int, default=8)
    p.add_argument("--backend", choices=("cython", "numpy"))
    p.set_defaults(func=cmd_ed)

    p = sub.add_parser("validate", help="run the invariant suite")
    p.add_argument("--only", nargs="*", help="names of checks to run")
    p.set_defaults(func=cmd_validate)
    return parser


def _category(exc: Exception) -> str:
    from .ed import DimensionError
    if isinstance(exc, CliError):
        return exc.category
    if isinstance(exc, DimensionError):
        return "dimension"
    if isinstance(exc, (ConfigError, BasisError)):
        return "config"
    if isinstance(exc, (BandGapError, np.linalg.LinAlgError, ArithmeticError, RuntimeError)):
        return "numerical"
    if isinstance(exc, OSError):
        return "io"
    if isinstance(exc, ValueError):
        return "config"
    raise exc


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except Exception as exc:  # mapped to a category or re-raised
        cat = _category(exc)
        print(json.dumps({"error": cat, "message": str(exc)}), file=sys.stderr)
        return EXIT_CODES[cat]


if __name__ == "__main__":
    sys.exit(main())
