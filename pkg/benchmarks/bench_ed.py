"""Compare the compiled and numpy ED assembly backends.

Usage: ``python3 benchmarks/bench_ed.py [--kappa 0.7] [--repeat 3]``.
Assembles the full particle-number sector of a 2×2 grid (12870 states) with
each backend, checks that both give the same sparse matrix and prints the
timings.
"""
from __future__ import annotations

import argparse
import time

import numpy as np
import scipy.sparse as sp

from tbghf import ed
from tbghf.formfactors import ScreenedPotential, compute_flat_bands, form_factors
from tbghf.gauge import scdm_gauge
from tbghf.geometry import build_geometry, mp_grid
from tbghf.hamiltonians import BMModel, PlaneWaveBasis, magic_coupling
from tbghf.hartreefock import InteractingModel


def build(kappa: float) -> ed.FockSpaceProblem:
    geom = build_geometry(1.05)
    basis = PlaneWaveBasis(geom, 5.0)
    w1 = magic_coupling(geom, basis)
    grid = mp_grid(geom, 2, 2)
    fb = compute_flat_bands(BMModel(geom, basis, kappa * w1, w1), grid)
    fs = fb.rotate(scdm_gauge(fb).U, "sublattice")
    return ed.problem_from_model(InteractingModel(fs, form_factors(fs, 4.0), ScreenedPotential()))


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--kappa", type=float, default=0.7)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)
    prob = build(args.kappa)
    states = prob.basis(None)
    ops, coef = prob.operator_terms()
    print(f"states {len(states)}, operator terms {len(ops)}")
    mats, best = {}, {}
    backends = ["numpy"] + (["cython"] if ed._assemble_coo_compiled is not None else [])
    for be in backends:
        times = []
        for _ in range(args.repeat):
            t = time.perf_counter()
            r, c, v = ed.assemble_coo(states, ops, coef, be)
            times.append(time.perf_counter() - t)
        mats[be] = sp.coo_matrix((v, (r, c)), shape=(len(states),) * 2).tocsr()
        best[be] = min(times)
        print(f"{be:>7}: {best[be]:.3f} s (best of {args.repeat}), nnz {mats[be].nnz}")
    if len(mats) == 2:
        diff = abs(mats["numpy"] - mats["cython"]).max()
        print(f"max |H_numpy - H_cython| = {diff:.2e}; speedup {best['numpy'] / best['cython']:.1f}x")
    else:
        print("compiled backend not built; only the numpy fallback was timed")


if __name__ == "__main__":
    main()
