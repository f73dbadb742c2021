import itertools
from math import comb

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tbghf import ed
from tbghf.gauge import CANDIDATES, candidate_state
from tbghf.geometry import mp_grid
from tbghf.hartreefock import OneRdm, scf_solve

from conftest import random_projector

needs_compiled = pytest.mark.skipif(ed._assemble_coo_compiled is None, reason="compiled kernel not built")


def _apply(state: int, op, norb: int):
    """Reference action of ``f†_p f†_q f_r f_s`` (``-1`` entries skipped) on a bitstring."""
    p, q, r, s = op
    sign = 1
    for idx, create in ((s, False), (r, False), (q, True), (p, True)):
        if idx < 0:
            continue
        occupied = (state >> idx) & 1
        if occupied == create:
            return None, 0
        sign *= (-1) ** bin(state & ((1 << idx) - 1)).count("1")
        state ^= 1 << idx
    return state, sign


def _reference_matrix(states, ops, coef, norb):
    index = {int(s): i for i, s in enumerate(states)}
    H = np.zeros((len(states), len(states)), dtype=complex)
    for op, c in zip(ops, coef):
        for j, s in enumerate(states):
            out, sign = _apply(int(s), op, norb)
            if out is not None and out in index:
                H[index[out], j] += sign * c
    return H


def _dense(states, ops, coef, backend):
    rows, cols, vals = ed.assemble_coo(states, ops, coef, backend)
    H = np.zeros((len(states), len(states)), dtype=complex)
    np.add.at(H, (rows, cols), vals)
    return H


@st.composite
def operator_lists(draw):
    norb = draw(st.integers(3, 7))
    nel = draw(st.integers(1, norb - 1))
    nterms = draw(st.integers(1, 12))
    ops = []
    for _ in range(nterms):
        if draw(st.booleans()):
            ops.append((draw(st.integers(0, norb - 1)), -1, draw(st.integers(0, norb - 1)), -1))
        else:
            p, q = sorted(draw(st.lists(st.integers(0, norb - 1), min_size=2, max_size=2, unique=True)))
            r, s = sorted(draw(st.lists(st.integers(0, norb - 1), min_size=2, max_size=2, unique=True)))
            ops.append((p, q, r, s))
    coef = draw(st.lists(st.complex_numbers(max_magnitude=5, allow_nan=False, allow_infinity=False),
                         min_size=nterms, max_size=nterms))
    states = sorted(sum(1 << i for i in c) for c in itertools.combinations(range(norb), nel))
    return np.array(states, dtype=np.uint64), np.array(ops, dtype=np.int64), np.array(coef, dtype=complex), norb


@settings(max_examples=60, deadline=None)
@given(data=operator_lists())
def test_numpy_assembly_matches_reference(data):
    states, ops, coef, norb = data
    assert np.allclose(_dense(states, ops, coef, "numpy"), _reference_matrix(states, ops, coef, norb), atol=1e-12)


@needs_compiled
@settings(max_examples=60, deadline=None)
@given(data=operator_lists())
def test_backends_agree(data):
    states, ops, coef, _ = data
    assert np.allclose(_dense(states, ops, coef, "numpy"), _dense(states, ops, coef, "cython"), atol=1e-12)


def test_unknown_backend():
    with pytest.raises(ValueError):
        ed.assemble_coo(np.array([3], dtype=np.uint64), np.zeros((0, 4), dtype=np.int64), np.zeros(0), "fortran")


@pytest.fixture(scope="module")
def chiral1(models):
    im = models(0.0, 1)
    return im, ed.problem_from_model(im)


@pytest.fixture(scope="module")
def bm2(models):
    im = models(0.3, 2, 1)
    return im, ed.problem_from_model(im)


def test_single_k_dimensions(chiral1):
    _, prob = chiral1
    assert (prob.norb, prob.nelec, prob.dimension()) == (4, 2, 6)
    assert prob.dimension("auto") == 6


def test_dimension_guard(models):
    im = models(0.5, 3)
    with pytest.raises(ed.DimensionError, match="9,075,135,300"):
        ed.problem_from_model(im)
    assert comb(16, 8) == 12870


def test_eri_structure(bm2):
    _, prob = bm2
    W = prob.eri
    assert prob.eri_hermiticity_defect() < 1e-12 * np.abs(W).max()
    mom = prob.orbital_momenta()
    n = np.array([prob.grid.nkx, prob.grid.nky])
    p, q, r, s = np.nonzero(np.abs(W) > 1e-12)
    assert np.all(np.mod(mom[p] + mom[q] - mom[r] - mom[s], n) == 0)


def test_sparse_operator_hermitian(bm2):
    _, prob = bm2
    H, states = prob.sparse_hamiltonian()
    rng = np.random.default_rng(0)
    x = rng.normal(size=len(states)) + 1j * rng.normal(size=len(states))
    y = rng.normal(size=len(states)) + 1j * rng.normal(size=len(states))
    assert abs(np.vdot(x, H @ y) - np.vdot(H @ x, y)) < 1e-10 * np.linalg.norm(x) * np.linalg.norm(y) * abs(H).max()


@pytest.mark.parametrize("nkx,nky", [(1, 1), (2, 1)])
def test_momentum_sectors_reproduce_full_spectrum(models, nkx, nky):
    prob = ed.problem_from_model(models(0.4, nkx, nky))
    full = np.linalg.eigvalsh(prob.sparse_hamiltonian(None)[0].toarray())
    parts = []
    for sector in itertools.product(range(nkx), range(nky)):
        H, _ = prob.sparse_hamiltonian(sector)
        if H.shape[0]:
            parts.append(np.linalg.eigvalsh(H.toarray()))
    assert np.allclose(np.sort(np.concatenate(parts)), full, atol=1e-9)


def test_non_interacting_spectrum(bm2):
    im, prob = bm2
    free = ed.FockSpaceProblem(prob.grid, prob.h1, np.zeros_like(prob.eri))
    eps = np.linalg.eigvalsh(prob.h1)
    sums = np.sort([sum(c) for c in itertools.combinations(eps, free.nelec)])
    spectrum = np.linalg.eigvalsh(free.sparse_hamiltonian(None)[0].toarray())
    assert np.allclose(spectrum, sums, atol=1e-9)
    # with no interaction the aufbau Slater determinant is exact
    h = np.array([prob.h1[4 * k:4 * k + 4, 4 * k:4 * k + 4] for k in range(prob.nk)])
    e_hf = sum(np.linalg.eigvalsh(hk)[:2].sum() for hk in h) / prob.nk
    res = ed.ground_state(free, sector=None)
    assert ed.correlation_energy(res, e_hf) == pytest.approx(0.0, abs=1e-10)


@settings(max_examples=5, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1))
def test_slater_expectation_equals_hf_energy(seed, bm2):
    im, prob = bm2
    P = OneRdm(random_projector(np.random.default_rng(seed), im.nk))
    assert ed.slater_expectation(prob, P) == pytest.approx(im.energy(P.P), abs=1e-8)


def test_mean_field_oracle(bm2):
    im, prob = bm2
    P = random_projector(np.random.default_rng(7), im.nk)
    F = im.fock(P)
    J, K = ed.brute_force_jk(prob, P)
    assert np.abs(J - F.J).max() <= 1e-9 * np.abs(J).max()
    assert np.abs(K - F.K).max() <= 1e-9 * np.abs(K).max()
    assert ed.mean_field_leakage(prob, P) < 1e-10


def test_variational_bound_and_correlation(bm2):
    im, prob = bm2
    res = ed.ground_state(prob)
    for name in ("QH", "VP", "KIVC"):
        P, rep = scf_solve(im, candidate_state(name, 0.0, im.nk))
        assert res.energy_per_site <= rep.energy_per_site + 1e-9
        assert ed.correlation_energy(res, rep.energy_per_site) <= 0
    with pytest.raises(ed.VariationalError):
        ed.correlation_energy(res, res.energy_per_site - 1.0)


def test_chiral_single_k_ground_space(chiral1):
    im, prob = chiral1
    # the finite plane-wave cutoff leaves a sub-microvolt splitting of the manifold
    res = ed.ground_state(prob, tol=1e-5)
    assert res.degeneracy >= 5
    assert res.energies[4] - res.energies[0] < 1e-5
    _, states = prob.sparse_hamiltonian("auto")
    for name in CANDIDATES:
        a = ed.slater_amplitudes(candidate_state(name, 0.0, 1), states, prob.norb)
        assert res.ground_space_weight(a) == pytest.approx(1.0, abs=1e-6)
    P, rep = scf_solve(im, candidate_state("QH", 0.0, 1))
    assert ed.correlation_energy(res, rep.energy_per_site) == pytest.approx(0.0, abs=1e-6)
    assert res.psd_shift() == -res.ground_energy


def test_occupied_orbitals_validation():
    with pytest.raises(ValueError, match="projector"):
        ed.occupied_orbitals(0.5 * np.eye(4)[None])


def test_dense_and_sparse_solvers_agree(models):
    prob = ed.problem_from_model(models(0.5, 2, 1))
    dense = ed.ground_state(prob, nroots=4, sector=None)
    old = ed.DENSE_LIMIT
    try:
        ed.DENSE_LIMIT = 1
        sparse = ed.ground_state(prob, nroots=4, sector=None)
    finally:
        ed.DENSE_LIMIT = old
    assert sparse.meta["solver"] == "arpack"
    assert np.allclose(dense.energies, sparse.energies, atol=1e-8)
    assert sparse.residuals.max() < ed.RESIDUAL_TOL
