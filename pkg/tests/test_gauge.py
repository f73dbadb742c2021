import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tbghf.gauge import (CANDIDATES, candidate_matrix, candidate_state, ideal_sewing, off_sublattice_weight,
                         order_parameter, order_parameters, scdm_gauge, select_columns, sewing_matrix)
from tbghf.hamiltonians import SYMMETRIES

from conftest import random_projector


@pytest.fixture(scope="module")
def chiral(models):
    return models(0.0, 2).bands


@pytest.fixture(scope="module")
def raw_chiral(models):
    from tbghf.formfactors import compute_flat_bands
    from tbghf.geometry import mp_grid
    from tbghf.hamiltonians import BMModel
    return compute_flat_bands(BMModel(models.geom, models.basis, 0.0, models.w1), mp_grid(models.geom, 2, 2))


def test_gauge_unitaries(raw_chiral):
    g = scdm_gauge(raw_chiral)
    assert g.unitarity_defect() < 1e-12
    assert np.all(g.U[:, :2, 2:] == 0) and np.all(g.U[:, 2:, :2] == 0)
    back = raw_chiral.rotate(g.U).rotate(np.conj(np.swapaxes(g.U, 1, 2)))
    assert np.abs(back.vecs - raw_chiral.vecs).max() < 1e-12
    assert g.columns == select_columns(raw_chiral)[0]
    again = scdm_gauge(raw_chiral, columns=g.columns)
    assert np.array_equal(again.U, g.U)


def test_chiral_sublattice_polarization(models):
    im = models(0.0, 2)
    assert off_sublattice_weight(im.bands).max() < 1e-6
    rho = im.ff.rho
    off = rho - np.einsum("...mm,mn->...mn", rho, np.eye(4))
    assert np.abs(off).max() < 1e-6


@pytest.mark.parametrize("name", CANDIDATES)
@pytest.mark.parametrize("phi", [0.0, 0.3, np.pi / 4, np.pi / 2])
def test_candidates_are_projectors(name, phi):
    P = candidate_state(name, phi, 3)
    assert P.idempotency_defect() < 1e-14 and P.hermiticity_defect() == 0
    assert np.allclose(np.trace(P.P, axis1=1, axis2=2), 2.0)
    assert np.all(P.P == P.P[0])


def test_candidate_matrices():
    assert np.array_equal(candidate_matrix("QH"), np.diag([1, 0, 0, 1]).astype(complex))
    assert np.array_equal(candidate_matrix("VH"), np.diag([1, 0, 1, 0]).astype(complex))
    assert np.array_equal(candidate_matrix("VP"), np.diag([1, 1, 0, 0]).astype(complex))
    kivc = 0.5 * np.array([[1, 0, 0, -1j], [0, 1, 1j, 0], [0, -1j, 1, 0], [1j, 0, 0, 1]])
    assert np.allclose(candidate_matrix("KIVC", 0.0), kivc)
    tivc = 0.5 * np.array([[1, 0, 0, 1], [0, 1, 1, 0], [0, 1, 1, 0], [1, 0, 0, 1]])
    assert np.allclose(candidate_matrix("TIVC", 0.0), tivc)
    with pytest.raises(ValueError):
        candidate_matrix("CDW")


def test_sewing_matches_ideal_in_chiral_limit(chiral):
    ideal = ideal_sewing()
    for s in SYMMETRIES:
        sm = sewing_matrix(chiral, s)
        assert sm.unitarity_defect() < 1e-8
        assert np.abs(sm.B - ideal[s]).max() < 1e-10
    nux = sewing_matrix(chiral, "nuxT")
    for k in range(chiral.nk):
        assert nux.source[k] == chiral.grid.negate(k)[0]
    with pytest.raises(ValueError):
        sewing_matrix(chiral, "C3z")


def test_sewing_unitary_away_from_chiral(models):
    bands = models(0.7, 2).bands
    for s in SYMMETRIES:
        assert sewing_matrix(bands, s).unitarity_defect() < 1e-8


def test_band_permutation_permutes_sewing(chiral):
    perm = [1, 0, 3, 2]
    Pi = np.eye(4)[:, perm]
    permuted = chiral.rotate(np.repeat(Pi[None], chiral.nk, axis=0))
    for s in SYMMETRIES:
        B, Bp = sewing_matrix(chiral, s).B, sewing_matrix(permuted, s).B
        assert np.allclose(Bp, Pi.T @ B @ Pi, atol=1e-12)


def test_order_parameter_zero_for_symmetric_state():
    rng = np.random.default_rng(0)
    for s, B in ideal_sewing().items():
        P = random_projector(rng, 1)[0]
        sym = 0.5 * (P + B @ np.conj(P) @ np.linalg.inv(B))
        assert order_parameter(sym[None], B) < 1e-12


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1), sym=st.sampled_from(SYMMETRIES))
def test_order_parameter_invariant_under_symmetric_unitaries(seed, sym):
    rng = np.random.default_rng(seed)
    B = ideal_sewing()[sym]
    H0 = rng.normal(size=(4, 4)) + 1j * rng.normal(size=(4, 4))
    H0 = H0 + H0.conj().T
    H = 0.5 * (H0 - B @ np.conj(H0) @ np.linalg.inv(B))
    e, V = np.linalg.eigh(H)
    W = V @ np.diag(np.exp(1j * e)) @ V.conj().T
    assert np.allclose(B @ np.conj(W) @ np.linalg.inv(B), W)
    P = random_projector(rng, 2)
    Pw = W @ P @ W.conj().T
    for norm in ("spectral", "fro"):
        assert order_parameter(Pw, B, norm) == pytest.approx(order_parameter(P, B, norm), abs=1e-10)
        assert 0 <= order_parameter(P, B, norm) <= 2 + 1e-12


def test_ivc_states_share_c2zt_dependence():
    # both IVC candidates pair (K,A) with (K',B) and (K,B) with (K',A); with a sewing of the
    # form X + (+-X) their C2zT order parameters coincide for every phase
    B = ideal_sewing()["C2zT"]
    for phi in np.linspace(0, np.pi, 7):
        k = order_parameter(candidate_state("KIVC", phi).P, B)
        t = order_parameter(candidate_state("TIVC", phi).P, B)
        assert k == pytest.approx(t, abs=1e-12)
        assert t == pytest.approx(abs(np.sin(phi)), abs=1e-12)


def test_order_parameters_on_sewing_objects(chiral):
    sew = {s: sewing_matrix(chiral, s) for s in SYMMETRIES}
    ops = order_parameters(candidate_state("VP", 0.0, chiral.nk), sew)
    assert ops["C2zT"] == pytest.approx(0, abs=1e-9)
    assert ops["nuxT"] == pytest.approx(1) and ops["nuyT"] == pytest.approx(1)
    with pytest.raises(ValueError):
        order_parameter(candidate_state("VP", 0.0, 1), np.eye(4), "nuclear")
