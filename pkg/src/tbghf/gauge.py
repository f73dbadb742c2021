"""Sublattice-polarized gauge, candidate ground states and symmetry order parameters.

The gauge-fixed basis order is ``(K,A), (K,B), (K',A), (K',B)``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import qr

from .formfactors import FlatBandSet, reflection_index, time_reversed
from .hamiltonians import SYMMETRIES
from .hartreefock import OneRdm

log = logging.getLogger(__name__)

CANDIDATES = ("QH", "VH", "VP", "KIVC", "TIVC")
PIVOT_RATIO_WARN = 1.1
NORMS = ("spectral", "fro")


@dataclass(frozen=True)
class GaugeUnitaries:
    """Per-k unitaries from the raw flat-band basis to the sublattice basis.

    ``columns`` are the selected plane-wave indices ``(c_A, c_B)`` of the K
    valley; the K' valley uses their images under ``G -> -G``.
    """

    U: np.ndarray
    columns: tuple[int, int]
    anchor: int
    pivot_ratio: float
    warnings: tuple = ()

    def unitarity_defect(self) -> float:
        I = np.eye(4)
        return float(np.abs(np.conj(np.swapaxes(self.U, 1, 2)) @ self.U - I).max())


def select_columns(bands: FlatBandSet, anchor: int = 0) -> tuple[tuple[int, int], float]:
    """Pick the SCDM column on sublattice A at the anchor k and its sublattice-B partner.

    Returns the columns and the ratio of the largest candidate column norm to
    the largest one that is not a symmetry copy of it.  Copies (equal norms to
    ``1e-8`` relative) are tie-broken by the lowest index.
    """
    basis = bands.basis
    idx_a = np.flatnonzero(basis.sublattice_mask(0))
    psi = bands.vecs[anchor, :2][:, idx_a]
    _, piv = qr(psi, mode="r", pivoting=True)
    c_a = int(idx_a[piv[0]])
    norms = np.sort(np.linalg.norm(psi, axis=0))[::-1]
    rest = norms[norms < norms[0] * (1 - 1e-8)]
    ratio = float(norms[0] / rest[0]) if len(rest) and rest[0] > 0 else np.inf
    return (c_a, c_a + 1), ratio


def _lowdin(M: np.ndarray) -> np.ndarray:
    W, s, Vh = np.linalg.svd(M)
    if s.min() < 1e-12 * max(s.max(), 1e-300):
        raise np.linalg.LinAlgError("selected columns are linearly dependent at this k-point")
    return W @ Vh


def scdm_gauge(bands: FlatBandSet, columns: tuple[int, int] | None = None, anchor: int = 0) -> GaugeUnitaries:
    """Selected-columns gauge that localizes each flat band on one sublattice.

    For every k, the K-valley states become the Löwdin-orthonormalized
    projections ``P_k e_{c_A}`` and ``P_k e_{c_B}``.  The K' unitaries are the
    complex conjugates of the K ones at ``-k``, so time-reversal partners stay
    exact partners.  ``columns`` can be reused from another model (e.g. the
    chiral endpoint of an interpolation) to keep labels continuous.
    """
    warnings = []
    if columns is None:
        columns, ratio = select_columns(bands, anchor)
        if ratio < PIVOT_RATIO_WARN:
            warnings.append(f"ambiguous SCDM pivot (ratio {ratio:.3f}); lowest-index column taken")
    else:
        ratio = float("nan")
    cols = np.asarray(columns)
    grid = bands.grid
    UK = np.array([_lowdin(np.conj(bands.vecs[k, :2][:, cols])) for k in range(bands.nk)])
    wa = np.sum(np.abs(np.einsum("kmp,kmi->kpi", UK, bands.vecs[:, :2])[:, :, bands.basis.sublattice_mask(0)]) ** 2,
                axis=2)
    flip = wa[:, 0] < wa[:, 1]
    if np.any(flip):
        # fall back to labeling by dominant sublattice weight
        UK[flip] = UK[flip][:, :, ::-1]
        warnings.append("sublattice labels reassigned by weight")
    U = np.zeros((bands.nk, 4, 4), dtype=complex)
    U[:, :2, :2] = UK
    for k in range(bands.nk):
        U[k, 2:, 2:] = np.conj(UK[grid.negate(k)[0]])
    for w in warnings:
        log.warning(w)
    return GaugeUnitaries(U=U, columns=(int(cols[0]), int(cols[1])), anchor=anchor, pivot_ratio=ratio,
                          warnings=tuple(warnings))


def off_sublattice_weight(bands: FlatBandSet) -> np.ndarray:
    """Weight of each gauge-fixed state on the sublattice it is not labeled with, shape (nk, 4)."""
    wa = bands.sublattice_weights()
    return np.stack([1 - wa[:, 0], wa[:, 1], 1 - wa[:, 2], wa[:, 3]], axis=1)


def candidate_matrix(name: str, phi: float = 0.0) -> np.ndarray:
    """4×4 1-RDM of a candidate state in the sublattice basis."""
    name = name.upper()
    if name == "QH":
        return np.diag([1.0, 0, 0, 1]).astype(complex)
    if name == "VH":
        return np.diag([1.0, 0, 1, 0]).astype(complex)
    if name == "VP":
        return np.diag([1.0, 1, 0, 0]).astype(complex)
    e = np.exp(-1j * phi)
    if name == "KIVC":
        a, b = -1j * e, 1j * e
    elif name == "TIVC":
        a, b = e, e
    else:
        raise ValueError(f"unknown candidate state {name!r}; expected one of {CANDIDATES}")
    P = 0.5 * np.eye(4, dtype=complex)
    P[0, 3], P[1, 2] = 0.5 * a, 0.5 * b
    P[3, 0], P[2, 1] = np.conj(P[0, 3]), np.conj(P[1, 2])
    return P


def candidate_state(name: str, phi: float = 0.0, nk: int = 1) -> OneRdm:
    """k-independent candidate 1-RDM on ``nk`` k-points."""
    P = candidate_matrix(name, phi)
    return OneRdm(P=np.repeat(P[None], nk, axis=0), gauge="sublattice",
                  meta={"init": name.upper(), "phi": float(phi)})


@dataclass(frozen=True)
class SewingMatrix:
    """``B(k)_{mn} = <u_mk, S u_n(k')>`` for an antiunitary symmetry ``S`` mapping ``k'`` to ``k``.

    ``source[k]`` is the grid index of ``k'``: ``k`` itself for ``C2zT`` and
    ``-k`` for the valley-exchanging symmetries.
    """

    symmetry: str
    B: np.ndarray
    source: np.ndarray
    meta: dict = field(default_factory=dict)

    def unitarity_defect(self) -> float:
        BB = np.conj(np.swapaxes(self.B, 1, 2)) @ self.B
        return float(np.abs(BB - np.eye(self.B.shape[1])).max())


def _apply_symmetry(bands: FlatBandSet, symmetry: str, k: int) -> tuple[int, np.ndarray]:
    """Images under ``symmetry`` of the four states at the source of ``k``, shape (4, 2, n)."""
    n = bands.vecs.shape[2]
    out = np.zeros((4, 2, n), dtype=complex)
    if symmetry == "C2zT":
        partner = np.arange(n) ^ 1
        for m, v in enumerate(bands.valley):
            out[m, v] = np.conj(bands.vecs[k, m][partner])
        return k, out
    j, shift = bands.grid.negate(k)
    idx = reflection_index(bands.basis, shift)
    for m, v in enumerate(bands.valley):
        w = time_reversed(bands.vecs[j, m], idx)
        target = 1 - v
        if symmetry == "nuyT":
            w = w * (1j if target == 0 else -1j)
        out[m, target] = w
    return j, out


def sewing_matrix(bands: FlatBandSet, symmetry: str) -> SewingMatrix:
    """Sewing matrix of ``symmetry`` (one of ``C2zT``, ``nuxT``, ``nuyT``).

    ``C2zT`` keeps ``k`` and swaps sublattices; ``nuxT`` and ``nuyT`` exchange
    valleys and send ``-k`` to ``k`` (``nuyT`` with the factor ``i*nu`` of the
    output valley, ``nu = +1`` for K).
    """
    if symmetry not in SYMMETRIES:
        raise ValueError(f"unknown symmetry {symmetry!r}; expected one of {SYMMETRIES}")
    B = np.empty((bands.nk, 4, 4), dtype=complex)
    source = np.empty(bands.nk, dtype=int)
    for k in range(bands.nk):
        source[k], img = _apply_symmetry(bands, symmetry, k)
        for m, v in enumerate(bands.valley):
            B[k, m] = np.conj(bands.vecs[k, m]) @ img[:, v].T
    sm = SewingMatrix(symmetry=symmetry, B=B, source=source)
    defect = sm.unitarity_defect()
    if defect > 1e-8:
        log.info("sewing matrix of %s deviates from unitarity by %.2e", symmetry, defect)
    return replace_meta(sm, {"unitarity_defect": defect})


def replace_meta(sm: SewingMatrix, meta: dict) -> SewingMatrix:
    return SewingMatrix(symmetry=sm.symmetry, B=sm.B, source=sm.source, meta={**sm.meta, **meta})


def _norm(X: np.ndarray, norm: str) -> float:
    if norm == "spectral":
        return float(np.linalg.norm(X, 2))
    if norm == "fro":
        return float(np.linalg.norm(X))
    raise ValueError(f"unknown norm {norm!r}; expected one of {NORMS}")


def order_parameter(P, B, norm: str = "spectral") -> float:
    """``(1/nk) sum_k || B(k) conj(P(k')) B(k)^{-1} - P(k) ||``.

    ``B`` is a :class:`SewingMatrix` (``k'`` from its ``source``), or a single
    4×4 matrix / per-k array with ``k' = k``.  ``norm`` is ``"spectral"``
    (default) or ``"fro"``.
    """
    P = P.P if isinstance(P, OneRdm) else np.asarray(P)
    if isinstance(B, SewingMatrix):
        B, source = B.B, B.source
    else:
        B = np.asarray(B)
        source = np.arange(P.shape[0])
    if B.ndim == 2:
        B = np.broadcast_to(B, P.shape)
    total = 0.0
    for k, Bk in enumerate(B):
        total += _norm(Bk @ np.conj(P[source[k]]) @ np.linalg.inv(Bk) - P[k], norm)
    return total / P.shape[0]


def order_parameters(P, sewing: dict, norm: str = "spectral") -> dict[str, float]:
    """All three order parameters from a mapping ``symmetry -> SewingMatrix``."""
    return {s: order_parameter(P, sewing[s], norm) for s in SYMMETRIES}


def ideal_sewing() -> dict[str, np.ndarray]:
    """Sewing matrices of the exact sublattice-polarized gauge."""
    X = np.array([[0, 1], [1, 0]], dtype=complex)
    I2 = np.eye(2, dtype=complex)
    Z = np.zeros((2, 2))
    return {"C2zT": np.block([[X, Z], [Z, X]]),
            "nuxT": np.block([[Z, I2], [I2, Z]]),
            "nuyT": np.block([[Z, 1j * I2], [-1j * I2, Z]])}
