"""Flat-band projection, pair products and the screened interaction.

A :class:`FlatBandSet` holds the four flat-band envelopes per k-point,
ordered ``(K, 0), (K, 1), (K', 0), (K', 1)``.  All envelopes live in the
single-valley plane-wave index space of a :class:`PlaneWaveBasis`.

Relative wave-vectors of both valleys share one orientation here: the K'
state at ``k`` is the time-reversal partner of the K state at ``-k``,

    u'_k(G) = conj(u_{-k}(-G)) = conj(u_{k_j}(n - G)),

where ``-k = k_j + Bm n`` reduces ``-k`` to the grid.  This makes time
reversal exact on the grid and keeps momentum conservation uniform across
valleys in the interaction.

Pair products follow

    rho_{k,k'}(G)_{mn} = sum_{G1} conj(u_{mk}(G1)) u_{nk'}(G1 + G)

on valley-diagonal blocks, i.e. the Fourier coefficient of
``conj(u_mk) u_nk'`` at ``e^{iG·r}``.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np

from .geometry import KGrid
from .hamiltonians import BandGapError, BasisError, ContinuumModel, PlaneWaveBasis, flat_window, fix_gauge

COULOMB_MEV_ANGSTROM = 14399.645  # e^2 / (4 pi eps0) in meV·Å
DEFAULT_EPSILON = 10.79
DEFAULT_GATE_DISTANCE = 300.0  # Å
DEFAULT_FF_CUTOFF = 4.0  # in units of |b1|
VALLEYS = (0, 0, 1, 1)


@dataclass(frozen=True)
class FlatBandSet:
    """Flat-band envelopes on a k-grid.

    Attributes
    ----------
    vecs : ndarray, shape (nk, 4, n)
        Envelope coefficients, row ``m`` is state ``m``.
    h0 : ndarray, shape (nk, 4, 4)
        Single-particle Hamiltonian in the current basis (diagonal when raw).
    remote_gap : float
        Smallest separation between flat and remote bands on the grid (meV).
    gauge : str
        ``"raw"`` or ``"sublattice"``.
    """

    grid: KGrid
    basis: PlaneWaveBasis
    vecs: np.ndarray
    h0: np.ndarray
    remote_gap: float
    gauge: str = "raw"
    valley: tuple = VALLEYS
    meta: dict = field(default_factory=dict)

    @property
    def nk(self) -> int:
        return self.vecs.shape[0]

    def orthonormality_defect(self) -> float:
        S = np.einsum("kmi,kni->kmn", self.vecs.conj(), self.vecs)
        # K and K' envelopes share one index space but live in different valleys
        v = np.asarray(self.valley)
        S[:, v[:, None] != v[None, :]] = 0.0
        return float(np.abs(S - np.eye(4)).max())

    def energies(self) -> np.ndarray:
        """Eigenvalues of ``h0`` per k (meV)."""
        return np.linalg.eigvalsh(self.h0)

    def rotate(self, U: np.ndarray, gauge: str | None = None) -> "FlatBandSet":
        """Apply per-k unitaries: new state ``m'`` is ``sum_m U[k][m, m'] |m>``."""
        U = np.asarray(U)
        if U.shape != (self.nk, 4, 4):
            raise ValueError(f"expected gauge unitaries of shape {(self.nk, 4, 4)}, got {U.shape}")
        vecs = np.einsum("kmp,kmi->kpi", U, self.vecs)
        h0 = np.einsum("kmp,kmn,knq->kpq", U.conj(), self.h0, U)
        return replace(self, vecs=vecs, h0=h0, gauge=gauge or self.gauge)

    def sublattice_weights(self) -> np.ndarray:
        """Weight of every state on sublattice A, shape (nk, 4)."""
        mask = self.basis.sublattice_mask(0)
        return np.sum(np.abs(self.vecs[:, :, mask]) ** 2, axis=2)


def reflection_index(basis: PlaneWaveBasis, n) -> np.ndarray:
    """Basis index of ``(n - G, layer, sublattice)`` for every basis entry, ``-1`` when outside."""
    n = np.asarray(n, dtype=int)
    g = np.array([basis.lookup.get((int(n[0] - a), int(n[1] - b)), -1) for a, b in basis.gint])
    comp = np.arange(4)
    return np.where(g[:, None] >= 0, 4 * g[:, None] + comp[None, :], -1).ravel()


def time_reversed(vecs: np.ndarray, index: np.ndarray) -> np.ndarray:
    """``w(G) = conj(v(n - G))`` along the last axis, zero where ``n - G`` leaves the basis."""
    out = np.conj(vecs[..., np.maximum(index, 0)])
    out[..., index < 0] = 0.0
    return out


def compute_flat_bands(model: ContinuumModel, grid: KGrid, min_gap: float = 1e-6) -> FlatBandSet:
    """Diagonalize ``model`` on ``grid`` and keep the two middle bands per valley.

    K-valley states are eigenvectors of ``model`` at the grid points; K'
    states are their time-reversal partners (see the module docstring).

    Raises
    ------
    BandGapError
        If the flat bands touch the remote bands (gap below ``min_gap`` meV).
    """
    basis = model.basis
    n = basis.size
    win = flat_window(n)
    vecs = np.empty((grid.nk, 4, n), dtype=complex)
    energies = np.empty((grid.nk, 2))
    gap = np.inf
    for ik, k in enumerate(grid.points):
        e, v = np.linalg.eigh(model.matrix(k))
        gap = min(gap, e[n // 2 + 1] - e[n // 2], e[n // 2 - 1] - e[n // 2 - 2])
        vecs[ik, :2] = fix_gauge(v[:, win]).T
        energies[ik] = e[win]
    h0 = np.zeros((grid.nk, 4, 4))
    for ik in range(grid.nk):
        j, shift = grid.negate(ik)
        vecs[ik, 2:] = time_reversed(vecs[j, :2], reflection_index(basis, shift))
        h0[ik] = np.diag(np.concatenate([energies[ik], energies[j]]))
    if not gap > min_gap:
        raise BandGapError(
            f"flat bands touch the remote bands (minimal gap {gap:.3e} meV on a {grid.nkx}x{grid.nky} grid); "
            "projection requires a gap, reduce the AA/AB ratio below 0.95 or change the twist angle")
    return FlatBandSet(grid=grid, basis=basis, vecs=vecs, h0=h0, remote_gap=float(gap),
                       meta={"model": model.describe()})


@dataclass(frozen=True)
class ScreenedPotential:
    """Double-gate screened Coulomb kernel ``(2 pi / eps) C tanh(|q| d / 2) / |q|``.

    ``C = e^2/(4 pi eps0)`` in meV·Å, so ``v_hat`` returns meV·Å².
    """

    epsilon: float = DEFAULT_EPSILON
    d: float = DEFAULT_GATE_DISTANCE
    coulomb: float = COULOMB_MEV_ANGSTROM

    def __post_init__(self):
        if not (self.epsilon > 0 and self.d > 0):
            raise ValueError(f"epsilon and d must be positive, got {self.epsilon}, {self.d}")

    def __call__(self, q) -> np.ndarray:
        return v_hat(self, q)

    def describe(self) -> dict:
        return {"epsilon": self.epsilon, "d": self.d, "coulomb_meV_A": self.coulomb}


def v_hat(pot: ScreenedPotential, q) -> np.ndarray:
    """Screened potential at wave-vectors ``q`` (shape ``(..., 2)``), in meV·Å²."""
    q = np.asarray(q, dtype=float)
    x = np.linalg.norm(q, axis=-1) * pot.d / 2.0
    small = x < 1e-6
    xs = np.where(small, 1.0, x)
    # tanh(x)/x with its series near zero
    ratio = np.where(small, 1.0 - x ** 2 / 3.0, np.tanh(xs) / xs)
    return 2.0 * np.pi * pot.coulomb / pot.epsilon * (pot.d / 2.0) * ratio


def interaction_shells(basis: PlaneWaveBasis, cutoff: float) -> np.ndarray:
    """Integer coordinates of moiré reciprocal vectors with ``|G| <= cutoff |b1|``."""
    if cutoff > basis.cutoff:
        raise BasisError(f"form-factor cutoff {cutoff} exceeds the plane-wave support; "
                         f"maximum supported cutoff is {basis.cutoff}")
    return PlaneWaveBasis(basis.geom, cutoff).gint


@dataclass(frozen=True)
class FormFactorTensor:
    """Pair products ``rho[k, k', g, m, n]`` on a fixed set of ``G`` vectors."""

    grid: KGrid
    gint: np.ndarray
    gvecs: np.ndarray
    rho: np.ndarray
    valley: tuple = VALLEYS
    gauge: str = "raw"

    @cached_property
    def lookup(self) -> dict[tuple[int, int], int]:
        return {(int(a), int(b)): i for i, (a, b) in enumerate(self.gint)}

    @cached_property
    def negation(self) -> np.ndarray:
        return np.array([self.lookup[(-int(a), -int(b))] for a, b in self.gint])

    @cached_property
    def zero(self) -> int:
        return self.lookup[(0, 0)]

    @property
    def ng(self) -> int:
        return len(self.gint)

    def index(self, n) -> int:
        """Index of the integer vector ``n`` or ``-1`` when outside the cutoff."""
        return self.lookup.get((int(n[0]), int(n[1])), -1)

    def rotate(self, U: np.ndarray, gauge: str | None = None) -> "FormFactorTensor":
        """Transform as ``U(k)^† rho U(k')`` for per-k unitaries ``U``."""
        rho = np.einsum("amp,abgmn,bnq->abgpq", np.conj(U), self.rho, U)
        return replace(self, rho=rho, gauge=gauge or self.gauge)

    def hermitian_pairing_defect(self) -> float:
        """``max |rho_{k,k'}(G) - rho_{k',k}(-G)^†|``."""
        other = np.conj(np.transpose(self.rho[:, :, self.negation], (1, 0, 2, 4, 3)))
        return float(np.abs(self.rho - other).max())

    def valley_leakage(self) -> float:
        v = np.asarray(self.valley)
        cross = v[:, None] != v[None, :]
        return float(np.abs(self.rho[..., cross]).max())

    def nbytes(self) -> int:
        return int(self.rho.nbytes)


def form_factors(bands: FlatBandSet, cutoff: float = DEFAULT_FF_CUTOFF) -> FormFactorTensor:
    """Pair products of ``bands`` for all ``G`` with ``|G| <= cutoff |b1|``.

    Cross-valley entries are set to exactly zero.
    """
    basis = bands.basis
    gint = interaction_shells(basis, cutoff)
    nk, nst, n = bands.vecs.shape
    ng = len(gint)
    # shifted[k', g, n, i] = u_{n k'}(G_i + G_g), zero outside the basis
    padded = np.concatenate([bands.vecs, np.zeros((nk, nst, 4), dtype=complex)], axis=2)
    shifted = np.empty((nk, ng, nst, n), dtype=complex)
    comp = np.arange(4)
    for ig, g in enumerate(gint):
        idx = basis.shifted(g)
        full = np.where(idx[:, None] >= 0, 4 * idx[:, None] + comp[None, :], n + comp[None, :]).ravel()
        shifted[:, ig] = padded[:, :, full]
    A = bands.vecs.conj().reshape(nk * nst, n)
    B = shifted.reshape(nk * ng * nst, n)
    rho = (A @ B.T).reshape(nk, nst, nk, ng, nst).transpose(0, 2, 3, 1, 4)
    v = np.asarray(bands.valley)
    rho[..., v[:, None] != v[None, :]] = 0.0
    return FormFactorTensor(grid=bands.grid, gint=gint, gvecs=gint @ basis.geom.Bm.T,
                            rho=np.ascontiguousarray(rho), valley=bands.valley, gauge=bands.gauge)
