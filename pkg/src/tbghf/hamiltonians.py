"""Bloch-Floquet continuum Hamiltonians of twisted bilayer graphene.

Basis vectors are plane waves ``e^{i(k + G)·r}`` on a finite set of moiré
reciprocal vectors.  Layer 1 components carry momentum ``k + s1/2 + G`` and
layer 2 components ``k - s1/2 + G``, so the layer Dirac points sit at
``k = ∓s1/2``.  The basis index of ``(G, layer, sublattice)`` is
``4*g + 2*(layer-1) + sublattice``; valleyful matrices stack the K block
before the K' block.

Every single-valley model here is a polynomial of degree at most two in
``k``.  Models therefore cache six coefficient matrices once and evaluate
``H(k)`` by a linear combination, which keeps dense sweeps cheap.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np
from scipy.optimize import minimize_scalar

from .geometry import MoireGeometry, hop_shells, high_symmetry_points
from .relaxation import HoppingTables

DEFAULT_V = 5339.0  # meV·Å
DEFAULT_W1 = 113.25  # meV
MAX_KAPPA = 0.95
OMEGA = np.exp(2j * np.pi / 3)


class BasisError(ValueError):
    """Basis unsuitable for the requested operation."""


class BandGapError(RuntimeError):
    """Flat bands touch the remote bands."""


@dataclass(frozen=True)
class PlaneWaveBasis:
    """Moiré reciprocal vectors with ``|G| <= cutoff * |b1|``.

    Ordering is by ``|G|`` and then lexicographically by integer coordinates.
    """

    geom: MoireGeometry
    cutoff: float = 5.0

    @cached_property
    def gint(self) -> np.ndarray:
        rmax = self.cutoff * np.linalg.norm(self.geom.b1)
        # the moiré reciprocal lattice is hexagonal; coordinates are bounded by 2|G|/|b1|
        m = int(np.ceil(2.0 * self.cutoff)) + 1
        rng = np.arange(-m, m + 1)
        ints = np.array([[i, j] for i in rng for j in rng])
        norms = np.linalg.norm(ints @ self.geom.Bm.T, axis=1)
        keep = norms <= rmax * (1.0 + 1e-12)
        ints, norms = ints[keep], norms[keep]
        order = sorted(range(len(ints)), key=lambda i: (round(norms[i] / rmax, 10), ints[i, 0], ints[i, 1]))
        return ints[order]

    @cached_property
    def gvecs(self) -> np.ndarray:
        return self.gint @ self.geom.Bm.T

    @cached_property
    def lookup(self) -> dict[tuple[int, int], int]:
        return {(int(a), int(b)): i for i, (a, b) in enumerate(self.gint)}

    @property
    def ng(self) -> int:
        return len(self.gint)

    @property
    def size(self) -> int:
        return 4 * self.ng

    @staticmethod
    def index(g: int, layer: int, sublattice: int) -> int:
        return 4 * g + 2 * (layer - 1) + sublattice

    def shifted(self, n) -> np.ndarray:
        """Index of ``G + Bm n`` for every basis vector, ``-1`` when outside."""
        n = np.asarray(n, dtype=int)
        return np.array([self.lookup.get((int(a + n[0]), int(b + n[1])), -1) for a, b in self.gint])

    @cached_property
    def negation(self) -> np.ndarray:
        """Index of ``-G`` for each ``G``; raises if the set is not closed."""
        neg = np.array([self.lookup.get((-int(a), -int(b)), -1) for a, b in self.gint])
        if np.any(neg < 0):
            raise BasisError("plane-wave basis is not closed under negation")
        return neg

    @cached_property
    def negation_permutation(self) -> np.ndarray:
        """Basis permutation sending ``(G, layer, sublattice)`` to ``(-G, layer, sublattice)``."""
        neg = self.negation
        return (4 * neg[:, None] + np.arange(4)[None, :]).ravel()

    def sublattice_mask(self, sublattice: int) -> np.ndarray:
        return (np.arange(self.size) % 2) == sublattice

    def describe(self) -> dict:
        return {"cutoff": self.cutoff, "ng": self.ng}


@dataclass(frozen=True)
class BlochHamiltonian:
    """Dense Hermitian matrix at fixed ``k``."""

    k: np.ndarray
    matrix: np.ndarray
    tag: dict
    valleyful: bool = False

    def hermiticity_defect(self) -> float:
        H = self.matrix
        return float(np.abs(H - H.conj().T).max() / max(np.abs(H).max(), 1e-300))


class ContinuumModel:
    """Single-valley model with cached polynomial dependence on ``k``."""

    geom: MoireGeometry
    basis: PlaneWaveBasis

    def _assemble(self, k: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def describe(self) -> dict:
        raise NotImplementedError

    @cached_property
    def coefficients(self) -> tuple[np.ndarray, ...]:
        """``(C0, Cx, Cy, Cxx, Cyy, Cxy)`` with ``H(k) = C0 + kx Cx + ... + kx ky Cxy``."""
        ex, ey = np.array([1.0, 0.0]), np.array([0.0, 1.0])
        c0 = self._assemble(np.zeros(2))
        px, mx = self._assemble(ex), self._assemble(-ex)
        py, my = self._assemble(ey), self._assemble(-ey)
        cx, cy = 0.5 * (px - mx), 0.5 * (py - my)
        cxx, cyy = 0.5 * (px + mx) - c0, 0.5 * (py + my) - c0
        cxy = self._assemble(ex + ey) - c0 - cx - cy - cxx - cyy
        return c0, cx, cy, cxx, cyy, cxy

    def matrix(self, k) -> np.ndarray:
        kx, ky = np.asarray(k, dtype=float)
        c0, cx, cy, cxx, cyy, cxy = self.coefficients
        return c0 + kx * cx + ky * cy + (kx * kx) * cxx + (ky * ky) * cyy + (kx * ky) * cxy

    def hamiltonian(self, k) -> BlochHamiltonian:
        k = np.asarray(k, dtype=float)
        return BlochHamiltonian(k=k, matrix=self.matrix(k), tag=self.describe())

    def valleyful_matrix(self, k) -> np.ndarray:
        H = self.matrix(k)
        perm = self.basis.negation_permutation
        Hp = np.conj(H[np.ix_(perm, perm)])
        n = H.shape[0]
        out = np.zeros((2 * n, 2 * n), dtype=complex)
        out[:n, :n] = H
        out[n:, n:] = Hp
        return out


def _dirac_blocks(p: np.ndarray, v: float, sin_t: float = 0.0, v1: float = 0.0, v2: float = 0.0):
    """Dirac operator on an array of momenta ``p`` (shape ``(n, 2)``); returns ``(n, 2, 2)``."""
    kp = p[:, 0] + 1j * p[:, 1]
    km = p[:, 0] - 1j * p[:, 1]
    out = np.zeros((len(p), 2, 2), dtype=complex)
    out[:, 0, 1] = v * km * (1.0 - 1j * sin_t) - v2 * kp ** 2
    out[:, 1, 0] = v * kp * (1.0 + 1j * sin_t) - v2 * km ** 2
    q2 = np.sum(p * p, axis=1)
    out[:, 0, 0] = v1 * q2
    out[:, 1, 1] = v1 * q2
    return out


def _place_diagonal(H: np.ndarray, blocks: np.ndarray, layer: int):
    idx = 4 * np.arange(len(blocks)) + 2 * (layer - 1)
    for a in range(2):
        for b in range(2):
            H[idx + a, idx + b] += blocks[:, a, b]


def _place_pairs(H: np.ndarray, rows: np.ndarray, cols: np.ndarray, block: np.ndarray,
                 row_layer: int, col_layer: int):
    ri = 4 * rows + 2 * (row_layer - 1)
    ci = 4 * cols + 2 * (col_layer - 1)
    for a in range(2):
        for b in range(2):
            H[ri + a, ci + b] += block[a, b]


def bm_hop_matrices(w0: float, w1: float) -> list[np.ndarray]:
    """First-shell tunneling matrices ``T_j`` for ``j = 0, 1, 2``."""
    return [np.array([[w0, w1 * np.conj(OMEGA) ** j], [w1 * OMEGA ** j, w0]]) for j in range(3)]


@dataclass(frozen=True, eq=False)
class BMModel(ContinuumModel):
    """Bistritzer-MacDonald model with AA tunneling ``w0`` and AB tunneling ``w1`` (meV)."""

    geom: MoireGeometry
    basis: PlaneWaveBasis
    w0: float
    w1: float
    v: float = DEFAULT_V

    def __post_init__(self):
        if self.w1 < 0 or self.w0 < 0:
            raise ValueError(f"tunneling amplitudes must be non-negative, got w0={self.w0}, w1={self.w1}")
        if self.w1 == 0 and self.w0 > 0:
            raise ValueError("w0 > 0 requires w1 > 0")
        if self.kappa > MAX_KAPPA + 1e-12:
            raise ValueError(f"kappa = w0/w1 = {self.kappa:.4f} exceeds {MAX_KAPPA}")

    @property
    def kappa(self) -> float:
        return 0.0 if self.w1 == 0 else self.w0 / self.w1

    def describe(self) -> dict:
        kind = "chiral" if self.w0 == 0 else "bm"
        return {"kind": kind, "w0": self.w0, "w1": self.w1, "kappa": self.kappa, "v": self.v,
                "theta": self.geom.theta, "basis": self.basis.describe()}

    def _assemble(self, k: np.ndarray) -> np.ndarray:
        b = self.basis
        H = np.zeros((b.size, b.size), dtype=complex)
        half = 0.5 * self.geom.s1
        _place_diagonal(H, _dirac_blocks(k + half + b.gvecs, self.v), 1)
        _place_diagonal(H, _dirac_blocks(k - half + b.gvecs, self.v), 2)
        shells = hop_shells(self.geom, n_inter_shells=1, n_intra_shells=1)
        U = np.zeros_like(H)
        for n, T in zip(shells.interN, bm_hop_matrices(self.w0, self.w1)):
            cols = b.shifted(-n)
            rows = np.flatnonzero(cols >= 0)
            _place_pairs(U, rows, cols[rows], T, 1, 2)
        return H + U + U.conj().T


@dataclass(frozen=True, eq=False)
class RelaxedModel(ContinuumModel):
    """Relaxed continuum model defined by :class:`HoppingTables`.

    Intralayer hops are written on the upper triangle (rows with smaller
    plane-wave index) and mirrored by conjugate transposition; interlayer
    hops fill the layer-1/layer-2 block and its adjoint.  With
    ``gauge_fix`` the interlayer block is multiplied by
    ``exp(-i * tables.layer_phase)``, a unitary change of the layer-2 phase
    that leaves the spectrum untouched and makes C2zT act without a layer
    phase.
    """

    geom: MoireGeometry
    basis: PlaneWaveBasis
    tables: HoppingTables
    gauge_fix: bool = True

    def describe(self) -> dict:
        return {"kind": "relaxed", "source": self.tables.source, "theta": self.geom.theta,
                "v": self.tables.v, "v1": self.tables.v1, "v2": self.tables.v2,
                "ratio": self.tables.first_shell_ratio(), "gauge_fix": self.gauge_fix,
                "basis": self.basis.describe()}

    def _assemble(self, k: np.ndarray) -> np.ndarray:
        b, t, geom = self.basis, self.tables, self.geom
        H = np.zeros((b.size, b.size), dtype=complex)
        half = 0.5 * geom.s1
        sins = np.sin(geom.layer_angles)
        shifts = (half, -half)
        for layer in (1, 2):
            p = k + shifts[layer - 1] + b.gvecs
            _place_diagonal(H, _dirac_blocks(p, t.v, sins[layer - 1], t.v1, t.v2), layer)
        U = np.zeros_like(H)
        for layer in (1, 2):
            kl = k + shifts[layer - 1]
            for j, n in enumerate(t.intra_hops):
                block = t.intra[layer - 1, j] + np.einsum("c,cab->ab", kl, t.intra_grad[layer - 1, j])
                # row G, column G' with G - G' = P_j
                rows = b.shifted(n)
                cols = np.flatnonzero(rows >= 0)
                rows = rows[cols]
                upper = rows < cols
                _place_pairs(U, rows[upper], cols[upper], block, layer, layer)
        phase = np.exp(-1j * t.layer_phase) if self.gauge_fix else 1.0
        for j, n in enumerate(t.inter_hops):
            block = phase * (t.inter[j] + np.einsum("c,cab->ab", k, t.inter_grad[j]))
            cols = b.shifted(-n)
            rows = np.flatnonzero(cols >= 0)
            _place_pairs(U, rows, cols[rows], block, 1, 2)
        return H + U + U.conj().T


@dataclass(frozen=True, eq=False)
class InterpolatedModel(ContinuumModel):
    """``(1 - lam) * start + lam * target`` evaluated matrix by matrix."""

    start: ContinuumModel
    target: ContinuumModel
    lam: float

    def __post_init__(self):
        if not (0.0 <= self.lam <= 1.0):
            raise ValueError(f"interpolation parameter must lie in [0, 1], got {self.lam}")
        if (self.start.basis.geom is not self.target.basis.geom and not np.allclose(
                self.start.geom.Bm, self.target.geom.Bm)) or not np.array_equal(
                self.start.basis.gint, self.target.basis.gint):
            raise BasisError("interpolated models must share geometry and plane-wave basis")

    @property
    def geom(self) -> MoireGeometry:  # type: ignore[override]
        return self.start.geom

    @property
    def basis(self) -> PlaneWaveBasis:  # type: ignore[override]
        return self.start.basis

    def describe(self) -> dict:
        return {"kind": "interpolated", "lam": self.lam, "start": self.start.describe(),
                "target": self.target.describe()}

    @cached_property
    def coefficients(self) -> tuple[np.ndarray, ...]:
        a, b = self.start.coefficients, self.target.coefficients
        if self.lam == 0.0:
            return a
        if self.lam == 1.0:
            return b
        return tuple((1.0 - self.lam) * x + self.lam * y for x, y in zip(a, b))

    def _assemble(self, k: np.ndarray) -> np.ndarray:
        return (1.0 - self.lam) * self.start._assemble(k) + self.lam * self.target._assemble(k)


# --------------------------------------------------------------------------
# public assembly functions
# --------------------------------------------------------------------------

def assemble_bm(geom: MoireGeometry, basis: PlaneWaveBasis, k, w0: float, w1: float,
                v: float = DEFAULT_V) -> BlochHamiltonian:
    """BM Hamiltonian at ``k``; rejects ``w0/w1 > 0.95``."""
    return BMModel(geom, basis, w0, w1, v).hamiltonian(k)


def assemble_chiral(geom: MoireGeometry, basis: PlaneWaveBasis, k, w1: float,
                    v: float = DEFAULT_V) -> BlochHamiltonian:
    """Chiral limit ``w0 = 0`` of :func:`assemble_bm`."""
    return BMModel(geom, basis, 0.0, w1, v).hamiltonian(k)


def assemble_relaxed(geom: MoireGeometry, basis: PlaneWaveBasis, k, tables: HoppingTables,
                     gauge_fix: bool = True) -> BlochHamiltonian:
    """Relaxed continuum Hamiltonian at ``k`` from hopping tables."""
    return RelaxedModel(geom, basis, tables, gauge_fix).hamiltonian(k)


def assemble_valleyful(model: ContinuumModel, k) -> BlochHamiltonian:
    """Direct sum ``H(k) ⊕ H'(k)`` with ``H'(k)_{G,G'} = conj(H(k)_{-G,-G'})``."""
    k = np.asarray(k, dtype=float)
    return BlochHamiltonian(k=k, matrix=model.valleyful_matrix(k), tag=model.describe(), valleyful=True)


def interpolate_model(chiral: ContinuumModel, target: ContinuumModel, lam: float) -> InterpolatedModel:
    """Linear interpolation between two models on a shared basis."""
    return InterpolatedModel(chiral, target, float(lam))


def build_model(geom: MoireGeometry, basis: PlaneWaveBasis, family: str, lam: float,
                w1: float = DEFAULT_W1, tables: HoppingTables | None = None,
                v: float = DEFAULT_V) -> ContinuumModel:
    """Model at interpolation parameter ``lam`` for the ``bm`` or ``relaxed`` family.

    The ``bm`` family is ``(1-lam) H_chiral + lam H_BM(kappa=lam)``, which is
    exactly the BM model with ``w0 = lam * w1``.  The ``relaxed`` family
    interpolates linearly from the chiral model to the relaxed model.
    """
    chiral = BMModel(geom, basis, 0.0, w1, v)
    if family == "bm":
        if lam > MAX_KAPPA + 1e-12:
            raise ValueError(f"bm family requires lam <= {MAX_KAPPA}, got {lam}")
        return BMModel(geom, basis, lam * w1, w1, v)
    if family == "relaxed":
        if tables is None:
            raise ValueError("relaxed family needs hopping tables")
        return interpolate_model(chiral, RelaxedModel(geom, basis, tables), lam)
    if family == "chiral":
        return chiral
    raise ValueError(f"unknown model family {family!r}")


# --------------------------------------------------------------------------
# diagonalization and bands
# --------------------------------------------------------------------------

def fix_gauge(vecs: np.ndarray) -> np.ndarray:
    """Make the largest-magnitude component of every column real and positive."""
    idx = np.argmax(np.abs(vecs) - 1e-12 * np.arange(vecs.shape[0])[:, None], axis=0)
    ph = vecs[idx, np.arange(vecs.shape[1])]
    return vecs * (np.abs(ph) / ph)[None, :]


def eigensolve(H, nbands: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Ascending eigenpairs of a Hermitian matrix with a deterministic phase gauge.

    ``nbands`` keeps the ``nbands`` eigenpairs in the middle of the spectrum
    (charge neutrality) instead of all of them.
    """
    M = H.matrix if isinstance(H, BlochHamiltonian) else np.asarray(H)
    try:
        evals, evecs = np.linalg.eigh(M)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(
            f"eigensolver failed for a {M.shape} matrix with max |H| = {np.abs(M).max():.3e}") from exc
    if nbands is not None:
        n = len(evals)
        lo = n // 2 - nbands // 2
        evals, evecs = evals[lo:lo + nbands], evecs[:, lo:lo + nbands]
    return evals, fix_gauge(evecs)


def flat_window(n: int) -> slice:
    """Slice of the two middle bands of an ``n``-dimensional single-valley spectrum."""
    return slice(n // 2 - 1, n // 2 + 1)


def flat_band_metrics(evals: np.ndarray) -> tuple[float, float]:
    """Return ``(bandwidth, remote_gap)`` for an array of spectra (one row per k)."""
    e = np.atleast_2d(evals)
    n = e.shape[1]
    flat = e[:, flat_window(n)]
    width = float(flat.max() - flat.min())
    gap = float(min((e[:, n // 2 + 1] - flat.max(axis=1)).min(), (flat.min(axis=1) - e[:, n // 2 - 2]).min()))
    return width, gap


@dataclass
class BandStructure:
    """Eigenvalues along a path or grid of k-points (meV, ascending per k)."""

    kpoints: np.ndarray
    energies: np.ndarray
    path: np.ndarray
    flat_indices: tuple[int, int]
    labels: dict = field(default_factory=dict)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["# schema tbghf.bands v1"])
            w.writerow(["path", "kx", "ky"] + [f"e{i + 1}" for i in range(self.energies.shape[1])])
            for s, k, e in zip(self.path, self.kpoints, self.energies):
                w.writerow([f"{s:.10g}", f"{k[0]:.10g}", f"{k[1]:.10g}"] + [f"{x:.10g}" for x in e])


def default_path(geom: MoireGeometry) -> list[tuple[str, np.ndarray]]:
    hs = high_symmetry_points(geom)
    return [(name, hs[key]) for name, key in (("K", "K"), ("Gamma", "Gamma"), ("M", "M"), ("K'", "Kp"))]


def band_path(model: ContinuumModel, waypoints: Sequence | None = None, resolution: int = 30,
              nbands: int | None = None) -> BandStructure:
    """Bands along straight segments joining ``waypoints``.

    ``waypoints`` may be 2-vectors or ``(label, vector)`` pairs and defaults to
    K - Gamma - M - K'.  ``resolution`` is the number of points per segment.
    """
    waypoints = default_path(model.geom) if waypoints is None else list(waypoints)
    labels, pts = {}, []
    for i, w in enumerate(waypoints):
        if isinstance(w, tuple) and isinstance(w[0], str):
            labels[w[0]] = i
            pts.append(np.asarray(w[1], dtype=float))
        else:
            pts.append(np.asarray(w, dtype=float))
    ks = [pts[0]]
    for a, b in zip(pts[:-1], pts[1:]):
        for t in np.arange(1, resolution + 1) / resolution:
            ks.append(a + t * (b - a))
    ks = np.array(ks)
    s = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(ks, axis=0), axis=1))])
    energies = np.array([np.linalg.eigvalsh(model.matrix(k)) for k in ks])
    n = energies.shape[1]
    lo = n // 2 - 1
    if nbands is not None:
        start = n // 2 - nbands // 2
        energies = energies[:, start:start + nbands]
        lo = nbands // 2 - 1
    labels = {name: float(s[i * resolution]) for name, i in labels.items()}
    return BandStructure(kpoints=ks, energies=energies, path=s, flat_indices=(lo, lo + 1), labels=labels)


def sample_grid(geom: MoireGeometry, n: int) -> np.ndarray:
    """``n × n`` uniform sample of the moiré cell."""
    s = np.arange(n) / n
    return np.array([[a, b] for a in s for b in s]) @ geom.Bm.T


def magic_coupling(geom: MoireGeometry, basis: PlaneWaveBasis, v: float = DEFAULT_V,
                   bracket: tuple[float, float] | None = None, nk: int = 3) -> float:
    """AB tunneling (meV) minimizing the chiral flat-band width near the first magic angle."""
    scale = v * np.linalg.norm(geom.s1)
    lo, hi = bracket or (0.5 * scale, 0.7 * scale)
    ks = sample_grid(geom, nk)
    nmid = basis.size // 2

    def width(w1):
        m = BMModel(geom, basis, 0.0, w1, v)
        return max(np.abs(np.linalg.eigvalsh(m.matrix(k))[nmid]) for k in ks)

    res = minimize_scalar(width, bounds=(lo, hi), method="bounded", options={"xatol": 1e-7})
    return float(res.x)


# --------------------------------------------------------------------------
# symmetries
# --------------------------------------------------------------------------

SYMMETRIES = ("C2zT", "nuxT", "nuyT")


def symmetry_unitary(basis: PlaneWaveBasis, name: str) -> np.ndarray:
    """Unitary ``U`` of an antiunitary symmetry ``S psi = U conj(psi)`` on the valleyful space.

    ``C2zT`` swaps sublattices within each valley and plane wave.  ``nuxT``
    sends valley K at ``G`` to K' at ``-G``; ``nuyT`` adds the factor ``i*nu``
    with ``nu = +1`` on the K output block and ``-1`` on the K' block.
    """
    n = basis.size
    if name == "C2zT":
        sx = np.array([[0.0, 1.0], [1.0, 0.0]])
        return np.kron(np.eye(n), sx)
    perm = basis.negation_permutation
    P = np.zeros((n, n))
    P[perm, np.arange(n)] = 1.0
    U = np.zeros((2 * n, 2 * n), dtype=complex)
    if name == "nuxT":
        U[n:, :n] = P
        U[:n, n:] = P
        return U
    if name == "nuyT":
        U[:n, n:] = 1j * P
        U[n:, :n] = -1j * P
        return U
    raise ValueError(f"unknown symmetry {name!r}; expected one of {SYMMETRIES}")


def symmetry_defect(Hv: np.ndarray, U: np.ndarray) -> float:
    """``||U conj(H) U^† - H||_2 / ||H||_2`` for a valleyful matrix."""
    D = U @ np.conj(Hv) @ U.conj().T - Hv
    return float(np.linalg.norm(D, 2) / max(np.linalg.norm(Hv, 2), 1e-300))


def energy_scales(tables: HoppingTables, geom: MoireGeometry) -> dict[str, float]:
    """Magnitudes (meV) of the terms of the relaxed model at the scale ``|s1|``."""
    dk = float(np.linalg.norm(geom.s1))

    def grad_mag(g):
        return float(np.max(np.linalg.norm(g, axis=0)))

    ii = tables.intra_index
    it = tables.inter_index
    a1, a7 = ii(tables.intra_hops[0]), ii(tables.intra_hops[6])
    t1, t4, t7 = it((0, 0)), it(tables.inter_hops[3]), it(tables.inter_hops[6])
    return {
        "dirac": tables.v * dk,
        "quad_AA": abs(tables.v1) * dk ** 2,
        "quad_AB": abs(tables.v2) * dk ** 2,
        "intra_shell1_AB": float(abs(tables.intra[0, a1, 0, 1])),
        "intra_shell1_grad": grad_mag(tables.intra_grad[0, a1]) * dk,
        "intra_shell2_AB": float(abs(tables.intra[0, a7, 0, 1])),
        "intra_shell2_grad": grad_mag(tables.intra_grad[0, a7]) * dk,
        "intra_AA": float(np.abs(tables.intra[:, :, 0, 0]).max()),
        "inter_shell1_AA": float(abs(tables.inter[t1, 0, 0])),
        "inter_shell1_AB": float(abs(tables.inter[t1, 0, 1])),
        "inter_shell1_grad": grad_mag(tables.inter_grad[t1]) * dk,
        "inter_shell2": float(np.abs(tables.inter[t4]).max()),
        "inter_shell2_grad": grad_mag(tables.inter_grad[t4]) * dk,
        "inter_shell3": float(np.abs(tables.inter[t7]).max()),
        "inter_shell3_grad": grad_mag(tables.inter_grad[t7]) * dk,
    }
