"""Exact diagonalization of the projected interacting Hamiltonian on tiny grids.

Orbital ``p = 4*k + m`` is flat-band state ``m`` at grid point ``k``; an
occupation-number basis state is a bitstring with bit ``p`` set when ``p`` is
occupied, and stands for ``f†_{p1} f†_{p2} ... |0>`` with ``p1 < p2 < ...``.

The Hamiltonian is

    H = sum_pq h_pq f†_p f_q + 1/2 sum_pqrs W_pqrs f†_p f†_q f_r f_s,

with ``h = H0 - Hsub`` block-diagonal in k and, for ``p = (k, m)``,
``q = (k'', m')``, ``r = (k''', n')``, ``s = (k', n)``,

    W_pqrs = (1/A) sum_G V(k' - k + G) rho_{kk'}(G)_{mn} rho_{k''k'''}(n0 - G)_{m'n'},

where ``k + k'' - k' = k''' + Bm n0``.  Its Hartree-Fock mean field is
exactly the ``J`` and ``K`` of :mod:`tbghf.hartreefock`.

Sparse assembly runs in the compiled ``_edcore`` extension when it is
available and in vectorized numpy otherwise; ``TBGHF_ED_BACKEND`` set to
``numpy`` or ``cython`` overrides the choice made at import.
"""
from __future__ import annotations

import itertools
import logging
import os
from dataclasses import dataclass, field
from math import comb

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import ArpackNoConvergence, LinearOperator, eigsh

from .formfactors import FormFactorTensor, ScreenedPotential, v_hat
from .geometry import KGrid
from .hartreefock import ELECTRONS_PER_K, InteractingModel, OneRdm, _cell_area

log = logging.getLogger(__name__)

MAX_NK = 4
DENSE_LIMIT = 2500
DEGENERACY_TOL = 1e-8  # meV
RESIDUAL_TOL = 1e-9
COEF_CUTOFF = 1e-14

try:
    from ._edcore import assemble_coo as _assemble_coo_compiled
except ImportError:  # pragma: no cover - depends on the build
    _assemble_coo_compiled = None


def _select_backend() -> str:
    choice = os.environ.get("TBGHF_ED_BACKEND", "auto").lower()
    if choice not in ("auto", "cython", "numpy"):
        raise ValueError(f"TBGHF_ED_BACKEND must be auto, cython or numpy, got {choice!r}")
    if choice == "cython" and _assemble_coo_compiled is None:
        raise ImportError("TBGHF_ED_BACKEND=cython but the compiled extension tbghf._edcore is not built")
    if choice == "auto":
        return "cython" if _assemble_coo_compiled is not None else "numpy"
    return choice


BACKEND = _select_backend()


class DimensionError(ValueError):
    """The requested Fock space exceeds the ED guard."""


class VariationalError(RuntimeError):
    """ED energy above the Hartree-Fock energy (HF is variational)."""


class EDSolverError(RuntimeError):
    """The sparse eigensolver failed to reach the requested residual."""


# --------------------------------------------------------------------------
# operator assembly
# --------------------------------------------------------------------------

if hasattr(np, "bitwise_count"):
    def _popcount(x: np.ndarray) -> np.ndarray:
        return np.bitwise_count(x).astype(np.int64)
else:  # pragma: no cover - numpy < 2
    _BYTE_COUNTS = np.array([bin(i).count("1") for i in range(256)], dtype=np.int64)

    def _popcount(x: np.ndarray) -> np.ndarray:
        return _BYTE_COUNTS[x.view(np.uint8).reshape(-1, 8)].sum(axis=1)


def assemble_coo_numpy(states: np.ndarray, ops: np.ndarray, coef: np.ndarray):
    """Pure-numpy twin of the compiled ``assemble_coo``.

    ``ops[t] = (o0, o1, o2, o3)`` encodes ``c†_{o0} c†_{o1} c_{o2} c_{o3}``;
    negative entries skip a slot.  Returns ``(rows, cols, vals)`` with
    ``H[rows, cols] += vals`` on the sorted basis ``states``.
    """
    states = np.ascontiguousarray(states, dtype=np.uint64)
    n = len(states)
    cols_all = np.arange(n, dtype=np.int64)
    out_r, out_c, out_v = [], [], []
    one = np.uint64(1)
    for t in range(len(ops)):
        y = states.copy()
        ok = np.ones(n, dtype=bool)
        parity = np.zeros(n, dtype=np.int64)
        for slot in (3, 2, 1, 0):
            orb = int(ops[t, slot])
            if orb < 0:
                continue
            bit = one << np.uint64(orb)
            occupied = (y & bit) != 0
            ok &= occupied if slot >= 2 else ~occupied
            parity += _popcount(y & (bit - one))
            y ^= bit
        j = np.searchsorted(states, y)
        j = np.minimum(j, n - 1)
        ok &= states[j] == y
        if not ok.any():
            continue
        out_r.append(j[ok])
        out_c.append(cols_all[ok])
        out_v.append(np.where(parity[ok] & 1, -coef[t], coef[t]))
    if not out_r:
        return np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0, complex)
    return np.concatenate(out_r), np.concatenate(out_c), np.concatenate(out_v).astype(complex)


def assemble_coo(states, ops, coef, backend: str | None = None):
    """Dispatch COO assembly to the selected backend."""
    backend = backend or BACKEND
    states = np.ascontiguousarray(states, dtype=np.uint64)
    ops = np.ascontiguousarray(ops, dtype=np.int64)
    coef = np.ascontiguousarray(coef, dtype=complex)
    if backend == "cython":
        if _assemble_coo_compiled is None:
            raise ImportError("compiled extension tbghf._edcore is not available")
        return _assemble_coo_compiled(states, ops, coef)
    if backend == "numpy":
        return assemble_coo_numpy(states, ops, coef)
    raise ValueError(f"unknown ED backend {backend!r}")


# --------------------------------------------------------------------------
# problem definition
# --------------------------------------------------------------------------

def eri_tensor(ff: FormFactorTensor, pot: ScreenedPotential, cell_area: float | None = None) -> np.ndarray:
    """Two-body coefficients ``W[p, q, r, s]`` of the projected interaction (meV)."""
    grid = ff.grid
    nk = grid.nk
    area = nk * (cell_area if cell_area is not None else _cell_area(ff))
    M = 4 * nk
    W = np.zeros((M, M, M, M), dtype=complex)
    gint = ff.gint
    for k, kp, kpp in itertools.product(range(nk), repeat=3):
        t, n1 = grid.add(k, kpp)
        kppp, n2 = grid.subtract(t, kp)
        n0 = n1 + n2
        other = np.array([ff.index(n0 - g) for g in gint])
        keep = other >= 0
        if not keep.any():
            continue
        q = grid.points[kp] - grid.points[k] + ff.gvecs[keep]
        V = v_hat(pot, q)
        block = np.einsum("g,gmn,gab->mnab", V, ff.rho[k, kp, keep], ff.rho[kpp, kppp, other[keep]]) / area
        W[4 * k:4 * k + 4, 4 * kpp:4 * kpp + 4, 4 * kppp:4 * kppp + 4, 4 * kp:4 * kp + 4] = \
            block.transpose(0, 2, 3, 1)
    return W


@dataclass
class FockSpaceProblem:
    """Second-quantized projected Hamiltonian on ``4*nk`` orbitals with ``2*nk`` electrons."""

    grid: KGrid
    h1: np.ndarray
    eri: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def nk(self) -> int:
        return self.grid.nk

    @property
    def norb(self) -> int:
        return 4 * self.nk

    @property
    def nelec(self) -> int:
        return ELECTRONS_PER_K * self.nk

    def dimension(self, sector=None) -> int:
        return len(self.basis(sector)) if sector is not None else comb(self.norb, self.nelec)

    def eri_hermiticity_defect(self) -> float:
        """``max |W_pqrs - conj(W_srqp)|``."""
        return float(np.abs(self.eri - np.conj(self.eri.transpose(3, 2, 1, 0))).max())

    def orbital_momenta(self) -> np.ndarray:
        return np.repeat(self.grid._int_coords, 4, axis=0)

    def reference_sector(self) -> tuple[int, int]:
        """Total momentum of translation-invariant states with two electrons per k."""
        tot = ELECTRONS_PER_K * self.grid._int_coords.sum(axis=0)
        return int(tot[0] % self.grid.nkx), int(tot[1] % self.grid.nky)

    def basis(self, sector=None) -> np.ndarray:
        """Sorted bitstrings of the ``nelec`` sector, optionally at fixed total momentum.

        ``sector`` is ``None`` (all momenta), ``"auto"`` (see
        :meth:`reference_sector`) or an integer pair of grid coordinates.
        """
        if sector == "auto":
            sector = self.reference_sector()
        occ = np.array(list(itertools.combinations(range(self.norb), self.nelec)), dtype=np.int64)
        if sector is not None:
            mom = self.orbital_momenta()[occ].sum(axis=1)
            keep = (mom[:, 0] % self.grid.nkx == sector[0]) & (mom[:, 1] % self.grid.nky == sector[1])
            occ = occ[keep]
        states = (np.uint64(1) << occ.astype(np.uint64)).sum(axis=1, dtype=np.uint64)
        return np.sort(states)

    def operator_terms(self, cutoff: float = COEF_CUTOFF) -> tuple[np.ndarray, np.ndarray]:
        """Canonically ordered operator rows and coefficients for :func:`assemble_coo`.

        One-body terms ``(p, -1, q, -1)``; two-body terms ``(p, q, r, s)`` with
        ``p < q``, ``r < s`` and the antisymmetrized coefficient.
        """
        M = self.norb
        p, q = np.nonzero(np.abs(self.h1) > cutoff)
        ops1 = np.stack([p, -np.ones_like(p), q, -np.ones_like(q)], axis=1)
        c1 = self.h1[p, q]
        W = self.eri
        A = 0.5 * (W - W.transpose(1, 0, 2, 3) - W.transpose(0, 1, 3, 2) + W.transpose(1, 0, 3, 2))
        iu = np.triu_indices(M, 1)
        sub = A[iu[0], iu[1]][:, iu[0], iu[1]]  # [pair(p<q), pair(r<s)]
        a, b = np.nonzero(np.abs(sub) > cutoff)
        ops2 = np.stack([iu[0][a], iu[1][a], iu[0][b], iu[1][b]], axis=1)
        c2 = sub[a, b]
        return np.concatenate([ops1, ops2]).astype(np.int64), np.concatenate([c1, c2]).astype(complex)

    def sparse_hamiltonian(self, sector=None, backend: str | None = None) -> tuple[sp.csr_matrix, np.ndarray]:
        """CSR Hamiltonian on :meth:`basis` and the basis itself."""
        states = self.basis(sector)
        ops, coef = self.operator_terms()
        rows, cols, vals = assemble_coo(states, ops, coef, backend)
        H = sp.coo_matrix((vals, (rows, cols)), shape=(len(states), len(states))).tocsr()
        H.sum_duplicates()
        return H, states


def build_problem(ff: FormFactorTensor, pot: ScreenedPotential, h0: np.ndarray, hsub: np.ndarray,
                  grid: KGrid | None = None, cell_area: float | None = None) -> FockSpaceProblem:
    """Fock-space problem of ``H0 - Hsub`` plus the projected interaction.

    Raises
    ------
    DimensionError
        If ``nk > 4``; the message states the Fock-space dimension.
    """
    grid = grid or ff.grid
    nk = grid.nk
    if nk > MAX_NK:
        dim = comb(4 * nk, ELECTRONS_PER_K * nk)
        raise DimensionError(f"ED is limited to nk <= {MAX_NK}; a {grid.nkx}x{grid.nky} grid has "
                             f"{4 * nk} orbitals and a Fock-space dimension of {dim:,}")
    h = np.asarray(h0, dtype=complex) - np.asarray(hsub, dtype=complex)
    if h.shape != (nk, 4, 4):
        raise ValueError(f"one-body blocks must have shape {(nk, 4, 4)}, got {h.shape}")
    M = 4 * nk
    h1 = np.zeros((M, M), dtype=complex)
    for k in range(nk):
        h1[4 * k:4 * k + 4, 4 * k:4 * k + 4] = h[k]
    eri = eri_tensor(ff, pot, cell_area)
    return FockSpaceProblem(grid=grid, h1=h1, eri=eri, meta={"potential": pot.describe(), "gauge": ff.gauge})


def problem_from_model(model: InteractingModel) -> FockSpaceProblem:
    """:func:`build_problem` on the inputs of an :class:`InteractingModel`."""
    return build_problem(model.ff, model.pot, model.h0, model.hsub, cell_area=model.bands.basis.geom.cell_area)


# --------------------------------------------------------------------------
# mean-field oracle
# --------------------------------------------------------------------------

def _full_density(P: np.ndarray) -> np.ndarray:
    """``D[a, b] = <f†_a f_b>`` on the orbital index from per-k blocks ``P``."""
    nk = P.shape[0]
    D = np.zeros((4 * nk, 4 * nk), dtype=complex)
    for k in range(nk):
        D[4 * k:4 * k + 4, 4 * k:4 * k + 4] = P[k].T
    return D


def brute_force_jk(problem: FockSpaceProblem, P) -> tuple[np.ndarray, np.ndarray]:
    """Direct and exchange mean fields from the full two-body tensor.

    ``J_ab = sum_qr W_aqrb <f†_q f_r>`` and ``K_ab = sum_qs W_aqbs <f†_q f_s>``,
    returned as per-k 4×4 blocks comparable with the HF operators.
    """
    P = P.P if isinstance(P, OneRdm) else np.asarray(P)
    D = _full_density(P)
    Jf = np.einsum("aqrb,qr->ab", problem.eri, D)
    Kf = np.einsum("aqbs,qs->ab", problem.eri, D)
    nk = problem.nk
    J = np.array([Jf[4 * k:4 * k + 4, 4 * k:4 * k + 4] for k in range(nk)])
    K = np.array([Kf[4 * k:4 * k + 4, 4 * k:4 * k + 4] for k in range(nk)])
    return J, K


def mean_field_leakage(problem: FockSpaceProblem, P) -> float:
    """Largest off-k-diagonal mean-field entry; zero for translation-invariant ``P``."""
    P = P.P if isinstance(P, OneRdm) else np.asarray(P)
    D = _full_density(P)
    F = np.einsum("aqrb,qr->ab", problem.eri, D) - np.einsum("aqbs,qs->ab", problem.eri, D)
    mask = np.kron(np.eye(problem.nk), np.ones((4, 4))) == 0
    return float(np.abs(F[mask]).max()) if mask.any() else 0.0


# --------------------------------------------------------------------------
# Slater determinants
# --------------------------------------------------------------------------

def occupied_orbitals(P, per_k: int = ELECTRONS_PER_K) -> np.ndarray:
    """Orbital coefficients ``Xi`` (norb × nelec) of an idempotent translation-invariant 1-RDM."""
    P = P.P if isinstance(P, OneRdm) else np.asarray(P)
    nk = P.shape[0]
    Xi = np.zeros((4 * nk, per_k * nk), dtype=complex)
    for k in range(nk):
        w, V = np.linalg.eigh(P[k])
        occ = w > 0.5
        if occ.sum() != per_k or np.abs(w[occ] - 1).max() > 1e-8 or np.abs(w[~occ]).max() > 1e-8:
            raise ValueError(f"1-RDM block at k={k} is not a rank-{per_k} projector (eigenvalues {np.round(w, 6)})")
        Xi[4 * k:4 * k + 4, per_k * k:per_k * (k + 1)] = V[:, occ]
    return Xi


def _occupations(states: np.ndarray, norb: int) -> np.ndarray:
    bits = (states[:, None] >> np.arange(norb, dtype=np.uint64)[None, :]) & np.uint64(1)
    nel = int(bits[0].sum())
    return np.nonzero(bits.astype(bool))[1].reshape(len(states), nel)


def slater_amplitudes(P, states: np.ndarray, norb: int) -> np.ndarray:
    """Coefficients ``det(Xi[occ, :])`` of the Slater determinant of ``P`` on ``states``."""
    Xi = occupied_orbitals(P)
    occ = _occupations(np.asarray(states, dtype=np.uint64), norb)
    return np.linalg.det(Xi[occ])


def slater_expectation(problem: FockSpaceProblem, P, sector="auto", backend: str | None = None) -> float:
    """``<Phi|H|Phi>`` of the Slater determinant of ``P`` (meV, total)."""
    H, states = problem.sparse_hamiltonian(sector, backend)
    a = slater_amplitudes(P, states, problem.norb)
    norm = np.vdot(a, a).real
    if norm < 1 - 1e-8:
        raise ValueError(f"Slater determinant has weight {norm:.3e} outside the basis sector {sector!r}")
    return float(np.vdot(a, H @ a).real / norm)


# --------------------------------------------------------------------------
# ground states
# --------------------------------------------------------------------------

@dataclass
class EDResult:
    """Lowest eigenpairs of a Fock-space problem (energies in meV, total)."""

    energies: np.ndarray
    vectors: np.ndarray
    states: np.ndarray
    residuals: np.ndarray
    nk: int
    tol: float = DEGENERACY_TOL
    meta: dict = field(default_factory=dict)

    @property
    def ground_energy(self) -> float:
        return float(self.energies[0])

    @property
    def energy_per_site(self) -> float:
        return self.ground_energy / self.nk

    @property
    def degeneracy(self) -> int:
        """Number of computed levels within ``tol`` of the minimum (a lower bound if all roots qualify)."""
        return int(np.sum(self.energies - self.energies[0] <= self.tol))

    @property
    def ground_space(self) -> np.ndarray:
        return self.vectors[:, :self.degeneracy]

    def ground_space_weight(self, amplitudes: np.ndarray) -> float:
        """Norm squared of the projection of a normalized vector onto the ground space."""
        a = amplitudes / np.linalg.norm(amplitudes)
        return float(np.sum(np.abs(np.conj(self.ground_space).T @ a) ** 2))

    def psd_shift(self) -> float:
        """Constant that makes the Hamiltonian positive semidefinite (``-E_min``)."""
        return -self.ground_energy


def _recover_missed_roots(H, e, v, tol, max_passes=8):
    """Deflate the found roots and look for lower states Lanczos skipped.

    A single Krylov sequence can miss copies of a degenerate level; the found
    vectors are shifted up by more than the spread of ``e`` and the lowest
    remaining state is added whenever it lies below ``e[-1]``.
    """
    nroots = len(e)
    for _ in range(max_passes):
        sigma = e[-1] - e[0] + 10.0 * max(1.0, np.abs(e).max())
        op = LinearOperator(H.shape, dtype=complex,
                            matvec=lambda x, v=v: H @ x + sigma * (v @ (np.conj(v).T @ x)))
        e_new, v_new = eigsh(op, k=1, which="SA", tol=1e-12, ncv=min(H.shape[0], 40))
        if e_new[0] >= e[-1] - tol:
            break
        x = v_new[:, 0] - v @ (np.conj(v).T @ v_new[:, 0])
        x /= np.linalg.norm(x)
        V = np.column_stack([v, x])
        # Rayleigh-Ritz on the enlarged space keeps the pairs exact
        w, c = np.linalg.eigh(np.conj(V).T @ (H @ V))
        e, v = w[:nroots], (V @ c)[:, :nroots]
    return e, v


def ground_state(problem: FockSpaceProblem, nroots: int = 8, sector="auto", backend: str | None = None,
                 tol: float = DEGENERACY_TOL) -> EDResult:
    """Lowest ``nroots`` eigenpairs, ascending.

    Dense diagonalization below ``DENSE_LIMIT`` basis states, ARPACK above.
    Raises :class:`EDSolverError` when a residual exceeds ``1e-9`` relative.
    """
    H, states = problem.sparse_hamiltonian(sector, backend)
    dim = H.shape[0]
    nroots = min(nroots, dim)
    info = {"dimension": dim, "sector": sector, "backend": backend or BACKEND}
    if dim <= DENSE_LIMIT or nroots >= dim - 1:
        e, v = np.linalg.eigh(H.toarray())
        e, v = e[:nroots], v[:, :nroots]
        info["solver"] = "dense"
    else:
        ncv = min(dim, max(4 * nroots, 40))
        try:
            e, v = eigsh(H, k=nroots, which="SA", tol=1e-12, ncv=ncv)
        except ArpackNoConvergence:
            try:
                e, v = eigsh(H, k=nroots, which="SA", tol=1e-12, ncv=min(dim, 3 * ncv), maxiter=20 * dim)
            except ArpackNoConvergence as exc:
                raise EDSolverError(f"ARPACK did not converge for dimension {dim} with ncv up to "
                                    f"{min(dim, 3 * ncv)}; {len(exc.eigenvalues)} of {nroots} roots found") from exc
        order = np.argsort(e)
        e, v = _recover_missed_roots(H, e[order], v[:, order], tol)
        info["solver"] = "arpack"
    res = np.linalg.norm(H @ v - v * e[None, :], axis=0) / max(np.abs(e).max(), 1.0)
    if res.max() > RESIDUAL_TOL:
        raise EDSolverError(f"eigenpair residual {res.max():.2e} exceeds {RESIDUAL_TOL:.0e} "
                            f"(dimension {dim}, solver {info['solver']})")
    return EDResult(energies=e, vectors=v, states=states, residuals=res, nk=problem.nk, tol=tol, meta=info)


def correlation_energy(result, hf_energy_per_site: float, tol: float = 1e-9) -> float:
    """``E_ED - E_HF`` per moiré site; ``result`` is an :class:`EDResult` or a problem.

    Raises
    ------
    VariationalError
        If the value is positive beyond ``tol`` meV.
    """
    if isinstance(result, FockSpaceProblem):
        result = ground_state(result)
    e = result.energy_per_site - hf_energy_per_site
    if e > tol:
        raise VariationalError(f"ED energy lies {e:.3e} meV/site above the HF energy; "
                               "inputs differ or the HF state is inconsistent with the problem")
    return float(e)
