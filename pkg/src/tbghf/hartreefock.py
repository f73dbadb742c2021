"""Projected Hartree-Fock for translation-invariant states.

Conventions
-----------
The 1-RDM is ``P(k)_{mn} = <f†_{nk} f_{mk}>``.  With ``A = nk |Gamma_m|``,

    J[P](k) = (1/A) sum_G V(G) [sum_k' tr(rho_{k'k'}(-G) P(k'))] rho_{kk}(G)
    K[P](k) = (1/A) sum_{k',G} V(k' - k + G) rho_{kk'}(G) P(k') rho_{k'k}(-G)

and the energy is

    E = sum_k tr[(H0 - Hsub) P] + 1/2 sum_k tr[(J - K) P],

with the average subtraction ``Hsub = J[I/2] - K[I/2]``.  Reported energies
are per moiré site unless the name says otherwise.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .formfactors import FlatBandSet, FormFactorTensor, ScreenedPotential, v_hat

log = logging.getLogger(__name__)

ELECTRONS_PER_K = 2
COMMUTATOR_TOL = 1e-8
ENERGY_TOL = 1e-9  # meV per moiré site
MAX_ITER = 500
DIIS_HISTORY = 8
LINEAR_MIXING = 0.3
DEGENERACY_TOL = 1e-9  # meV


@dataclass(frozen=True)
class OneRdm:
    """Translation-invariant 1-RDM, one 4×4 block per k."""

    P: np.ndarray
    gauge: str = "sublattice"
    meta: dict = field(default_factory=dict)

    @property
    def nk(self) -> int:
        return self.P.shape[0]

    @property
    def electrons(self) -> float:
        return float(np.real(np.trace(self.P, axis1=1, axis2=2)).sum())

    def hermiticity_defect(self) -> float:
        return float(np.abs(self.P - np.conj(np.transpose(self.P, (0, 2, 1)))).max())

    def idempotency_defect(self) -> float:
        return float(np.linalg.norm(self.P @ self.P - self.P, axis=(1, 2)).max())

    def validate(self, per_k: int = ELECTRONS_PER_K, tol: float = 1e-10) -> None:
        """Raise ``ValueError`` unless ``P`` is Hermitian with trace ``per_k`` at every k."""
        if self.P.ndim != 3 or self.P.shape[1:] != (4, 4):
            raise ValueError(f"1-RDM must have shape (nk, 4, 4), got {self.P.shape}")
        if self.hermiticity_defect() > tol:
            raise ValueError(f"1-RDM is not Hermitian (defect {self.hermiticity_defect():.2e})")
        tr = np.real(np.trace(self.P, axis1=1, axis2=2))
        if np.abs(tr - per_k).max() > tol:
            raise ValueError(f"1-RDM trace per k must be {per_k}, got range [{tr.min()}, {tr.max()}]")

    def to_dict(self) -> dict:
        return {"format": "tbghf.one-rdm", "version": 1, "gauge": self.gauge,
                "basis": ["(K,A)", "(K,B)", "(K',A)", "(K',B)"] if self.gauge == "sublattice" else "raw",
                "P": np.stack([self.P.real, self.P.imag], axis=-1).tolist(), "meta": self.meta}

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)

    @classmethod
    def from_dict(cls, data: dict) -> "OneRdm":
        if data.get("format") != "tbghf.one-rdm":
            raise ValueError("not a tbghf 1-RDM document")
        arr = np.asarray(data["P"], dtype=float)
        return cls(P=arr[..., 0] + 1j * arr[..., 1], gauge=data.get("gauge", "sublattice"),
                   meta=data.get("meta", {}))

    @classmethod
    def load(cls, path) -> "OneRdm":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _dagger(X: np.ndarray) -> np.ndarray:
    return np.conj(np.swapaxes(X, -1, -2))


def h0_matrix(bands: FlatBandSet) -> np.ndarray:
    """Single-particle flat-band Hamiltonian per k in the current gauge."""
    return np.array(bands.h0, dtype=complex)


@dataclass
class InteractionKernel:
    """Potential values on the momentum transfers needed by ``J`` and ``K``."""

    ff: FormFactorTensor
    pot: ScreenedPotential
    cell_area: float

    def __post_init__(self):
        grid = self.ff.grid
        self.area = grid.nk * self.cell_area
        self.v_hartree = v_hat(self.pot, self.ff.gvecs)
        q = grid.points[None, :, None, :] - grid.points[:, None, None, :] + self.ff.gvecs[None, None]
        self.v_exchange = v_hat(self.pot, q)  # [k, k', g]
        self.rho_diag = np.ascontiguousarray(self.ff.rho[np.arange(grid.nk), np.arange(grid.nk)])

    def hartree(self, P: np.ndarray) -> np.ndarray:
        dens = np.einsum("kgmn,knm->g", self.rho_diag[:, self.ff.negation], P)
        return np.einsum("g,kgmn->kmn", self.v_hartree * dens, self.rho_diag) / self.area

    def exchange(self, P: np.ndarray) -> np.ndarray:
        rho = self.ff.rho
        left = np.einsum("abg,abgmn,bnp->abgmp", self.v_exchange, rho, P, optimize=True)
        back = rho[:, :, self.ff.negation].transpose(1, 0, 2, 3, 4)  # rho_{k'k}(-G) at [k, k', g]
        return np.einsum("abgmp,abgpq->amq", left, back, optimize=True) / self.area


def _kernel(ff: FormFactorTensor, pot: ScreenedPotential, cell_area: float | None) -> InteractionKernel:
    return InteractionKernel(ff, pot, cell_area if cell_area is not None else _cell_area(ff))


def _cell_area(ff: FormFactorTensor) -> float:
    b = ff.gvecs[ff.lookup[(1, 0)]], ff.gvecs[ff.lookup[(0, 1)]]
    return float((2 * np.pi) ** 2 / abs(np.linalg.det(np.array(b))))


def hartree(P, ff: FormFactorTensor, pot: ScreenedPotential, cell_area: float | None = None) -> np.ndarray:
    """Hartree (direct) operator ``J[P]`` per k, meV."""
    P = P.P if isinstance(P, OneRdm) else np.asarray(P)
    return _kernel(ff, pot, cell_area).hartree(P)


def fock_exchange(P, ff: FormFactorTensor, pot: ScreenedPotential, cell_area: float | None = None) -> np.ndarray:
    """Exchange operator ``K[P]`` per k, meV."""
    P = P.P if isinstance(P, OneRdm) else np.asarray(P)
    return _kernel(ff, pot, cell_area).exchange(P)


def subtraction(ff: FormFactorTensor, pot: ScreenedPotential, cell_area: float | None = None) -> np.ndarray:
    """Average subtraction ``J[I/2] - K[I/2]`` per k."""
    kern = _kernel(ff, pot, cell_area)
    half = np.broadcast_to(0.5 * np.eye(4), (ff.grid.nk, 4, 4)).astype(complex)
    return kern.hartree(half) - kern.exchange(half)


def hf_energy(P, H0: np.ndarray, Hsub: np.ndarray, J: np.ndarray, K: np.ndarray) -> float:
    """Total Hartree-Fock energy (meV, summed over the grid)."""
    P = P.P if isinstance(P, OneRdm) else np.asarray(P)
    one = np.einsum("kmn,knm->", H0 - Hsub, P)
    two = 0.5 * np.einsum("kmn,knm->", J - K, P)
    return float(np.real(one + two))


@dataclass(frozen=True)
class FockOperator:
    """Fock matrix per k with its components."""

    h0: np.ndarray
    hsub: np.ndarray
    J: np.ndarray
    K: np.ndarray

    @property
    def total(self) -> np.ndarray:
        return self.h0 - self.hsub + self.J - self.K


@dataclass
class InteractingModel:
    """Flat-band interacting problem: ``H0``, ``Hsub`` and the interaction kernel.

    ``hsub`` is computed from the inputs unless a cached value is passed.
    """

    bands: FlatBandSet
    ff: FormFactorTensor
    pot: ScreenedPotential
    hsub: np.ndarray | None = None

    def __post_init__(self):
        self.kernel = InteractionKernel(self.ff, self.pot, self.bands.basis.geom.cell_area)
        self.h0 = h0_matrix(self.bands)
        if self.hsub is None:
            half = np.broadcast_to(0.5 * np.eye(4), (self.nk, 4, 4)).astype(complex)
            self.hsub = self.kernel.hartree(half) - self.kernel.exchange(half)

    @property
    def nk(self) -> int:
        return self.ff.grid.nk

    def fock(self, P: np.ndarray) -> FockOperator:
        return FockOperator(self.h0, self.hsub, self.kernel.hartree(P), self.kernel.exchange(P))

    def energy(self, P: np.ndarray, F: FockOperator | None = None) -> float:
        F = F or self.fock(P)
        return hf_energy(P, self.h0, self.hsub, F.J, F.K)


def homo_lumo_gap(F: np.ndarray, P: np.ndarray, tol: float = 1e-6) -> float:
    """Lowest unoccupied minus highest occupied Fock eigenvalue over all k."""
    F = F.total if isinstance(F, FockOperator) else np.asarray(F)
    P = P.P if isinstance(P, OneRdm) else np.asarray(P)
    occ_max, unocc_min = -np.inf, np.inf
    for Fk, Pk in zip(F, P):
        w, V = np.linalg.eigh(Pk)
        occ, vir = V[:, w > 0.5], V[:, w <= 0.5]
        if occ.shape[1]:
            occ_max = max(occ_max, np.linalg.eigvalsh(_dagger(occ) @ Fk @ occ).max())
        if vir.shape[1]:
            unocc_min = min(unocc_min, np.linalg.eigvalsh(_dagger(vir) @ Fk @ vir).min())
    return float(unocc_min - occ_max)


def aufbau(F: np.ndarray, P_prev: np.ndarray | None = None, per_k: int = ELECTRONS_PER_K,
           tol: float = DEGENERACY_TOL) -> tuple[np.ndarray, bool]:
    """Occupy the lowest ``per_k`` Fock eigenvectors at every k.

    A degenerate Fermi level is resolved by occupying the combination with the
    largest overlap with ``P_prev``.  Returns ``(P, degenerate)``.
    """
    nk = F.shape[0]
    P = np.empty_like(F, dtype=complex)
    degenerate = False
    for k in range(nk):
        e, V = np.linalg.eigh(F[k])
        if e[per_k] - e[per_k - 1] < tol:
            degenerate = True
            band = (e >= e[per_k - 1] - tol) & (e <= e[per_k] + tol)
            below = int(np.sum(e < e[per_k - 1] - tol))
            need = per_k - below
            C = V[:, band]
            if P_prev is not None:
                w, R = np.linalg.eigh(_dagger(C) @ P_prev[k] @ C)
                C = C @ R[:, ::-1]
            occ = np.concatenate([V[:, :below], C[:, :need]], axis=1)
        else:
            occ = V[:, :per_k]
        P[k] = occ @ _dagger(occ)
    return P, degenerate


def commutator_norm(F: np.ndarray, P: np.ndarray) -> float:
    """``||[F, P]|| / ||F||`` over all k-blocks (Frobenius)."""
    C = F @ P - P @ F
    return float(np.linalg.norm(C) / max(np.linalg.norm(F), 1e-300))


@dataclass
class ScfReport:
    """Outcome of an SCF run (energies in meV)."""

    total_energy: float
    energy_per_site: float
    homo_lumo_gap: float
    iterations: int
    converged: bool
    commutator: float
    degenerate_fermi_level: bool = False
    rejected_steps: int = 0
    trace: list = field(default_factory=list)

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in ("total_energy", "energy_per_site", "homo_lumo_gap", "iterations",
                                           "converged", "commutator", "degenerate_fermi_level", "rejected_steps")}
        return d

    def write_trace(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["# schema tbghf.scf-trace v1"])
            w.writerow(["iteration", "energy_per_site", "commutator", "gap", "step"])
            for row in self.trace:
                w.writerow([row["iteration"], f"{row['energy_per_site']:.12g}", f"{row['commutator']:.6e}",
                            f"{row['gap']:.10g}", row["step"]])


class _Diis:
    """Pulay extrapolation of Fock matrices from commutator residuals."""

    def __init__(self, size: int):
        self.size = size
        self.F: list[np.ndarray] = []
        self.E: list[np.ndarray] = []

    def reset(self):
        self.F.clear()
        self.E.clear()

    def push(self, F: np.ndarray, err: np.ndarray):
        self.F.append(F)
        self.E.append(err)
        if len(self.F) > self.size:
            self.F.pop(0)
            self.E.pop(0)

    def extrapolate(self) -> np.ndarray:
        n = len(self.F)
        if n < 2:
            return self.F[-1]
        B = -np.ones((n + 1, n + 1))
        B[n, n] = 0.0
        for i in range(n):
            for j in range(n):
                B[i, j] = np.real(np.vdot(self.E[i], self.E[j]))
        rhs = np.zeros(n + 1)
        rhs[n] = -1.0
        scale = np.abs(np.diag(B)[:n]).max()
        B[:n, :n] /= max(scale, 1e-300)
        c = np.linalg.lstsq(B, rhs, rcond=None)[0][:n]
        return sum(ci * Fi for ci, Fi in zip(c, self.F))


def scf_solve(model: InteractingModel, init, max_iter: int = MAX_ITER, tol: float = COMMUTATOR_TOL,
              energy_tol: float = ENERGY_TOL, mixing: float = LINEAR_MIXING, diis: int = DIIS_HISTORY,
              ) -> tuple[OneRdm, ScfReport]:
    """Self-consistent field iteration from ``init``.

    Each step builds a trial Fock matrix (DIIS extrapolation when available),
    occupies its lowest two eigenvectors per k and accepts the new density if
    the energy does not increase.  A rejected trial is retried with linear
    mixing of the Fock matrix, halving the mixing weight a few times before
    the step is taken anyway and counted in ``rejected_steps``.
    """
    init = init if isinstance(init, OneRdm) else OneRdm(np.asarray(init, dtype=complex))
    init.validate()
    nk = model.nk
    P = np.array(init.P, dtype=complex)
    F = model.fock(P)
    E = model.energy(P, F)
    accel = _Diis(diis)
    trace, rejected, degenerate_any = [], 0, False
    converged, it, comm = False, 0, np.inf
    F_in = F.total
    for it in range(1, max_iter + 1):
        Ft = F.total
        err = Ft @ P - P @ Ft
        comm = commutator_norm(Ft, P)
        accel.push(Ft, err)
        trial = accel.extrapolate() if diis > 0 else Ft
        P_new, deg = aufbau(trial, P)
        F_new = model.fock(P_new)
        E_new = model.energy(P_new, F_new)
        step = "diis"
        if E_new > E + energy_tol * nk:
            accel.reset()
            accel.push(Ft, err)
            beta = mixing
            for _ in range(4):
                mixed = F_in + beta * (Ft - F_in)
                P_try, deg_try = aufbau(mixed, P)
                F_try = model.fock(P_try)
                E_try = model.energy(P_try, F_try)
                if E_try <= E + energy_tol * nk:
                    P_new, F_new, E_new, deg, trial = P_try, F_try, E_try, deg_try, mixed
                    step = f"linear({beta:g})"
                    break
                beta *= 0.5
            else:
                rejected += 1
                step = "forced"
        degenerate_any |= deg
        dE = abs(E_new - E)
        P, F, E, F_in = P_new, F_new, E_new, trial
        comm = commutator_norm(F.total, P)
        trace.append({"iteration": it, "energy_per_site": E / nk, "commutator": comm,
                      "gap": homo_lumo_gap(F.total, P), "step": step})
        if comm < tol and dE < energy_tol * nk:
            converged = True
            break
    gap = homo_lumo_gap(F.total, P)
    if not converged:
        log.warning("SCF not converged after %d iterations (commutator %.2e)", it, comm)
    report = ScfReport(total_energy=E, energy_per_site=E / nk, homo_lumo_gap=gap, iterations=it,
                       converged=converged, commutator=comm, degenerate_fermi_level=degenerate_any,
                       rejected_steps=rejected, trace=trace)
    return replace(init, P=P, meta={**init.meta, "converged": converged}), report
