"""Mechanical relaxation and relaxed hopping tables.

The relaxation model couples linear elasticity of each layer to a stacking
energy (GSFE) that depends on the local disregistry.  Layers relax with
opposite displacements ``U_1 = U`` and ``U_2 = -U``, represented by a finite
set of moiré Fourier modes.  The relaxed displacement then enters the
registry-dependent intralayer and interlayer hopping functions whose Bloch
and Fourier transforms populate :class:`HoppingTables`.

Units: lengths in Å.  Elastic and GSFE parameters are energy densities in
eV/Å².  Hopping tables are stored in meV (and meV·Å for gradients).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .geometry import MoireGeometry, MonolayerLattice, _group_shells, hop_shells, rotation

OMEGA = np.exp(2j * np.pi / 3)
C3_UNITARY = np.diag([1.0, OMEGA])
MIRROR = np.diag([-1.0, 1.0])
TABLE_FORMAT = "tbghf.hopping-tables"
BUNDLED_TABLES = "relaxed_tables_1p05.json"


class RelaxationError(RuntimeError):
    """Minimizer failed to reach the requested gradient tolerance."""

    def __init__(self, message: str, grad_norm: float, field: "DisplacementField | None" = None):
        super().__init__(f"{message} (last gradient norm {grad_norm:.3e})")
        self.grad_norm = grad_norm
        self.field = field


class TableFormatError(ValueError):
    """A hopping-table file does not follow the expected schema."""


# --------------------------------------------------------------------------
# stacking energy and elasticity
# --------------------------------------------------------------------------

def reciprocal_stars(B: np.ndarray, nstars: int, search: int = 4) -> list[np.ndarray]:
    """Nonzero reciprocal vectors ``B @ n`` grouped into the first ``nstars`` shells."""
    rng = np.arange(-search, search + 1)
    ints = np.array([[i, j] for i in rng for j in rng if (i, j) != (0, 0)])
    vecs = ints @ B.T
    shells = _group_shells(np.linalg.norm(vecs, axis=1))
    return [vecs[s] for s in shells[:nstars]]


@dataclass(frozen=True)
class GsfeCoefficients:
    """Fourier coefficients of the stacking energy.

    ``Phi(b) = c[0] + sum_s c[s] * sum_{g in star s} cos(g . b)`` where each
    star holds all six reciprocal vectors of one shell.  Values are energy
    densities in eV/Å².
    """

    c: tuple[float, ...]

    def __post_init__(self):
        c = tuple(float(x) for x in self.c)
        if len(c) < 2:
            raise ValueError("GSFE needs a constant and at least one star coefficient")
        if not np.all(np.isfinite(c)):
            raise ValueError("GSFE coefficients must be finite")
        object.__setattr__(self, "c", c)
        mono = MonolayerLattice.graphene(1.0)
        aa = gsfe_eval(self, np.zeros(2), mono)
        ab = gsfe_eval(self, mono.tauB - mono.tauA, mono)
        if aa < ab:
            raise ValueError("GSFE coefficients must make AA stacking costlier than AB")

    @classmethod
    def default(cls) -> "GsfeCoefficients":
        # first-star values for bilayer graphene expressed per Å^2
        cell = MonolayerLattice.graphene().cell_area
        return cls((6.832e-3 / cell, 2.032e-3 / cell))

    def scaled(self, factor: float) -> "GsfeCoefficients":
        """Scale the registry-dependent part, keeping the constant."""
        return GsfeCoefficients((self.c[0],) + tuple(factor * x for x in self.c[1:]))

    @property
    def nstars(self) -> int:
        return len(self.c) - 1


def _gsfe_parts(coeffs: GsfeCoefficients, b: np.ndarray, B: np.ndarray):
    b = np.asarray(b, dtype=float)
    val = np.full(b.shape[:-1], coeffs.c[0])
    grad = np.zeros(b.shape)
    for cs, star in zip(coeffs.c[1:], reciprocal_stars(B, coeffs.nstars)):
        ph = b @ star.T
        val = val + cs * np.cos(ph).sum(axis=-1)
        grad = grad - cs * np.sin(ph) @ star
    return val, grad


def gsfe_eval(coeffs: GsfeCoefficients, disregistry, lattice: MonolayerLattice | None = None,
              reciprocal: np.ndarray | None = None):
    """Stacking energy density (eV/Å²) at ``disregistry`` (shape ``(..., 2)``).

    The energy is periodic in the monolayer lattice; ``reciprocal`` overrides
    the lattice to use a rotated layer.
    """
    B = reciprocal if reciprocal is not None else (lattice or MonolayerLattice.graphene()).reciprocal
    return _gsfe_parts(coeffs, disregistry, B)[0]


def gsfe_gradient(coeffs: GsfeCoefficients, disregistry, reciprocal: np.ndarray) -> np.ndarray:
    return _gsfe_parts(coeffs, disregistry, reciprocal)[1]


@dataclass(frozen=True)
class ElasticParams:
    """Lamé parameters of a single graphene sheet (eV/Å²)."""

    lam: float = 3.25
    mu: float = 9.57

    def __post_init__(self):
        if not (self.lam > 0 and self.mu > 0):
            raise ValueError(f"Lamé parameters must be positive, got lambda={self.lam}, mu={self.mu}")


# --------------------------------------------------------------------------
# displacement field
# --------------------------------------------------------------------------

def moire_shells(geom: MoireGeometry, nshells: int, search: int | None = None) -> np.ndarray:
    """Integer coordinates of the nonzero moiré reciprocal vectors in the first ``nshells`` shells."""
    search = search or nshells + 2
    rng = np.arange(-search, search + 1)
    ints = np.array([[i, j] for i in rng for j in rng if (i, j) != (0, 0)])
    shells = _group_shells(np.linalg.norm(ints @ geom.Bm.T, axis=1))
    return np.vstack([ints[s] for s in shells[:nshells]])


@dataclass(frozen=True)
class DisplacementField:
    """Moiré-periodic displacement of layer 1; layer 2 carries the negative.

    ``gint`` lists integer coordinates of the retained moiré reciprocal
    vectors (closed under negation, no zero mode) and ``amp`` the complex
    amplitudes in Å, one 2-vector per row.
    """

    geom: MoireGeometry
    gint: np.ndarray
    amp: np.ndarray

    def __post_init__(self):
        gint = np.asarray(self.gint, dtype=int).reshape(-1, 2)
        amp = np.asarray(self.amp, dtype=complex).reshape(-1, 2)
        if len(gint) != len(amp):
            raise ValueError("gint and amp must have the same length")
        if np.any(np.all(gint == 0, axis=1)):
            raise ValueError("displacement field may not contain the zero mode")
        lookup = {tuple(n): i for i, n in enumerate(gint)}
        for i, n in enumerate(gint):
            j = lookup.get((-n[0], -n[1]))
            if j is None:
                raise ValueError(f"mode {tuple(n)} present without its negative")
            # enforce reality exactly
            if j > i:
                amp[j] = np.conj(amp[i])
        object.__setattr__(self, "gint", gint)
        object.__setattr__(self, "amp", amp)

    @classmethod
    def zero(cls, geom: MoireGeometry, nshells: int = 1) -> "DisplacementField":
        gint = moire_shells(geom, nshells)
        return cls(geom, gint, np.zeros((len(gint), 2), dtype=complex))

    @property
    def gvecs(self) -> np.ndarray:
        return self.gint @ self.geom.Bm.T

    def amplitude(self, n) -> np.ndarray:
        """Amplitude at integer mode ``n`` (zero if not retained)."""
        hit = np.all(self.gint == np.asarray(n, dtype=int), axis=1)
        return self.amp[hit][0].copy() if hit.any() else np.zeros(2, dtype=complex)

    def __call__(self, x, layer: int = 1) -> np.ndarray:
        """Real displacement of ``layer`` at moiré positions ``x`` (shape ``(..., 2)``)."""
        x = np.asarray(x, dtype=float)
        ph = np.exp(1j * (x @ self.gvecs.T))
        u = np.real(ph @ self.amp)
        return u if layer == 1 else -u

    def in_disregistry(self, layer: int):
        """Displacement of ``layer`` as a function of that layer's disregistry.

        Layer 1 is parameterized by its stacking relative to layer 2 through
        ``gamma_2`` and layer 2 by ``gamma_1``; the returned callable is
        periodic in the lattice of the opposite layer.
        """
        gam = self.geom.disregistry_map(2 if layer == 1 else 1)
        freq = self.gvecs @ np.linalg.inv(gam)
        sign = 1.0 if layer == 1 else -1.0
        amp = self.amp

        def u(b):
            return sign * np.real(np.exp(1j * (np.asarray(b) @ freq.T)) @ amp)

        return u

    def max_norm(self) -> float:
        return float(np.sum(np.linalg.norm(self.amp, axis=1)))


# --------------------------------------------------------------------------
# energy functional and minimizer
# --------------------------------------------------------------------------

class RelaxationFunctional:
    """Energy density of the relaxation problem on a retained set of modes.

    The parameter vector holds real and imaginary parts of ``U_G`` for one
    representative of each ``±G`` pair.  ``energy`` returns the energy per
    unit moiré area (eV/Å²), so the total energy per cell is ``energy *
    geom.cell_area``.
    """

    def __init__(self, geom: MoireGeometry, coeffs: GsfeCoefficients, elastic: ElasticParams,
                 nshells: int, npts: int | None = None):
        self.geom, self.coeffs, self.elastic = geom, coeffs, elastic
        gint = moire_shells(geom, nshells)
        half = (gint[:, 0] > 0) | ((gint[:, 0] == 0) & (gint[:, 1] > 0))
        self.gint = gint[half]
        self.G = self.gint @ geom.Bm.T
        nmax = int(np.max(np.abs(self.gint)))
        self.npts = npts or max(24, 8 * nmax)
        s = (np.arange(self.npts) + 0.5) / self.npts
        frac = np.stack(np.meshgrid(s, s, indexing="ij"), axis=-1).reshape(-1, 2)
        self.x = frac @ geom.Am.T
        self.E = np.exp(1j * (self.G @ self.x.T))
        self.base2 = self.x @ geom.disregistry_map(2).T
        self.base1 = self.x @ geom.disregistry_map(1).T
        self.B2 = geom.layer_reciprocal(2)
        self.B1 = geom.layer_reciprocal(1)
        lam, mu = elastic.lam, elastic.mu
        G2 = np.sum(self.G ** 2, axis=1)
        gs = sum(abs(c) * np.sum(st[0] ** 2) for c, st in
                 zip(coeffs.c[1:], reciprocal_stars(self.B2, coeffs.nstars)))
        prec = 4.0 * (lam + mu) * self.G ** 2 + 4.0 * mu * G2[:, None] + 24.0 * gs
        self.precond = np.concatenate([prec.ravel(), prec.ravel()])

    @property
    def size(self) -> int:
        return 4 * len(self.G)

    def unpack(self, p: np.ndarray) -> np.ndarray:
        n = 2 * len(self.G)
        return (p[:n] + 1j * p[n:]).reshape(-1, 2)

    def pack(self, U: np.ndarray) -> np.ndarray:
        return np.concatenate([U.real.ravel(), U.imag.ravel()])

    def field(self, p: np.ndarray) -> DisplacementField:
        U = self.unpack(p)
        gint = np.vstack([self.gint, -self.gint])
        return DisplacementField(self.geom, gint, np.vstack([U, np.conj(U)]))

    def energy_and_gradient(self, p: np.ndarray) -> tuple[float, np.ndarray]:
        lam, mu = self.elastic.lam, self.elastic.mu
        U = self.unpack(p)
        disp = 2.0 * np.real(self.E.T @ U)
        v2, g2 = _gsfe_parts(self.coeffs, self.base2 + 2.0 * disp, self.B2)
        v1, g1 = _gsfe_parts(self.coeffs, self.base1 - 2.0 * disp, self.B1)
        inter = 0.5 * np.mean(v1 + v2)
        F = np.conj(self.E) @ (g2 - g1) / self.x.shape[0]
        GU = np.sum(self.G * U, axis=1)
        G2 = np.sum(self.G ** 2, axis=1)
        intra = np.sum(2.0 * (lam + mu) * np.abs(GU) ** 2 + 2.0 * mu * G2 * np.sum(np.abs(U) ** 2, axis=1))
        gc = 2.0 * F + 4.0 * (lam + mu) * GU[:, None] * self.G + 4.0 * mu * G2[:, None] * U
        return float(inter + intra), self.pack(gc)

    def energy(self, p: np.ndarray) -> float:
        return self.energy_and_gradient(p)[0]


@dataclass
class RelaxationInfo:
    """Minimizer diagnostics: energy density per accepted iterate and final gradient norm."""

    energies: list[float] = field(default_factory=list)
    grad_norm: float = np.inf
    iterations: int = 0
    converged: bool = False


def _nlcg(fun, p0, precond, tol, max_iter, info: RelaxationInfo):
    """Preconditioned Polak-Ribière+ conjugate gradient with Armijo safeguard."""
    p = p0.copy()
    f, g = fun(p)
    info.energies.append(f)
    z = g / precond
    d = -z
    alpha = 1.0
    for it in range(max_iter):
        gn = float(np.linalg.norm(g))
        info.grad_norm = gn
        if gn < tol:
            info.converged = True
            break
        slope = float(g @ d)
        if slope >= 0:
            d, slope = -z, -float(g @ z)
        # secant estimate of the line minimum from directional derivatives
        f1, g1 = fun(p + alpha * d)
        s1 = float(g1 @ d)
        step = alpha * slope / (slope - s1) if s1 > slope else 2.0 * alpha
        step = min(max(step, 1e-3 * alpha), 10.0 * alpha)
        fs, gs = fun(p + step * d)
        if f1 < fs:
            step, fs, gs = alpha, f1, g1
        while fs > f + 1e-4 * step * slope and step > 1e-14:
            step *= 0.5
            fs, gs = fun(p + step * d)
        if fs > f:
            break
        p = p + step * d
        alpha = step
        zs = gs / precond
        beta = max(0.0, float(gs @ (zs - z)) / float(g @ z))
        f, g, z = fs, gs, zs
        d = -z + beta * d
        info.energies.append(f)
        info.iterations = it + 1
    info.grad_norm = float(np.linalg.norm(g))
    info.converged = info.grad_norm < tol
    return p


def relax_minimize(geom: MoireGeometry, coeffs: GsfeCoefficients | None = None,
                   elastic: ElasticParams | None = None, nG: int = 8, tol: float = 1e-10,
                   max_iter: int = 2000, npts: int | None = None, return_info: bool = False):
    """Minimize elastic plus stacking energy over moiré-periodic fields ``U, -U``.

    Parameters
    ----------
    nG : int
        Number of moiré reciprocal shells retained.
    tol : float
        Target norm of the gradient of the energy density with respect to
        the retained Fourier amplitudes (eV/Å³).

    Returns
    -------
    DisplacementField, or ``(DisplacementField, RelaxationInfo)`` when
    ``return_info`` is set.

    Raises
    ------
    RelaxationError
        If the tolerance is not met within ``max_iter`` iterations.
    """
    if nG < 1:
        raise ValueError("nG must be at least one shell")
    if tol <= 0:
        raise ValueError("tol must be positive")
    coeffs = coeffs or GsfeCoefficients.default()
    elastic = elastic or ElasticParams()
    fun = RelaxationFunctional(geom, coeffs, elastic, nG, npts)
    info = RelaxationInfo()
    p = _nlcg(fun.energy_and_gradient, np.zeros(fun.size), fun.precond, tol, max_iter, info)
    disp = fun.field(p)
    if not info.converged:
        raise RelaxationError("relaxation did not converge", info.grad_norm, disp)
    return (disp, info) if return_info else disp


def stacking_fractions(geom: MoireGeometry, disp: DisplacementField, npts: int = 96,
                       radius: float | None = None) -> dict[str, float]:
    """Fraction of the moiré cell whose local stacking lies near AA, AB or BA.

    The local disregistry of layer 1 relative to layer 2 is reduced to the
    layer-2 cell and classified by distance to each high-symmetry stacking
    (within ``radius``, default a quarter of the carbon-carbon distance).
    """
    radius = radius or 0.25 * geom.monolayer.delta
    s = (np.arange(npts) + 0.5) / npts
    x = np.stack(np.meshgrid(s, s, indexing="ij"), axis=-1).reshape(-1, 2) @ geom.Am.T
    b = x @ geom.disregistry_map(2).T + disp(x, 1) - disp(x, 2)
    A2inv = np.linalg.inv(geom.A2)
    d = geom.layer_tau(2, 1) - geom.layer_tau(2, 0)
    out = {}
    for name, c in (("AA", np.zeros(2)), ("AB", d), ("BA", -d)):
        frac = (b - c) @ A2inv.T
        frac -= np.round(frac)
        # check neighbouring images for the true minimal distance
        best = np.full(len(b), np.inf)
        for i in (-1, 0, 1):
            for j in (-1, 0, 1):
                r = (frac + [i, j]) @ geom.A2.T
                best = np.minimum(best, np.linalg.norm(r, axis=1))
        out[name] = float(np.mean(best < radius))
    return out


# --------------------------------------------------------------------------
# hopping tables
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class HoppingTables:
    """Parameters of the relaxed continuum model.

    Attributes
    ----------
    theta : float
        Twist angle the tables were produced for (degrees).
    v, v1, v2 : float
        Dirac velocity (meV·Å) and quadratic corrections (meV·Å²).
    intra_hops, inter_hops : ndarray, shape (12, 2)
        Integer moiré coordinates of ``P_j`` and ``Q_j``.
    intra : ndarray, shape (2, 12, 2, 2)
        ``A_j`` per layer (meV).
    intra_grad : ndarray, shape (2, 12, 2, 2, 2)
        ``A_{j,grad}`` per layer; axis 2 is the Cartesian component (meV·Å).
    inter : ndarray, shape (12, 2, 2)
        Interlayer ``T_j`` (meV), rows on layer 1 and columns on layer 2.
    inter_grad : ndarray, shape (12, 2, 2, 2)
        Interlayer gradients (meV·Å).
    """

    theta: float
    v: float
    v1: float
    v2: float
    intra_hops: np.ndarray
    intra: np.ndarray
    intra_grad: np.ndarray
    inter_hops: np.ndarray
    inter: np.ndarray
    inter_grad: np.ndarray
    source: str = ""

    def first_shell_ratio(self) -> float:
        """``|[T_1]_AA| / |[T_1]_AB|`` for the hop without reciprocal shift."""
        j = self.inter_index((0, 0))
        return float(abs(self.inter[j, 0, 0]) / abs(self.inter[j, 0, 1]))

    @property
    def layer_phase(self) -> float:
        """Phase of the first-shell AA element; a pure interlayer gauge."""
        return float(np.angle(self.inter[self.inter_index((0, 0)), 0, 0]))

    def inter_index(self, n) -> int:
        hit = np.flatnonzero(np.all(self.inter_hops == np.asarray(n), axis=1))
        if len(hit) == 0:
            raise KeyError(f"interlayer hop {tuple(n)} not tabulated")
        return int(hit[0])

    def intra_index(self, n) -> int:
        hit = np.flatnonzero(np.all(self.intra_hops == np.asarray(n), axis=1))
        if len(hit) == 0:
            raise KeyError(f"intralayer hop {tuple(n)} not tabulated")
        return int(hit[0])

    def without_hopping(self) -> "HoppingTables":
        """Same Dirac terms with every hop matrix set to zero."""
        return HoppingTables(self.theta, self.v, self.v1, self.v2, self.intra_hops,
                             np.zeros_like(self.intra), np.zeros_like(self.intra_grad),
                             self.inter_hops, np.zeros_like(self.inter),
                             np.zeros_like(self.inter_grad), self.source)

    def to_dict(self) -> dict:
        def c(z):
            return [float(np.real(z)), float(np.imag(z))]

        def entry(mat, grad):
            out = {}
            for a, sa in enumerate("AB"):
                for b, sb in enumerate("AB"):
                    out[sa + sb] = c(mat[a, b])
                    out["grad_" + sa + sb] = [c(grad[0, a, b]), c(grad[1, a, b])]
            return out

        intra = []
        for layer in (1, 2):
            for j in range(12):
                e = {"layer": layer, "j": j + 1, "hop": self.intra_hops[j].tolist()}
                e.update(entry(self.intra[layer - 1, j], self.intra_grad[layer - 1, j]))
                intra.append(e)
        inter = []
        for j in range(12):
            e = {"j": j + 1, "hop": self.inter_hops[j].tolist()}
            e.update(entry(self.inter[j], self.inter_grad[j]))
            inter.append(e)
        return {
            "format": TABLE_FORMAT, "version": 1, "theta": self.theta, "source": self.source,
            "units": {"dirac.v": "meV*A", "dirac.v1": "meV*A^2", "dirac.v2": "meV*A^2",
                      "matrix": "meV", "gradient": "meV*A"},
            "dirac": {"v": self.v, "v1": self.v1, "v2": self.v2},
            "intra": intra, "inter": inter,
        }


def save_tables(tables: HoppingTables, path) -> None:
    Path(path).write_text(json.dumps(tables.to_dict(), indent=1))


_UNIT_SCALE = {"eV*A": 1e3, "meV*A": 1.0, "eV*A^2": 1e3, "meV*A^2": 1.0,
               "meV": 1.0, "eV": 1e3}


def _cplx(value, where: str) -> complex:
    if (not isinstance(value, (list, tuple)) or len(value) != 2
            or not all(isinstance(x, (int, float)) for x in value)):
        raise TableFormatError(f"{where}: expected a [re, im] pair, got {value!r}")
    return complex(value[0], value[1])


def _grad(value, where: str) -> np.ndarray:
    if not isinstance(value, (list, tuple)) or len(value) != 2:
        raise TableFormatError(f"{where}: expected two [re, im] components, got {value!r}")
    return np.array([_cplx(v, f"{where}[{i}]") for i, v in enumerate(value)])


def _read_entry(e: dict, where: str):
    """Return ``(mat, grad, known)`` with ``known[a, b]`` marking present elements."""
    mat = np.zeros((2, 2), dtype=complex)
    grad = np.zeros((2, 2, 2), dtype=complex)
    known = np.zeros((2, 2), dtype=bool)
    for a, sa in enumerate("AB"):
        for b, sb in enumerate("AB"):
            key = sa + sb
            if key in e:
                mat[a, b] = _cplx(e[key], f"{where}.{key}")
                if "grad_" + key not in e:
                    raise TableFormatError(f"{where}: '{key}' given without 'grad_{key}'")
                grad[:, a, b] = _grad(e["grad_" + key], f"{where}.grad_{key}")
                known[a, b] = True
    if not (known[0, 0] and known[0, 1]):
        raise TableFormatError(f"{where}: entries 'AA' and 'AB' are required")
    return mat, grad, known


def _c2zt_fill(mat, grad, known, phase: complex = 1.0):
    """Complete BA/BB from AA/AB with ``[[a, b], [p conj b, p conj a]]``."""
    for (a, b), (sa, sb) in (((1, 0), (0, 1)), ((1, 1), (0, 0))):
        if not known[a, b]:
            mat[a, b] = phase * np.conj(mat[sa, sb])
            grad[:, a, b] = phase * np.conj(grad[:, sa, sb])


def _rotate_entry(mat, grad, times: int):
    """Apply the 120° rotation rule ``times`` times to one hop matrix."""
    R = rotation(2.0 * np.pi / 3.0)
    for _ in range(times % 3):
        mat = C3_UNITARY @ mat @ C3_UNITARY.conj().T
        g = np.array([C3_UNITARY @ gi @ C3_UNITARY.conj().T for gi in grad])
        grad = np.einsum("cd,dij->cij", R, g)
    return mat, grad


def _rotation_power(geom: MoireGeometry, src: np.ndarray, dst: np.ndarray, shift: np.ndarray):
    """Power ``p`` in {0,1,2} with ``R^p (shift + B src) = shift + B dst``, or None."""
    R = rotation(2.0 * np.pi / 3.0)
    v = shift + geom.Bm @ src
    target = shift + geom.Bm @ dst
    for p in range(3):
        if np.allclose(v, target, atol=1e-10 * np.linalg.norm(geom.Bm)):
            return p
        v = R @ v
    return None


def _mirror_image(geom: MoireGeometry, n: np.ndarray) -> np.ndarray:
    m = np.linalg.solve(geom.Bm, MIRROR @ geom.Bm @ n)
    return np.rint(m).astype(int)


def tables_from_dict(data: dict, geom: MoireGeometry | None = None) -> HoppingTables:
    """Build tables from parsed JSON, completing missing entries by symmetry.

    Entries present in the data are used verbatim.  Missing sublattice
    elements are filled with the C2zT relation, hops missing inside a shell
    by 120° rotation of a listed hop, and absent layer-2 intralayer hops by
    the layer-exchanging mirror applied to layer 1.
    """
    from .geometry import build_geometry

    if data.get("format") != TABLE_FORMAT:
        raise TableFormatError(f"format: expected '{TABLE_FORMAT}', got {data.get('format')!r}")
    for key in ("theta", "dirac", "units", "intra", "inter"):
        if key not in data:
            raise TableFormatError(f"missing top-level entry '{key}'")
    theta = float(data["theta"])
    geom = geom or build_geometry(theta)
    shells = hop_shells(geom)
    units = data["units"]
    dirac = {}
    for key in ("v", "v1", "v2"):
        if key not in data["dirac"]:
            raise TableFormatError(f"dirac: missing '{key}'")
        unit = units.get("dirac." + key)
        if unit not in _UNIT_SCALE:
            raise TableFormatError(f"units.dirac.{key}: unsupported unit {unit!r}")
        dirac[key] = float(data["dirac"][key]) * _UNIT_SCALE[unit]
    for key, allowed in (("matrix", ("meV", "eV")), ("gradient", ("meV*A", "eV*A"))):
        if units.get(key) not in allowed:
            raise TableFormatError(f"units.{key}: unsupported unit {units.get(key)!r}")
    ms, gs = _UNIT_SCALE[units["matrix"]], _UNIT_SCALE[units["gradient"]]

    intra_hops, inter_hops = shells.intraN, shells.interN
    intra = np.zeros((2, 12, 2, 2), dtype=complex)
    intra_grad = np.zeros((2, 12, 2, 2, 2), dtype=complex)
    inter = np.zeros((12, 2, 2), dtype=complex)
    inter_grad = np.zeros((12, 2, 2, 2), dtype=complex)
    have_intra = np.zeros((2, 12), dtype=bool)
    have_inter = np.zeros(12, dtype=bool)
    raw_intra, raw_inter = [], []

    def hop_slot(hops, e, where):
        if "hop" not in e:
            raise TableFormatError(f"{where}: missing 'hop'")
        hit = np.flatnonzero(np.all(hops == np.asarray(e["hop"], dtype=int), axis=1))
        if len(hit) != 1:
            raise TableFormatError(f"{where}: hop {e['hop']} is not one of the 12 tabulated hops")
        return int(hit[0])

    for i, e in enumerate(data["intra"]):
        where = f"intra[{i}]"
        layer = e.get("layer")
        if layer not in (1, 2):
            raise TableFormatError(f"{where}: layer must be 1 or 2, got {layer!r}")
        j = hop_slot(intra_hops, e, where)
        mat, grad, known = _read_entry(e, where)
        raw_intra.append((layer, j, mat * ms, grad * gs, known))
    for i, e in enumerate(data["inter"]):
        where = f"inter[{i}]"
        j = hop_slot(inter_hops, e, where)
        mat, grad, known = _read_entry(e, where)
        raw_inter.append((j, mat * ms, grad * gs, known))

    # interlayer first: its first-shell AA phase is the layer gauge
    j0 = int(np.flatnonzero(np.all(inter_hops == 0, axis=1))[0])
    base = [r for r in raw_inter if r[0] == j0]
    if not base:
        raise TableFormatError("inter: the first-shell hop [0, 0] is required")
    phase = np.exp(2j * np.angle(base[0][1][0, 0]))
    for j, mat, grad, known in raw_inter:
        _c2zt_fill(mat, grad, known, phase)
        inter[j], inter_grad[j] = mat, grad
        have_inter[j] = True
    for layer, j, mat, grad, known in raw_intra:
        _c2zt_fill(mat, grad, known)
        intra[layer - 1, j], intra_grad[layer - 1, j] = mat, grad
        have_intra[layer - 1, j] = True

    def complete(hops, have, mats, grads, shift, where):
        for j in range(12):
            if have[j]:
                continue
            for i in np.flatnonzero(have):
                p = _rotation_power(geom, hops[i], hops[j], shift)
                if p is not None:
                    mats[j], grads[j] = _rotate_entry(mats[i], grads[i], p)
                    break
            else:
                raise TableFormatError(f"{where}: hop j={j + 1} {hops[j].tolist()} has no rotation partner")
        have[:] = True

    complete(inter_hops, have_inter, inter, inter_grad, geom.s1, "inter")
    complete(intra_hops, have_intra[0], intra[0], intra_grad[0], np.zeros(2), "intra layer 1")
    if not have_intra[1].any():
        for j in range(12):
            jm = int(np.flatnonzero(np.all(intra_hops == _mirror_image(geom, intra_hops[j]), axis=1))[0])
            intra[1, jm] = np.conj(intra[0, j])
            intra_grad[1, jm, 0] = np.conj(intra_grad[0, j, 0])
            intra_grad[1, jm, 1] = -np.conj(intra_grad[0, j, 1])
        have_intra[1] = True
    else:
        complete(intra_hops, have_intra[1], intra[1], intra_grad[1], np.zeros(2), "intra layer 2")

    return HoppingTables(theta=theta, v=dirac["v"], v1=dirac["v1"], v2=dirac["v2"],
                         intra_hops=intra_hops.copy(), intra=intra, intra_grad=intra_grad,
                         inter_hops=inter_hops.copy(), inter=inter, inter_grad=inter_grad,
                         source=str(data.get("source", "")))


def load_tables(path=None, geom: MoireGeometry | None = None) -> HoppingTables:
    """Read hopping tables from JSON; ``path=None`` loads the bundled 1.05° set.

    Raises
    ------
    TableFormatError
        On any schema violation, naming the offending entry.
    """
    if path is None:
        text = resources.files("tbghf.data").joinpath(BUNDLED_TABLES).read_text()
    else:
        text = Path(path).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise TableFormatError(f"not valid JSON: {exc}") from exc
    return tables_from_dict(data, geom)


# --------------------------------------------------------------------------
# tight-binding hopping functions and the relaxed transforms
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class HoppingModel:
    """Two-center exponential-decay hopping between p_z orbitals.

    ``t(r) = Vpi exp(-(r - a0)/delta) (1 - (dz/r)^2) + Vsigma exp(-(r - d0)/delta) (dz/r)^2``
    with ``r`` the 3D distance, ``a0`` the carbon-carbon distance,
    ``d0`` the interlayer distance and ``delta = delta_ratio * a``.  Energies
    in eV.
    """

    vpi: float = -2.7
    vsigma: float = 0.48
    d0: float = 3.35
    delta_ratio: float = 0.184
    spacing: float = 0.05
    extent: float = 10.0
    intra_cutoff: float = 7.0
    cell_points: int = 36

    def hop(self, x: np.ndarray, dz: float, a: float) -> np.ndarray:
        a0 = a / np.sqrt(3.0)
        delta = self.delta_ratio * a
        r = np.sqrt(np.sum(np.asarray(x) ** 2, axis=-1) + dz * dz)
        c2 = (dz / np.maximum(r, 1e-12)) ** 2
        return (self.vpi * np.exp(-(r - a0) / delta) * (1.0 - c2)
                + self.vsigma * np.exp(-(r - self.d0) / delta) * c2)


_PAPER_HOP_SIGN = 1


def _check_sampling(model: HoppingModel, qmax: float, a: float):
    need = np.pi / (qmax + 4.0 / (model.delta_ratio * a))
    if model.spacing > need:
        raise ValueError(f"real-space spacing {model.spacing} Å is too coarse; need at most {need:.4f} Å")
    if model.extent < 2.5 * model.d0:
        raise ValueError(f"real-space extent {model.extent} Å too small; need at least {2.5 * model.d0:.2f} Å")


def relaxed_tables(geom: MoireGeometry, disp: DisplacementField | None = None,
                   hopping: HoppingModel | None = None, v: float = 5339.0,
                   v1: float = -783.0, v2: float = -3405.0) -> HoppingTables:
    """Evaluate the relaxed hopping matrices from a displacement field.

    Interlayer matrices come from the continuous Fourier transform of the
    relaxation-dependent interlayer hopping, evaluated by quadrature on a
    square real-space grid; intralayer matrices from the Bloch transform of
    the registry-dependent intralayer hopping, averaged over the opposite
    layer's unit cell.  Dirac constants ``v, v1, v2`` (meV·Å, meV·Å²) are
    passed through.

    Raises
    ------
    ValueError
        If the real-space sampling cannot resolve the required momenta.
    """
    hopping = hopping or HoppingModel()
    disp = disp or DisplacementField.zero(geom)
    shells = hop_shells(geom)
    a = geom.a
    sg = _PAPER_HOP_SIGN
    Bm = geom.Bm

    # interlayer
    qs = [geom.K2 + geom.layer_image(sg * Bm @ n, 2) for n in shells.interN]
    _check_sampling(hopping, max(np.linalg.norm(q) for q in qs), a)
    t = np.arange(-hopping.extent, hopping.extent + 0.5 * hopping.spacing, hopping.spacing)
    X = np.stack(np.meshgrid(t, t, indexing="ij"), axis=-1).reshape(-1, 2)
    w = hopping.spacing ** 2
    u1 = disp.in_disregistry(1)
    u2 = disp.in_disregistry(2)
    tau1 = [geom.layer_tau(1, s) for s in (0, 1)]
    tau2 = [geom.layer_tau(2, s) for s in (0, 1)]
    area2 = abs(np.linalg.det(geom.A2))
    inter = np.zeros((12, 2, 2), dtype=complex)
    inter_grad = np.zeros((12, 2, 2, 2), dtype=complex)
    for s in (0, 1):
        for sp in (0, 1):
            y = X + u1(X - tau2[s] + tau2[sp]) - u2(-X + tau1[s] - tau1[sp])
            h = hopping.hop(y, hopping.d0, a) * 1e3 * w
            for j, n in enumerate(shells.interN):
                G2 = geom.layer_image(sg * Bm @ n, 2)
                ph = np.exp(-1j * (X @ (geom.K2 + G2))) * h
                pre = np.exp(1j * G2 @ (tau2[s] - tau2[sp])) / area2
                inter[j, s, sp] = pre * ph.sum()
                inter_grad[j, :, s, sp] = pre * (-1j) * (X.T @ ph)

    # intralayer
    intra = np.zeros((2, 12, 2, 2), dtype=complex)
    intra_grad = np.zeros((2, 12, 2, 2, 2), dtype=complex)
    nb = hopping.cell_points
    sb = np.arange(nb) / nb
    frac = np.stack(np.meshgrid(sb, sb, indexing="ij"), axis=-1).reshape(-1, 2)
    rng = np.arange(-int(hopping.intra_cutoff / a) - 2, int(hopping.intra_cutoff / a) + 3)
    ints = np.array([[i, j] for i in rng for j in rng])
    for layer in (1, 2):
        other = 3 - layer
        A_own = geom.A1 if layer == 1 else geom.A2
        A_oth = geom.A2 if layer == 1 else geom.A1
        K = geom.K1 if layer == 1 else geom.K2
        u = u1 if layer == 1 else u2
        tau_own = tau1 if layer == 1 else tau2
        tau_oth = tau2 if layer == 1 else tau1
        b = frac @ A_oth.T
        Gs = [geom.layer_image(sg * Bm @ n, other) for n in shells.intraN]
        F = np.array([np.exp(-1j * (b @ G)) for G in Gs]) / len(b)
        for s in (0, 1):
            for sp in (0, 1):
                Q = ints @ A_own.T + tau_own[s] - tau_own[sp]
                Q = Q[(np.linalg.norm(Q, axis=1) < hopping.intra_cutoff) & (np.linalg.norm(Q, axis=1) > 1e-9)]
                acc = np.zeros(12, dtype=complex)
                accg = np.zeros((12, 2), dtype=complex)
                ub = u(b)
                for q in Q:
                    hv = hopping.hop(q + ub - u(b - q + tau_oth[s] - tau_oth[sp]), 0.0, a) * 1e3
                    c = F @ hv * np.exp(-1j * K @ q)
                    acc += c
                    accg += -1j * np.outer(c, q)
                intra[layer - 1, :, s, sp] = acc
                intra_grad[layer - 1, :, :, s, sp] = accg
    return HoppingTables(theta=geom.theta, v=v, v1=v1, v2=v2, intra_hops=shells.intraN.copy(),
                         intra=intra, intra_grad=intra_grad, inter_hops=shells.interN.copy(),
                         inter=inter, inter_grad=inter_grad, source="relaxation pipeline")
