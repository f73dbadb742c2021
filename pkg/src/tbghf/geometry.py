"""Lattice, moiré and momentum-grid geometry for twisted bilayer graphene.

All lengths are in Å and all momenta in Å⁻¹.  Vectors are stored as the
columns of 2×2 "fundamental" matrices so that a lattice point is ``A @ n``
for an integer vector ``n``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

DEFAULT_LATTICE_CONSTANT = 2.46
SHELL_RTOL = 1e-9


def rotation(angle: float) -> np.ndarray:
    """Counterclockwise rotation matrix by ``angle`` radians."""
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s], [s, c]])


@dataclass(frozen=True)
class MonolayerLattice:
    """Unrotated graphene sheet.

    Attributes
    ----------
    a : float
        Lattice constant (Å).
    A : ndarray, shape (2, 2)
        Fundamental matrix with primitive vectors as columns.
    tauA, tauB : ndarray, shape (2,)
        Positions of the two basis atoms inside the unit cell.
    """

    a: float
    A: np.ndarray
    tauA: np.ndarray
    tauB: np.ndarray

    @classmethod
    def graphene(cls, a: float = DEFAULT_LATTICE_CONSTANT) -> "MonolayerLattice":
        if a <= 0:
            raise ValueError(f"lattice constant must be positive, got {a}")
        A = 0.5 * a * np.array([[1.0, -1.0], [np.sqrt(3.0), np.sqrt(3.0)]])
        return cls(a=a, A=A, tauA=np.zeros(2), tauB=np.array([0.0, a / np.sqrt(3.0)]))

    @property
    def delta(self) -> float:
        return self.a / np.sqrt(3.0)

    @property
    def dirac_point(self) -> np.ndarray:
        return 4.0 * np.pi / (3.0 * self.a) * np.array([1.0, 0.0])

    @property
    def reciprocal(self) -> np.ndarray:
        return 2.0 * np.pi * np.linalg.inv(self.A).T

    @property
    def cell_area(self) -> float:
        return abs(np.linalg.det(self.A))


@dataclass(frozen=True)
class MoireGeometry:
    """Twisted bilayer geometry.

    Layer 1 is rotated by ``-theta/2`` and layer 2 by ``+theta/2``.
    ``Bm`` holds the moiré reciprocal vectors ``b1, b2`` as columns.
    """

    theta: float
    monolayer: MonolayerLattice
    A1: np.ndarray
    A2: np.ndarray
    Am: np.ndarray
    Bm: np.ndarray
    K1: np.ndarray
    K2: np.ndarray

    @property
    def a(self) -> float:
        return self.monolayer.a

    @property
    def theta_rad(self) -> float:
        return np.deg2rad(self.theta)

    @property
    def layer_angles(self) -> tuple[float, float]:
        return (-0.5 * self.theta_rad, 0.5 * self.theta_rad)

    @property
    def K1p(self) -> np.ndarray:
        return -self.K1

    @property
    def K2p(self) -> np.ndarray:
        return -self.K2

    @property
    def sTilde(self) -> np.ndarray:
        return 0.5 * (self.K1 + self.K2)

    @property
    def s1(self) -> np.ndarray:
        return self.K1 - self.K2

    @property
    def b1(self) -> np.ndarray:
        return self.Bm[:, 0]

    @property
    def b2(self) -> np.ndarray:
        return self.Bm[:, 1]

    @property
    def cell_area(self) -> float:
        """Area of the moiré unit cell (Å²)."""
        return abs(np.linalg.det(self.Am))

    def layer_tau(self, layer: int, sublattice: int) -> np.ndarray:
        """Rotated basis-atom position; ``layer`` in {1, 2}, ``sublattice`` 0=A, 1=B."""
        tau = self.monolayer.tauA if sublattice == 0 else self.monolayer.tauB
        return rotation(self.layer_angles[layer - 1]) @ tau

    def layer_reciprocal(self, layer: int) -> np.ndarray:
        A = self.A1 if layer == 1 else self.A2
        return 2.0 * np.pi * np.linalg.inv(A).T

    def reciprocal_vector(self, n) -> np.ndarray:
        """Moiré reciprocal vector ``Bm @ n`` for integer coordinates ``n``."""
        return self.Bm @ np.asarray(n, dtype=float)

    def layer_image(self, G: np.ndarray, layer: int) -> np.ndarray:
        """Map a moiré reciprocal vector onto the reciprocal lattice of ``layer``.

        Uses ``R(theta_l) [R(theta_1) - R(theta_2)]^{-1} G``.
        """
        t1, t2 = self.layer_angles
        M = rotation(self.layer_angles[layer - 1]) @ np.linalg.inv(rotation(t1) - rotation(t2))
        return M @ np.asarray(G, dtype=float)

    def disregistry_map(self, layer: int) -> np.ndarray:
        """Matrix of the local stacking map ``gamma_layer``.

        ``gamma_2 = I - A2 A1^{-1}`` sends the moiré cell onto a unit cell of
        layer 2 (the configuration of layer 1 seen from layer 2) and
        ``gamma_1 = I - A1 A2^{-1}`` does the same with the layers swapped.
        """
        if layer == 2:
            return np.eye(2) - self.A2 @ np.linalg.inv(self.A1)
        return np.eye(2) - self.A1 @ np.linalg.inv(self.A2)


def build_geometry(theta: float, a: float = DEFAULT_LATTICE_CONSTANT) -> MoireGeometry:
    """Construct the moiré geometry for twist angle ``theta`` in degrees.

    Raises
    ------
    ValueError
        If ``theta`` is outside ``(0, 5)`` degrees or ``a`` is not positive.
    """
    if not (0.0 < theta < 5.0):
        raise ValueError(f"twist angle must lie in (0, 5) degrees, got {theta}")
    mono = MonolayerLattice.graphene(a)
    t1, t2 = -0.5 * np.deg2rad(theta), 0.5 * np.deg2rad(theta)
    A1 = rotation(t1) @ mono.A
    A2 = rotation(t2) @ mono.A
    Am = np.linalg.inv(np.linalg.inv(A1) - np.linalg.inv(A2))
    Bm = 2.0 * np.pi * np.linalg.inv(Am).T
    K = mono.dirac_point
    return MoireGeometry(
        theta=float(theta), monolayer=mono, A1=A1, A2=A2, Am=Am, Bm=Bm,
        K1=rotation(t1) @ K, K2=rotation(t2) @ K,
    )


@dataclass(frozen=True)
class KGrid:
    """Monkhorst-Pack grid ``k_ij = (i/nkx) b1 + (j/nky) b2`` on the moiré cell."""

    nkx: int
    nky: int
    points: np.ndarray
    frac: np.ndarray = field(repr=False)

    @property
    def nk(self) -> int:
        return self.nkx * self.nky

    def __len__(self) -> int:
        return self.nk

    def index(self, i: int, j: int) -> int:
        return (i % self.nkx) * self.nky + (j % self.nky)

    @cached_property
    def _int_coords(self) -> np.ndarray:
        return np.array([[i, j] for i in range(self.nkx) for j in range(self.nky)], dtype=int)

    def add(self, ik: int, iq: int) -> tuple[int, np.ndarray]:
        """Reduce ``k[ik] + k[iq]`` to the grid.

        Returns the grid index and the integer reciprocal shift ``n`` with
        ``k[ik] + k[iq] = k[out] + Bm @ n``.
        """
        c = self._int_coords[ik] + self._int_coords[iq]
        n = np.array([c[0] // self.nkx, c[1] // self.nky])
        return self.index(c[0], c[1]), n

    def subtract(self, ik: int, iq: int) -> tuple[int, np.ndarray]:
        """Same as :meth:`add` for ``k[ik] - k[iq]``."""
        c = self._int_coords[ik] - self._int_coords[iq]
        n = np.array([c[0] // self.nkx, c[1] // self.nky])
        return self.index(c[0], c[1]), n

    def negate(self, ik: int) -> tuple[int, np.ndarray]:
        """Grid index of ``-k[ik]`` and the shift ``n`` with ``-k = k[out] + Bm @ n``."""
        c = -self._int_coords[ik]
        n = np.array([c[0] // self.nkx, c[1] // self.nky])
        return self.index(c[0], c[1]), n


def mp_grid(geom: MoireGeometry, nkx: int, nky: int) -> KGrid:
    """Build the ``nkx × nky`` Monkhorst-Pack grid anchored at the origin ``k = 0``."""
    if nkx < 1 or nky < 1:
        raise ValueError(f"grid sizes must be positive, got {nkx}x{nky}")
    frac = np.array([[i / nkx, j / nky] for i in range(nkx) for j in range(nky)])
    points = frac @ geom.Bm.T
    return KGrid(nkx=nkx, nky=nky, points=points, frac=frac)


@dataclass(frozen=True)
class HopShells:
    """Momentum hops of the relaxed continuum model.

    ``interQ``/``intraP`` hold 12 moiré reciprocal vectors each, with integer
    coordinates in ``interN``/``intraN``.  Interlayer hops are grouped by the
    magnitude of ``s1 + Q`` and intralayer hops by ``|P|``.  Inside a shell
    hops are ordered counterclockwise by angle measured from the direction of
    ``s1``; ``*_shell`` gives the shell index (0-based) of each hop.
    """

    interQ: np.ndarray
    interN: np.ndarray
    inter_shell: np.ndarray
    intraP: np.ndarray
    intraN: np.ndarray
    intra_shell: np.ndarray
    s1: np.ndarray

    @property
    def inter_vectors(self) -> np.ndarray:
        """Displacements ``s1 + Q_j``."""
        return self.s1[None, :] + self.interQ


def _group_shells(norms: np.ndarray, rtol: float = SHELL_RTOL) -> list[np.ndarray]:
    order = np.argsort(norms, kind="stable")
    shells: list[list[int]] = []
    for idx in order:
        if shells and abs(norms[idx] - norms[shells[-1][0]]) <= rtol * max(norms[idx], 1e-300):
            shells[-1].append(idx)
        else:
            shells.append([idx])
    return [np.array(s) for s in shells]


def _angle_from(ref: np.ndarray, vecs: np.ndarray) -> np.ndarray:
    ang = np.arctan2(vecs[:, 1], vecs[:, 0]) - np.arctan2(ref[1], ref[0])
    ang = np.mod(ang, 2.0 * np.pi)
    ang[np.isclose(ang, 2.0 * np.pi, atol=1e-9)] = 0.0
    return ang


def _take_shells(vecs, ints, norms, count, ref, skip_zero):
    out_n, out_s = [], []
    s_index = 0
    for sh in _group_shells(norms):
        if skip_zero and norms[sh[0]] < 1e-14:
            continue
        if s_index == count:
            break
        sh = sh[np.argsort(_angle_from(ref, vecs[sh]), kind="stable")]
        out_n.append(ints[sh])
        out_s.extend([s_index] * len(sh))
        s_index += 1
    return np.vstack(out_n), np.array(out_s)


def hop_shells(geom: MoireGeometry, n_inter_shells: int = 3, n_intra_shells: int = 2,
               search: int = 6) -> HopShells:
    """Enumerate interlayer and intralayer momentum hops.

    Interlayer hops ``Q`` are the moiré reciprocal vectors whose displacement
    ``s1 + Q`` lies in the first ``n_inter_shells`` shells around the origin;
    intralayer hops are the nonzero vectors in the first ``n_intra_shells``
    shells.
    """
    rng = np.arange(-search, search + 1)
    ints = np.array([[i, j] for i in rng for j in rng], dtype=int)
    G = ints @ geom.Bm.T
    s1 = geom.s1
    d = s1[None, :] + G
    inter_n, inter_s = _take_shells(d, ints, np.linalg.norm(d, axis=1), n_inter_shells, s1, False)
    intra_n, intra_s = _take_shells(G, ints, np.linalg.norm(G, axis=1), n_intra_shells, s1, True)
    return HopShells(
        interQ=inter_n @ geom.Bm.T, interN=inter_n, inter_shell=inter_s,
        intraP=intra_n @ geom.Bm.T, intraN=intra_n, intra_shell=intra_s, s1=s1.copy(),
    )


def high_symmetry_points(geom: MoireGeometry) -> dict[str, np.ndarray]:
    """High-symmetry points of the moiré Brillouin zone in the shifted frame.

    Momenta are measured from the midpoint of the two layer Dirac points, so
    the layer Dirac points (zone corners) sit at ``∓s1/2``, the origin is the
    midpoint of the edge joining them and the zone centre lies at
    ``(b1 + b2)/2``.
    """
    s1 = geom.s1
    return {
        "K": -0.5 * s1,
        "Gamma": 0.5 * (geom.b1 + geom.b2),
        "M": np.zeros(2),
        "Kp": 0.5 * s1,
    }
