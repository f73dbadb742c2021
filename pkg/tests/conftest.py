import numpy as np
import pytest

from tbghf.formfactors import ScreenedPotential, compute_flat_bands, form_factors
from tbghf.gauge import scdm_gauge
from tbghf.geometry import build_geometry, mp_grid
from tbghf.hamiltonians import BMModel, PlaneWaveBasis, magic_coupling
from tbghf.hartreefock import InteractingModel


@pytest.fixture(scope="session")
def geom():
    return build_geometry(1.05)


@pytest.fixture(scope="session")
def basis(geom):
    return PlaneWaveBasis(geom, 5.0)


@pytest.fixture(scope="session")
def small_basis(geom):
    return PlaneWaveBasis(geom, 3.0)


@pytest.fixture(scope="session")
def magic_w1(geom, basis):
    return magic_coupling(geom, basis)


class ModelFactory:
    """Cached interacting models in the sublattice gauge at the magic coupling."""

    def __init__(self, geom, basis, w1):
        self.geom, self.basis, self.w1 = geom, basis, w1
        self._cache = {}

    def __call__(self, kappa: float, nkx: int, nky: int | None = None, ff_cutoff: float = 4.0):
        nky = nkx if nky is None else nky
        key = (kappa, nkx, nky, ff_cutoff)
        if key not in self._cache:
            grid = mp_grid(self.geom, nkx, nky)
            fb = compute_flat_bands(BMModel(self.geom, self.basis, kappa * self.w1, self.w1), grid)
            fs = fb.rotate(scdm_gauge(fb).U, "sublattice")
            self._cache[key] = InteractingModel(fs, form_factors(fs, ff_cutoff), ScreenedPotential())
        return self._cache[key]


@pytest.fixture(scope="session")
def models(geom, basis, magic_w1):
    return ModelFactory(geom, basis, magic_w1)


def random_projector(rng, nk: int) -> np.ndarray:
    P = np.empty((nk, 4, 4), dtype=complex)
    for k in range(nk):
        Q, _ = np.linalg.qr(rng.normal(size=(4, 2)) + 1j * rng.normal(size=(4, 2)))
        P[k] = Q @ Q.conj().T
    return P


def random_unitaries(rng, nk: int) -> np.ndarray:
    return np.array([np.linalg.qr(rng.normal(size=(4, 4)) + 1j * rng.normal(size=(4, 4)))[0]
                     for _ in range(nk)])


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def report(capsys):
    """Record one ``PASS``/``FAIL`` line per acceptance check and echo it to the terminal."""
    def _report(label: str, ok: bool, detail: str) -> bool:
        line = f"{'PASS' if ok else 'FAIL'} {label}: {detail}"
        ACCEPTANCE_LINES.append(line)
        with capsys.disabled():
            print(f"\n{line}", flush=True)
        return ok
    return _report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
