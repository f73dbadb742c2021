"""Sweeps of interacting models over the BM and relaxed interpolation families.

For every interpolation value ``lam`` and initial state, a sweep builds the
model, fixes the sublattice gauge with the SCDM columns of the chiral
endpoint, runs SCF and records energy, gap and the three symmetry order
parameters.  Outputs are a versioned CSV table and a JSON manifest.

Configuration schema (TOML or JSON, every key optional)::

    [geometry]     theta = 1.05 (deg), a = 2.46 (Å)
    [model]        family = "bm" | "relaxed", w1 = 113.25 (meV, or "magic"),
                   v = 5339.0 (meV·Å), range = [0.0, 0.95], steps = 20,
                   tables = "" (path; bundled tables when empty), pw_cutoff = 5.0
    [grid]         nkx = 4, nky = 4
    [interaction]  epsilon = 10.79, d = 300.0 (Å), ff_cutoff = 4.0
    [scf]          max_iter = 500, tol = 1e-8, energy_tol = 1e-9, mixing = 0.3, diis = 8
    inits = ["QH", "VH", "VP", "KIVC", "TIVC"], phi = 0.0
    [flags]        ed = false, relax = false, warm_start = false, cache_dir = "", workers = 1

``TBGHF_CACHE_DIR`` and ``TBGHF_WORKERS`` override ``cache_dir`` and
``workers``.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import os
import platform
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .formfactors import FlatBandSet, FormFactorTensor, ScreenedPotential, compute_flat_bands, form_factors
from .gauge import CANDIDATES, candidate_state, order_parameters, scdm_gauge, sewing_matrix
from .geometry import build_geometry, mp_grid
from .hamiltonians import DEFAULT_V, DEFAULT_W1, MAX_KAPPA, BandGapError, PlaneWaveBasis, build_model, magic_coupling
from .hartreefock import InteractingModel, OneRdm, scf_solve
from .relaxation import load_tables, relax_minimize, relaxed_tables

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - exercised on 3.10
    import tomli as tomllib

log = logging.getLogger(__name__)

SWEEP_SCHEMA = "tbghf.sweep v1"
PHYSICAL_KAPPA = 0.7
POST_TRANSITION_BLOCK = 0.5 * np.array([[1.0, -1.0], [-1.0, 1.0]])


class ConfigError(ValueError):
    """Malformed or out-of-range run configuration."""


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------

@dataclass
class GeometryConfig:
    theta: float = 1.05
    a: float = 2.46


@dataclass
class ModelConfig:
    family: str = "bm"
    w1: float | str = DEFAULT_W1
    v: float = DEFAULT_V
    range: tuple[float, float] = (0.0, MAX_KAPPA)
    steps: int = 20
    tables: str = ""
    pw_cutoff: float = 5.0


@dataclass
class GridConfig:
    nkx: int = 4
    nky: int = 4


@dataclass
class InteractionConfig:
    epsilon: float = 10.79
    d: float = 300.0
    ff_cutoff: float = 4.0


@dataclass
class ScfConfig:
    max_iter: int = 500
    tol: float = 1e-8
    energy_tol: float = 1e-9
    mixing: float = 0.3
    diis: int = 8


@dataclass
class Flags:
    ed: bool = False
    relax: bool = False
    warm_start: bool = False
    cache_dir: str = ""
    workers: int = 1


@dataclass
class RunConfig:
    """Complete description of a sweep; see the module docstring for the schema."""

    geometry: GeometryConfig = field(default_factory=GeometryConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    grid: GridConfig = field(default_factory=GridConfig)
    interaction: InteractionConfig = field(default_factory=InteractionConfig)
    scf: ScfConfig = field(default_factory=ScfConfig)
    inits: tuple[str, ...] = CANDIDATES
    phi: float = 0.0
    flags: Flags = field(default_factory=Flags)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        m = self.model
        if m.family not in ("bm", "relaxed"):
            raise ConfigError(f"model.family must be 'bm' or 'relaxed', got {m.family!r}")
        lo, hi = m.range
        top = MAX_KAPPA if m.family == "bm" else 1.0
        if not (0.0 <= lo <= hi <= top + 1e-12):
            raise ConfigError(f"model.range must satisfy 0 <= lo <= hi <= {top} for family {m.family!r}, got {m.range}")
        if m.steps < 1:
            raise ConfigError(f"model.steps must be at least 1, got {m.steps}")
        if not (isinstance(m.w1, str) and m.w1 == "magic") and not (isinstance(m.w1, (int, float)) and m.w1 > 0):
            raise ConfigError(f"model.w1 must be a positive number or 'magic', got {m.w1!r}")
        bad = [i for i in self.inits if i not in CANDIDATES]
        if bad or not self.inits:
            raise ConfigError(f"inits must be a non-empty subset of {CANDIDATES}, got {list(self.inits)}")
        if self.grid.nkx < 1 or self.grid.nky < 1:
            raise ConfigError("grid sizes must be positive")
        if self.flags.workers < 1:
            raise ConfigError("flags.workers must be at least 1")

    @property
    def lambdas(self) -> np.ndarray:
        lo, hi = self.model.range
        return np.linspace(lo, hi, self.model.steps) if self.model.steps > 1 else np.array([lo])

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["model"]["range"] = list(self.model.range)
        d["inits"] = list(self.inits)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        sections = {"geometry": GeometryConfig, "model": ModelConfig, "grid": GridConfig,
                    "interaction": InteractionConfig, "scf": ScfConfig, "flags": Flags}
        unknown = set(data) - set(sections) - {"inits", "phi"}
        if unknown:
            raise ConfigError(f"unknown configuration keys: {sorted(unknown)}")
        kwargs = {}
        for name, typ in sections.items():
            sub = data.get(name, {})
            if not isinstance(sub, dict):
                raise ConfigError(f"section {name!r} must be a table")
            names = {f.name for f in dataclasses.fields(typ)}
            extra = set(sub) - names
            if extra:
                raise ConfigError(f"unknown keys in [{name}]: {sorted(extra)}")
            if name == "model" and "range" in sub:
                sub = {**sub, "range": tuple(float(x) for x in sub["range"])}
            try:
                kwargs[name] = typ(**sub)
            except TypeError as exc:
                raise ConfigError(f"bad section [{name}]: {exc}") from exc
        if "inits" in data:
            inits = data["inits"]
            kwargs["inits"] = CANDIDATES if inits == "all" else tuple(str(i).upper() for i in inits)
        if "phi" in data:
            kwargs["phi"] = float(data["phi"])
        return cls(**kwargs)

    def replace(self, **overrides) -> "RunConfig":
        """Copy with dotted-key overrides, e.g. ``replace(**{"model.steps": 5})``."""
        d = self.to_dict()
        for key, value in overrides.items():
            node = d
            *path, last = key.split(".")
            for p in path:
                node = node[p]
            node[last] = value
        return RunConfig.from_dict(d)


def load_config(path) -> RunConfig:
    """Read a TOML or JSON run configuration."""
    path = Path(path)
    try:
        if path.suffix.lower() == ".json":
            data = json.loads(path.read_text())
        else:
            data = tomllib.loads(path.read_text())
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return RunConfig.from_dict(data)


def _apply_env(cfg: RunConfig) -> RunConfig:
    over = {}
    if os.environ.get("TBGHF_CACHE_DIR"):
        over["flags.cache_dir"] = os.environ["TBGHF_CACHE_DIR"]
    if os.environ.get("TBGHF_WORKERS"):
        over["flags.workers"] = int(os.environ["TBGHF_WORKERS"])
    return cfg.replace(**over) if over else cfg


# --------------------------------------------------------------------------
# per-point construction
# --------------------------------------------------------------------------

@dataclass
class Setup:
    """Shared, lambda-independent objects of a sweep."""

    cfg: RunConfig
    geom: object
    basis: PlaneWaveBasis
    grid: object
    w1: float
    tables: object
    columns: tuple[int, int]
    pot: ScreenedPotential


def prepare(cfg: RunConfig) -> Setup:
    """Geometry, basis, hopping tables and the chiral-endpoint SCDM columns.

    The relaxed family reads ``model.tables`` (bundled set when empty), or
    recomputes the tables from a fresh relaxation when ``flags.relax`` is set.
    """
    geom = build_geometry(cfg.geometry.theta, cfg.geometry.a)
    basis = PlaneWaveBasis(geom, cfg.model.pw_cutoff)
    grid = mp_grid(geom, cfg.grid.nkx, cfg.grid.nky)
    w1 = magic_coupling(geom, basis, cfg.model.v) if cfg.model.w1 == "magic" else float(cfg.model.w1)
    tables = None
    if cfg.model.family == "relaxed":
        if cfg.flags.relax:
            tables = relaxed_tables(geom, relax_minimize(geom), v=cfg.model.v)
        else:
            tables = load_tables(cfg.model.tables or None, geom=geom)
    chiral = build_model(geom, basis, "chiral", 0.0, w1=w1, v=cfg.model.v)
    columns = scdm_gauge(compute_flat_bands(chiral, grid)).columns
    pot = ScreenedPotential(cfg.interaction.epsilon, cfg.interaction.d)
    return Setup(cfg, geom, basis, grid, w1, tables, columns, pot)


def _cache_key(setup: Setup, lam: float) -> str:
    cfg = setup.cfg
    payload = {"version": __version__, "geometry": dataclasses.asdict(cfg.geometry),
               "model": {**dataclasses.asdict(cfg.model), "range": None, "steps": None, "w1": setup.w1},
               "grid": dataclasses.asdict(cfg.grid), "interaction": dataclasses.asdict(cfg.interaction),
               "lam": round(float(lam), 12), "columns": list(setup.columns)}
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:24]


def interacting_model(setup: Setup, lam: float) -> InteractingModel:
    """Gauge-fixed interacting model at ``lam``, read from or written to the cache when enabled."""
    cfg = setup.cfg
    model = build_model(setup.geom, setup.basis, cfg.model.family, float(lam), w1=setup.w1,
                        tables=setup.tables, v=cfg.model.v)
    cache = Path(cfg.flags.cache_dir) if cfg.flags.cache_dir else None
    path = cache / f"point-{_cache_key(setup, lam)}.npz" if cache else None
    if path is not None and path.exists():
        with np.load(path) as z:
            fb = FlatBandSet(grid=setup.grid, basis=setup.basis, vecs=z["vecs"], h0=z["h0"],
                             remote_gap=float(z["remote_gap"]), gauge="sublattice", meta={"model": model.describe()})
            ff = FormFactorTensor(grid=setup.grid, gint=z["gint"], gvecs=z["gvecs"], rho=z["rho"],
                                  gauge="sublattice")
            return InteractingModel(fb, ff, setup.pot, hsub=z["hsub"])
    bands = compute_flat_bands(model, setup.grid)
    gu = scdm_gauge(bands, setup.columns)
    fs = bands.rotate(gu.U, "sublattice")
    ff = form_factors(fs, cfg.interaction.ff_cutoff)
    im = InteractingModel(fs, ff, setup.pot)
    if path is not None:
        cache.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(".tmp.npz")
        np.savez(tmp, vecs=fs.vecs, h0=fs.h0, remote_gap=fs.remote_gap, gint=ff.gint, gvecs=ff.gvecs,
                 rho=ff.rho, hsub=im.hsub)
        os.replace(tmp, path)
    return im


# --------------------------------------------------------------------------
# sweeps
# --------------------------------------------------------------------------

@dataclass
class SweepRow:
    """Outcome of one SCF run (energies in meV per moiré site)."""

    lam: float
    init: str
    energy_per_site: float
    delta_e: float
    gap: float
    O_c2zt: float
    O_nuxT: float
    O_nuyT: float
    iterations: int
    converged: bool
    error: str = ""
    e_ed_per_site: float = float("nan")
    e_corr_per_site: float = float("nan")


CSV_COLUMNS = ("alpha_or_kappa", "init", "energy_per_site", "delta_e", "gap", "O_c2zt", "O_nuxT", "O_nuyT",
               "iterations", "converged", "error", "e_ed_per_site", "e_corr_per_site")


def _fmt(x) -> str:
    if isinstance(x, bool):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return "nan" if not np.isfinite(x) else f"{float(x):.10f}"
    return str(x)


@dataclass
class PointResult:
    lam: float
    rows: list
    states: dict
    remote_gap: float = float("nan")


def run_point(setup: Setup, lam: float, warm: dict | None = None) -> PointResult:
    """SCF from every configured initial state at one interpolation value.

    Flat-band or solver failures are recorded in the rows instead of raised.
    """
    cfg = setup.cfg
    nk = setup.grid.nk
    try:
        im = interacting_model(setup, lam)
    except (BandGapError, np.linalg.LinAlgError) as exc:
        rows = [SweepRow(float(lam), name, *([float("nan")] * 6), 0, False, error=type(exc).__name__)
                for name in cfg.inits]
        log.warning("lambda=%.4f skipped: %s", lam, exc)
        return PointResult(float(lam), rows, {})
    sewing = {s: sewing_matrix(im.bands, s) for s in ("C2zT", "nuxT", "nuyT")}
    rows, states = [], {}
    for name in cfg.inits:
        init = warm.get(name) if warm else None
        init = init if init is not None else candidate_state(name, cfg.phi, nk)
        s = cfg.scf
        P, rep = scf_solve(im, init, max_iter=s.max_iter, tol=s.tol, energy_tol=s.energy_tol, mixing=s.mixing,
                           diis=s.diis)
        o = order_parameters(P, sewing)
        rows.append(SweepRow(float(lam), name, rep.energy_per_site, 0.0, rep.homo_lumo_gap, o["C2zT"], o["nuxT"],
                             o["nuyT"], rep.iterations, rep.converged,
                             error="" if rep.converged else "not_converged"))
        states[name] = P
    if cfg.flags.ed:
        _attach_ed(im, rows)
    return PointResult(float(lam), rows, states, im.bands.remote_gap)


def _attach_ed(im: InteractingModel, rows: list) -> None:
    from .ed import DimensionError, ground_state, problem_from_model
    try:
        res = ground_state(problem_from_model(im))
    except DimensionError as exc:
        log.warning("ED skipped: %s", exc)
        return
    e_hf = min((r.energy_per_site for r in rows if r.converged), default=float("nan"))
    for r in rows:
        r.e_ed_per_site = res.energy_per_site
        r.e_corr_per_site = res.energy_per_site - e_hf


def _fill_delta(rows: list) -> None:
    ok = [r.energy_per_site for r in rows if np.isfinite(r.energy_per_site)]
    ref = min(ok) if ok else float("nan")
    for r in rows:
        r.delta_e = max(r.energy_per_site - ref, 0.0) if np.isfinite(r.energy_per_site) else float("nan")


def _point_job(args):
    cfg, lam = args
    return run_point(prepare(cfg), lam)


@dataclass
class SweepResult:
    """Rows sorted by ``(lam, init)``, converged 1-RDMs and the run manifest."""

    rows: list
    states: dict
    manifest: dict

    def column(self, init: str, name: str) -> tuple[np.ndarray, np.ndarray]:
        sel = [r for r in self.rows if r.init == init]
        return np.array([r.lam for r in sel]), np.array([getattr(r, name) for r in sel], dtype=float)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([f"# schema {SWEEP_SCHEMA}"])
        w.writerow(CSV_COLUMNS)
        for r in self.rows:
            vals = dataclasses.astuple(r)
            w.writerow([_fmt(v) for v in vals])
        return buf.getvalue()

    def write(self, outdir) -> dict:
        """Write ``sweep.csv``, the converged 1-RDMs and ``manifest.json``; return the manifest."""
        out = Path(outdir)
        out.mkdir(parents=True, exist_ok=True)
        text = self.to_csv()
        (out / "sweep.csv").write_text(text)
        states_doc = {f"{lam:.6f}/{name}": P.to_dict() for (lam, name), P in sorted(self.states.items())}
        (out / "states.json").write_text(json.dumps(states_doc))
        self.manifest["outputs"] = {"sweep.csv": hashlib.sha256(text.encode()).hexdigest()}
        (out / "manifest.json").write_text(json.dumps(self.manifest, indent=2, sort_keys=True))
        return self.manifest


def _manifest(cfg: RunConfig, setup: Setup, gaps: dict) -> dict:
    import scipy
    return {"format": "tbghf.manifest", "version": 1, "config": cfg.to_dict(),
            "resolved": {"w1": setup.w1, "scdm_columns": list(setup.columns), "lambdas": cfg.lambdas.tolist(),
                         "remote_gap": {f"{k:.6f}": v for k, v in sorted(gaps.items())}},
            "markers": {"physical_ratio": PHYSICAL_KAPPA} if cfg.model.family == "bm" else {},
            "software": {"tbghf": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                         "python": platform.python_version()},
            "config_hash": hashlib.sha256(json.dumps(cfg.to_dict(), sort_keys=True).encode()).hexdigest()}


def run_sweep(cfg: RunConfig, progress=None) -> SweepResult:
    """Run every ``(lam, init)`` pair of ``cfg``.

    Cold starts use the idealized candidate states; ``flags.warm_start``
    starts each lambda from the previous lambda's converged state of the same
    initialization and runs sequentially.  ``progress`` is called with each
    finished :class:`PointResult`.
    """
    cfg = _apply_env(cfg)
    setup = prepare(cfg)
    lams = cfg.lambdas
    results = []
    if cfg.flags.warm_start or cfg.flags.workers == 1:
        warm = None
        for lam in lams:
            res = run_point(setup, lam, warm if cfg.flags.warm_start else None)
            if res.states:
                warm = res.states
            results.append(res)
            if progress:
                progress(res)
    else:
        with ProcessPoolExecutor(max_workers=cfg.flags.workers) as pool:
            for res in pool.map(_point_job, [(cfg, lam) for lam in lams]):
                results.append(res)
                if progress:
                    progress(res)
    rows, states, gaps = [], {}, {}
    for res in results:
        _fill_delta(res.rows)
        rows.extend(sorted(res.rows, key=lambda r: r.init))
        states.update({(res.lam, k): v for k, v in res.states.items()})
        gaps[res.lam] = res.remote_gap
    rows.sort(key=lambda r: (r.lam, r.init))
    return SweepResult(rows, states, _manifest(cfg, setup, gaps))


# --------------------------------------------------------------------------
# analysis
# --------------------------------------------------------------------------

@dataclass
class Transition:
    """Crossings of an order parameter through ``threshold`` along lambda."""

    crossings: list
    threshold: float

    @property
    def lam_star(self) -> float | None:
        return self.crossings[0] if self.crossings else None

    @property
    def multiple(self) -> bool:
        return len(self.crossings) > 1


def detect_transition(rows, init: str | None = None, column: str = "O_c2zt", threshold: float = 0.5) -> Transition:
    """Midpoints of adjacent lambda pairs where ``column`` crosses ``threshold``.

    ``rows`` are :class:`SweepRow` objects (filtered to ``init`` when given)
    or ``(lam, value)`` pairs.  Unconverged or failed rows are skipped.
    """
    pts = []
    for r in rows:
        if isinstance(r, SweepRow):
            if (init is not None and r.init != init) or not r.converged:
                continue
            pts.append((r.lam, getattr(r, column)))
        else:
            pts.append((float(r[0]), float(r[1])))
    pts.sort()
    crossings = []
    for (l0, v0), (l1, v1) in zip(pts, pts[1:]):
        if (v0 - threshold) * (v1 - threshold) < 0:
            crossings.append(0.5 * (l0 + l1))
    return Transition(crossings, threshold)


def post_transition_defect(P) -> float:
    """Largest deviation of ``P(k)`` from ``1/2 [[1,-1],[-1,1]]`` in each valley block."""
    P = P.P if isinstance(P, OneRdm) else np.asarray(P)
    target = np.kron(np.eye(2), POST_TRANSITION_BLOCK)
    return float(np.abs(P - target[None]).max())
