"""Sphere-model verification studies: sampling, error measures and reports.

A study builds the discrete head model (unfitted cut cells or voxel
labelling), computes the transfer matrix for a spherical electrode layout and
compares the numerical electrode potentials of sampled dipoles with the
quasi-analytic multilayer-sphere solution.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .cutcell import CutMesh, build_cut_mesh, build_voxel_mesh
from .dg import AssemblyParams, assemble_system
from .grid import BoundingBox, build_grid
from .levelset import DomainSpec, four_sphere_domains, four_sphere_fields, load_level_set_volume
from .solver import SolverConfig, SolverLog
from .source import DipoleSource, SourcePlacementError, assemble_dipole_rhs
from .sphere import SeriesControl, SphereModel, analytic_potential, four_sphere_model, surface_factors
from .transfer import ElectrodeSet, build_restriction, compute_transfer, forward

log = logging.getLogger(__name__)

MODES = ("udg", "voxel-dg")
ORIENTATIONS = ("radial", "tangential")
BOX_EDGE = 194.08
ECC_MIN, ECC_MAX = 0.1666, 0.9939


def eccentricity_ladder(e_min: float = ECC_MIN, e_max: float = ECC_MAX, count: int = 10) -> np.ndarray:
    """Eccentricities whose distances to the surface form a geometric sequence."""
    if not 0.0 < e_min < e_max < 1.0:
        raise ValueError("need 0 < e_min < e_max < 1")
    if count < 2:
        raise ValueError("count must be >= 2")
    rho = ((1.0 - e_max) / (1.0 - e_min)) ** (1.0 / (count - 1))
    e = 1.0 - (1.0 - e_min) * rho ** np.arange(count)
    e[0], e[-1] = e_min, e_max
    return e


def _rng(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed) & (2**64 - 1), *keys]))


def sample_dipoles(seed: int, ecc: float, count: int, orientation: str, inner_radius: float,
                   center=(0.0, 0.0, 0.0), stream: int = 0) -> list[DipoleSource]:
    """Unit dipoles uniformly distributed on the sphere of radius ecc * inner_radius."""
    if orientation not in ORIENTATIONS:
        raise ValueError(f"orientation must be one of {ORIENTATIONS}")
    if not 0.0 <= ecc < 1.0:
        raise ValueError("eccentricity must lie in [0, 1)")
    rng = _rng(seed, stream, ORIENTATIONS.index(orientation))
    d = rng.standard_normal((count, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    if orientation == "radial":
        m = d.copy()
    else:
        t = rng.standard_normal((count, 3))
        t -= np.sum(t * d, axis=1, keepdims=True) * d
        m = t / np.linalg.norm(t, axis=1, keepdims=True)
        # one more projection removes the rounding left by the normalisation
        m -= np.sum(m * d, axis=1, keepdims=True) * d
        m /= np.linalg.norm(m, axis=1, keepdims=True)
    c = np.asarray(center, dtype=float)
    return [DipoleSource(c + ecc * inner_radius * d[k], m[k]) for k in range(count)]


def generate_electrodes(count: int = 200, radius: float = 92.0, center=(0.0, 0.0, 0.0)) -> ElectrodeSet:
    """Spherical Fibonacci lattice; the first point is the reference."""
    if count < 2:
        raise ValueError("need at least 2 electrodes (reference included)")
    i = np.arange(count)
    z = 1.0 - (2.0 * i + 1.0) / count
    phi = i * np.pi * (3.0 - np.sqrt(5.0))
    s = np.sqrt(1.0 - z * z)
    u = np.stack([s * np.cos(phi), s * np.sin(phi), z], axis=1)
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    p = np.asarray(center, dtype=float) + radius * u
    return ElectrodeSet(p[0], p[1:])


def rdm_mag(u_ana, u_num) -> tuple[float, float]:
    a = np.asarray(u_ana, dtype=float)
    b = np.asarray(u_num, dtype=float)
    if a.shape != b.shape:
        raise ValueError("potential vectors differ in length")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("zero potential vector")
    rdm = 50.0 * np.linalg.norm(a / na - b / nb)
    mag = 100.0 * (nb / na - 1.0)
    return float(min(rdm, 100.0)), float(mag)


def mean_referenced(u_electrodes) -> np.ndarray:
    """Prepend the reference (zero) and subtract the mean over all points."""
    u = np.concatenate([[0.0], np.asarray(u_electrodes, dtype=float)])
    return u - u.mean()


def statistics(values) -> dict:
    """Boxplot statistics with linearly interpolated quartiles."""
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        raise ValueError("empty sample")
    q = np.percentile(v, [0, 25, 50, 75, 100], method="linear")
    return {
        "n": int(v.size), "min": float(q[0]), "q1": float(q[1]), "median": float(q[2]),
        "q3": float(q[3]), "max": float(q[4]), "iqr": float(q[3] - q[1]), "tr": float(q[4] - q[0]),
    }


# configuration -----------------------------------------------------------------

@dataclass
class StudyConfig:
    mode: str = "udg"
    cells_per_dim: int = 16
    box_edge: float = BOX_EDGE
    center: tuple = (0.0, 0.0, 0.0)
    # four-sphere level sets sampled analytically, or files (skin, skull, csf, brain)
    level_set_files: tuple = ()
    eccentricities: tuple = tuple(float(e) for e in eccentricity_ladder())
    dipoles_per_ecc: int = 100
    orientations: tuple = ORIENTATIONS
    electrode_count: int = 200
    electrode_radius: float = 92.0
    seed: int = 20140801
    theta: float = 1e-6
    refine: int = 0
    solver: SolverConfig = field(default_factory=SolverConfig)
    assembly: AssemblyParams = field(default_factory=AssemblyParams)
    series: SeriesControl = field(default_factory=SeriesControl)
    output_dir: str = "study_output"
    store_transfer: str = ""

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.cells_per_dim < 1:
            raise ValueError("cells_per_dim must be >= 1")
        self.center = tuple(float(c) for c in self.center)
        self.level_set_files = tuple(str(p) for p in self.level_set_files)
        self.eccentricities = tuple(float(e) for e in self.eccentricities)
        if not self.eccentricities or any(not 0.0 < e < 1.0 for e in self.eccentricities):
            raise ValueError("eccentricities must lie in (0, 1)")
        self.orientations = tuple(self.orientations)
        if any(o not in ORIENTATIONS for o in self.orientations):
            raise ValueError(f"orientations must be among {ORIENTATIONS}")
        if self.dipoles_per_ecc < 1 or self.electrode_count < 2:
            raise ValueError("need at least one dipole and two electrodes")
        if self.level_set_files and len(self.level_set_files) != 4:
            raise ValueError("level_set_files needs the skin, skull, csf and brain level sets")
        self.seed = int(self.seed)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for k in ("center", "level_set_files", "eccentricities", "orientations"):
            d[k] = list(d[k])
        return d

    def physics_dict(self) -> dict:
        """Configuration without output locations (what determines the results)."""
        d = self.to_dict()
        d.pop("output_dir")
        d.pop("store_transfer")
        return d

    def hash(self) -> str:
        d = self.physics_dict()
        text = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> "StudyConfig":
        d = dict(d or {})
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown configuration keys: {sorted(unknown)}")
        nested = {"solver": SolverConfig, "assembly": AssemblyParams, "series": SeriesControl}
        for key, typ in nested.items():
            if key in d and isinstance(d[key], dict):
                d[key] = typ(**d[key])
        return cls(**d)

    @classmethod
    def load(cls, path) -> "StudyConfig":
        with open(Path(path)) as fh:
            return cls.from_dict(yaml.safe_load(fh))

    def updated(self, **changes) -> "StudyConfig":
        d = self.to_dict()
        for k, v in changes.items():
            if k in ("solver", "assembly", "series") and isinstance(v, dict):
                d[k] = {**d[k], **v}
            else:
                d[k] = v
        return StudyConfig.from_dict(d)


# model construction ------------------------------------------------------------

@dataclass
class DiscreteModel:
    cm: CutMesh
    spec: DomainSpec
    sphere: SphereModel
    build_seconds: float


def build_model(cfg: StudyConfig) -> DiscreteModel:
    t0 = time.perf_counter()
    mesh = build_grid(BoundingBox.cube(cfg.center, cfg.box_edge), cfg.cells_per_dim)
    spec = four_sphere_domains()
    if cfg.level_set_files:
        fields = [load_level_set_volume(p, mesh, name) for p, name in
                  zip(cfg.level_set_files, ("skin", "skull", "csf", "brain"))]
    else:
        fields = four_sphere_fields(mesh, center=cfg.center)
    if cfg.mode == "udg":
        cm = build_cut_mesh(mesh, fields, spec, theta=cfg.theta, refine=cfg.refine)
    else:
        cm = build_voxel_mesh(mesh, fields, spec)
    return DiscreteModel(cm, spec, four_sphere_model(cfg.center), time.perf_counter() - t0)


@dataclass
class StudyResult:
    rows: list
    summary: dict
    solver_log: SolverLog


def run_study(cfg: StudyConfig, write: bool = True) -> StudyResult:
    model = build_model(cfg)
    cm = model.cm
    brain = model.spec.index("brain")
    skin = model.spec.index("skin")
    log.info("model: %s", cm.census())

    t0 = time.perf_counter()
    M = assemble_system(cm, cfg.assembly)
    t_asm = time.perf_counter() - t0

    es = generate_electrodes(cfg.electrode_count, cfg.electrode_radius, cfg.center)
    R = build_restriction(cm, es, skin)
    brain_blocks = np.flatnonzero(cm.domain == brain)
    slog = SolverLog()
    t0 = time.perf_counter()
    T = compute_transfer(M, R, cfg.solver, keep_blocks=brain_blocks, log=slog)
    t_tr = time.perf_counter() - t0
    log.info("transfer: %d solves, %d..%d iterations, %.1f s", len(es), T.iterations.min(),
             T.iterations.max(), t_tr)
    if cfg.store_transfer:
        from .transfer import write_transfer
        write_transfer(cfg.store_transfer, T)

    factors = surface_factors(model.sphere, cfg.series.max_degree)
    # voxel labelling misplaces the boundary by up to h/2; such dipoles move to the
    # nearest brain voxel and are counted.  Unfitted placement must be exact.
    relocate = cfg.mode == "voxel-dg"
    rows = []
    failures = []
    max_its = int(T.iterations.max()) if len(T.iterations) else 0
    for ie, ecc in enumerate(cfg.eccentricities):
        for orient in cfg.orientations:
            dips = sample_dipoles(cfg.seed, ecc, cfg.dipoles_per_ecc, orient,
                                  model.sphere.inner_radius, cfg.center, stream=ie)
            for k, d in enumerate(dips):
                try:
                    f = assemble_dipole_rhs(cm, d, domain=brain, allow_nearest=relocate)
                except SourcePlacementError as exc:
                    failures.append((ecc, orient, k, str(exc)))
                    continue
                u_num = mean_referenced(forward(T, f))
                u_ana = mean_referenced(analytic_potential(model.sphere, d, es, cfg.series, factors))
                rdm, mag = rdm_mag(u_ana, u_num)
                rows.append({
                    "eccentricity": ecc, "orientation": orient, "dipole": k,
                    "x": d.position[0], "y": d.position[1], "z": d.position[2],
                    "mx": d.moment[0], "my": d.moment[1], "mz": d.moment[2],
                    "rdm": rdm, "mag": mag, "iterations": max_its, "relocated": int(f.relocated),
                })

    groups = []
    for ecc in cfg.eccentricities:
        for orient in cfg.orientations:
            sel = [r for r in rows if r["eccentricity"] == ecc and r["orientation"] == orient]
            if not sel:
                continue
            groups.append({
                "eccentricity": ecc, "orientation": orient,
                "relocated": int(sum(r["relocated"] for r in sel)),
                "rdm": statistics([r["rdm"] for r in sel]),
                "mag": statistics([r["mag"] for r in sel]),
            })
    census = cm.census()
    summary = {
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
        "config": cfg.physics_dict(),
        "mesh": {k: v for k, v in census.items()},
        "electrodes": {"count": cfg.electrode_count, "projected": int(R.projected.sum())},
        "transfer": {
            "solves": int(len(T.iterations)),
            "iterations_min": int(T.iterations.min()), "iterations_max": max_its,
            "max_relative_residual": float(T.residuals.max()),
        },
        "placement_failures": len(failures),
        "relocated": int(sum(r["relocated"] for r in rows)),
        "groups": groups,
    }
    slog.add("assembly", 0, 0.0, t_asm, True)
    if write:
        write_outputs(cfg, rows, summary, slog)
    if failures:
        for ecc, orient, k, msg in failures[:10]:
            log.error("placement failed (ecc %.4f, %s, #%d): %s", ecc, orient, k, msg)
        raise SourcePlacementError(f"{len(failures)} dipoles could not be placed")
    return StudyResult(rows, summary, slog)


CSV_COLUMNS = ("eccentricity", "orientation", "dipole", "x", "y", "z", "mx", "my", "mz",
               "rdm", "mag", "iterations", "relocated")


def write_outputs(cfg: StudyConfig, rows: list, summary: dict, slog: SolverLog) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "metrics.csv", "w", newline="") as fh:
        fh.write(f"# config_hash={summary['config_hash']} seed={summary['seed']}\n")
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for r in rows:
            w.writerow([repr(float(r[c])) if isinstance(r[c], float) else r[c] for c in CSV_COLUMNS])
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    slog.write_csv(out / "solver_log.csv")
    return out


def group_statistic(summary: dict, ecc: float, orientation: str, metric: str, stat: str) -> float:
    for g in summary["groups"]:
        if abs(g["eccentricity"] - ecc) < 5e-4 and g["orientation"] == orientation:
            return g[metric][stat]
    raise KeyError(f"no group for eccentricity {ecc} / {orientation}")
