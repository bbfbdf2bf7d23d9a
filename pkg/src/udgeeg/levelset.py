"""Level-set geometry: analytic functions, Q1 nodal fields and domain algebra."""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .grid import BoundingBox, FundamentalMesh, snap_unit, trilinear_weights

AnalyticLevelSet = Callable[[np.ndarray], np.ndarray]

_HEADER_TAG = "UDGLS"


def sphere_level_set(center, radius: float) -> AnalyticLevelSet:
    """x -> |x - center| - radius (negative inside)."""
    if not radius > 0:
        raise ValueError(f"radius must be positive, got {radius}")
    c = np.asarray(center, dtype=float)

    def phi(x):
        x = np.asarray(x, dtype=float)
        return np.linalg.norm(x - c, axis=-1) - radius

    return phi


@dataclass(frozen=True, eq=False)
class LevelSetField:
    """Nodal values of a Q1 level-set function on the fundamental mesh."""

    mesh: FundamentalMesh
    values: np.ndarray  # shape (n+1, n+1, n+1), indexed [i, j, k]
    name: str = ""

    def __post_init__(self):
        m = self.mesh.n + 1
        v = np.asarray(self.values, dtype=float)
        if v.size != m**3:
            raise ValueError(f"expected {m**3} nodal values, got {v.size}")
        v = v.reshape(m, m, m).copy()
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    @property
    def nodal_values(self) -> np.ndarray:
        return self.values.reshape(-1)

    def cell_values(self, cells) -> np.ndarray:
        """Nodal values of the 8 corners of each cell, shape (..., 8)."""
        return self.nodal_values[self.mesh.cell_nodes(cells)]

    def evaluate_many(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        cells, inside = self.mesh.locate(x)
        if not np.all(inside):
            raise ValueError("points outside the bounding box")
        xi = snap_unit((x - self.mesh.cell_lo(cells)) / self.mesh.edge)
        return np.einsum("pq,pq->p", trilinear_weights(xi), self.cell_values(cells))


def discretize(phi: AnalyticLevelSet, mesh: FundamentalMesh, name: str = "") -> LevelSetField:
    values = np.asarray(phi(mesh.node_coordinates()), dtype=float)
    if not np.all(np.isfinite(values)):
        raise ValueError("level-set function is not finite at every node")
    return LevelSetField(mesh, values, name)


def evaluate(field: LevelSetField, x) -> float:
    return float(field.evaluate_many(np.asarray(x, dtype=float)[None, :])[0])


# domains -----------------------------------------------------------------------

@dataclass(frozen=True)
class Domain:
    name: str
    patterns: tuple[tuple[tuple[int, int], ...], ...]  # ((level_set, sign), ...) per pattern
    conductivity: np.ndarray

    def matches(self, signs: Sequence[int]) -> bool:
        return any(all(signs[i] == s for i, s in pat) for pat in self.patterns)


class DomainSpec:
    """Tissue domains as unions of sign patterns over level sets.

    Every full sign vector maps to at most one domain; vectors matching no
    domain lie outside the conductor.  Signs are +1/-1 (zero counts as -1).
    """

    def __init__(self, level_sets: Sequence[str], domains: Sequence[Domain]):
        self.level_sets = tuple(level_sets)
        self.domains = tuple(domains)
        L = len(self.level_sets)
        if L < 1:
            raise ValueError("need at least one level set")
        for d in self.domains:
            sig = np.asarray(d.conductivity, dtype=float)
            if sig.shape != (3, 3) or not np.array_equal(sig, sig.T):
                raise ValueError(f"conductivity of {d.name!r} must be a symmetric 3x3 tensor")
            if np.linalg.eigvalsh(sig).min() <= 0:
                raise ValueError(f"conductivity of {d.name!r} is not positive definite")
            for pat in d.patterns:
                for i, s in pat:
                    if not 0 <= i < L or s not in (-1, 1):
                        raise ValueError(f"bad pattern entry ({i}, {s}) in {d.name!r}")
        table = np.full(1 << L, -1, dtype=np.int64)
        for bits in range(1 << L):
            signs = [1 if bits >> i & 1 else -1 for i in range(L)]
            hits = [j for j, d in enumerate(self.domains) if d.matches(signs)]
            if len(hits) > 1:
                names = [self.domains[j].name for j in hits]
                raise ValueError(f"sign pattern {signs} belongs to several domains {names}")
            if hits:
                table[bits] = hits[0]
        table.flags.writeable = False
        self.table = table
        self.sigma = np.array([np.asarray(d.conductivity, dtype=float) for d in self.domains])

    @classmethod
    def create(cls, level_sets: Sequence[str], domains) -> "DomainSpec":
        """Build from ``(name, [{level_set_name: '-'|'+'}...], sigma)`` records.

        ``sigma`` may be a scalar (isotropic) or a 3x3 tensor.
        """
        index = {name: i for i, name in enumerate(level_sets)}
        out = []
        for name, patterns, sigma in domains:
            pats = []
            for pat in patterns:
                entries = []
                for ls, s in pat.items():
                    sign = {"-": -1, "+": 1, -1: -1, 1: 1}[s]
                    entries.append((index[ls], sign))
                pats.append(tuple(sorted(entries)))
            sig = np.asarray(sigma, dtype=float)
            if sig.ndim == 0:
                sig = float(sig) * np.eye(3)
            out.append(Domain(name, tuple(pats), sig))
        return cls(level_sets, out)

    @property
    def n_level_sets(self) -> int:
        return len(self.level_sets)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(d.name for d in self.domains)

    def index(self, name: str) -> int:
        return self.names.index(name)

    def domain_of_bits(self, bits) -> np.ndarray:
        return self.table[np.asarray(bits, dtype=np.int64)]

    def domain_of_values(self, values) -> np.ndarray:
        """Domain index (-1 for none) from level-set values, shape (..., L)."""
        v = np.asarray(values, dtype=float)
        bits = np.zeros(v.shape[:-1], dtype=np.int64)
        for i in range(v.shape[-1]):
            bits |= (v[..., i] > 0).astype(np.int64) << i
        return self.table[bits]


def four_sphere_domains(radii=(92.0, 86.0, 80.0, 78.0),
                        sigma=(0.43, 0.01, 1.79, 0.33)) -> DomainSpec:
    """Nested skin/skull/csf/brain shells.

    Each domain carries the full chain of enclosing constraints so that the
    sign patterns are pairwise contradictory.
    """
    names = ("skin", "skull", "csf", "brain")
    ls = tuple(names)
    domains = [
        ("skin", [{"skin": "-", "skull": "+"}], sigma[0]),
        ("skull", [{"skin": "-", "skull": "-", "csf": "+"}], sigma[1]),
        ("csf", [{"skin": "-", "skull": "-", "csf": "-", "brain": "+"}], sigma[2]),
        ("brain", [{"skin": "-", "skull": "-", "csf": "-", "brain": "-"}], sigma[3]),
    ]
    return DomainSpec.create(ls, domains)


def four_sphere_fields(mesh: FundamentalMesh, radii=(92.0, 86.0, 80.0, 78.0), center=(0.0, 0.0, 0.0)):
    names = ("skin", "skull", "csf", "brain")
    return [discretize(sphere_level_set(center, r), mesh, name) for r, name in zip(radii, names)]


def _check_same_mesh(fields: Sequence[LevelSetField]):
    if not fields:
        raise ValueError("no level-set fields given")
    m0 = fields[0].mesh
    for f in fields[1:]:
        if f.mesh is not m0:
            raise ValueError("level-set fields live on different meshes")
    return m0


def classify_vertex_pattern(fields: Sequence[LevelSetField], spec: DomainSpec, cell: int) -> frozenset[int]:
    """Domains whose sign pattern is achievable in the cell given its nodal signs.

    A level set with only non-positive nodal values is non-positive in the
    whole cell (Q1 is a convex combination), likewise for positive values, so
    the result is a superset of the domains actually present.
    """
    _check_same_mesh(fields)
    if len(fields) != spec.n_level_sets:
        raise ValueError("number of fields does not match the domain spec")
    options = []
    for f in fields:
        v = f.cell_values(cell)
        opts = []
        if np.any(v <= 0):
            opts.append(-1)
        if np.any(v > 0):
            opts.append(1)
        options.append(opts)
    present = set()
    for signs in itertools.product(*options):
        bits = sum(1 << i for i, s in enumerate(signs) if s > 0)
        d = spec.table[bits]
        if d >= 0:
            present.add(int(d))
    return frozenset(present)


# file format -----------------------------------------------------------------------

def write_level_set_volume(path, field: LevelSetField) -> None:
    """Header line then little-endian float64 values, x varying fastest."""
    mesh = field.mesh
    m = mesh.n + 1
    lo, hi = mesh.box.lo, mesh.box.hi
    header = f"{_HEADER_TAG} {m} {m} {m} " + " ".join(repr(float(v)) for v in (*lo, *hi)) + "\n"
    data = np.ascontiguousarray(field.values.transpose(2, 1, 0)).astype("<f8")
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(data.tobytes())


def read_level_set_volume(path) -> tuple[np.ndarray, BoundingBox]:
    """Raw nodal array indexed [i, j, k] and its box."""
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise ValueError("missing header line")
    parts = raw[:nl].decode("ascii", errors="replace").split()
    if len(parts) != 10 or parts[0] != _HEADER_TAG:
        raise ValueError(f"malformed level-set header: {raw[:nl]!r}")
    try:
        nx, ny, nz = (int(p) for p in parts[1:4])
        bounds = [float(p) for p in parts[4:10]]
    except ValueError as exc:
        raise ValueError(f"malformed level-set header: {raw[:nl]!r}") from exc
    if min(nx, ny, nz) < 2:
        raise ValueError("level-set grid needs at least 2 nodes per axis")
    data = np.frombuffer(raw[nl + 1:], dtype="<f8")
    if data.size != nx * ny * nz:
        raise ValueError(f"expected {nx * ny * nz} values, found {data.size}")
    vals = data.reshape(nz, ny, nx).transpose(2, 1, 0).astype(float)
    return vals, BoundingBox(tuple(bounds[:3]), tuple(bounds[3:]))


def load_level_set_volume(path, mesh: FundamentalMesh | None = None, name: str = "") -> LevelSetField:
    """Load a level-set volume, optionally resampled onto ``mesh``.

    The file grid must coincide with the mesh nodes, be an integer refinement
    of them (values are sampled), or an integer coarsening (values are
    trilinearly interpolated).
    """
    vals, box = read_level_set_volume(path)
    if mesh is None:
        nx, ny, nz = vals.shape
        if not nx == ny == nz:
            raise ValueError("file grid is not cubic; pass a target mesh")
        return LevelSetField(FundamentalMesh(box, nx - 1), vals, name)
    if not (np.allclose(box.lo, mesh.box.lo, rtol=0, atol=1e-9 * mesh.h)
            and np.allclose(box.hi, mesh.box.hi, rtol=0, atol=1e-9 * mesh.h)):
        raise ValueError("file bounding box differs from the mesh box")
    cells = np.array(vals.shape) - 1
    n = mesh.n
    if np.all(cells == n):
        return LevelSetField(mesh, vals, name)
    if np.all(cells % n == 0):
        r = cells // n
        return LevelSetField(mesh, vals[::r[0], ::r[1], ::r[2]], name)
    if np.all(n % cells == 0):
        coarse_mesh = _AxisGrid(box, cells)
        return LevelSetField(mesh, coarse_mesh.interpolate(vals, mesh.node_coordinates()), name)
    raise ValueError(f"file grid {tuple(cells)} cells is not compatible with {n} cells per axis")


class _AxisGrid:
    """Possibly anisotropic node grid used only for coarse-file interpolation."""

    def __init__(self, box: BoundingBox, cells):
        self.lo = np.array(box.lo)
        self.cells = np.asarray(cells)
        self.edge = (np.array(box.hi) - self.lo) / self.cells

    def interpolate(self, vals, x):
        t = (x - self.lo) / self.edge
        ijk = np.clip(np.floor(t).astype(np.int64), 0, self.cells - 1)
        xi = t - ijk
        w = trilinear_weights(xi)
        out = np.zeros(len(x))
        for q in range(8):
            a, b, c = q & 1, q >> 1 & 1, q >> 2 & 1
            out += w[:, q] * vals[ijk[:, 0] + a, ijk[:, 1] + b, ijk[:, 2] + c]
        return out
