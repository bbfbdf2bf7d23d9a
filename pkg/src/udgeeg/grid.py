"""Structured axis-aligned hexahedral background ("fundamental") mesh.

Cells and nodes are addressed by integer triples ``(i, j, k)`` along x, y, z
and by flat indices in C order (``k`` fastest).  The 8 corners of a cell are
numbered by their bit pattern ``a + 2*b + 4*c`` with ``a, b, c`` the x, y, z
offsets; the trilinear basis uses the same numbering.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# corner offsets, row q = (q & 1, (q >> 1) & 1, (q >> 2) & 1)
CORNERS = np.array([[q & 1, (q >> 1) & 1, (q >> 2) & 1] for q in range(8)], dtype=np.int64)

_SNAP = 1e-12


@dataclass(frozen=True)
class BoundingBox:
    lo: tuple[float, float, float]
    hi: tuple[float, float, float]

    def __post_init__(self):
        lo = tuple(float(v) for v in self.lo)
        hi = tuple(float(v) for v in self.hi)
        if len(lo) != 3 or len(hi) != 3:
            raise ValueError("bounding box corners must be 3-vectors")
        if any(h <= l for l, h in zip(lo, hi)):
            raise ValueError(f"degenerate bounding box lo={lo} hi={hi}")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @classmethod
    def cube(cls, center, edge: float) -> "BoundingBox":
        c = np.asarray(center, dtype=float)
        return cls(tuple(c - edge / 2), tuple(c + edge / 2))

    @property
    def volume(self) -> float:
        return float(np.prod(np.subtract(self.hi, self.lo)))


@dataclass(frozen=True, eq=False)
class FundamentalMesh:
    box: BoundingBox
    n: int

    def __post_init__(self):
        if int(self.n) < 1:
            raise ValueError("cells per dimension must be >= 1")
        object.__setattr__(self, "n", int(self.n))
        lo = np.array(self.box.lo)
        edge = (np.array(self.box.hi) - lo) / self.n
        object.__setattr__(self, "_lo", lo)
        object.__setattr__(self, "_edge", edge)
        lo.flags.writeable = False
        edge.flags.writeable = False

    # geometry ---------------------------------------------------------------
    @property
    def lo(self) -> np.ndarray:
        return self._lo

    @property
    def edge(self) -> np.ndarray:
        return self._edge

    @property
    def h(self) -> float:
        """Characteristic width: the (largest) edge length, not the diagonal."""
        return float(self._edge.max())

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self._edge))

    @property
    def n_cells(self) -> int:
        return self.n**3

    @property
    def n_nodes(self) -> int:
        return (self.n + 1) ** 3

    # indexing ---------------------------------------------------------------
    def cell_index(self, ijk) -> np.ndarray | int:
        ijk = np.asarray(ijk, dtype=np.int64)
        flat = (ijk[..., 0] * self.n + ijk[..., 1]) * self.n + ijk[..., 2]
        return int(flat) if flat.ndim == 0 else flat

    def cell_ijk(self, cell) -> np.ndarray:
        c = np.asarray(cell, dtype=np.int64)
        n = self.n
        return np.stack([c // (n * n), (c // n) % n, c % n], axis=-1)

    def node_index(self, ijk) -> np.ndarray | int:
        ijk = np.asarray(ijk, dtype=np.int64)
        m = self.n + 1
        flat = (ijk[..., 0] * m + ijk[..., 1]) * m + ijk[..., 2]
        return int(flat) if flat.ndim == 0 else flat

    def cell_nodes(self, cell) -> np.ndarray:
        """Flat node indices of the 8 corners, shape (..., 8)."""
        ijk = self.cell_ijk(cell)
        return self.node_index(ijk[..., None, :] + CORNERS)

    def node_coordinates(self, nodes=None) -> np.ndarray:
        """Coordinates of the given flat nodes (all nodes by default)."""
        m = self.n + 1
        if nodes is None:
            nodes = np.arange(m**3)
        nodes = np.asarray(nodes, dtype=np.int64)
        ijk = np.stack([nodes // (m * m), (nodes // m) % m, nodes % m], axis=-1)
        return self._lo + ijk * self._edge

    def cell_lo(self, cell) -> np.ndarray:
        return self._lo + self.cell_ijk(cell) * self._edge

    def cell_centers(self, cells=None) -> np.ndarray:
        if cells is None:
            cells = np.arange(self.n_cells)
        return self.cell_lo(cells) + 0.5 * self._edge

    def face_neighbor(self, cell: int, axis: int, side: int) -> int | None:
        ijk = self.cell_ijk(cell)
        ijk[axis] += 1 if side else -1
        if ijk[axis] < 0 or ijk[axis] >= self.n:
            return None
        return self.cell_index(ijk)

    # point location -----------------------------------------------------------
    def locate(self, x) -> tuple[np.ndarray, np.ndarray]:
        """Vectorised point location.

        Returns ``(cells, inside)``; ``cells`` is clipped into range and only
        meaningful where ``inside`` is true.
        """
        x = np.atleast_2d(np.asarray(x, dtype=float))
        hi = np.array(self.box.hi)
        # node coordinates lo + n * edge may overshoot hi by an ulp
        tol = _SNAP * self._edge
        inside = np.all((x >= self._lo - tol) & (x <= hi + tol), axis=1)
        ijk = np.floor((x - self._lo) / self._edge).astype(np.int64)
        ijk = np.clip(ijk, 0, self.n - 1)
        return self.cell_index(ijk), inside


def build_grid(box: BoundingBox, n: int) -> FundamentalMesh:
    return FundamentalMesh(box, n)


def cell_of_point(mesh: FundamentalMesh, x) -> int | None:
    """Cell whose half-open box contains ``x``; the upper box faces belong to the last cells."""
    cells, inside = mesh.locate(np.asarray(x, dtype=float)[None, :])
    if not inside[0]:
        return None
    return int(cells[0])


def snap_unit(xi) -> np.ndarray:
    """Round reference coordinates within 1e-12 of 0 or 1 onto them.

    The affine map can leave cell corners a few ulps off, which would break
    exact reproduction of nodal values.
    """
    xi = np.where(np.abs(xi) < _SNAP, 0.0, xi)
    return np.where(np.abs(xi - 1.0) < _SNAP, 1.0, xi)


def local_coordinates(mesh: FundamentalMesh, cell: int, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    xi = snap_unit((x - mesh.cell_lo(cell)) / mesh.edge)
    if np.any(xi < 0.0) or np.any(xi > 1.0):
        raise ValueError(f"point {x} is outside cell {cell}")
    return xi


def trilinear_weights(xi) -> np.ndarray:
    """Q1 basis values at reference points, shape (..., 8)."""
    xi = np.asarray(xi, dtype=float)
    x, y, z = xi[..., 0], xi[..., 1], xi[..., 2]
    fx = np.stack([1.0 - x, x], axis=-1)
    fy = np.stack([1.0 - y, y], axis=-1)
    fz = np.stack([1.0 - z, z], axis=-1)
    a, b, c = CORNERS[:, 0], CORNERS[:, 1], CORNERS[:, 2]
    return fx[..., a] * fy[..., b] * fz[..., c]


def trilinear_gradients(xi) -> np.ndarray:
    """Reference gradients of the Q1 basis, shape (..., 8, 3)."""
    xi = np.asarray(xi, dtype=float)
    x, y, z = xi[..., 0], xi[..., 1], xi[..., 2]
    fx = np.stack([1.0 - x, x], axis=-1)
    fy = np.stack([1.0 - y, y], axis=-1)
    fz = np.stack([1.0 - z, z], axis=-1)
    d = np.array([-1.0, 1.0])
    a, b, c = CORNERS[:, 0], CORNERS[:, 1], CORNERS[:, 2]
    gx = d[a] * fy[..., b] * fz[..., c]
    gy = fx[..., a] * d[b] * fz[..., c]
    gz = fx[..., a] * fy[..., b] * d[c]
    return np.stack([gx, gy, gz], axis=-1)
