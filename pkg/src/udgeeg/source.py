"""Partial-integration right-hand side of a mathematical current dipole.

The dipole ``f = M . grad delta(x - x0)`` tested against a basis function
gives ``f_i = -M . grad phi_i(x0)``; only the 8 functions of the cut cell
containing ``x0`` are non-zero.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .cutcell import CutMesh
from .dg import LocalBasis

NUDGE = 1e-8


class SourcePlacementError(ValueError):
    """The dipole position does not lie in any usable cut cell."""


@dataclass(frozen=True)
class DipoleSource:
    position: np.ndarray
    moment: np.ndarray

    def __post_init__(self):
        p = np.array(self.position, dtype=float).reshape(-1)
        m = np.array(self.moment, dtype=float).reshape(-1)
        if p.shape != (3,) or m.shape != (3,):
            raise ValueError("dipole position and moment must be 3-vectors")
        if not (np.all(np.isfinite(p)) and np.all(np.isfinite(m))):
            raise ValueError("dipole position and moment must be finite")
        p.flags.writeable = False
        m.flags.writeable = False
        object.__setattr__(self, "position", p)
        object.__setattr__(self, "moment", m)


@dataclass(frozen=True)
class RhsVector:
    """Right-hand side supported on a single block."""

    size: int
    block: int
    values: np.ndarray  # (8,)
    position: np.ndarray  # point actually used (after a possible nudge)
    relocated: bool = False

    def dense(self) -> np.ndarray:
        out = np.zeros(self.size)
        if self.block >= 0:
            out[8 * self.block:8 * self.block + 8] = self.values
        return out

    def scaled(self, alpha: float) -> "RhsVector":
        return RhsVector(self.size, self.block, alpha * self.values, self.position, self.relocated)


def locate_source(cm: CutMesh, x0, domain: int | None = None, allow_nearest: bool = False):
    """Cut cell used for a dipole at x0: ``(cell, point, relocated)``.

    The lowest-index cut cell whose closure contains x0 is used; when x0
    lies on its boundary the point is moved by ``1e-8 h`` towards that cell's
    centroid.  With ``domain`` the cut cell of that domain in the parent cell
    is used.  ``allow_nearest`` falls back to the nearest cut cell of
    ``domain`` within one cell width (flagged as relocated).
    """
    mesh = cm.mesh
    x0 = np.asarray(x0, dtype=float)
    lo, hi = mesh.lo, np.asarray(mesh.box.hi)
    if not (np.all(x0 > lo) and np.all(x0 < hi)):
        raise SourcePlacementError(f"dipole position {x0} is not strictly inside the bounding box")
    cand = cm.candidates(x0, domain)
    if cand:
        c = cand[0]
        x = x0
        if cm.on_boundary(c, x0):
            d = cm.centroid[c] - x0
            x = x0 + NUDGE * mesh.h * d / np.linalg.norm(d)
        return c, x, False
    if allow_nearest and domain is not None:
        c = cm.nearest_cell(x0, domain, mesh.h)
        if c is not None:
            return c, x0, True
    where = "any cut cell" if domain is None else f"a cut cell of domain {cm.spec.names[domain]!r}"
    raise SourcePlacementError(f"dipole position {x0} does not lie in {where}")


def assemble_dipole_rhs(cm: CutMesh, d: DipoleSource, domain: int | None = None,
                        allow_nearest: bool = False) -> RhsVector:
    if not np.any(d.moment):
        return RhsVector(cm.n_dofs, -1, np.zeros(8), d.position.copy())
    c, x, relocated = locate_source(cm, d.position, domain, allow_nearest)
    xi = cm.local_coordinates(c, x)
    vals = -(LocalBasis.gradients(xi, cm.mesh.edge) @ d.moment)
    return RhsVector(cm.n_dofs, int(c), vals, x, relocated)


def read_dipoles_csv(path) -> list[DipoleSource]:
    """Lines ``x,y,z,mx,my,mz`` (mm, A*mm); a non-numeric first line is a header."""
    out = []
    with open(Path(path), newline="") as fh:
        for k, row in enumerate(csv.reader(fh)):
            row = [v.strip() for v in row if v.strip()]
            if not row or row[0].startswith("#"):
                continue
            try:
                vals = [float(v) for v in row]
            except ValueError:
                if k == 0:
                    continue
                raise ValueError(f"line {k + 1}: not numeric: {row}")
            if len(vals) != 6:
                raise ValueError(f"line {k + 1}: expected 6 values, got {len(vals)}")
            out.append(DipoleSource(vals[:3], vals[3:]))
    return out


def write_dipoles_csv(path, dipoles) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "z", "mx", "my", "mz"])
        for d in dipoles:
            w.writerow([repr(float(v)) for v in (*d.position, *d.moment)])
