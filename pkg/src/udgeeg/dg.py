"""Symmetric weighted interior penalty assembly on cut cells.

Each cut cell carries the 8 trilinear functions of its parent cell (restricted
to the cut cell, extended polynomially outside).  For a facet with unit
normal ``n`` from cell i to cell j, with ``delta = n^T sigma n`` per side,

    [u] = u_i - u_j,   {sigma grad u} = w_i sigma_i grad u_i + w_j sigma_j grad u_j,
    tau = 2 delta_i delta_j / (delta_i + delta_j),

and the bilinear form is

    sum_E int_E sigma grad u . grad v
      - int_F [u] {sigma grad v}.n + [v] {sigma grad u}.n
      + eta * int_F tau / h_F [u][v].
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .cutcell import CutMesh
from .grid import trilinear_gradients, trilinear_weights
from .quadrature import cube_rule

FLUX_WEIGHTINGS = ("opposite", "own")
FACET_WIDTHS = ("edge", "cut-volume")

# points per chunk during facet assembly (each point carries a 16x16 product)
_POINT_CHUNK = 1 << 16


class LocalBasis:
    """The 8 trilinear shape functions of a cell, corner numbering of the grid module."""

    size = 8

    @staticmethod
    def values(xi) -> np.ndarray:
        return trilinear_weights(xi)

    @staticmethod
    def gradients(xi, edge) -> np.ndarray:
        """Physical gradients, shape (..., 8, 3)."""
        return trilinear_gradients(xi) / np.asarray(edge, dtype=float)


@dataclass(frozen=True)
class AssemblyParams:
    eta: float = 4.0
    quadrature_order: int = 2
    # "opposite": w_i = delta_j / (delta_i + delta_j) (weighted interior penalty literature)
    # "own":      w_i = delta_i / (delta_i + delta_j)
    flux_weighting: str = "opposite"
    # "edge": h_F is the fundamental edge length for every facet
    # "cut-volume": h_F = min(|E_i|, |E_j|) / |F| from the cut-cell geometry
    facet_width: str = "cut-volume"

    def __post_init__(self):
        if not self.eta > 0:
            raise ValueError("penalty factor eta must be positive")
        if int(self.quadrature_order) < 1:
            raise ValueError("quadrature order must be >= 1")
        if self.flux_weighting not in FLUX_WEIGHTINGS:
            raise ValueError(f"flux_weighting must be one of {FLUX_WEIGHTINGS}")
        if self.facet_width not in FACET_WIDTHS:
            raise ValueError(f"facet_width must be one of {FACET_WIDTHS}")


class SparseBlockMatrix:
    """Symmetric block-sparse matrix with 8x8 blocks (BSR, sorted column blocks)."""

    block_size = 8

    def __init__(self, bsr: sp.bsr_matrix):
        if bsr.blocksize != (8, 8):
            raise ValueError("expected 8x8 blocks")
        bsr.sort_indices()
        self.bsr = bsr

    @classmethod
    def from_blocks(cls, n_blocks: int, rows, cols, blocks) -> "SparseBlockMatrix":
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        blocks = np.asarray(blocks, dtype=float).reshape(-1, 8, 8)
        if len(rows) and (rows.min() < 0 or cols.min() < 0 or rows.max() >= n_blocks or cols.max() >= n_blocks):
            raise ValueError("block index out of range")
        o = np.lexsort((cols, rows))
        rows, cols, blocks = rows[o], cols[o], blocks[o]
        if len(rows) > 1 and np.any((rows[1:] == rows[:-1]) & (cols[1:] == cols[:-1])):
            raise ValueError("duplicate blocks")
        indptr = np.searchsorted(rows, np.arange(n_blocks + 1)).astype(np.int64)
        bsr = sp.bsr_matrix((blocks, cols, indptr), shape=(8 * n_blocks, 8 * n_blocks))
        return cls(bsr)

    @classmethod
    def identity(cls, n_blocks: int) -> "SparseBlockMatrix":
        idx = np.arange(n_blocks)
        return cls.from_blocks(n_blocks, idx, idx, np.broadcast_to(np.eye(8), (n_blocks, 8, 8)))

    @property
    def n_blocks(self) -> int:
        return self.bsr.shape[0] // 8

    @property
    def shape(self):
        return self.bsr.shape

    @property
    def indptr(self) -> np.ndarray:
        return self.bsr.indptr

    @property
    def indices(self) -> np.ndarray:
        return self.bsr.indices

    @property
    def data(self) -> np.ndarray:
        return self.bsr.data

    def __matmul__(self, x):
        return self.bsr @ x

    def matvec(self, x) -> np.ndarray:
        return self.bsr @ x

    def toarray(self) -> np.ndarray:
        return self.bsr.toarray()

    def norm_inf(self) -> float:
        return float(abs(self.bsr).sum(axis=1).max())

    def block(self, i: int, j: int) -> np.ndarray | None:
        s, e = self.indptr[i], self.indptr[i + 1]
        k = np.searchsorted(self.indices[s:e], j)
        if k < e - s and self.indices[s + k] == j:
            return self.data[s + k]
        return None

    def block_rows(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_blocks), np.diff(self.indptr))

    def __add__(self, other: "SparseBlockMatrix") -> "SparseBlockMatrix":
        return SparseBlockMatrix((self.bsr + other.bsr).tobsr(blocksize=(8, 8)))

    def write_coo(self, path) -> None:
        """Coordinate text export: ``row col value`` per line, zero-based."""
        coo = self.bsr.tocoo()
        o = np.lexsort((coo.col, coo.row))
        with open(Path(path), "w") as fh:
            for r, c, v in zip(coo.row[o], coo.col[o], coo.data[o]):
                fh.write(f"{r} {c} {v:.17g}\n")


def _check_sigma(sigma: np.ndarray):
    for k, s in enumerate(sigma):
        if not np.array_equal(s, s.T) or np.linalg.eigvalsh(s).min() <= 0:
            raise ValueError(f"conductivity of domain {k} is not symmetric positive definite")


def _volume_blocks(cm: CutMesh, sigma: np.ndarray, order: int) -> np.ndarray:
    """Element stiffness blocks (N, 8, 8)."""
    mesh = cm.mesh
    N = cm.n_cells
    edge = mesh.edge
    out = np.zeros((N, 8, 8))
    # uncut cells share one reference block per domain
    xi, w = cube_rule(order)
    G = LocalBasis.gradients(xi, edge)
    for d in range(len(sigma)):
        sel = cm.full & (cm.domain == d)
        if np.any(sel):
            K = np.einsum("q,qia,ab,qjb->ij", w * mesh.cell_volume, G, sigma[d], G)
            out[sel] = K
    owner, xi, wt = cm.cut_volume_points(order)
    if len(owner):
        step = _POINT_CHUNK * 4
        # chunks end on owner boundaries so every cell is summed in one place
        starts = np.flatnonzero(np.r_[True, owner[1:] != owner[:-1]])
        cells = owner[starts]
        ends = np.r_[starts[1:], len(owner)]
        c0 = 0
        while c0 < len(cells):
            c1 = int(np.searchsorted(starts, starts[c0] + step, side="left"))
            c1 = max(c1, c0 + 1)
            s, e = starts[c0], ends[c1 - 1]
            Gq = LocalBasis.gradients(xi[s:e], edge)
            sg = sigma[cm.domain[owner[s:e]]]
            contrib = np.einsum("q,qia,qab,qjb->qij", wt[s:e], Gq, sg, Gq)
            sums = np.add.reduceat(contrib, starts[c0:c1] - s, axis=0)
            out[cells[c0:c1]] += sums
            c0 = c1
    return out


def _facet_blocks(cm: CutMesh, sigma: np.ndarray, p: AssemblyParams):
    """Per-facet 16x16 consistency and (eta-free) penalty matrices."""
    F = cm.n_facets
    cons = np.zeros((F, 16, 16))
    pen = np.zeros((F, 16, 16))
    if F == 0:
        return cons, pen
    facet, pts, w, nrm = cm.facet_points(p.quadrature_order)
    edge = cm.mesh.edge
    h_facet = facet_widths(cm, p, facet, w)
    starts = np.flatnonzero(np.r_[True, facet[1:] != facet[:-1]])
    fids = facet[starts]
    ends = np.r_[starts[1:], len(facet)]
    c0 = 0
    while c0 < len(fids):
        c1 = max(int(np.searchsorted(starts, starts[c0] + _POINT_CHUNK, side="left")), c0 + 1)
        s, e = starts[c0], ends[c1 - 1]
        f = facet[s:e]
        ci = cm.facet_inside[f]
        cj = cm.facet_outside[f]
        x = pts[s:e]
        n = nrm[s:e]
        xi_i = cm.local_coordinates(ci, x)
        xi_j = cm.local_coordinates(cj, x)
        si = sigma[cm.domain[ci]]
        sj = sigma[cm.domain[cj]]
        sn_i = np.einsum("qab,qb->qa", si, n)
        sn_j = np.einsum("qab,qb->qa", sj, n)
        di = np.einsum("qa,qa->q", n, sn_i)
        dj = np.einsum("qa,qa->q", n, sn_j)
        if p.flux_weighting == "opposite":
            wi, wj = dj / (di + dj), di / (di + dj)
        else:
            wi, wj = di / (di + dj), dj / (di + dj)
        tau = 2.0 * di * dj / (di + dj)
        J = np.concatenate([LocalBasis.values(xi_i), -LocalBasis.values(xi_j)], axis=1)
        Fl = np.concatenate([
            wi[:, None] * np.einsum("qia,qa->qi", LocalBasis.gradients(xi_i, edge), sn_i),
            wj[:, None] * np.einsum("qia,qa->qi", LocalBasis.gradients(xi_j, edge), sn_j),
        ], axis=1)
        wq = w[s:e]
        JF = np.einsum("q,qi,qj->qij", wq, J, Fl)
        c = -(JF + JF.transpose(0, 2, 1))
        pp = np.einsum("q,qi,qj->qij", wq * tau / h_facet[f], J, J)
        rel = starts[c0:c1] - s
        cons[fids[c0:c1]] = np.add.reduceat(c, rel, axis=0)
        pen[fids[c0:c1]] = np.add.reduceat(pp, rel, axis=0)
        c0 = c1
    return cons, pen


def facet_widths(cm: CutMesh, p: AssemblyParams, facet=None, w=None) -> np.ndarray:
    """Penalty length scale h_F per facet."""
    if p.facet_width == "edge":
        return np.full(cm.n_facets, cm.mesh.h)
    if facet is None:
        facet, _, w, _ = cm.facet_points(p.quadrature_order)
    area = np.bincount(facet, weights=w, minlength=cm.n_facets)
    return np.minimum(cm.volume[cm.facet_inside], cm.volume[cm.facet_outside]) / area


def _symmetric_matrix(cm: CutMesh, diag: np.ndarray, fac: np.ndarray) -> SparseBlockMatrix:
    """Assemble cell blocks and per-facet 16x16 blocks; lower blocks mirror the upper ones."""
    N = cm.n_cells
    ci, cj = cm.facet_inside, cm.facet_outside
    D = diag.copy()
    if len(ci):
        # fixed summation order: facets ascending
        np.add.at(D, ci, fac[:, :8, :8])
        np.add.at(D, cj, fac[:, 8:, 8:])
    D = 0.5 * (D + D.transpose(0, 2, 1))
    upper = fac[:, :8, 8:]
    rows = np.concatenate([np.arange(N), ci, cj])
    cols = np.concatenate([np.arange(N), cj, ci])
    blocks = np.concatenate([D, upper, upper.transpose(0, 2, 1)])
    return SparseBlockMatrix.from_blocks(N, rows, cols, blocks)


def assemble_system(cm: CutMesh, p: AssemblyParams | None = None, parts: bool = False):
    """System matrix M = a + J of the cut mesh.

    With ``parts=True`` returns a dict of separately assembled ``volume``,
    ``consistency`` and ``penalty`` matrices as well as their combination
    ``total`` (the penalty part scales exactly with eta).
    """
    p = p or AssemblyParams()
    sigma = np.asarray(cm.spec.sigma, dtype=float)
    _check_sigma(sigma)
    if cm.n_facets and (cm.facet_inside.max() >= cm.n_cells or cm.facet_outside.max() >= cm.n_cells):
        raise ValueError("facet references a missing cut cell")
    vol = _volume_blocks(cm, sigma, p.quadrature_order)
    cons, pen = _facet_blocks(cm, sigma, p)
    pen = p.eta * pen
    total = _symmetric_matrix(cm, vol, cons + pen)
    if not parts:
        return total
    zeros = np.zeros_like(vol)
    return {
        "total": total,
        "volume": _symmetric_matrix(cm, vol, np.zeros_like(cons)),
        "consistency": _symmetric_matrix(cm, zeros, cons),
        "penalty": _symmetric_matrix(cm, zeros, pen),
    }


def constant_vector(cm_or_n, c: float = 1.0) -> np.ndarray:
    """Coefficients of the constant function c (every nodal value equals c)."""
    n = cm_or_n.n_cells if isinstance(cm_or_n, CutMesh) else int(cm_or_n)
    return np.full(8 * n, float(c))


def interpolate(cm: CutMesh, g) -> np.ndarray:
    """Nodal interpolant of g on each cut cell's parent cell corners."""
    from .grid import CORNERS
    lo = cm.mesh.cell_lo(cm.parent)
    corners = lo[:, None, :] + CORNERS[None, :, :] * cm.mesh.edge
    return np.asarray(g(corners.reshape(-1, 3)), dtype=float).reshape(-1)


def evaluate_solution(cm: CutMesh, coeffs, x, domain_hint: int | None = None) -> float:
    """Value of the discrete solution at x.

    Points on shared boundaries take the value of the lowest-index cut cell
    containing them.  Points outside every cut cell use the polynomial
    extension of the nearest cut cell of ``domain_hint``.
    """
    x = np.asarray(x, dtype=float)
    c = cm.locate(x)
    if c is None:
        if domain_hint is None:
            raise ValueError(f"point {x} lies in no cut cell and no domain hint was given")
        c = cm.nearest_cell(x, domain_hint, cm.mesh.h)
        if c is None:
            raise ValueError(f"no cut cell of domain {domain_hint} within one cell width of {x}")
    xi = cm.local_coordinates(c, x)
    coeffs = np.asarray(coeffs, dtype=float)
    return float(LocalBasis.values(xi) @ coeffs[8 * c:8 * c + 8])
