"""Electrode restriction, transfer matrices and fast forward evaluation.

Row k of the restriction matrix holds ``phi_i(p0) - phi_i(p_k)``.  Solving
``M T^t = R^t`` once per electrode gives ``T = R M^-1`` and thereby the
referenced electrode values ``T f = u(p0) - u(p_k)`` of any source vector.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .cutcell import CutMesh
from .dg import LocalBasis, SparseBlockMatrix
from .solver import NotConverged, Preconditioner, SolverConfig, SolverLog, build_preconditioner, cg_solve
from .source import RhsVector

_MAGIC = "UDGTM"


@dataclass(frozen=True)
class ElectrodeSet:
    reference: np.ndarray  # (3,)
    electrodes: np.ndarray  # (Ne, 3)

    def __post_init__(self):
        ref = np.array(self.reference, dtype=float).reshape(3)
        el = np.array(self.electrodes, dtype=float).reshape(-1, 3)
        if not (np.all(np.isfinite(ref)) and np.all(np.isfinite(el))):
            raise ValueError("electrode positions must be finite")
        # an electrode equal to the reference is legal (its row is zero)
        if len(np.unique(el, axis=0)) != len(el):
            raise ValueError("electrode positions must be pairwise distinct")
        ref.flags.writeable = False
        el.flags.writeable = False
        object.__setattr__(self, "reference", ref)
        object.__setattr__(self, "electrodes", el)

    def __len__(self) -> int:
        return len(self.electrodes)

    @property
    def all_points(self) -> np.ndarray:
        return np.vstack([self.reference[None, :], self.electrodes])


@dataclass
class RestrictionMatrix:
    matrix: sp.csr_matrix  # (Ne, 8N)
    cells: np.ndarray  # (Ne + 1,) cut cell of p0, p1.. pNe
    points: np.ndarray  # (Ne + 1, 3) evaluation points after projection
    projected: np.ndarray  # (Ne + 1,) bool

    @property
    def shape(self):
        return self.matrix.shape


def electrode_cell(cm: CutMesh, p, surface_domain: int = 0):
    """(cut cell, evaluation point, projected?) of an electrode position.

    Points inside a cut cell are used as they are; others are moved to the
    closest point of the outer boundary of ``surface_domain`` and evaluated
    with the polynomial of the owning cut cell.
    """
    p = np.asarray(p, dtype=float)
    inside = np.all(p >= cm.mesh.lo) and np.all(p <= np.asarray(cm.mesh.box.hi))
    if inside:
        c = cm.locate(p)
        if c is not None:
            return c, p, False
    c, q, dist = cm.project_to_boundary(p, surface_domain)
    if dist > cm.mesh.h:
        raise ValueError(f"electrode {p} is {dist:.4g} mm from the outer surface (more than one cell width)")
    return c, q, True


def build_restriction(cm: CutMesh, es: ElectrodeSet, surface_domain: int = 0) -> RestrictionMatrix:
    pts = es.all_points
    cells = np.empty(len(pts), dtype=np.int64)
    where = np.empty_like(pts)
    proj = np.zeros(len(pts), dtype=bool)
    vals = np.empty((len(pts), 8))
    for k, p in enumerate(pts):
        c, q, pr = electrode_cell(cm, p, surface_domain)
        cells[k], where[k], proj[k] = c, q, pr
        vals[k] = LocalBasis.values(cm.local_coordinates(c, q))
    ne = len(es)
    rows = np.repeat(np.arange(ne), 16)
    cols = np.concatenate([8 * cells[0] + np.arange(8)[None, :].repeat(ne, 0),
                           8 * cells[1:, None] + np.arange(8)[None, :]], axis=1).reshape(-1)
    data = np.concatenate([np.repeat(vals[:1], ne, axis=0), -vals[1:]], axis=1).reshape(-1)
    R = sp.csr_matrix((data, (rows, cols)), shape=(ne, cm.n_dofs))
    R.sum_duplicates()
    R.eliminate_zeros()
    return RestrictionMatrix(R, cells, where, proj)


@dataclass
class TransferMatrix:
    """Rows of T = R M^-1, optionally restricted to some column blocks."""

    data: np.ndarray  # (Ne, 8 * n_kept)
    n_dofs: int
    blocks: np.ndarray | None = None  # kept blocks (sorted), None = all
    iterations: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    residuals: np.ndarray = field(default_factory=lambda: np.zeros(0))
    converged: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))

    @property
    def n_electrodes(self) -> int:
        return self.data.shape[0]

    def block_columns(self, block: int) -> np.ndarray:
        if self.blocks is None:
            return self.data[:, 8 * block:8 * block + 8]
        k = int(np.searchsorted(self.blocks, block))
        if k >= len(self.blocks) or self.blocks[k] != block:
            raise KeyError(f"block {block} was not kept in the transfer matrix")
        return self.data[:, 8 * k:8 * k + 8]

    def dense(self) -> np.ndarray:
        if self.blocks is None:
            return self.data
        out = np.zeros((self.n_electrodes, self.n_dofs))
        cols = (8 * self.blocks[:, None] + np.arange(8)).reshape(-1)
        out[:, cols] = self.data
        return out


def compute_transfer(M: SparseBlockMatrix, R, cfg: SolverConfig | None = None,
                     precond: Preconditioner | None = None, keep_blocks=None,
                     log: SolverLog | None = None, allow_nonconverged: bool = False) -> TransferMatrix:
    """Solve M x_k = r_k for every row of R (in lockstep chunks of columns)."""
    cfg = cfg or SolverConfig()
    Rm = R.matrix if isinstance(R, RestrictionMatrix) else R
    Rm = sp.csr_matrix(Rm)
    ne, n = Rm.shape
    if n != M.shape[0]:
        raise ValueError(f"restriction has {n} columns, matrix has {M.shape[0]} rows")
    if precond is None:
        precond = build_preconditioner(M, cfg.preconditioner)
    if keep_blocks is not None:
        keep_blocks = np.unique(np.asarray(keep_blocks, dtype=np.int64))
        cols = (8 * keep_blocks[:, None] + np.arange(8)).reshape(-1)
    else:
        cols = None
    width = n if cols is None else len(cols)
    T = np.empty((ne, width))
    its = np.zeros(ne, dtype=np.int64)
    res = np.zeros(ne)
    conv = np.zeros(ne, dtype=bool)
    step = cfg.block_columns
    for s in range(0, ne, step):
        e = min(ne, s + step)
        B = Rm[s:e].toarray().T
        out = cg_solve(M, B, cfg, precond)
        X = out.x.reshape(n, -1)
        T[s:e] = (X if cols is None else X[cols]).T
        its[s:e] = out.iterations
        res[s:e] = out.residual
        conv[s:e] = out.converged
        if log is not None:
            per = out.seconds / (e - s)
            for k in range(e - s):
                log.add(f"transfer[{s + k}]", its[s + k], res[s + k], per, conv[s + k])
    if not allow_nonconverged and not np.all(conv):
        bad = np.flatnonzero(~conv)
        raise NotConverged(f"{len(bad)} transfer solves did not converge (rows {bad[:10].tolist()})")
    return TransferMatrix(T, n, keep_blocks, its, res, conv)


def forward(T: TransferMatrix, f) -> np.ndarray:
    """U = T f; single-block right-hand sides cost O(8 Ne)."""
    if isinstance(f, RhsVector):
        if f.block < 0:
            return np.zeros(T.n_electrodes)
        return T.block_columns(f.block) @ f.values
    f = np.asarray(f, dtype=float)
    if T.blocks is None:
        return T.data @ f
    cols = (8 * T.blocks[:, None] + np.arange(8)).reshape(-1)
    rest = np.ones(len(f), dtype=bool)
    rest[cols] = False
    if np.any(f[rest]):
        raise ValueError("right-hand side has support outside the kept blocks")
    return T.data @ f[cols]


def write_transfer(path, T: TransferMatrix) -> None:
    """Header ``UDGTM <Ne> <n>`` then row-major little-endian float64."""
    D = T.dense()
    with open(Path(path), "wb") as fh:
        fh.write(f"{_MAGIC} {D.shape[0]} {D.shape[1]}\n".encode("ascii"))
        fh.write(np.ascontiguousarray(D, dtype="<f8").tobytes())


def read_transfer(path) -> TransferMatrix:
    with open(Path(path), "rb") as fh:
        header = fh.readline().decode("ascii").split()
        if len(header) != 3 or header[0] != _MAGIC:
            raise ValueError(f"{path}: not a transfer matrix file")
        ne, n = int(header[1]), int(header[2])
        data = np.frombuffer(fh.read(), dtype="<f8")
    if data.size != ne * n:
        raise ValueError(f"{path}: expected {ne * n} values, found {data.size}")
    return TransferMatrix(data.reshape(ne, n).astype(float), n)
