"""Preconditioned conjugate gradients for the semidefinite SWIPG system.

The system matrix has the constant vector as its kernel (pure Neumann
problem).  Right-hand sides must be orthogonal to it; the preconditioned
residual is projected onto the zero-mean subspace in every iteration, so
the iterates (started from zero) stay zero-mean.

Block preconditioners work on the 8x8 blocks of the BSR matrix; the kernels
are compiled with numba.
"""
from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numba import njit

from .dg import SparseBlockMatrix

PRECONDITIONERS = ("block-ilu0", "block-jacobi", "none")

_SINGULAR_RTOL = 1e-13
_INCOMPATIBLE_TOL = 1e-8


@dataclass(frozen=True)
class SolverConfig:
    rel_tol: float = 1e-8
    max_iter: int = 10000
    preconditioner: str = "block-ilu0"
    project_constant: bool = True
    # right-hand sides solved together in lockstep (transfer matrices)
    block_columns: int = 16

    def __post_init__(self):
        if not 0.0 < self.rel_tol < 1.0:
            raise ValueError("rel_tol must lie in (0, 1)")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.preconditioner not in PRECONDITIONERS:
            raise ValueError(f"preconditioner must be one of {PRECONDITIONERS}")
        if self.block_columns < 1:
            raise ValueError("block_columns must be >= 1")


@dataclass
class SolveResult:
    x: np.ndarray
    iterations: np.ndarray | int
    residual: np.ndarray | float  # relative, unpreconditioned, re-verified
    converged: np.ndarray | bool
    seconds: float = 0.0


class NotConverged(RuntimeError):
    pass


class IncompatibleRhs(ValueError):
    pass


# ------------------------------------------------------------------ dense 8x8 kernels

@njit(cache=True)
def _invert(A, out):
    """Gauss-Jordan inverse with partial pivoting; returns False when a pivot vanishes."""
    n = A.shape[0]
    W = A.copy()
    for i in range(n):
        for j in range(n):
            out[i, j] = 1.0 if i == j else 0.0
    scale = 0.0
    for i in range(n):
        for j in range(n):
            scale = max(scale, abs(W[i, j]))
    if scale == 0.0:
        return False
    for c in range(n):
        p = c
        for r in range(c + 1, n):
            if abs(W[r, c]) > abs(W[p, c]):
                p = r
        if abs(W[p, c]) <= _SINGULAR_RTOL * scale:
            return False
        if p != c:
            for j in range(n):
                t = W[c, j]; W[c, j] = W[p, j]; W[p, j] = t
                t = out[c, j]; out[c, j] = out[p, j]; out[p, j] = t
        d = 1.0 / W[c, c]
        for j in range(n):
            W[c, j] *= d
            out[c, j] *= d
        for r in range(n):
            if r != c:
                f = W[r, c]
                if f != 0.0:
                    for j in range(n):
                        W[r, j] -= f * W[c, j]
                        out[r, j] -= f * out[c, j]
    return True


@njit(cache=True)
def _safe_inverse(A, out):
    """Invert, regularising with 1e-12 * trace on the diagonal if needed; returns 1 if regularised."""
    if _invert(A, out):
        return 0
    tr = 0.0
    for i in range(A.shape[0]):
        tr += A[i, i]
    B = A.copy()
    eps = 1e-12 * abs(tr)
    if eps == 0.0:
        eps = 1e-12
    for i in range(A.shape[0]):
        B[i, i] += eps
    if not _invert(B, out):
        # last resort: diagonal scaling keeps the preconditioner defined
        for i in range(A.shape[0]):
            for j in range(A.shape[0]):
                out[i, j] = 0.0
            out[i, i] = 1.0 / B[i, i] if B[i, i] != 0.0 else 1.0
    return 1


@njit(cache=True)
def _ilu0(indptr, indices, data, diag_pos):
    """In-place block ILU(0).  Strict lower blocks become L (unit diagonal implied),
    diagonal blocks are replaced by the inverses of the pivots."""
    n = indptr.shape[0] - 1
    tmp = np.empty((8, 8))
    inv = np.empty((8, 8))
    regularised = 0
    for i in range(n):
        for kk in range(indptr[i], diag_pos[i]):
            k = indices[kk]
            # L_ik = A_ik * inv(U_kk)
            Dk = data[diag_pos[k]]
            for a in range(8):
                for b in range(8):
                    s = 0.0
                    for c in range(8):
                        s += data[kk, a, c] * Dk[c, b]
                    tmp[a, b] = s
            data[kk] = tmp
            # A_ij -= L_ik U_kj for j > k present in row i
            p = kk + 1
            q = diag_pos[k] + 1
            ei = indptr[i + 1]
            ek = indptr[k + 1]
            while p < ei and q < ek:
                ji = indices[p]
                jk = indices[q]
                if ji == jk:
                    for a in range(8):
                        for b in range(8):
                            s = 0.0
                            for c in range(8):
                                s += data[kk, a, c] * data[q, c, b]
                            data[p, a, b] -= s
                    p += 1
                    q += 1
                elif ji < jk:
                    p += 1
                else:
                    q += 1
        regularised += _safe_inverse(data[diag_pos[i]].copy(), inv)
        data[diag_pos[i]] = inv
    return regularised


@njit(cache=True)
def _ilu_solve(indptr, indices, data, diag_pos, b, out):
    """Solve L U x = b for several right-hand sides, b/out shape (n*8, m)."""
    n = indptr.shape[0] - 1
    m = b.shape[1]
    y = np.empty((8, m))
    for i in range(n):
        for a in range(8):
            for c in range(m):
                y[a, c] = b[8 * i + a, c]
        for kk in range(indptr[i], diag_pos[i]):
            k = indices[kk]
            for a in range(8):
                for e in range(8):
                    l = data[kk, a, e]
                    if l != 0.0:
                        for c in range(m):
                            y[a, c] -= l * out[8 * k + e, c]
        for a in range(8):
            for c in range(m):
                out[8 * i + a, c] = y[a, c]
    for i in range(n - 1, -1, -1):
        for a in range(8):
            for c in range(m):
                y[a, c] = out[8 * i + a, c]
        for kk in range(diag_pos[i] + 1, indptr[i + 1]):
            j = indices[kk]
            for a in range(8):
                for e in range(8):
                    u = data[kk, a, e]
                    if u != 0.0:
                        for c in range(m):
                            y[a, c] -= u * out[8 * j + e, c]
        D = data[diag_pos[i]]
        for a in range(8):
            for c in range(m):
                s = 0.0
                for e in range(8):
                    s += D[a, e] * y[e, c]
                out[8 * i + a, c] = s


@njit(cache=True)
def _block_diag_apply(Dinv, b, out):
    n = Dinv.shape[0]
    m = b.shape[1]
    for i in range(n):
        for a in range(8):
            for c in range(m):
                s = 0.0
                for e in range(8):
                    s += Dinv[i, a, e] * b[8 * i + e, c]
                out[8 * i + a, c] = s


# ------------------------------------------------------------------ preconditioners

class Preconditioner:
    kind = "none"
    regularised_pivots = 0

    def apply(self, r: np.ndarray) -> np.ndarray:
        return r.copy()


def _block_scaling(M: SparseBlockMatrix, diag_pos: np.ndarray):
    """S_i = V_i |L_i|^(-1/2) from the eigen-decomposition of each diagonal block.

    Cut cells with tiny volume have nearly dependent local bases and diagonal
    blocks with condition numbers near 1e13; scaling every block row and
    column by S_i makes the diagonal blocks identities without changing the
    block preconditioners mathematically.  Eigenvalues at or below
    ``eps * max`` count as singular and are replaced by 1e-12 * trace.
    """
    D = M.data[diag_pos]
    lam, V = np.linalg.eigh(D)
    top = np.abs(lam).max(axis=1, keepdims=True)
    bad = lam <= 8 * np.finfo(float).eps * top
    trace = np.abs(np.trace(D, axis1=1, axis2=2))[:, None]
    fix = np.where(trace > 0, 1e-12 * trace, 1e-12)
    lam = np.where(bad, np.maximum(np.abs(lam), fix), lam)
    regularised = int(np.any(bad, axis=1).sum())
    return V / np.sqrt(lam)[:, None, :], regularised


class BlockJacobi(Preconditioner):
    kind = "block-jacobi"

    def __init__(self, M: SparseBlockMatrix):
        S, self.regularised_pivots = _block_scaling(M, _diagonal_positions(M))
        self.Dinv = np.ascontiguousarray(np.einsum("nij,nkj->nik", S, S))

    def apply(self, r):
        r2 = r.reshape(r.shape[0], -1)
        out = np.empty_like(r2)
        _block_diag_apply(self.Dinv, np.ascontiguousarray(r2), out)
        return out.reshape(r.shape)


class BlockILU0(Preconditioner):
    """Block ILU(0) computed on the block-scaled matrix S^T M S."""

    kind = "block-ilu0"

    def __init__(self, M: SparseBlockMatrix):
        self.indptr = M.indptr.astype(np.int64)
        self.indices = M.indices.astype(np.int64)
        self.diag_pos = _diagonal_positions(M)
        S, reg = _block_scaling(M, self.diag_pos)
        rows = M.block_rows()
        self.S = np.ascontiguousarray(S)
        self.St = np.ascontiguousarray(S.transpose(0, 2, 1))
        self.data = np.ascontiguousarray(np.einsum("nji,njk,nkl->nil", S[rows], M.data, S[self.indices]))
        self.regularised_pivots = reg + int(_ilu0(self.indptr, self.indices, self.data, self.diag_pos))

    def apply(self, r):
        r2 = np.ascontiguousarray(r.reshape(r.shape[0], -1))
        t = np.empty_like(r2)
        _block_diag_apply(self.St, r2, t)
        out = np.empty_like(r2)
        _ilu_solve(self.indptr, self.indices, self.data, self.diag_pos, t, out)
        _block_diag_apply(self.S, out, t)
        return t.reshape(r.shape)


def _diagonal_positions(M: SparseBlockMatrix) -> np.ndarray:
    rows = M.block_rows()
    pos = np.flatnonzero(rows == M.indices)
    if len(pos) != M.n_blocks:
        raise ValueError("matrix is missing diagonal blocks")
    return pos.astype(np.int64)


def build_preconditioner(M: SparseBlockMatrix, kind: str = "block-ilu0") -> Preconditioner:
    if kind == "block-ilu0":
        return BlockILU0(M)
    if kind == "block-jacobi":
        return BlockJacobi(M)
    if kind == "none":
        return Preconditioner()
    raise ValueError(f"unknown preconditioner {kind!r}")


# ------------------------------------------------------------------ CG

@njit(cache=True)
def _bsr_matmat(indptr, indices, data, X, out):
    """out = M X for a BSR matrix with 8x8 blocks, X shape (n*8, m)."""
    n = indptr.shape[0] - 1
    m = X.shape[1]
    for i in range(n):
        for a in range(8):
            for c in range(m):
                out[8 * i + a, c] = 0.0
        for kk in range(indptr[i], indptr[i + 1]):
            j = indices[kk]
            for a in range(8):
                for e in range(8):
                    v = data[kk, a, e]
                    for c in range(m):
                        out[8 * i + a, c] += v * X[8 * j + e, c]


class _Operator:
    def __init__(self, M: SparseBlockMatrix):
        self.indptr = M.indptr.astype(np.int64)
        self.indices = M.indices.astype(np.int64)
        self.data = np.ascontiguousarray(M.data)

    def __call__(self, X: np.ndarray) -> np.ndarray:
        X = np.ascontiguousarray(X)
        out = np.empty_like(X)
        _bsr_matmat(self.indptr, self.indices, self.data, X, out)
        return out


def _project(v: np.ndarray) -> np.ndarray:
    return v - v.mean(axis=0)


def _cg_core(op, precond, B, X, target, max_iter, project):
    """Lockstep PCG on the columns of B; returns (X, iterations)."""
    n, m = B.shape
    iters = np.zeros(m, dtype=np.int64)
    R = B - op(X) if np.any(X) else B.copy()
    cols = np.flatnonzero(np.linalg.norm(R, axis=0) > target)
    if len(cols) == 0:
        return X, iters
    R = np.ascontiguousarray(R[:, cols])
    Xa = np.ascontiguousarray(X[:, cols])
    tgt = target[cols]
    Z = precond.apply(R)
    if project:
        Z = _project(Z)
    P = Z
    rz = np.einsum("ij,ij->j", R, Z)
    it = 0
    while it < max_iter:
        it += 1
        Q = op(P)
        alpha = rz / np.einsum("ij,ij->j", P, Q)
        Xa += alpha * P
        R -= alpha * Q
        iters[cols] = it
        done = np.linalg.norm(R, axis=0) <= tgt
        if np.any(done):
            X[:, cols[done]] = Xa[:, done]
            keep = ~done
            if not np.any(keep):
                return X, iters
            cols, tgt, rz = cols[keep], tgt[keep], rz[keep]
            R = np.ascontiguousarray(R[:, keep])
            Xa = np.ascontiguousarray(Xa[:, keep])
            P = np.ascontiguousarray(P[:, keep])
        Z = precond.apply(R)
        if project:
            Z = _project(Z)
        rz_new = np.einsum("ij,ij->j", R, Z)
        P = Z + (rz_new / rz) * P
        rz = rz_new
    X[:, cols] = Xa
    return X, iters


def cg_solve(M: SparseBlockMatrix, rhs, cfg: SolverConfig | None = None,
             precond: Preconditioner | None = None, x0=None) -> SolveResult:
    """Solve M y = rhs; ``rhs`` may be (n,) or (n, m) (columns solved in lockstep)."""
    cfg = cfg or SolverConfig()
    t0 = time.perf_counter()
    b = np.asarray(rhs, dtype=float)
    single = b.ndim == 1
    B = np.ascontiguousarray(b.reshape(b.shape[0], -1))
    n, m = B.shape
    if n != M.shape[0]:
        raise ValueError(f"rhs length {n} does not match matrix size {M.shape[0]}")
    bnorm = np.linalg.norm(B, axis=0)
    if cfg.project_constant:
        kernel = np.abs(B.sum(axis=0)) / np.sqrt(n)
        if np.any((kernel > _INCOMPATIBLE_TOL * bnorm) & (bnorm > 0)):
            raise IncompatibleRhs("right-hand side has a component along the constant kernel")
    if precond is None:
        precond = build_preconditioner(M, cfg.preconditioner)
    op = _Operator(M)
    X = np.zeros((n, m)) if x0 is None else np.array(np.asarray(x0, dtype=float).reshape(n, m))
    if cfg.project_constant and x0 is not None:
        X = _project(X)
    target = cfg.rel_tol * bnorm
    X, iters = _cg_core(op, precond, B, X, target, cfg.max_iter, cfg.project_constant)
    if cfg.project_constant:
        X = _project(X)
    # independent check of the residual contract
    res = np.linalg.norm(B - op(X), axis=0) / np.where(bnorm > 0, bnorm, 1.0)
    converged = res <= cfg.rel_tol
    # the recursive residual drifts slightly from the true one; restart such columns once
    redo = np.flatnonzero(~converged & (iters < cfg.max_iter))
    if len(redo):
        Xr, extra = _cg_core(op, precond, np.ascontiguousarray(B[:, redo]), np.ascontiguousarray(X[:, redo]),
                             0.5 * target[redo], cfg.max_iter - int(iters[redo].max()), cfg.project_constant)
        if cfg.project_constant:
            Xr = _project(Xr)
        X[:, redo] = Xr
        iters[redo] += extra
        res[redo] = np.linalg.norm(B[:, redo] - op(Xr), axis=0) / np.where(bnorm[redo] > 0, bnorm[redo], 1.0)
        converged[redo] = res[redo] <= cfg.rel_tol
    secs = time.perf_counter() - t0
    if single:
        return SolveResult(X[:, 0], int(iters[0]), float(res[0]), bool(converged[0]), secs)
    return SolveResult(X, iters, res, converged, secs)


# ------------------------------------------------------------------ statistics log

@dataclass
class SolverLog:
    rows: list = field(default_factory=list)

    def add(self, label: str, iterations: int, residual: float, seconds: float, converged: bool):
        self.rows.append((label, int(iterations), float(residual), float(seconds), bool(converged)))

    def add_result(self, label: str, res: SolveResult):
        its = np.atleast_1d(res.iterations)
        rs = np.atleast_1d(res.residual)
        cv = np.atleast_1d(res.converged)
        per = res.seconds / max(len(its), 1)
        for k in range(len(its)):
            name = label if len(its) == 1 else f"{label}[{k}]"
            self.add(name, its[k], rs[k], per, cv[k])

    def write_csv(self, path) -> None:
        with open(Path(path), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["solve", "iterations", "relative_residual", "wall_seconds", "converged"])
            for r in self.rows:
                w.writerow([r[0], r[1], f"{r[2]:.6e}", f"{r[3]:.6f}", int(r[4])])
