from __future__ import annotations

import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from udgeeg.dg import SparseBlockMatrix
from udgeeg.solver import (IncompatibleRhs, SolverConfig, SolverLog, build_preconditioner, cg_solve)
from udgeeg.source import DipoleSource, assemble_dipole_rhs


def dense_to_blocks(A: np.ndarray) -> SparseBlockMatrix:
    nb = A.shape[0] // 8
    rows, cols = np.meshgrid(np.arange(nb), np.arange(nb), indexing="ij")
    blocks = A.reshape(nb, 8, nb, 8).transpose(0, 2, 1, 3).reshape(-1, 8, 8)
    return SparseBlockMatrix.from_blocks(nb, rows.ravel(), cols.ravel(), blocks)


def neumann_laplacian(n: int) -> np.ndarray:
    """Path-graph Laplacian: symmetric, PSD, kernel = constants."""
    L = np.diag(np.r_[1.0, 2.0 * np.ones(n - 2), 1.0])
    L -= np.diag(np.ones(n - 1), 1) + np.diag(np.ones(n - 1), -1)
    return L


def random_spd(n: int, seed: int) -> np.ndarray:
    Q = np.linalg.qr(np.random.default_rng(seed).standard_normal((n, n)))[0]
    return Q @ np.diag(np.linspace(1.0, 50.0, n)) @ Q.T


@pytest.mark.parametrize("kind", ["block-ilu0", "block-jacobi", "none"])
def test_random_spd_matches_dense_solve(kind):
    A = random_spd(24, 1)
    b = np.random.default_rng(2).standard_normal(24)
    res = cg_solve(dense_to_blocks(A), b, SolverConfig(rel_tol=1e-12, preconditioner=kind, project_constant=False))
    assert res.converged
    np.testing.assert_allclose(res.x, np.linalg.solve(A, b), rtol=1e-9, atol=1e-10)


@pytest.mark.parametrize("kind", ["block-ilu0", "block-jacobi"])
def test_block_diagonal_matrix_solved_in_one_iteration(kind):
    rng = np.random.default_rng(4)
    blocks = np.stack([random_spd(8, s) for s in range(3)])
    M = SparseBlockMatrix.from_blocks(3, [0, 1, 2], [0, 1, 2], blocks)
    b = rng.standard_normal(24)
    res = cg_solve(M, b, SolverConfig(rel_tol=1e-10, preconditioner=kind, project_constant=False))
    assert res.iterations == 1
    assert res.residual <= 1e-10


def test_identity_system():
    b = np.arange(16.0)
    res = cg_solve(SparseBlockMatrix.identity(2), b, SolverConfig(project_constant=False))
    assert res.iterations <= 1
    np.testing.assert_allclose(res.x, b)


def test_ilu_is_exact_on_block_bidiagonal_systems():
    # ILU(0) has no fill-in to drop for a two-block system, so it is an exact inverse
    A = random_spd(16, 7)
    M = dense_to_blocks(A)
    P = build_preconditioner(M, "block-ilu0")
    np.testing.assert_allclose(P.apply(np.eye(16)) @ A, np.eye(16), atol=1e-10)


def test_semidefinite_system_gives_zero_mean_pseudo_inverse():
    A = neumann_laplacian(32)
    b = np.random.default_rng(5).standard_normal(32)
    b -= b.mean()
    res = cg_solve(dense_to_blocks(A), b, SolverConfig(rel_tol=1e-12))
    assert res.converged
    assert abs(res.x.mean()) < 1e-12
    np.testing.assert_allclose(res.x, np.linalg.pinv(A) @ b, atol=1e-9)


def test_zero_rhs_needs_no_iterations():
    res = cg_solve(dense_to_blocks(neumann_laplacian(16)), np.zeros(16))
    assert res.iterations == 0 and res.converged
    np.testing.assert_array_equal(res.x, 0.0)


def test_incompatible_rhs_rejected():
    with pytest.raises(IncompatibleRhs):
        cg_solve(dense_to_blocks(neumann_laplacian(16)), np.ones(16))
    with pytest.raises(ValueError):
        cg_solve(dense_to_blocks(neumann_laplacian(16)), np.zeros(8))


def test_iteration_cap_reports_nonconvergence():
    A = neumann_laplacian(64)
    b = np.random.default_rng(6).standard_normal(64)
    b -= b.mean()
    res = cg_solve(dense_to_blocks(A), b, SolverConfig(rel_tol=1e-12, max_iter=2, preconditioner="none"))
    assert not res.converged and res.iterations == 2
    assert res.residual > 1e-12


@settings(max_examples=15, deadline=None)
@given(shift=st.floats(-100, 100), seed=st.integers(0, 2**31))
def test_initial_guess_shift_invariance(shift, seed):
    A = neumann_laplacian(24)
    b = np.random.default_rng(seed).standard_normal(24)
    b -= b.mean()
    M = dense_to_blocks(A)
    cfg = SolverConfig(rel_tol=1e-12)
    a = cg_solve(M, b, cfg).x
    c = cg_solve(M, b, cfg, x0=a + shift).x
    np.testing.assert_allclose(c, a, atol=1e-9)


def test_config_validation():
    for bad in (dict(rel_tol=0.0), dict(rel_tol=1.0), dict(max_iter=0), dict(preconditioner="amg"),
                dict(block_columns=0)):
        with pytest.raises(ValueError):
            SolverConfig(**bad)


def test_dipole_system_on_sphere_mesh(sphere8, sphere8_matrix):
    brain = sphere8.spec.index("brain")
    f = assemble_dipole_rhs(sphere8, DipoleSource((10.0, -5.0, 20.0), (0.0, 0.3, 1.0)), brain).dense()
    cfg = SolverConfig(rel_tol=1e-8)
    res = cg_solve(sphere8_matrix, f, cfg)
    assert res.converged
    # independent residual check with scipy's sparse product
    r = np.linalg.norm(sphere8_matrix.bsr @ res.x - f) / np.linalg.norm(f)
    assert r <= 1e-8
    assert abs(res.x.mean()) < 1e-12 * np.abs(res.x).max()
    again = cg_solve(sphere8_matrix, f, cfg)
    np.testing.assert_array_equal(again.x, res.x)
    # lockstep columns reproduce the single solves
    both = cg_solve(sphere8_matrix, np.column_stack([f, 2 * f]), cfg)
    assert np.all(both.converged)
    np.testing.assert_allclose(both.x[:, 1], 2 * both.x[:, 0], rtol=0, atol=1e-12 * np.abs(both.x).max())


def test_solver_log_csv(tmp_path):
    log = SolverLog()
    A = neumann_laplacian(16)
    b = np.r_[1.0, np.zeros(14), -1.0]
    log.add_result("one", cg_solve(dense_to_blocks(A), b))
    log.add_result("two", cg_solve(dense_to_blocks(A), np.column_stack([b, -b])))
    p = tmp_path / "log.csv"
    log.write_csv(p)
    rows = list(csv.reader(open(p)))
    assert rows[0] == ["solve", "iterations", "relative_residual", "wall_seconds", "converged"]
    assert [r[0] for r in rows[1:]] == ["one", "two[0]", "two[1]"]
    assert all(r[4] == "1" for r in rows[1:])
