from __future__ import annotations

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from udgeeg.dg import SparseBlockMatrix, constant_vector
from udgeeg.harness import generate_electrodes
from udgeeg.solver import NotConverged, SolverConfig, cg_solve
from udgeeg.source import DipoleSource, assemble_dipole_rhs
from udgeeg.transfer import (ElectrodeSet, TransferMatrix, build_restriction, compute_transfer, forward,
                             read_transfer, write_transfer)

from conftest import cut_mesh_from, direct_solve, single_domain_spec

RTOL = 1e-8


@pytest.fixture(scope="module")
def sphere8_setup(sphere8, sphere8_matrix):
    es = generate_electrodes(24, 92.0)
    R = build_restriction(sphere8, es)
    brain = sphere8.spec.index("brain")
    T = compute_transfer(sphere8_matrix, R, SolverConfig(rel_tol=RTOL))
    return sphere8, sphere8_matrix, R, T, brain


def test_reference_row_and_corner_pattern():
    cm = cut_mesh_from(lambda x: -np.ones(len(x)), 1, spec=single_domain_spec())
    es = ElectrodeSet((0.0, 0.0, 0.0), [(0.0, 0.0, 0.0), (1.0, 1.0, 1.0), (0.5, 0.5, 0.5)])
    R = build_restriction(cm, es).matrix.toarray()
    assert R.shape == (3, 8)
    np.testing.assert_array_equal(R[0], 0.0)
    np.testing.assert_array_equal(R[1], np.eye(8)[0] - np.eye(8)[7])
    np.testing.assert_allclose(R[2], np.eye(8)[0] - np.full(8, 1 / 8))


def test_rows_annihilate_constants(sphere8_setup):
    cm, _, R, _, _ = sphere8_setup
    assert np.abs(R.matrix @ constant_vector(cm)).max() <= 1e-14
    assert R.matrix.shape == (23, cm.n_dofs)
    # the scalp electrodes sit in (or are projected onto) skin cut cells
    assert np.all(cm.domain[R.cells] == cm.spec.index("skin"))


def test_identity_matrix_gives_restriction():
    R = sp.csr_matrix(np.random.default_rng(0).standard_normal((3, 16)))
    T = compute_transfer(SparseBlockMatrix.identity(2), R, SolverConfig(project_constant=False, rel_tol=1e-12))
    np.testing.assert_allclose(T.data, R.toarray(), atol=1e-12)


def test_transfer_agrees_with_direct_solves(sphere8_setup):
    cm, M, R, T, brain = sphere8_setup
    assert np.all(T.converged)
    fs = [assemble_dipole_rhs(cm, DipoleSource(p, m), brain)
          for p, m in (((10.0, 20.0, -30.0), (0.0, 0.0, 1.0)), ((-40.0, 5.0, 50.0), (1.0, -1.0, 0.2)),
                       ((0.0, 60.0, 0.0), (0.0, 1.0, 0.0)))]
    X = direct_solve(M, np.column_stack([f.dense() for f in fs]))
    for k, f in enumerate(fs):
        direct = R.matrix @ X[:, k]
        fast = forward(T, f)
        assert np.linalg.norm(fast - direct) <= 10 * RTOL * np.linalg.norm(direct)
        # an iterative solve of the same system satisfies its residual contract
        res = cg_solve(M, f.dense(), SolverConfig(rel_tol=RTOL))
        assert res.converged and np.linalg.norm(M.bsr @ res.x - f.dense()) <= RTOL * np.linalg.norm(f.dense())


@settings(max_examples=20, deadline=None)
@given(a=st.floats(-4, 4), b=st.floats(-4, 4), seed=st.integers(0, 2**31))
def test_forward_is_linear(sphere8_setup, a, b, seed):
    cm, _, _, T, brain = sphere8_setup
    rng = np.random.default_rng(seed)
    p = rng.uniform(-40, 40, 3)
    f1 = assemble_dipole_rhs(cm, DipoleSource(p, rng.standard_normal(3)), brain)
    f2 = assemble_dipole_rhs(cm, DipoleSource(p + 5.0, rng.standard_normal(3)), brain)
    u = forward(T, a * f1.dense() + b * f2.dense())
    np.testing.assert_allclose(u, a * forward(T, f1) + b * forward(T, f2), rtol=0,
                               atol=1e-12 * (1 + np.abs(u).max()))


def test_kept_blocks(sphere8_setup):
    cm, M, R, T, brain = sphere8_setup
    keep = np.flatnonzero(cm.domain == brain)
    Tk = compute_transfer(M, R, SolverConfig(rel_tol=RTOL), keep_blocks=keep)
    f = assemble_dipole_rhs(cm, DipoleSource((5.0, 5.0, 5.0), (0, 0, 1)), brain)
    np.testing.assert_array_equal(forward(Tk, f), forward(T, f))
    np.testing.assert_array_equal(Tk.dense()[:, 8 * keep[0]:8 * keep[0] + 8], T.block_columns(keep[0]))
    skin = np.flatnonzero(cm.domain == cm.spec.index("skin"))[0]
    with pytest.raises(KeyError):
        Tk.block_columns(skin)
    g = np.zeros(cm.n_dofs)
    g[8 * skin] = 1.0
    with pytest.raises(ValueError):
        forward(Tk, g)


def test_nonconvergence_raises(sphere8_setup):
    _, M, R, _, _ = sphere8_setup
    with pytest.raises(NotConverged):
        compute_transfer(M, R, SolverConfig(max_iter=2))
    T = compute_transfer(M, R, SolverConfig(max_iter=2), allow_nonconverged=True)
    assert not np.any(T.converged)


def test_file_roundtrip(tmp_path, sphere8_setup):
    *_, T, _ = sphere8_setup
    p = tmp_path / "t.udgtm"
    write_transfer(p, T)
    back = read_transfer(p)
    np.testing.assert_array_equal(back.data, T.dense())
    p.write_bytes(b"UDGTM 2 3\n" + np.zeros(5).tobytes())
    with pytest.raises(ValueError):
        read_transfer(p)
    p.write_bytes(b"XX 1 1\n" + np.zeros(1).tobytes())
    with pytest.raises(ValueError):
        read_transfer(p)


def test_electrode_validation(sphere8):
    with pytest.raises(ValueError):
        ElectrodeSet((0, 0, 0), [(1, 0, 0), (1, 0, 0)])
    with pytest.raises(ValueError):
        ElectrodeSet((0, 0, np.inf), [(1, 0, 0)])
    # far outside the head: more than one cell width from the scalp
    with pytest.raises(ValueError):
        build_restriction(sphere8, ElectrodeSet((0, 0, 92.0), [(0.0, 0.0, 150.0)]))


def test_transfer_matrix_dense_layout():
    T = TransferMatrix(np.arange(16.0).reshape(1, 16), 32, blocks=np.array([1, 3]))
    D = T.dense()
    np.testing.assert_array_equal(D[0, 8:16], np.arange(8.0))
    np.testing.assert_array_equal(D[0, 24:32], np.arange(8.0, 16.0))
    assert D[0, :8].sum() == 0 and D[0, 16:24].sum() == 0
