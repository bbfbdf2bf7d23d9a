from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from udgeeg.dg import LocalBasis
from udgeeg.source import (NUDGE, DipoleSource, SourcePlacementError, assemble_dipole_rhs, locate_source,
                           read_dipoles_csv, write_dipoles_csv)

from conftest import cut_mesh_from, single_domain_spec

coord = st.floats(-60.0, 60.0)
moment = st.floats(-2.0, 2.0)


def fd_rhs(cm, cell, x, m, eps=1e-4):
    """-M . grad phi_i(x) by central differences of the basis values."""
    g = np.zeros((8, 3))
    for a in range(3):
        e = np.zeros(3)
        e[a] = eps
        g[:, a] = (LocalBasis.values(cm.local_coordinates(cell, x + e))
                   - LocalBasis.values(cm.local_coordinates(cell, x - e))) / (2 * eps)
    return -(g @ m)


def test_zero_moment_gives_zero_rhs(sphere8):
    f = assemble_dipole_rhs(sphere8, DipoleSource((0, 0, 0), (0, 0, 0)))
    assert f.block == -1
    np.testing.assert_array_equal(f.dense(), 0.0)


@settings(max_examples=30, deadline=None)
@given(p=st.tuples(coord, coord, coord), m=st.tuples(moment, moment, moment))
def test_rhs_matches_finite_differences_and_sums_to_zero(sphere8, p, m):
    brain = sphere8.spec.index("brain")
    f = assemble_dipole_rhs(sphere8, DipoleSource(p, m), brain)
    m = np.array(m)
    ref = fd_rhs(sphere8, f.block, f.position, m)
    np.testing.assert_allclose(f.values, ref, rtol=0, atol=1e-6 * max(1e-3, np.abs(m).max()))
    assert abs(f.values.sum()) <= 1e-14 * max(1.0, np.abs(f.values).max())
    dense = f.dense()
    assert np.count_nonzero(dense[:8 * f.block]) == 0 and np.count_nonzero(dense[8 * f.block + 8:]) == 0


@settings(max_examples=20, deadline=None)
@given(p=st.tuples(coord, coord, coord), a=st.floats(-5, 5), b=st.floats(-5, 5))
def test_rhs_is_linear_in_the_moment(sphere8, p, a, b):
    m1, m2 = np.array([1.0, -0.5, 0.2]), np.array([0.0, 0.7, -1.1])
    f1 = assemble_dipole_rhs(sphere8, DipoleSource(p, m1)).dense()
    f2 = assemble_dipole_rhs(sphere8, DipoleSource(p, m2)).dense()
    f = assemble_dipole_rhs(sphere8, DipoleSource(p, a * m1 + b * m2)).dense()
    np.testing.assert_allclose(f, a * f1 + b * f2, rtol=0, atol=1e-12 * (1 + np.abs(f).max()))


def test_uncut_cell_rhs_example():
    cm = cut_mesh_from(lambda x: -np.ones(len(x)), 2, hi=(2, 2, 2), spec=single_domain_spec())
    f = assemble_dipole_rhs(cm, DipoleSource((0.5, 0.5, 0.5), (1.0, 0.0, 0.0)))
    assert f.block == 0
    # d/dx of the corner functions at the cell centre is +-1/4; f = -M . grad
    np.testing.assert_allclose(f.values, -np.array([-1, 1, -1, 1, -1, 1, -1, 1]) / 4.0)


def test_point_on_face_uses_lower_cell_and_is_nudged():
    cm = cut_mesh_from(lambda x: -np.ones(len(x)), 2, hi=(2, 2, 2), spec=single_domain_spec())
    c, x, relocated = locate_source(cm, (1.0, 0.5, 0.5))
    assert c == 0 and not relocated
    assert 0 < np.linalg.norm(x - np.array([1.0, 0.5, 0.5])) <= 1.0001 * NUDGE * cm.mesh.h
    assert x[0] < 1.0


def test_placement_errors(sphere8):
    brain = sphere8.spec.index("brain")
    with pytest.raises(SourcePlacementError):
        assemble_dipole_rhs(sphere8, DipoleSource((200.0, 0, 0), (0, 0, 1)))
    # air corner of the box: no cut cell at all
    with pytest.raises(SourcePlacementError):
        assemble_dipole_rhs(sphere8, DipoleSource((95.0, 95.0, 95.0), (0, 0, 1)))


def test_forced_domain_needs_a_cut_cell_of_that_domain(sphere16):
    brain = sphere16.spec.index("brain")
    # the parent cell of a point at radius 88 holds no brain
    with pytest.raises(SourcePlacementError):
        assemble_dipole_rhs(sphere16, DipoleSource((0.0, 0.0, 88.0), (0, 0, 1)), brain)
    f = assemble_dipole_rhs(sphere16, DipoleSource((0.0, 0.0, 88.0), (0, 0, 1)), brain, allow_nearest=True)
    assert f.relocated
    assert sphere16.domain[f.block] == brain
    # a parent cell that does hold brain accepts the point with the brain polynomials
    g = assemble_dipole_rhs(sphere16, DipoleSource((0.0, 0.0, 79.0), (0, 0, 1)), brain)
    assert not g.relocated and sphere16.domain[g.block] == brain


def test_dipole_validation():
    with pytest.raises(ValueError):
        DipoleSource((0, 0), (0, 0, 1))
    with pytest.raises(ValueError):
        DipoleSource((0, 0, np.nan), (0, 0, 1))
    d = DipoleSource([1, 2, 3], [0, 0, 1])
    with pytest.raises(ValueError):
        d.position[0] = 5.0


def test_dipole_csv_roundtrip(tmp_path):
    ds = [DipoleSource((0.1, -2.0, 3.3), (1e-3, 0, -1)), DipoleSource((1 / 3, 0, 0), (0, 1, 0))]
    p = tmp_path / "d.csv"
    write_dipoles_csv(p, ds)
    back = read_dipoles_csv(p)
    for a, b in zip(ds, back):
        np.testing.assert_array_equal(a.position, b.position)
        np.testing.assert_array_equal(a.moment, b.moment)
    p.write_text("1,2,3,4,5\n")
    with pytest.raises(ValueError):
        read_dipoles_csv(p)
