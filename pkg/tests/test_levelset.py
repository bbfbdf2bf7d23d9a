from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from udgeeg.grid import BoundingBox, build_grid
from udgeeg.levelset import (DomainSpec, LevelSetField, classify_vertex_pattern, discretize, evaluate,
                             four_sphere_domains, four_sphere_fields, load_level_set_volume,
                             read_level_set_volume, sphere_level_set, write_level_set_volume)

from conftest import two_domain_spec

STUDY_BOX = BoundingBox((-97.04,) * 3, (97.04,) * 3)


def test_sphere_level_set_values():
    phi = sphere_level_set((0, 0, 0), 92.0)
    assert phi(np.zeros(3)) == -92.0
    assert phi(np.array([92.0, 0, 0])) == 0.0
    assert phi(np.array([0, 100.0, 0])) == 8.0
    with pytest.raises(ValueError):
        sphere_level_set((0, 0, 0), 0.0)


def test_discretize_constant_and_corner_sign():
    mesh = build_grid(STUDY_BOX, 16)
    f = discretize(lambda x: np.full(len(x), 2.5), mesh)
    assert np.all(f.nodal_values == 2.5)
    g = discretize(sphere_level_set((0, 0, 0), 92.0), mesh)
    assert g.values[0, 0, 0] > 0


def test_discretize_rejects_nonfinite():
    mesh = build_grid(BoundingBox((0, 0, 0), (1, 1, 1)), 2)
    with pytest.raises(ValueError):
        discretize(lambda x: np.full(len(x), np.nan), mesh)


@settings(max_examples=40, deadline=None)
@given(coef=st.lists(st.floats(-5, 5), min_size=4, max_size=4), seed=st.integers(0, 2**31))
def test_affine_reproduction(coef, seed):
    mesh = build_grid(BoundingBox((-1, 0, 2), (3, 1, 4)), 5)
    a = np.array(coef[:3])
    f = discretize(lambda x: x @ a + coef[3], mesh)
    rng = np.random.default_rng(seed)
    x = np.array([-1, 0, 2]) + rng.random((100, 3)) * np.array([4, 1, 2])
    np.testing.assert_allclose(f.evaluate_many(x), x @ a + coef[3], atol=1e-12 * (1 + np.abs(a).sum()))


def test_evaluate_examples():
    mesh = build_grid(BoundingBox((0, 0, 0), (1, 1, 1)), 1)
    vals = np.arange(8.0)
    f = LevelSetField(mesh, vals)
    assert evaluate(f, (0.5, 0.5, 0.5)) == pytest.approx(vals.mean())
    g = LevelSetField(mesh, np.full(8, -3.0))
    assert evaluate(g, (0.2, 0.7, 0.1)) == pytest.approx(-3.0)
    with pytest.raises(ValueError):
        evaluate(f, (1.5, 0.5, 0.5))


def test_nodes_are_reproduced_bitwise():
    mesh = build_grid(STUDY_BOX, 6)
    f = discretize(sphere_level_set((1.0, -2.0, 0.5), 60.0), mesh)
    nodes = mesh.node_coordinates()
    np.testing.assert_array_equal(f.evaluate_many(nodes), f.nodal_values)


def test_classify_vertex_pattern_examples():
    mesh = build_grid(BoundingBox((0, 0, 0), (2, 1, 1)), (2))
    spec = two_domain_spec()
    neg = LevelSetField(mesh, -np.ones(mesh.n_nodes))
    assert classify_vertex_pattern([neg], spec, 0) == {0}
    mixed = discretize(lambda x: x[:, 0] - 0.5, mesh)
    assert classify_vertex_pattern([mixed], spec, 0) == {0, 1}
    only_in = DomainSpec.create(("s",), [("in", [{"s": "-"}], 1.0)])
    pos = LevelSetField(mesh, np.ones(mesh.n_nodes))
    assert classify_vertex_pattern([pos], only_in, 0) == frozenset()


def test_classify_rejects_mixed_meshes():
    m1 = build_grid(BoundingBox((0, 0, 0), (1, 1, 1)), 2)
    m2 = build_grid(BoundingBox((0, 0, 0), (1, 1, 1)), 2)
    f1 = LevelSetField(m1, np.ones(27))
    f2 = LevelSetField(m2, np.ones(27))
    spec = DomainSpec.create(("a", "b"), [("x", [{"a": "-", "b": "-"}], 1.0)])
    with pytest.raises(ValueError):
        classify_vertex_pattern([f1, f2], spec, 0)


def test_zero_counts_as_negative_side():
    spec = two_domain_spec()
    assert spec.domain_of_values(np.array([0.0])) == 0
    assert spec.domain_of_values(np.array([1e-300])) == 1


def test_domain_spec_validation():
    with pytest.raises(ValueError, match="several domains"):
        DomainSpec.create(("a",), [("x", [{"a": "-"}], 1.0), ("y", [{"a": "-"}], 1.0)])
    with pytest.raises(ValueError, match="positive definite"):
        DomainSpec.create(("a",), [("x", [{"a": "-"}], -1.0)])
    with pytest.raises(ValueError, match="symmetric"):
        DomainSpec.create(("a",), [("x", [{"a": "-"}], [[1, 0.1, 0], [0, 1, 0], [0, 0, 1]])])


def test_four_sphere_patterns_are_disjoint_and_complete():
    spec = four_sphere_domains()
    # every point inside the skin sphere belongs to exactly one tissue, air to none
    radii = np.array([92.0, 86.0, 80.0, 78.0])
    for r, expect in ((10.0, 3), (79.0, 2), (83.0, 1), (90.0, 0), (95.0, -1)):
        assert spec.domain_of_values(r - radii) == expect
    np.testing.assert_allclose(spec.sigma[:, 0, 0], [0.43, 0.01, 1.79, 0.33])


def test_volume_file_roundtrip(tmp_path):
    mesh = build_grid(STUDY_BOX, 8)
    f = four_sphere_fields(mesh)[1]
    p = tmp_path / "skull.udgls"
    write_level_set_volume(p, f)
    g = load_level_set_volume(p, mesh)
    np.testing.assert_array_equal(g.values, f.values)
    h = load_level_set_volume(p)
    np.testing.assert_array_equal(h.values, f.values)
    assert h.mesh.n == 8


def test_constant_file_is_all_negative(tmp_path):
    mesh = build_grid(BoundingBox((0, 0, 0), (1, 1, 1)), 3)
    p = tmp_path / "c.udgls"
    write_level_set_volume(p, LevelSetField(mesh, -np.ones(mesh.n_nodes)))
    assert np.all(load_level_set_volume(p, mesh).nodal_values == -1.0)


def test_fine_file_sampled_onto_coarse_mesh(tmp_path):
    # 2 mm file grid (97 cells) onto a 4 mm basis grid (48.5 -> use the exact halving 96 / 48)
    box = BoundingBox((-96.0,) * 3, (96.0,) * 3)
    fine = build_grid(box, 96)
    coarse = build_grid(box, 48)
    phi = sphere_level_set((0, 0, 0), 80.0)
    p = tmp_path / "fine.udgls"
    write_level_set_volume(p, discretize(phi, fine))
    g = load_level_set_volume(p, coarse)
    np.testing.assert_allclose(g.nodal_values, phi(coarse.node_coordinates()), rtol=0, atol=1e-12)


def test_malformed_files_rejected(tmp_path):
    p = tmp_path / "bad.udgls"
    p.write_bytes(b"NOPE 2 2 2 0 0 0 1 1 1\n" + np.zeros(8).tobytes())
    with pytest.raises(ValueError):
        read_level_set_volume(p)
    p.write_bytes(b"UDGLS 2 2 2 0 0 0 1 1 1\n" + np.zeros(7).tobytes())
    with pytest.raises(ValueError):
        read_level_set_volume(p)
    mesh = build_grid(BoundingBox((0, 0, 0), (1, 1, 1)), 3)
    q = tmp_path / "five.udgls"
    write_level_set_volume(q, LevelSetField(build_grid(BoundingBox((0, 0, 0), (1, 1, 1)), 5), np.zeros(216)))
    with pytest.raises(ValueError):
        load_level_set_volume(q, mesh)
