from __future__ import annotations

import csv
import json

import numpy as np
import pytest
import yaml
from hypothesis import given, settings
from hypothesis import strategies as st

from udgeeg.harness import (CSV_COLUMNS, StudyConfig, eccentricity_ladder, generate_electrodes,
                            group_statistic, mean_referenced, rdm_mag, run_study, sample_dipoles, statistics)

LADDER = [0.1666, 0.51741581, 0.72055736, 0.83818742, 0.90630167, 0.94574354, 0.96858254, 0.98180757,
          0.98946559, 0.9939]

finite = st.floats(-1e3, 1e3)


def test_eccentricity_ladder_values():
    np.testing.assert_allclose(eccentricity_ladder(), LADDER, atol=5e-9)
    e = eccentricity_ladder()
    gaps = 1.0 - e
    np.testing.assert_allclose(gaps[1:] / gaps[:-1], gaps[1] / gaps[0], rtol=1e-12)
    for quoted in (0.9686, 0.9818, 0.9895):
        assert np.abs(e - quoted).min() <= 5e-4
    assert eccentricity_ladder(0.2, 0.7, 2).tolist() == [0.2, 0.7]
    for bad in ((0.0, 0.5), (0.5, 0.4), (0.5, 1.0)):
        with pytest.raises(ValueError):
            eccentricity_ladder(*bad)


@pytest.mark.parametrize("orientation", ["radial", "tangential"])
def test_sampled_dipoles(orientation):
    ds = sample_dipoles(7, 0.9818, 50, orientation, 78.0, center=(1.0, 2.0, 3.0))
    pos = np.array([d.position for d in ds]) - np.array([1.0, 2.0, 3.0])
    mom = np.array([d.moment for d in ds])
    np.testing.assert_allclose(np.linalg.norm(pos, axis=1), 0.9818 * 78.0, rtol=1e-14)
    np.testing.assert_allclose(np.linalg.norm(mom, axis=1), 1.0, rtol=1e-14)
    cosang = np.sum(pos * mom, axis=1) / np.linalg.norm(pos, axis=1)
    if orientation == "radial":
        np.testing.assert_allclose(cosang, 1.0, rtol=1e-14)
    else:
        np.testing.assert_allclose(cosang, 0.0, atol=1e-14)
    again = sample_dipoles(7, 0.9818, 50, orientation, 78.0, center=(1.0, 2.0, 3.0))
    assert all(np.array_equal(a.position, b.position) and np.array_equal(a.moment, b.moment)
               for a, b in zip(ds, again))
    other = sample_dipoles(8, 0.9818, 50, orientation, 78.0, center=(1.0, 2.0, 3.0))
    assert not np.array_equal(other[0].position, ds[0].position)


def test_sampling_is_roughly_uniform():
    ds = sample_dipoles(1, 0.5, 4000, "radial", 78.0)
    d = np.array([x.moment for x in ds])
    np.testing.assert_allclose(d.mean(axis=0), 0.0, atol=0.05)
    np.testing.assert_allclose(d.T @ d / len(d), np.eye(3) / 3, atol=0.03)


def test_electrodes():
    es = generate_electrodes(200, 92.0, (1.0, 0.0, 0.0))
    assert len(es) == 199
    pts = es.all_points - np.array([1.0, 0.0, 0.0])
    np.testing.assert_allclose(np.linalg.norm(pts, axis=1), 92.0, rtol=1e-14)
    d = np.linalg.norm(pts[:, None] - pts[None], axis=2) + np.eye(200) * 1e9
    # near-uniform spacing on the sphere
    assert d.min(axis=1).max() / d.min(axis=1).min() < 1.5
    two = generate_electrodes(2, 10.0)
    assert np.linalg.norm(two.reference - two.electrodes[0]) > 10.0
    with pytest.raises(ValueError):
        generate_electrodes(1)


def test_rdm_mag_examples():
    a = np.array([1.0, -2.0, 0.5, 0.5])
    assert rdm_mag(a, a) == (0.0, 0.0)
    r, m = rdm_mag(a, 2 * a)
    assert r == pytest.approx(0.0, abs=1e-12) and m == pytest.approx(100.0)
    r, m = rdm_mag(a, -a)
    assert r == pytest.approx(100.0) and m == pytest.approx(0.0, abs=1e-12)
    r, m = rdm_mag([1.0, 0.0], [0.0, 3.0])
    assert r == pytest.approx(50.0 * np.sqrt(2.0)) and m == pytest.approx(200.0)
    with pytest.raises(ValueError):
        rdm_mag([0.0, 0.0], [1.0, 0.0])
    with pytest.raises(ValueError):
        rdm_mag([1.0], [1.0, 0.0])


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(finite, finite), min_size=3, max_size=30), st.floats(0.01, 100.0), finite)
def test_rdm_mag_invariants(pairs, scale, shift):
    a = np.array([p[0] for p in pairs])
    b = np.array([p[1] for p in pairs])
    if np.linalg.norm(a) < 1e-3 or np.linalg.norm(b) < 1e-3:
        return
    r, m = rdm_mag(a, b)
    assert 0.0 <= r <= 100.0
    assert m >= -100.0
    r2, m2 = rdm_mag(a, scale * b)
    assert r2 == pytest.approx(r, abs=1e-9)
    assert m2 == pytest.approx(100.0 * (scale * (1 + m / 100.0) - 1.0), rel=1e-9, abs=1e-9)
    # potentials relative to the reference are unchanged by a common offset of all points
    full = np.concatenate([[shift], a + shift])
    np.testing.assert_allclose(mean_referenced(full[1:] - full[0]), mean_referenced(a),
                               atol=1e-9 * (1 + abs(shift)))
    assert abs(mean_referenced(a).sum()) <= 1e-9 * (1 + np.abs(a).sum())
    if np.linalg.norm(mean_referenced(a)) > 1e-3 and np.linalg.norm(mean_referenced(b)) > 1e-3:
        r3, m3 = rdm_mag(mean_referenced(b), mean_referenced(full[1:] - full[0]))
        r4, m4 = rdm_mag(mean_referenced(b), mean_referenced(a))
        assert r3 == pytest.approx(r4, abs=1e-6) and m3 == pytest.approx(m4, abs=1e-6)


def test_mean_reference_includes_reference_point():
    u = mean_referenced([1.0, 2.0, 3.0])
    np.testing.assert_allclose(u, [-1.5, -0.5, 0.5, 1.5])


def test_statistics_example():
    s = statistics([4.0, 1.0, 3.0, 2.0])
    assert (s["min"], s["q1"], s["median"], s["q3"], s["max"]) == (1.0, 1.75, 2.5, 3.25, 4.0)
    assert s["iqr"] == 1.5 and s["tr"] == 3.0 and s["n"] == 4
    with pytest.raises(ValueError):
        statistics([])


@settings(max_examples=40, deadline=None)
@given(st.lists(finite, min_size=1, max_size=50))
def test_statistics_ordering(values):
    s = statistics(values)
    assert s["min"] <= s["q1"] <= s["median"] <= s["q3"] <= s["max"]
    assert s["iqr"] >= 0 and s["tr"] >= s["iqr"]


def test_config_yaml_roundtrip_and_hash(tmp_path):
    cfg = StudyConfig(cells_per_dim=8, eccentricities=(0.5, 0.9), dipoles_per_ecc=3)
    p = tmp_path / "c.yaml"
    p.write_text(yaml.safe_dump(cfg.to_dict()))
    back = StudyConfig.load(p)
    assert back.to_dict() == cfg.to_dict()
    assert back.hash() == cfg.hash()
    assert cfg.updated(output_dir="elsewhere").hash() == cfg.hash()
    assert cfg.updated(seed=1).hash() != cfg.hash()
    assert cfg.updated(solver={"rel_tol": 1e-9}).solver.rel_tol == 1e-9
    with pytest.raises(ValueError):
        StudyConfig.from_dict({"cells": 8})
    for bad in (dict(mode="fem"), dict(eccentricities=(1.0,)), dict(orientations=("oblique",)),
                dict(level_set_files=("a", "b"))):
        with pytest.raises(ValueError):
            StudyConfig(**bad)


@pytest.fixture(scope="module")
def tiny_study(tmp_path_factory):
    out = tmp_path_factory.mktemp("study")
    cfg = StudyConfig(cells_per_dim=8, eccentricities=(0.3, 0.7), dipoles_per_ecc=3, electrode_count=24,
                      output_dir=str(out))
    return cfg, run_study(cfg)


def test_study_outputs(tiny_study):
    cfg, res = tiny_study
    assert len(res.rows) == 2 * 2 * 3
    out = cfg.output_dir
    lines = open(f"{out}/metrics.csv").read().splitlines()
    assert lines[0] == f"# config_hash={cfg.hash()} seed={cfg.seed}"
    rows = list(csv.DictReader(lines[1:]))
    assert tuple(rows[0]) == CSV_COLUMNS and len(rows) == 12
    for r in rows:
        assert 0.0 <= float(r["rdm"]) <= 100.0
        assert r["relocated"] == "0"
    summary = json.load(open(f"{out}/summary.json"))
    assert summary["config_hash"] == cfg.hash()
    assert summary["placement_failures"] == 0
    assert summary["transfer"]["solves"] == 23
    assert len(summary["groups"]) == 4
    med = group_statistic(summary, 0.3, "radial", "rdm", "median")
    assert med == statistics([r["rdm"] for r in res.rows
                              if r["eccentricity"] == 0.3 and r["orientation"] == "radial"])["median"]
    with pytest.raises(KeyError):
        group_statistic(summary, 0.5, "radial", "rdm", "median")
    log = list(csv.reader(open(f"{out}/solver_log.csv")))
    assert len(log) == 1 + 23 + 1


def test_coarse_study_errors_are_moderate(tiny_study):
    # at 24 mm cells the errors are large but the topographies must still correlate
    _, res = tiny_study
    assert np.median([r["rdm"] for r in res.rows]) < 40.0


def test_voxel_study_runs(tmp_path):
    cfg = StudyConfig(mode="voxel-dg", cells_per_dim=8, eccentricities=(0.9939,), dipoles_per_ecc=4,
                      orientations=("radial",), electrode_count=16, output_dir=str(tmp_path))
    res = run_study(cfg)
    assert len(res.rows) == 4
    assert res.summary["relocated"] == sum(r["relocated"] for r in res.rows)
