from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from helpers import angle_oracle, traced, unit
from multibounce.evaluation import (
    assign_surfaces,
    compare_planes,
    confusion_matrix,
    distance_to_facet,
    match_spots,
    plane_errors,
    point_error_summary,
    residual_errors,
    spot_confusion,
    surface_distance_summary,
    surface_reports,
)
from multibounce.geom import Plane
from multibounce.recon_sb import reconstruct_single_beam
from multibounce.scene import Spot
from multibounce.sensor import perturb_spots

Z1 = Plane(np.array([0.0, 0.0, 1.0]), 1.0)


def plane_samples(n, normal, offset, seed=0, count=25):
    rng = np.random.default_rng(seed)
    n = unit(normal)
    helper = np.array([1.0, 0, 0]) if abs(n[0]) < 0.9 else np.array([0, 1.0, 0])
    e1 = unit(np.cross(n, helper))
    e2 = np.cross(n, e1)
    return offset * n + rng.uniform(-1, 1, (count, 1)) * e1 + rng.uniform(-1, 1, (count, 1)) * e2


def test_points_on_plane_have_zero_error():
    pts = plane_samples(20, [0, 0, 1], 1.0)
    rep = plane_errors(pts, np.tile([0, 0, 1.0], (25, 1)), Z1)
    assert rep.rms_displacement < 1e-15 and rep.rms_tilt == 0.0 and rep.count == 25


def test_uniform_offset_shows_as_displacement():
    pts = plane_samples(20, [0, 0, 1], 1.01)
    rep = plane_errors(pts, None, Z1)
    assert rep.rms_displacement == pytest.approx(0.01, abs=1e-12)
    assert rep.mean_displacement == pytest.approx(0.01, abs=1e-12)
    assert math.isnan(rep.rms_tilt)


def test_flipped_normals_have_no_tilt():
    rep = plane_errors([[0, 0, 1.0]], [[0, 0, -1.0]], Z1)
    assert rep.tilt[0] == 0.0


def test_tilt_of_known_angle():
    a = math.radians(0.5)
    rep = plane_errors([[0, 0, 1.0]], [[math.sin(a), 0, math.cos(a)]], Z1)
    assert rep.tilt[0] == pytest.approx(a, rel=1e-12)


def test_missing_normals_are_skipped():
    rep = plane_errors([[0, 0, 1.0], [0, 0, 1.0]], [[np.nan] * 3, [0.1, 0, 1.0]], Z1)
    assert math.isnan(rep.tilt[0]) and rep.rms_tilt == pytest.approx(rep.tilt[1])


def test_empty_input_rejected():
    with pytest.raises(ValueError):
        plane_errors(np.zeros((0, 3)), None, Z1)


def test_reported_plane_comparison():
    fit = Plane(np.array([-0.8797, -0.0048, -0.4754]), -1.406)
    truth = Plane(np.array([-0.8825, -0.0010, -0.4704]), -1.389)
    angle, dd = compare_planes(fit, truth)
    oracle = angle_oracle([-0.8797, -0.0048, -0.4754], [-0.8825, -0.0010, -0.4704])
    assert angle == pytest.approx(oracle, rel=1e-9)
    assert math.degrees(angle) == pytest.approx(0.394, abs=5e-4)
    assert dd == pytest.approx(0.017, abs=1e-12)


def test_compare_planes_aligns_signs():
    a = Plane(np.array([0, 0, 1.0]), 2.0)
    b = Plane(np.array([0, 0, -1.0]), -2.0)
    assert compare_planes(a, b) == (0.0, 0.0)


def rotation(seed):
    q, _ = np.linalg.qr(np.random.default_rng(seed).normal(size=(3, 3)))
    return q * np.sign(np.linalg.det(q))


@given(st.integers(0, 10_000))
def test_errors_invariant_under_rigid_motion(seed):
    rng = np.random.default_rng(seed)
    pts = plane_samples(0, [0, 0, 1], 1.0, seed) + rng.normal(0, 0.003, (25, 3))
    nrm = np.array([unit([0, 0, 1] + rng.normal(0, 0.01, 3)) for _ in range(25)])
    R, t = rotation(seed), rng.uniform(-2, 2, 3)
    a = plane_errors(pts, nrm, Z1)
    moved = Plane(R @ Z1.normal, Z1.offset + float((R @ Z1.normal) @ t))
    b = plane_errors(pts @ R.T + t, nrm @ R.T, moved)
    assert np.allclose(a.displacement, b.displacement, atol=1e-12)
    assert np.allclose(a.tilt, b.tilt, atol=1e-12)
    # rms^2 = mean^2 + population variance
    assert a.rms_displacement**2 == pytest.approx(a.mean_displacement**2 + np.var(a.displacement), rel=1e-9, abs=1e-18)


def test_residual_errors_about_own_fit():
    pts = plane_samples(0, [0.2, 0.1, 1.0], 2.0)
    rep = residual_errors(pts, np.tile(unit([0.2, 0.1, 1.0]), (25, 1)))
    assert rep.rms_displacement < 1e-12 and rep.rms_tilt < 1e-12


def test_projected_coordinates_preserve_in_plane_distances():
    pts = plane_samples(0, [0, 0, 1], 1.0)
    rep = plane_errors(pts, None, Z1)
    d3 = np.linalg.norm(pts[0] - pts[1])
    assert np.linalg.norm(rep.projected[0] - rep.projected[1]) == pytest.approx(d3, rel=1e-12)
    d = rep.to_dict()
    assert d["count"] == 25 and len(d["projected_m"]) == 25 and d["tilt_rad"][0] is None


# --- scene-level metrics --------------------------------------------------------------


def test_mirror_scene_metrics_are_exact_without_noise():
    sc, paths, exps = traced("mirror")
    res = reconstruct_single_beam(exps, sc.lidar)
    pts = [p for r in res for p in r.points]
    reports = surface_reports(pts, sc)
    assert set(reports) == {"mirror"}
    assert reports["mirror"].rms_displacement < 1e-9 and reports["mirror"].rms_tilt < 1e-9
    summary = point_error_summary(pts, paths)
    assert all(v["max_error_m"] < 1e-9 for v in summary.values())
    matrix, wrong = spot_confusion(exps, res, paths)
    assert wrong == [] and sum(sum(r.values()) for r in matrix.values()) == sum(len(e.spots) for e in exps)
    dist = surface_distance_summary(pts, sc)
    assert all(v["max_distance_m"] < 1e-9 for v in dist.values())


def test_assign_surfaces_and_distance():
    sc, _, _ = traced("fig2a")
    mirror = sc.facet("mirror")
    c = mirror.vertices.mean(axis=0)
    assert assign_surfaces([c, c + 0.2 * mirror.plane.normal], sc) == ["mirror", None]
    assert distance_to_facet(c + 0.2 * mirror.plane.normal, mirror) == pytest.approx(0.2, abs=1e-12)
    corner = mirror.vertices[0]
    outward = unit(corner - c)
    assert distance_to_facet(corner + 0.1 * outward, mirror) == pytest.approx(0.1, abs=1e-12)


def test_confusion_matrix_counts():
    m = confusion_matrix([("direct", "direct"), ("direct", "image_3b"), ("direct", "direct")])
    assert m == {"direct": {"direct": 2, "image_3b": 1}}


def test_match_spots_copies_sources():
    sc, _, exps = traced("fig2a")
    ideal = exps[0].spots
    found = perturb_spots(ideal, 1e-12, 1e-5, 0)
    for f in found:
        f.sources = ()
    match = match_spots(found, ideal, 1e-3, 1e-10)
    assert match == [0, 1] and [f.sources for f in found] == [s.sources for s in ideal]
    stray = [Spot(np.array([0.0, 0.0, 1.0]), 1e-9, 1.0)]
    assert match_spots(stray, ideal, 1e-3, 1e-10) == [-1]
