from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import angle_oracle, assumptions_hold, line_angle, traced, unit
from multibounce.geom import DegenerateGeometryError, Plane, reflect_point
from multibounce.recon_sb import (
    ClassificationError,
    ReconstructedPoint,
    SingleBeamParams,
    apparent_position,
    classify_exposure,
    naive_pointcloud,
    range_1b,
    reconstruct_exposure,
    reconstruct_single_beam,
    solve_diffuse_first,
    solve_specular_first,
)
from multibounce.scene import Facet, LidarConfig, Material, Scene, Spot, simulate_exposures, trace_scene
from multibounce.scenes import BUILDERS, beam_grid, default_grid, make_lidar, quad, random_mirror_scene, room_facets

C0 = 299_792_458.0


def lidar_at(L, beams=((0, 0, 1),)):
    return LidarConfig(L, [0, 0, 0], list(beams), default_grid(400, 60.0))


def spot_of(lidar, X, extra_path=0.0):
    """Spot a single-scatter at X would produce, optionally with a longer path."""
    X = np.asarray(X, float)
    length = np.linalg.norm(X - lidar.L) + np.linalg.norm(X - lidar.C) + extra_path
    return Spot(unit(X - lidar.C), length / lidar.c, 1.0)


def by_kinds(paths, beam_index):
    return {p.kinds: p for p in paths if p.beam_index == beam_index}


# --- range equation ------------------------------------------------------------


def test_range_monostatic_is_half_path():
    lidar = lidar_at([0, 0, 0])
    assert range_1b(2e-8, 0.3, lidar) == pytest.approx(C0 * 2e-8 / 2, rel=1e-15)


def test_range_perpendicular_baseline_example():
    lidar = lidar_at([0.257, 0, 0])
    D = np.array([0.0, 0.0, 2.0])
    t = (np.linalg.norm(D - lidar.L) + 2.0) / C0
    assert range_1b(t, math.pi / 2, lidar) == pytest.approx(2.0, abs=1e-12)
    ct = C0 * t
    assert range_1b(t, math.pi / 2, lidar) == pytest.approx((ct * ct - 0.257**2) / (2 * ct), rel=1e-14)


@given(
    st.one_of(st.just(0.0), st.floats(1e-6, 0.5)),
    st.floats(-1.0, 1.0),
    st.floats(-1.0, 1.0),
    st.floats(0.5, 8.0),
)
def test_range_matches_triangle_geometry(s, x, y, z):
    lidar = lidar_at([s, 0.1 * s, 0.0])
    D = np.array([x, y, z])
    sp = spot_of(lidar, D)
    theta = angle_oracle(sp.direction, lidar.L - lidar.C) if s > 1e-9 else 0.0
    assert range_1b(sp.tof, theta, lidar) == pytest.approx(np.linalg.norm(D), rel=1e-9)
    assert np.allclose(apparent_position(sp, lidar), D, atol=1e-9)


def test_range_rejects_impossible_time():
    lidar = lidar_at([0.3, 0, 0])
    with pytest.raises(DegenerateGeometryError):
        range_1b(0.2 / C0, 0.0, lidar)


# --- closed-form solutions against the simulator ----------------------------------


def test_diffuse_first_recovers_scene_geometry():
    sc, paths, exps = traced("fig2a")
    truth = by_kinds(paths, 0)
    spots = sorted(exps[0].spots, key=lambda s: s.tof)
    D, S, n = solve_diffuse_first(spots[0], spots[1], sc.lidar)
    assert np.linalg.norm(D - truth["D"].vertices[1]) < 1e-9
    assert np.linalg.norm(S - truth["DS"].vertices[2]) < 1e-9
    assert line_angle(n, sc.facet("mirror").plane.normal) < 1e-10


def test_diffuse_first_zero_separation():
    lidar = lidar_at([0.2, 0, 0])
    sp = spot_of(lidar, [0.1, 0.2, 2.0])
    D, S, n = solve_diffuse_first(sp, sp, lidar)
    assert n is None and np.array_equal(D, S)
    with pytest.raises(ClassificationError):
        solve_diffuse_first(sp, Spot(sp.direction, sp.tof * 0.9, 1.0), lidar)


def test_specular_first_recovers_scene_geometry():
    sc, paths, exps = traced("fig2b")
    truth = by_kinds(paths, 0)
    two, three = sorted(exps[0].spots, key=lambda s: s.tof)
    sol = solve_specular_first(two, three, sc.lidar.beams[0], sc.lidar)
    assert np.linalg.norm(sol.D - truth["SD"].vertices[2]) < 1e-9
    assert np.linalg.norm(sol.S1 - truth["SD"].vertices[1]) < 1e-9
    assert np.linalg.norm(sol.S2 - truth["SDS"].vertices[3]) < 1e-9
    n = sc.facet("mirror").plane.normal
    assert line_angle(sol.n1, n) < 1e-10 and line_angle(sol.n2, n) < 1e-10


def test_specular_first_diffuse_point_identity():
    """r_DC equals the apparent range of the 3B image minus c times the arrival gap."""
    sc, paths, exps = traced("fig2b")
    two, three = sorted(exps[0].spots, key=lambda s: s.tof)
    D = by_kinds(paths, 0)["SD"].vertices[2]
    image = reflect_point(D, sc.facet("mirror").plane)
    r_image = np.linalg.norm(image - sc.lidar.C)
    assert np.linalg.norm(D) == pytest.approx(r_image - sc.lidar.c * (three.tof - two.tof), abs=1e-9)


def test_specular_first_rejects_wrong_order():
    sc, _, exps = traced("fig2b")
    two, three = sorted(exps[0].spots, key=lambda s: s.tof)
    with pytest.raises(ClassificationError):
        solve_specular_first(three, two, sc.lidar.beams[0], sc.lidar)


def test_monostatic_limit_merges_reflection_points():
    base = BUILDERS["fig2b"]()
    L = np.array([1e-6, 0.0, 0.0])
    beam = unit(np.array([0.95, 0.1, 2.2]) - L)
    sc = Scene(base.facets, LidarConfig(L, [0, 0, 0], [beam], base.lidar.grid))
    (e,) = simulate_exposures(sc)
    two, three = sorted(e.spots, key=lambda s: s.tof)
    sol = solve_specular_first(two, three, beam, sc.lidar)
    assert np.linalg.norm(sol.S1 - sol.S2) < 1e-4


def two_mirror_scene():
    """Specular-first layout with a floor mirror showing a second image of D."""
    base = BUILDERS["fig2b"]()
    floor = Facet(quad([-0.2, -0.6, 2.0], [0, 1, 0], 2.0, 2.5, up=(0, 0, 1)), Material.specular(0.9), "floor_mirror")
    return Scene(list(base.facets) + [floor], base.lidar)


def test_extra_mirror_images_give_extra_reflection_points():
    sc = two_mirror_scene()
    paths = trace_scene(sc)
    (e,) = simulate_exposures(sc, paths)
    res = reconstruct_exposure(e.spots, sc.lidar.beams[0], sc.lidar, 0)
    floor = [p for p in res.points if p.label == "specular_observed" and abs(p.position[1] + 0.6) < 1e-6]
    assert res.classification.kind == "specular_first" and len(floor) == 1
    truth = next(p for p in paths if p.kinds == "SDS" and p.surface_ids[2] == "floor_mirror")
    assert np.linalg.norm(floor[0].position - truth.vertices[3]) < 1e-9
    assert line_angle(floor[0].normal, [0, 1, 0]) < 1e-10


# --- classification ----------------------------------------------------------------


def test_classify_layout_examples():
    for name, kind in (("fig2a", "diffuse_first"), ("fig2b", "specular_first")):
        sc, _, exps = traced(name)
        cls = classify_exposure(exps[0].spots, sc.lidar.beams[0], sc.lidar)
        assert cls.kind == kind
        assert cls.true_spot == int(np.argmin([s.tof for s in exps[0].spots]))


def test_classify_trivial_exposures():
    sc, _, exps = traced("fig2b")
    beam = sc.lidar.beams[0]
    assert classify_exposure([], beam, sc.lidar).kind == "empty"
    two = min(exps[0].spots, key=lambda s: s.tof)
    assert classify_exposure([two], beam, sc.lidar).kind == "two_bounce_only"
    sc_a, _, exps_a = traced("fig2a")
    one = min(exps_a[0].spots, key=lambda s: s.tof)
    assert classify_exposure([one], sc_a.lidar.beams[0], sc_a.lidar).kind == "one_bounce_only"


def test_lone_two_bounce_spot_emits_no_point():
    sc, _, exps = traced("fig2b")
    two = min(exps[0].spots, key=lambda s: s.tof)
    res = reconstruct_exposure([two], sc.lidar.beams[0], sc.lidar, 0)
    assert res.points == [] and res.roles == {0: "2B"}


def test_empty_exposure_gives_nothing():
    sc, _, _ = traced("fig2a")
    res = reconstruct_exposure([], sc.lidar.beams[0], sc.lidar, 0)
    assert res.points == [] and res.classification.kind == "empty"


def test_out_of_view_true_spot_is_taken_for_a_direct_return():
    """With the deflected spot outside the view only its mirror image remains, on the beam."""
    sc, paths, exps = traced("failure_fov")
    assert all(not sc.lidar.grid.in_fov(unit(p.arrival_vertex)) for p in paths if p.kinds == "SD")
    (r,) = reconstruct_single_beam(exps, sc.lidar)
    assert r.classification.kind == "one_bounce_only"
    (pt,) = r.points
    rec = paths[pt.sources[0]]
    assert rec.kinds == "SDS"
    image = reflect_point(rec.diffuse_vertex, sc.facet("mirror").plane)
    assert np.linalg.norm(pt.position - image) < 1e-9


# --- transparent surfaces ----------------------------------------------------------


@pytest.mark.parametrize("name", ["two_wall_window_clean", "window"])
def test_transparent_returns_are_separated(name):
    sc, paths, exps = traced(name)
    res = reconstruct_single_beam(exps, sc.lidar, SingleBeamParams(reflectance_fallback=True))
    wrong = total = 0
    for e, r in zip(exps, res):
        if not assumptions_hold([p for p in paths if p.beam_index == e.beam_index], sc.lidar):
            continue
        for i, sp in enumerate(e.spots):
            total += 1
            wrong += r.kinds[i] not in {paths[k].spot_kind for k in sp.sources}
    assert total > 50 and wrong == 0


def test_behind_window_points_lie_on_hidden_wall():
    sc, paths, exps = traced("two_wall_window_clean")
    pts = [p for r in reconstruct_single_beam(exps, sc.lidar) for p in r.points if p.label == "behind_window"]
    pts = [p for p in pts if len(p.sources) == 1]  # merged with a 3B image, the position is a blend
    assert len(pts) > 20
    back = sc.facet("back_wall").plane
    assert max(abs(back.signed_distance(p.position)) for p in pts) < 1e-9


def test_dim_hidden_wall_is_mistaken_for_an_image():
    sc = BUILDERS["two_wall_window_clean"](back_albedo=0.02)
    paths = trace_scene(sc)
    exps = simulate_exposures(sc, paths, min_energy=2e-4)
    res = reconstruct_single_beam(exps, sc.lidar)
    confused = sum(
        1 for e, r in zip(exps, res) for i, sp in enumerate(e.spots)
        if r.kinds[i] == "image_3b" and "behind" in {paths[k].spot_kind for k in sp.sources}
    )
    assert confused > 0


# --- naive baseline ------------------------------------------------------------------


def test_naive_equals_full_pipeline_without_mirrors():
    L = [0.257, 0, 0]
    beams = beam_grid(L, np.radians((-30, -5)), np.radians((-10, 10)), 4, 4)
    sc = Scene(room_facets(), make_lidar(beams))
    exps = simulate_exposures(sc)
    full = [p for r in reconstruct_single_beam(exps, sc.lidar) for p in r.points]
    naive = naive_pointcloud(exps, sc.lidar)
    assert len(full) == len(naive) == 16
    for a, b in zip(full, naive):
        assert np.array_equal(a.position, b.position) and a.label == b.label == "diffuse"


def test_naive_misplaces_mirror_returns():
    sc, paths, exps = traced("mirror")
    naive = naive_pointcloud(exps, sc.lidar)
    mirror = sc.facet("mirror")
    on_mirror = [p for p in naive if abs(mirror.plane.signed_distance(p.position)) < 5e-3 and mirror.contains(p.position, 5e-3)]
    assert on_mirror == []
    checked = 0
    for p in naive:
        rec = paths[p.sources[0]]
        if rec.kinds == "SDS" and len(p.sources) == 1:
            image = reflect_point(rec.diffuse_vertex, sc.facet(rec.surface_ids[2]).plane)
            assert p.label == "false_naive" and np.linalg.norm(p.position - image) < 1e-9
            checked += 1
    assert checked > 10


def test_point_label_validation():
    with pytest.raises(ValueError):
        ReconstructedPoint(np.zeros(3), None, "bogus", "Eq1")
    with pytest.raises(ValueError):
        ReconstructedPoint(np.zeros(3), None, "specular_observed", "Eq2")


# --- noiseless round trip on random layouts ----------------------------------------


def check_random_scene(seed):
    sc = random_mirror_scene(seed)
    paths = trace_scene(sc)
    exps = simulate_exposures(sc, paths)
    n = 0
    for e, r in zip(exps, reconstruct_single_beam(exps, sc.lidar)):
        beam_paths = [p for p in paths if p.beam_index == e.beam_index]
        if not assumptions_hold(beam_paths, sc.lidar):
            continue
        assert not r.errors
        for p in r.points:
            errs = []
            for k in p.sources:
                rec = paths[k]
                idx = {"diffuse": rec.kinds.index("D"), "arrival": len(rec.kinds) - 1, "first": 0}[p.truth_role]
                errs.append(np.linalg.norm(p.position - rec.vertices[1 + idx]))
                if p.normal is not None:
                    errs[-1] = max(errs[-1], line_angle(p.normal, sc.facet(rec.surface_ids[idx]).plane.normal))
            assert min(errs) < 1e-9
            n += 1
    return n


@settings(max_examples=40)
@given(st.integers(0, 100_000))
def test_random_layouts_reconstruct_exactly(seed):
    check_random_scene(seed)
