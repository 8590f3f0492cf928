from __future__ import annotations

import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from helpers import angle_oracle, line_angle, traced, unit
from multibounce.geom import (
    DegenerateGeometryError,
    Plane,
    SphericalDir,
    angles_from_dir,
    angular_separation,
    bisector_normal,
    convex_hull_contains,
    dir_from_angles,
    dir_from_scan_angles,
    fit_plane_oriented,
    normalize,
    ray_plane_intersect,
    reflect_dir,
    reflect_point,
    scan_angles,
)

finite = st.floats(-10, 10, allow_nan=False)
vec3 = st.tuples(finite, finite, finite).map(np.array)
unit3 = st.tuples(st.floats(-1, 1), st.floats(-1, 1), st.floats(-1, 1)).filter(
    lambda v: 0.1 < np.linalg.norm(v)
).map(unit)


def random_units(n, seed=0):
    v = np.random.default_rng(seed).normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


# --- directions ---------------------------------------------------------------------


def test_boresight_is_plus_z():
    assert np.allclose(dir_from_angles(SphericalDir(0.0, 0.0)), [0, 0, 1], atol=1e-15)


def test_quarter_turn_lies_in_xz_plane():
    u = dir_from_angles(SphericalDir(math.pi / 2, 0.0))
    assert abs(u[1]) < 1e-15 and abs(u[2]) < 1e-15 and abs(abs(u[0]) - 1) < 1e-15


def test_angle_round_trip_ten_thousand():
    for u in random_units(10_000):
        assert np.max(np.abs(dir_from_angles(angles_from_dir(u)) - u)) < 1e-12


def test_angular_separation_trivial_cases():
    a = SphericalDir(0.3, 1.1)
    assert angular_separation(a, a) == 0.0
    assert angular_separation(SphericalDir(math.pi / 2, 0), SphericalDir(math.pi / 2, math.pi)) == pytest.approx(math.pi, abs=1e-12)


def test_angular_separation_matches_dot_product():
    us, vs = random_units(500, 1), random_units(500, 2)
    for u, v in zip(us, vs):
        ref = math.acos(max(-1.0, min(1.0, float(u @ v))))
        assert angular_separation(angles_from_dir(u), angles_from_dir(v)) == pytest.approx(ref, abs=1e-10)


@given(st.floats(-1.2, 1.2), st.floats(-1.2, 1.2))
def test_scan_angle_chart_round_trip(h, v):
    hv = scan_angles(dir_from_scan_angles(h, v))
    assert hv[0] == pytest.approx(h, abs=1e-12) and hv[1] == pytest.approx(v, abs=1e-12)


# --- reflections ----------------------------------------------------------------------


def test_reflect_point_examples():
    z0 = Plane(np.array([0.0, 0.0, 1.0]), 0.0)
    assert np.allclose(reflect_point([0, 0, 1], z0), [0, 0, -1])
    p = np.array([0.4, -2.0, 0.0])
    assert np.array_equal(reflect_point(p, z0), p)


@given(vec3, unit3, finite)
def test_reflect_point_is_involution(p, n, d):
    pl = Plane(n, d)
    q = reflect_point(p, pl)
    assert np.allclose(reflect_point(q, pl), p, atol=1e-12 * (1 + abs(d) + np.abs(p).max()))
    # the plane bisects p and its image
    assert abs(pl.signed_distance(0.5 * (p + q))) < 1e-11 * (1 + abs(d) + np.abs(p).max())


def test_reflect_dir_examples():
    n = np.array([0.0, 0.0, 1.0])
    d = np.array([1.0, 0.0, 0.0])
    assert np.array_equal(reflect_dir(d, n), d)
    assert np.allclose(reflect_dir(-n, n), n)


@given(unit3, unit3)
def test_reflect_dir_preserves_norm_and_incidence(d, n):
    r = reflect_dir(d, n)
    assert abs(np.linalg.norm(r) - 1) < 1e-12
    # incidence angle against -n equals reflection angle against +n
    assert angle_oracle(-d, n) == pytest.approx(angle_oracle(r, n), abs=1e-7)
    assert abs(abs(d @ n) - abs(r @ n)) < 1e-12


def test_bisector_examples():
    assert np.allclose(bisector_normal([-1, 0, 1], [1, 0, 1], [0, 0, 0]), [0, 0, 1])
    D = np.array([0.3, 0.2, 2.0])
    assert np.allclose(bisector_normal(D, D, [0, 0, 0]), normalize(D))
    with pytest.raises(DegenerateGeometryError):
        bisector_normal([1, 0, 0], [-1, 0, 0], [0, 0, 0])


def test_bisector_recovers_simulated_mirror_normal():
    sc, paths, _ = traced("mirror")
    mirror = sc.facet("mirror")
    checked = 0
    for p in paths:
        if p.kinds == "DS":
            D, S, C = p.vertices[1], p.vertices[2], p.vertices[3]
            assert line_angle(bisector_normal(D, C, S), mirror.plane.normal) < 1e-10
            checked += 1
    assert checked > 10


def test_ray_plane_examples():
    z2 = Plane(np.array([0.0, 0.0, 1.0]), 2.0)
    assert np.allclose(ray_plane_intersect([0, 0, 0], [0, 0, 1], z2), [0, 0, 2])
    assert ray_plane_intersect([0, 0, 0], [1, 0, 0], z2) is None
    assert ray_plane_intersect([0, 0, 3], [0, 0, 1], z2) is None  # plane behind the ray


@given(vec3, unit3, unit3, finite)
def test_ray_plane_plug_back(o, d, n, off):
    pl = Plane(n, off)
    x = ray_plane_intersect(o, d, pl)
    if x is not None:
        t = np.linalg.norm(x - o)
        assert abs(pl.signed_distance(x)) < 1e-12 * (1 + t + np.abs(o).max() + abs(off))


# --- oriented plane fitting -----------------------------------------------------------


def test_fit_single_oriented_point():
    pl = fit_plane_oriented([[1.0, 2.0, 3.0]], [[0.0, 0.0, 1.0]])
    assert np.allclose(pl.normal, [0, 0, 1]) and pl.offset == pytest.approx(3.0)


def test_fit_points_on_z1():
    pts = np.c_[np.random.default_rng(0).uniform(-1, 1, (20, 2)), np.ones(20)]
    pl = fit_plane_oriented(pts, np.tile([0.0, 0.0, 1.0], (20, 1)))
    assert np.allclose(pl.normal, [0, 0, 1], atol=1e-15) and abs(pl.offset - 1.0) < 1e-15


def test_fit_reported_mirror_plane():
    n = unit([-0.8797, -0.0048, -0.4754])
    d = -1.406
    rng = np.random.default_rng(3)
    e1 = unit(np.cross(n, [0, 1, 0]))
    e2 = np.cross(n, e1)
    pts = d * n + rng.uniform(-0.5, 0.5, (50, 1)) * e1 + rng.uniform(-0.8, 0.8, (50, 1)) * e2
    pl = fit_plane_oriented(pts, np.tile(n, (50, 1)))
    assert angle_oracle(pl.normal, n) < 1e-12 and abs(pl.offset - d) < 1e-12


@given(unit3, st.floats(-5, 5), st.integers(0, 10_000))
def test_fit_reproduces_generating_plane(n, d, seed):
    rng = np.random.default_rng(seed)
    helper = np.array([1.0, 0, 0]) if abs(n[0]) < 0.9 else np.array([0, 1.0, 0])
    e1 = unit(np.cross(n, helper))
    e2 = np.cross(n, e1)
    pts = d * n + rng.uniform(-2, 2, (15, 1)) * e1 + rng.uniform(-2, 2, (15, 1)) * e2
    pl = fit_plane_oriented(pts, np.tile(n, (15, 1)))
    assert angle_oracle(pl.normal, n) < 1e-12
    assert abs(pl.offset - d) < 1e-12 * (1 + abs(d)) * 10


def test_fit_rejects_opposed_normals():
    with pytest.raises(DegenerateGeometryError):
        fit_plane_oriented([[0, 0, 1], [0, 0, 1]], [[0, 0, 1], [0, 0, -1]])


# --- hulls --------------------------------------------------------------------------


def brute_force_inside(pts, q) -> bool:
    """q is inside iff it lies on the inner side of every supporting line through two points."""
    for i, j in itertools.combinations(range(len(pts)), 2):
        a, b = pts[i], pts[j]
        side = lambda p: (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])
        others = [side(pts[k]) for k in range(len(pts)) if k not in (i, j)]
        if all(s > 0 for s in others) and side(q) < 0:
            return False
        if all(s < 0 for s in others) and side(q) > 0:
            return False
    return True


def test_square_hull():
    sq = [(0, 0), (1, 0), (1, 1), (0, 1)]
    assert convex_hull_contains(sq, (0.5, 0.5))
    assert not convex_hull_contains(sq, (5.0, 5.0))
    assert convex_hull_contains(sq, (1.0, 0.5))  # boundary counts


def test_random_hulls_match_brute_force():
    rng = np.random.default_rng(7)
    for _ in range(200):
        pts = rng.uniform(-1, 1, (rng.integers(3, 9), 2))
        q = rng.uniform(-1.2, 1.2, 2)
        assert convex_hull_contains(pts, q) == brute_force_inside(pts, q)
