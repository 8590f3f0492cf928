"""Builders for the bundled synthetic scenes.

Every bundled ``*.scene`` file under ``data/scenes`` is produced from one of
these functions (see ``write_bundled_scenes``).  Receiver at the origin,
transmitter offset along ``+x``, boresight ``+z``, ``+y`` up.
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np

from .geom import normalize
from .scene import DetectorGrid, Facet, LidarConfig, Material, Scene, beam_grid

DEFAULT_BASELINE = 0.257  # [m]
DEFAULT_NOISE = {
    "irf_fwhm_ps": 128.0,
    "bin_width_ps": 16.0,
    "n_bins": 2048,
    "background_rate": 0.05,
    "signal_scale": 2.0e5,
    "dwell_time": 1.0,
    "tof_jitter_ps": 0.0,
    "angle_noise_deg": 0.0,
}

WHITE = Material.diffuse(0.8)
GREY = Material.diffuse(0.5)
DARK = Material.diffuse(0.03)
MIRROR = Material.specular(0.95)
GLASS = Material.transparent(0.1, 0.85)


def deg(x):
    return math.radians(x)


def quad(center, normal, width, height, up=(0.0, 1.0, 0.0)):
    """Rectangle centred at ``center`` facing ``normal``; ``height`` runs along ``up``."""
    n = normalize(normal)
    up = np.asarray(up, dtype=float)
    horiz = np.cross(up, n)
    if np.linalg.norm(horiz) < 1e-9:
        horiz = np.cross([1.0, 0.0, 0.0], n)
    horiz = normalize(horiz)
    vert = np.cross(n, horiz)
    c = np.asarray(center, dtype=float)
    hw, hh = 0.5 * width, 0.5 * height
    # counter-clockwise seen from the front so the Newell normal matches
    return np.array([c - hw * horiz - hh * vert, c + hw * horiz - hh * vert, c + hw * horiz + hh * vert, c - hw * horiz + hh * vert])


def default_grid(n=200, half_fov=30.0) -> DetectorGrid:
    return DetectorGrid(-deg(half_fov), deg(half_fov), -deg(half_fov), deg(half_fov), n, n)


def make_lidar(beams, baseline=DEFAULT_BASELINE, grid=None) -> LidarConfig:
    return LidarConfig(L=[baseline, 0.0, 0.0], C=[0.0, 0.0, 0.0], beams=beams, grid=grid or default_grid())


def aim(L, target) -> np.ndarray:
    return normalize(np.asarray(target, dtype=float) - np.asarray(L, dtype=float))


# mirror pose used across the mirror/window rooms, seen obliquely at ~2.4 m
MIRROR_NORMAL = normalize([-0.88, 0.0, -0.47])
MIRROR_CENTER = np.array([0.9, 0.1, 2.2])


def room_facets(left_x=-0.7, floor_y=-0.8, back_z=4.5, back_wall=True, albedo=0.8):
    mat = Material.diffuse(albedo)
    facets = [
        Facet(quad([left_x, 0.35, 2.75], [1, 0, 0], 4.5, 2.3), mat, "left_wall", "room"),
        Facet(quad([0.9, floor_y, 2.75], [0, 1, 0], 3.2, 4.5, up=(0, 0, 1)), mat, "floor", "room"),
    ]
    if back_wall:
        facets.append(Facet(quad([0.9, 0.35, back_z], [0, 0, -1], 3.2, 2.3), mat, "back_wall", "room"))
    return facets


def fig2a_scene() -> Scene:
    """Diffuse wall lit directly, mirror image visible in a nearby mirror."""
    L = [DEFAULT_BASELINE, 0, 0]
    wall = Facet(quad([-0.7, 0.0, 2.5], [1, 0, 0], 3.0, 2.0), WHITE, "wall")
    mirror = Facet(quad(MIRROR_CENTER, MIRROR_NORMAL, 1.0, 1.6), MIRROR, "mirror")
    beam = aim(L, [-0.7, 0.0, 2.6])
    return Scene([wall, mirror], make_lidar([beam]), dict(DEFAULT_NOISE), "fig2a")


def fig2b_scene() -> Scene:
    """Mirror lit directly; the deflected beam lands on the wall."""
    L = [DEFAULT_BASELINE, 0, 0]
    wall = Facet(quad([-0.7, 0.0, 2.5], [1, 0, 0], 3.0, 2.0), WHITE, "wall")
    mirror = Facet(quad(MIRROR_CENTER, MIRROR_NORMAL, 1.0, 1.6), MIRROR, "mirror")
    beam = aim(L, MIRROR_CENTER + [0.05, 0.0, 0.0])
    return Scene([wall, mirror], make_lidar([beam]), dict(DEFAULT_NOISE), "fig2b")


def mirror_room_scene(n_h=10, n_v=10) -> Scene:
    """Tall mirror in a room with a floor, left wall and back wall."""
    facets = room_facets()
    facets.append(Facet(quad(MIRROR_CENTER, MIRROR_NORMAL, 1.0, 1.6), MIRROR, "mirror", "mirror"))
    beams = beam_grid([DEFAULT_BASELINE, 0, 0], (deg(-18), deg(26)), (deg(-20), deg(16)), n_h, n_v)
    return Scene(facets, make_lidar(beams), dict(DEFAULT_NOISE), "mirror_room")


def window_room_scene(n_h=11, n_v=9) -> Scene:
    """Glass pane in the mirror's pose; nothing behind it, so transmitted light escapes."""
    facets = room_facets(back_wall=False)
    # clip the floor to the near side of the glass plane
    facets[1] = Facet(_floor_in_front(MIRROR_CENTER, MIRROR_NORMAL), Material.diffuse(0.8), "floor", "room")
    facets.append(Facet(quad(MIRROR_CENTER, MIRROR_NORMAL, 1.0, 1.6), GLASS, "window", "window"))
    # the grid also covers the side wall so deflected-beam spots have one-bounce neighbours
    beams = beam_grid([DEFAULT_BASELINE, 0, 0], (deg(-28), deg(28)), (deg(-18), deg(16)), n_h, n_v)
    return Scene(facets, make_lidar(beams), dict(DEFAULT_NOISE), "window_mb")


def _floor_in_front(center, normal, floor_y=-0.8, x0=-0.7, z0=0.5, z1=5.0, margin=0.01):
    """Floor polygon on the receiver side of a vertical plane."""
    n = np.asarray(normal, dtype=float)
    d = float(n @ center) + margin * (1 if n @ center < 0 else -1)
    # plane n_x x + n_z z = d, solved for x at a given depth
    x_at = lambda z: (d - n[2] * z) / n[0]
    return [[x0, floor_y, z0], [x0, floor_y, z1], [x_at(z1), floor_y, z1], [x_at(z0), floor_y, z0]]


def window_objects_scene(n_h=11, n_v=9) -> Scene:
    """Glass pane with a box-like object and a back wall behind it."""
    facets = room_facets(back_wall=False)
    facets.append(Facet(quad(MIRROR_CENTER, MIRROR_NORMAL, 1.0, 1.6), GLASS, "window", "window"))
    facets.append(Facet(quad([2.0, 0.35, 4.0], [0, 0, -1], 2.0, 2.3), WHITE, "behind_wall", "behind"))
    facets.append(Facet(quad([1.35, -0.4, 3.0], [-0.3, 0, -1], 0.4, 0.5), GREY, "behind_box", "behind"))
    beams = beam_grid([DEFAULT_BASELINE, 0, 0], (deg(-12), deg(28)), (deg(-18), deg(16)), n_h, n_v)
    return Scene(facets, make_lidar(beams), dict(DEFAULT_NOISE), "window")


def two_wall_window_scene(
    front_albedo=0.8, back_albedo=0.8, back_z=3.6, n_h=14, n_v=10, h_range=(10.0, 28.0), v_range=(-14.0, 14.0)
) -> Scene:
    """Window between a front-side wall and a wall behind it.

    The default materials satisfy the transparent-surface assumptions:
    glass reflects less than it transmits and three-bounce images are
    bright enough to detect.
    """
    facets = [
        Facet(quad([-0.7, 0.35, 2.75], [1, 0, 0], 4.5, 2.3), Material.diffuse(front_albedo), "front_wall", "front"),
        Facet(quad(MIRROR_CENTER, MIRROR_NORMAL, 1.0, 1.6), GLASS, "window", "window"),
        Facet(quad([2.2, 0.35, back_z], [0, 0, -1], 2.6, 2.3), Material.diffuse(back_albedo), "back_wall", "back"),
    ]
    beams = beam_grid([DEFAULT_BASELINE, 0, 0], np.radians(h_range), np.radians(v_range), n_h, n_v)
    return Scene(facets, make_lidar(beams), dict(DEFAULT_NOISE), "two_wall_window")


def two_wall_window_clean_scene(**kw) -> Scene:
    """Two-wall window with every beam landing on the glass and every 3B image in view."""
    kw.setdefault("h_range", (11.5, 25.0))
    kw.setdefault("v_range", (-10.5, 14.0))
    kw.setdefault("n_h", 12)
    kw.setdefault("n_v", 9)
    sc = two_wall_window_scene(**kw)
    sc.name = "two_wall_window_clean"
    return sc


def pitcher_scene(n_sides=32, n_rings=4, radius=0.18, height=0.5) -> Scene:
    """Faceted specular body of revolution between two side walls and a floor.

    Only diffuse surfaces are lit; the pitcher shows up through two-bounce highlights.
    """
    center = np.array([0.1, -0.8, 2.2])
    facets = [
        Facet(quad([-0.8, 0.0, 2.2], [1, 0, 0], 3.0, 1.6), WHITE, "left_wall", "room"),
        Facet(quad([1.0, 0.0, 2.2], [-1, 0, 0], 3.0, 1.6), WHITE, "right_wall", "room"),
        Facet(quad([0.1, -0.8, 2.2], [0, 1, 0], 1.8, 3.0, up=(0, 0, 1)), GREY, "floor", "room"),
    ]
    ys = np.linspace(0.0, height, n_rings + 1)
    # bulging profile: radius peaks two thirds of the way up
    radii = radius * (0.75 + 0.35 * np.sin(np.pi * ys / height * 0.9))
    angles = np.linspace(0.0, 2 * np.pi, n_sides + 1)
    for r in range(n_rings):
        for k in range(n_sides):
            a0, a1 = angles[k], angles[k + 1]
            p = [
                center + [radii[r] * math.cos(a0), ys[r], radii[r] * math.sin(a0)],
                center + [radii[r] * math.cos(a1), ys[r], radii[r] * math.sin(a1)],
                center + [radii[r + 1] * math.cos(a1), ys[r + 1], radii[r + 1] * math.sin(a1)],
                center + [radii[r + 1] * math.cos(a0), ys[r + 1], radii[r + 1] * math.sin(a0)],
            ]
            # triangulate: quads on a surface of revolution are not planar in general
            facets.append(Facet([p[0], p[1], p[2]], MIRROR, f"pitcher_{r}_{k}_a", "pitcher"))
            facets.append(Facet([p[0], p[2], p[3]], MIRROR, f"pitcher_{r}_{k}_b", "pitcher"))
    L = [DEFAULT_BASELINE, 0, 0]
    targets = []
    for z in np.linspace(1.4, 3.2, 10):
        for y in np.linspace(-0.7, 0.1, 5):
            targets.append([-0.8, y, z])
            targets.append([1.0, y, z])
    for x in np.linspace(-0.6, 0.8, 6):
        for z in np.linspace(1.5, 3.0, 5):
            targets.append([x, -0.8, z])
    beams = [aim(L, t) for t in targets]
    return Scene(facets, make_lidar(beams), dict(DEFAULT_NOISE), "pitcher")


def failure_sky_scene() -> Scene:
    """Mirror lit at near-normal incidence with nothing to land on."""
    mirror = Facet(quad([0.2, 0.0, 2.0], [0, 0, -1], 1.0, 1.0), MIRROR, "mirror")
    return Scene([mirror], make_lidar([aim([DEFAULT_BASELINE, 0, 0], [0.25, 0.0, 2.0])]), dict(DEFAULT_NOISE), "failure_sky")


def failure_fov_scene() -> Scene:
    """Mirror deflects the beam onto a wall behind the lidar, outside the receiver's view."""
    mirror = Facet(quad([0.2, 0.0, 2.0], normalize([-0.25, 0, -1]), 1.0, 1.0), MIRROR, "mirror")
    wall = Facet(quad([0.0, 0.0, -1.5], [0, 0, 1], 6.0, 3.0), WHITE, "rear_wall")
    return Scene([mirror, wall], make_lidar([aim([DEFAULT_BASELINE, 0, 0], [0.25, 0.0, 2.0])]), dict(DEFAULT_NOISE), "failure_fov")


def failure_multispecular_scene() -> Scene:
    """Two facing mirrors: the beam reflects twice before reaching a diffuse floor."""
    m1 = Facet(quad([0.8, 0.0, 2.2], normalize([-1, 0, -0.4]), 0.8, 1.2), MIRROR, "mirror_a")
    m2 = Facet(quad([-0.6, 0.0, 2.6], normalize([1, 0, -0.1]), 0.8, 1.2), MIRROR, "mirror_b")
    floor = Facet(quad([0.1, -0.7, 2.5], [0, 1, 0], 4.0, 4.0, up=(0, 0, 1)), WHITE, "floor")
    L = [DEFAULT_BASELINE, 0, 0]
    beams = [aim(L, [0.95, y, 2.14]) for y in (-0.35, -0.25)]
    return Scene([m1, m2, floor], make_lidar(beams), dict(DEFAULT_NOISE), "failure_multispecular")


def failure_offsurface_scene() -> Scene:
    """Narrow mirror lit near its edge: S1 is on the mirror but S2 would be beyond the edge."""
    mirror = Facet(quad([0.75, 0.0, 2.2], MIRROR_NORMAL, 0.25, 1.6), MIRROR, "mirror")
    wall = Facet(quad([-0.7, 0.0, 2.5], [1, 0, 0], 3.0, 2.0), WHITE, "wall")
    L = np.array([DEFAULT_BASELINE, 0, 0])
    bottom = quad([0.75, 0.0, 2.2], MIRROR_NORMAL, 0.25, 1.6)
    target = (0.3 * bottom[0] + 0.7 * bottom[1]) * [1, 0, 1]
    beams = [aim(L, target)]
    return Scene([mirror, wall], make_lidar(beams), dict(DEFAULT_NOISE), "failure_offsurface")


def random_mirror_scene(seed, n_mirror_beams=3, n_wall_beams=3, max_baseline=0.5) -> Scene:
    """One planar mirror in a three-wall room with random pose, albedos and baseline.

    Half the beams aim at the mirror, the rest at the left wall.  The receiver
    field of view is +-45 degrees so most mirror images stay visible.
    """
    rng = np.random.default_rng(seed)
    s = rng.uniform(0.0, max_baseline)
    a = rng.uniform(0.0, 2.0 * math.pi)
    L = np.array([s * math.cos(a), s * math.sin(a), 0.0])
    left_x, floor_y, back_z = -rng.uniform(0.5, 1.0), -rng.uniform(0.6, 1.0), rng.uniform(4.0, 5.0)
    facets = room_facets(left_x, floor_y, back_z, albedo=rng.uniform(0.2, 0.9))
    center = np.array([rng.uniform(0.6, 1.2), rng.uniform(-0.3, 0.3), rng.uniform(1.6, 3.0)])
    normal = normalize([-1.0, rng.uniform(-0.2, 0.2), -rng.uniform(0.3, 0.8)])
    mirror = Facet(quad(center, normal, rng.uniform(0.6, 1.0), rng.uniform(0.8, 1.4)), Material.specular(rng.uniform(0.5, 1.0)), "mirror")
    e1, e2 = np.cross([0.0, 1.0, 0.0], normal), np.array([0.0, 1.0, 0.0])
    e1 = normalize(e1)
    beams = [aim(L, center + rng.uniform(-0.25, 0.25) * e1 + rng.uniform(-0.3, 0.3) * e2) for _ in range(n_mirror_beams)]
    beams += [aim(L, [left_x, rng.uniform(-0.4, 0.6), rng.uniform(1.8, 3.2)]) for _ in range(n_wall_beams)]
    lidar = LidarConfig(L=L, C=[0.0, 0.0, 0.0], beams=beams, grid=default_grid(400, 45.0))
    return Scene(facets + [mirror], lidar, dict(DEFAULT_NOISE), f"random_mirror_{seed}")


BUILDERS = {
    "fig2a": fig2a_scene,
    "fig2b": fig2b_scene,
    "mirror": mirror_room_scene,
    "window": window_objects_scene,
    "window_mb": window_room_scene,
    "two_wall_window": two_wall_window_scene,
    "two_wall_window_clean": two_wall_window_clean_scene,
    "pitcher": pitcher_scene,
    "failure_sky": failure_sky_scene,
    "failure_fov": failure_fov_scene,
    "failure_multispecular": failure_multispecular_scene,
    "failure_offsurface": failure_offsurface_scene,
}


def bundled_scene_dir() -> Path:
    return Path(__file__).parent / "data" / "scenes"


def write_bundled_scenes(directory=None):
    from .io import dump_scene

    directory = Path(directory or bundled_scene_dir())
    directory.mkdir(parents=True, exist_ok=True)
    for name, build in BUILDERS.items():
        dump_scene(build(), directory / f"{name}.scene")
