"""Acceptance suite: one test per criterion, each printing a single PASS/FAIL line."""

from __future__ import annotations

import math
import time
from collections import Counter

import numpy as np
import pytest

from helpers import assumptions_hold, line_angle, traced
from multibounce.cli import RunConfig, cmd_run
from multibounce.evaluation import point_truth, spot_confusion
from multibounce.geom import reflect_point
from multibounce.recon_mb import (
    ConvergenceError,
    RansacParams,
    linear_init,
    localize_source_newton,
    localize_source_ransac,
    plane_from_source,
    reconstruct_multi_beam,
)
from multibounce.recon_sb import (
    SingleBeamParams,
    apparent_position,
    naive_pointcloud,
    reconstruct_single_beam,
)
from multibounce.scene import DetectorGrid, Exposure, Spot, flash_exposure, simulate_exposures, spots_from_paths, trace_scene
from multibounce.scenes import BUILDERS, random_mirror_scene
from multibounce.sensor import TimingModel, perturb_spots, render_histograms, sense


@pytest.fixture
def report(capsys):
    def emit(number: int, ok: bool, detail: str):
        with capsys.disabled():
            print(f"\nACCEPTANCE {number}: {'PASS' if ok else 'FAIL'} - {detail}")
        assert ok, detail

    return emit


# 1 ----------------------------------------------------------------------------------


def test_criterion_1_noiseless_inversion(report):
    t0 = time.perf_counter()
    worst_pos = worst_normal = 0.0
    n_points = skipped = 0
    for seed in range(200):
        sc = random_mirror_scene(seed)
        paths = trace_scene(sc)
        exps = simulate_exposures(sc, paths)
        for e, r in zip(exps, reconstruct_single_beam(exps, sc.lidar)):
            if not assumptions_hold([p for p in paths if p.beam_index == e.beam_index], sc.lidar):
                skipped += 1
                continue
            for p in r.points:
                best = (math.inf, math.inf)
                for k in p.sources:
                    rec = paths[k]
                    idx = {"diffuse": rec.kinds.index("D"), "arrival": len(rec.kinds) - 1, "first": 0}[p.truth_role]
                    pos = float(np.linalg.norm(p.position - rec.vertices[1 + idx]))
                    nrm = 0.0 if p.normal is None else line_angle(p.normal, sc.facet(rec.surface_ids[idx]).plane.normal)
                    best = min(best, (pos, nrm))
                worst_pos, worst_normal = max(worst_pos, best[0]), max(worst_normal, best[1])
                n_points += 1
    dt = time.perf_counter() - t0
    ok = worst_pos < 1e-9 and worst_normal < 1e-10 and dt < 10.0 and n_points > 1000
    report(1, ok, f"{n_points} points over 200 scenes ({skipped} exposures outside assumptions), "
                  f"max position error {worst_pos:.1e} m, max normal error {worst_normal:.1e} rad, {dt:.1f} s")


# 2 ----------------------------------------------------------------------------------


def test_criterion_2_mirrored_space_identity(report):
    worst, count = 0.0, 0
    scenes = [traced(n)[:2] for n in ("fig2b", "mirror", "two_wall_window_clean", "window", "window_mb")]
    for seed in range(50):
        sc = random_mirror_scene(seed)
        scenes.append((sc, trace_scene(sc)))
    for sc, paths in scenes:
        for rec in paths:
            if rec.bounce_class != 3:
                continue
            spots = spots_from_paths([rec], sc.lidar)
            if not spots:
                continue
            image = reflect_point(rec.diffuse_vertex, sc.facet(rec.surface_ids[2]).plane)
            worst = max(worst, float(np.linalg.norm(apparent_position(spots[0], sc.lidar) - image)))
            count += 1
    report(2, worst < 1e-9 and count > 100, f"{count} three-bounce paths, max deviation {worst:.1e} m")


# 3 ----------------------------------------------------------------------------------


def test_criterion_3_multi_beam_plane(report):
    sc, paths, _ = traced("window_mb")
    flash = flash_exposure(sc, paths)
    t0 = time.perf_counter()
    res = reconstruct_multi_beam(flash.spots, sc.lidar)
    dt = time.perf_counter() - t0
    pane = sc.facet("window").plane
    angle = math.degrees(line_angle(res.plane.normal, pane.normal))
    sign = 1.0 if res.plane.normal @ pane.normal > 0 else -1.0
    dd = abs(sign * res.plane.offset - pane.offset)
    unfolded = [p for p in res.points if p.eq_tag == "Eq3"]
    err3 = max((point_truth(p, paths)[0] for p in unfolded), default=math.inf)
    ok = angle < 0.01 and dd < 1e-4 and err3 < 1e-6 and dt < 30.0
    report(3, ok, f"normal error {angle:.2e} deg, |dd| {dd:.2e} m, {len(unfolded)} unfolded 3B points "
                  f"max error {err3:.1e} m, {dt:.1f} s with k=1000")


# 4 ----------------------------------------------------------------------------------


def test_criterion_4_noise_scale(report):
    sc, paths, exps = traced("mirror")
    plane = sc.facet("mirror").plane
    t0 = time.perf_counter()
    rms_d, rms_t = [], []
    for seed in range(100):
        rng = np.random.default_rng(seed)
        noisy = [Exposure(e.beam_index, perturb_spots(e.spots, 128e-12 / 2.355, math.radians(0.05), rng)) for e in exps]
        pts = [p for r in reconstruct_single_beam(noisy, sc.lidar) for p in r.points if p.label.startswith("specular")]
        # score points whose ground-truth vertex lies on the mirror
        pts = [p for p in pts if point_truth(p, paths)[2] == "mirror"]
        x = np.array([p.position for p in pts])
        n = np.array([p.normal for p in pts])
        d = x @ plane.normal - plane.offset
        tilt = np.arctan2(np.linalg.norm(np.cross(n, plane.normal), axis=1), np.abs(n @ plane.normal))
        rms_d.append(np.sqrt(np.mean(d * d)))
        rms_t.append(np.sqrt(np.mean(tilt * tilt)))
    dt = time.perf_counter() - t0
    mm, deg = 1e3 * float(np.mean(rms_d)), math.degrees(float(np.mean(rms_t)))
    ok = 2.0 <= mm <= 25.0 and 0.1 <= deg <= 2.0 and dt < 120.0
    report(4, ok, f"RMS displacement {mm:.1f} mm, RMS tilt {deg:.2f} deg (100 seeds, {dt:.1f} s)")


# 5 ----------------------------------------------------------------------------------


def two_bounce_points(sc, paths):
    """Exact apparent-source geometry of every visible two-bounce return."""
    pane = sc.facet("window").plane
    X, T = [], []
    for p in paths:
        if p.kinds in ("SD", "DS") and spots_from_paths([p], sc.lidar):
            X.append(p.vertices[2] if p.kinds == "SD" else reflect_point(p.vertices[1], pane))
            T.append(p.path_length / sc.lidar.c)
    return np.array(X), np.array(T)


def test_criterion_5_ransac_robustness(report):
    sc, paths, _ = traced("window_mb")
    pane = sc.facet("window").plane
    X, T = two_bounce_points(sc, paths)
    L = sc.lidar.L
    good = bad = 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        k = rng.choice(len(X), int(round(0.2 * len(X))), replace=False)
        Xc, t = X.copy(), T.copy()
        # misclassified one-bounce returns: arbitrary positions, direct-path times
        Xc[k] += rng.normal(0, 0.3, (len(k), 3))
        t[k] = (np.linalg.norm(Xc[k] - L, axis=1) + np.linalg.norm(Xc[k] - sc.lidar.C, axis=1)) / sc.lidar.c
        est = localize_source_ransac(Xc, t, sc.lidar, RansacParams(n=4, d=10, k=1000, seed=seed))
        good += math.degrees(line_angle(plane_from_source(L, est.source).normal, pane.normal)) < 0.5
        try:
            q = localize_source_newton(Xc, t, linear_init(Xc, t, sc.lidar), sc.lidar)
        except ConvergenceError as exc:
            q = exc.best
        try:
            err = math.degrees(line_angle(plane_from_source(L, q).normal, pane.normal))
        except Exception:
            err = 90.0
        bad += err > 5.0
    report(5, good >= 95 and bad >= 50, f"RANSAC within 0.5 deg in {good}/100, plain Newton beyond 5 deg in {bad}/100 "
                                        f"({len(X)} two-bounce points, 20% contaminated)")


# 6 ----------------------------------------------------------------------------------


def transparent_errors(min_energy, **kw):
    sc = BUILDERS["two_wall_window_clean"](**kw)
    paths = trace_scene(sc)
    exps = simulate_exposures(sc, paths, min_energy=min_energy)
    res = reconstruct_single_beam(exps, sc.lidar, SingleBeamParams(reflectance_fallback=True))
    _, wrong = spot_confusion(exps, res, paths)
    n = sum(len(e.spots) for e in exps)
    return n, Counter((pred, truths) for _, _, pred, truths in wrong)


def test_criterion_6_transparent_disambiguation(report):
    n_clean, clean = transparent_errors(0.0)
    n_dark, dark = transparent_errors(2e-4, back_albedo=0.02)
    n_near, near = transparent_errors(1e-3, back_z=2.75)
    dark_types = {("image_3b", ("behind",))}
    near_types = {("direct", ("behind",)), ("image_2b", ("specular_2b",))}
    ok = not clean and set(dark) == dark_types and set(near) == near_types
    report(6, ok, f"clean: {n_clean} spots, {sum(clean.values())} wrong; "
                  f"dark hidden wall: {sum(dark.values())}/{n_dark} behind-window spots read as 3B images; "
                  f"hidden wall nearer: {near[('image_2b', ('specular_2b',))]} front spots read as mirror images "
                  f"(of {n_near} spots)")


# 7 ----------------------------------------------------------------------------------


def test_criterion_7_naive_contrast(report):
    sc, paths, exps = traced("mirror")
    mirror = sc.facet("mirror")

    def near_mirror(p):
        return abs(mirror.plane.signed_distance(p.position)) < 5e-3 and mirror.contains(p.position, 5e-3)

    naive = [p for p in naive_pointcloud(exps, sc.lidar) if near_mirror(p)]
    full = [p for r in reconstruct_single_beam(exps, sc.lidar) for p in r.points if near_mirror(p)]
    involved = {e.beam_index for e in exps for sp in e.spots for k in sp.sources if "mirror" in paths[k].surface_ids}
    covered = {p.beam_index for p in full}
    ok = not naive and involved <= covered
    report(7, ok, f"naive: {len(naive)} points on the mirror; full: {len(full)} points covering "
                  f"{len(involved & covered)}/{len(involved)} mirror-involved beams")


# 8 ----------------------------------------------------------------------------------


def test_criterion_8_sensor_round_trip(report):
    grid = DetectorGrid(-0.2, 0.2, -0.2, 0.2, 40, 40)
    timing = TimingModel(n_bins=512)
    # expected signal counts in the fit window at a spot's center pixel, per unit energy
    probe = TimingModel(n_bins=512, background_rate=0.0, signal_scale=timing.signal_scale * 1e4)
    cube = render_histograms([Spot(grid.direction_at(20, 20), 4e-9, 1.0)], grid, probe, 0)
    hw = timing.fit_half_width
    m = int(round(4e-9 / timing.bin_width))
    per_energy = cube.counts[20, 20, m - hw : m + hw + 1].sum() / 1e4
    bg = timing.background_rate * (2 * hw + 1)
    energy = 0.03
    sig = per_energy * energy
    snr = sig / math.sqrt(sig + bg)
    worst_px = worst_t = 0.0
    found = false = missed = 0
    for seed in range(100):
        rng = np.random.default_rng([8, seed])
        truth = []
        for c in ((10, 10), (28, 12), (18, 29)):
            pc = np.array(c, float) + rng.uniform(-2, 2, 2)
            truth.append((pc, rng.uniform(2e-9, 6e-9)))
        ideal = [Spot(grid.direction_at(*pc), t, energy) for pc, t in truth]
        out = sense(ideal, grid, timing, [8, seed], window=5)
        found += len(out)
        used = set()
        for sp in out:
            px = grid.pixel_coords(sp.direction)
            d = [np.linalg.norm(px - pc) for pc, _ in truth]
            j = int(np.argmin(d))
            if d[j] > 1.0 or j in used:
                false += 1
                continue
            used.add(j)
            worst_px = max(worst_px, d[j])
            worst_t = max(worst_t, abs(sp.tof - truth[j][1]) / timing.bin_width)
        missed += 3 - len(used)
    rate = false / max(found, 1)
    ok = snr > 20 and missed == 0 and worst_px < 0.25 and worst_t < 1.0 and rate < 0.01
    report(8, ok, f"SNR {snr:.0f}, 300 spots: {missed} missed, max angle error {worst_px:.3f} px, "
                  f"max tof error {worst_t:.2f} bins, false-spot rate {rate:.1%}")


# 9 ----------------------------------------------------------------------------------


def test_criterion_9_determinism(report, tmp_path):
    names = ("spots.csv", "pointcloud.csv", "pointcloud.ply", "classification.csv", "diagnostics.json", "metrics.json")
    differing = []
    for scene, extra in (("mirror", dict(tof_jitter_ps=54.4, angle_noise_deg=0.05)),
                         ("fig2a", dict(sensor=True)),
                         ("window_mb", dict(mode="multi_beam", tof_jitter_ps=20.0))):
        dirs = []
        for k in range(2):
            out = tmp_path / f"{scene}_{k}"
            cmd_run(RunConfig(scene=scene, seed=11, out=str(out), **extra))
            dirs.append(out)
        differing += [f"{scene}/{n}" for n in names if (dirs[0] / n).read_bytes() != (dirs[1] / n).read_bytes()]
    report(9, not differing, "byte-identical outputs for 3 seeded configurations" if not differing
           else f"differences in {', '.join(differing)}")
