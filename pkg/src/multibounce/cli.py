"""Command-line pipeline: simulate, sense, reconstruct, evaluate, or all of them.

A run directory holds every artifact of one run::

    config.json        resolved RunConfig plus run id
    scene.scene        copy of the input scene
    paths.json         ground-truth propagation paths
    ideal_spots.csv    noiseless spots per exposure
    spots.csv          measured spots (jittered, or re-extracted by the sensor stage)
    pointcloud.csv     canonical point cloud; pointcloud.ply mirrors it
    classification.csv per-spot interpretation
    diagnostics.json   reconstruction bookkeeping
    metrics.json       evaluation report

Each stage reads only files written by earlier stages.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import math
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from . import evaluation as ev
from . import io
from .recon_mb import MultiBeamParams, RansacParams, mb_spot_kinds, reconstruct_multi_beam
from .recon_sb import SingleBeamParams, naive_pointcloud, reconstruct_single_beam
from .scene import DetectorGrid, Exposure, Scene, simulate_exposures, trace_scene
from .scenes import bundled_scene_dir
from .sensor import TimingModel, detect_pixels, extract_spots, perturb_spots, render_histograms, save_cube

OUT_ENV = "MULTIBOUNCE_OUT"
MODES = ("single_beam", "multi_beam", "naive", "transparent")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    scene: str = ""
    mode: str = "single_beam"
    sensor: bool = False
    seed: Optional[int] = None
    out: str = ""
    beam_tol_deg: Optional[float] = None  # default 0.2, or half a sensor pixel when that is coarser
    min_energy: float = 0.0
    tof_jitter_ps: Optional[float] = None  # None -> scene noise section
    angle_noise_deg: Optional[float] = None
    ransac_n: int = 4
    ransac_d: int = 10
    ransac_k: int = 1000
    ransac_tol: Optional[float] = None
    coarse_tol: float = 0.05
    p_fa: float = 1e-3
    abs_threshold: float = 5.0
    spottiness_threshold: float = 0.3
    window: int = 5
    sensor_pixels: Optional[int] = 100  # square sensor grid over the scene's field of view; None keeps the scene grid
    sensor_bins: Optional[int] = None
    save_cube: bool = False

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {', '.join(MODES)}, got {self.mode!r}")
        if self.seed is None and self.noisy:
            raise ConfigError("a seed is required when sensor or spot noise is enabled")
        if self.mode == "multi_beam" and not (1 <= self.ransac_n <= self.ransac_d and self.ransac_k >= 1):
            raise ConfigError("multi_beam needs 1 <= ransac_n <= ransac_d and ransac_k >= 1")
        if self.window < 1 or self.window % 2 == 0:
            raise ConfigError("window must be a positive odd number")
        if self.sensor_pixels is not None and self.sensor_pixels < 3:
            raise ConfigError("sensor_pixels must be at least 3")

    @property
    def noisy(self) -> bool:
        return bool(self.sensor or (self.tof_jitter_ps or 0) > 0 or (self.angle_noise_deg or 0) > 0)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_FIELDS = {f.name for f in dataclasses.fields(RunConfig)}


def config_from_mapping(d: dict) -> RunConfig:
    unknown = set(d) - _FIELDS
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    return RunConfig(**d)


def resolve_scene_path(name: str) -> Path:
    p = Path(name)
    if p.exists():
        return p
    bundled = bundled_scene_dir() / f"{name}.scene"
    if bundled.exists():
        return bundled
    raise ConfigError(f"scene {name!r} is neither a file nor a bundled scene")


def run_id_for(cfg: RunConfig, scene_text: str) -> str:
    """Stable id of the simulated data: scene content plus the settings that shape it."""
    keys = ("seed", "min_energy", "tof_jitter_ps", "angle_noise_deg", "sensor", "sensor_pixels", "sensor_bins",
            "p_fa", "abs_threshold", "spottiness_threshold", "window")
    blob = json.dumps({k: getattr(cfg, k) for k in keys}, sort_keys=True) + "\n" + scene_text
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


# --- pure stages ------------------------------------------------------------------


def _rng(seed: int, stream: int, index: int):
    return np.random.default_rng([seed, stream, index + 1])


def simulate_stage(scene: Scene, cfg: RunConfig):
    """Ground-truth paths, ideal exposures, and spot-jittered exposures."""
    paths = trace_scene(scene)
    ideal = simulate_exposures(scene, paths, min_energy=cfg.min_energy)
    tof_ps = cfg.tof_jitter_ps if cfg.tof_jitter_ps is not None else float(scene.noise.get("tof_jitter_ps", 0.0))
    ang = cfg.angle_noise_deg if cfg.angle_noise_deg is not None else float(scene.noise.get("angle_noise_deg", 0.0))
    if tof_ps > 0 or ang > 0:
        if cfg.seed is None:
            raise ConfigError("a seed is required when spot noise is enabled")
        measured = [
            Exposure(e.beam_index, perturb_spots(e.spots, tof_ps * 1e-12, math.radians(ang), _rng(cfg.seed, 1, e.beam_index)))
            for e in ideal
        ]
    else:
        measured = [Exposure(e.beam_index, list(e.spots)) for e in ideal]
    return paths, ideal, measured


def sensor_grid(scene: Scene, cfg: RunConfig) -> DetectorGrid:
    g = scene.lidar.grid
    if cfg.sensor_pixels is None:
        return g
    return DetectorGrid(g.h_min, g.h_max, g.v_min, g.v_max, cfg.sensor_pixels, cfg.sensor_pixels)


def sensor_timing(scene: Scene, cfg: RunConfig, exposures) -> TimingModel:
    timing = TimingModel.from_noise(scene.noise)
    n_bins = cfg.sensor_bins or timing.n_bins
    tofs = [sp.tof for e in exposures for sp in e.spots]
    if tofs:
        # keep every return inside the histogram and clear of the noise-estimation bins
        need = int(math.ceil(1.05 * max(tofs) / timing.bin_width)) + 16
        n_bins = max(n_bins, need)
    return dataclasses.replace(timing, n_bins=n_bins)


def sense_stage(scene: Scene, cfg: RunConfig, exposures):
    """Histogram rendering, detection and spot extraction.

    Single-beam modes get one cube per exposure.  The multi-beam flash is one
    cube with the background of every summed exposure, which has the same
    distribution as adding the per-beam cubes.
    """
    if cfg.seed is None:
        raise ConfigError("a seed is required for the sensor stage")
    grid = sensor_grid(scene, cfg)
    timing = sensor_timing(scene, cfg, exposures)
    out, cubes = [], []
    if cfg.mode == "multi_beam":
        spots = [sp for e in exposures for sp in e.spots]
        t = dataclasses.replace(timing, background_rate=timing.background_rate * max(1, len(exposures)))
        cube = render_histograms(spots, grid, t, [cfg.seed, 2, 0])
        det = detect_pixels(cube, t, cfg.p_fa, cfg.abs_threshold)
        out.append(Exposure(-1, extract_spots(det, cfg.spottiness_threshold, cfg.window)))
        cubes.append(cube)
    else:
        for e in exposures:
            cube = render_histograms(e.spots, grid, timing, [cfg.seed, 2, e.beam_index + 1])
            det = detect_pixels(cube, timing, cfg.p_fa, cfg.abs_threshold)
            out.append(Exposure(e.beam_index, extract_spots(det, cfg.spottiness_threshold, cfg.window)))
            if cfg.save_cube:
                cubes.append(cube)
    return out, cubes


def _beam_tol(scene: Scene, cfg: RunConfig) -> float:
    if cfg.beam_tol_deg is not None:
        return math.radians(cfg.beam_tol_deg)
    tol = math.radians(0.2)
    if cfg.sensor:
        tol = max(tol, 0.5 * sensor_grid(scene, cfg).pitch)
    return tol


def reconstruct_stage(scene: Scene, cfg: RunConfig, exposures):
    """Point cloud, per-exposure results with ``kinds``/``roles``, and diagnostics."""
    lidar = scene.lidar
    tol = _beam_tol(scene, cfg)
    diag: dict = {"mode": cfg.mode, "errors": []}
    if cfg.mode == "multi_beam":
        spots = [sp for e in exposures for sp in e.spots]
        params = MultiBeamParams(
            beam_tol=tol,
            ransac=RansacParams(cfg.ransac_n, cfg.ransac_d, cfg.ransac_k, cfg.ransac_tol, seed=cfg.seed or 0),
            coarse_tol=cfg.coarse_tol,
        )
        res = reconstruct_multi_beam(spots, lidar, params)
        kinds = mb_spot_kinds(res, len(spots))
        results = [_FlatResult(-1, kinds, res.roles)]
        est = res.estimate
        diag["ransac"] = None if est is None else {
            "n_two_bounce": len(res.classification.two_bounce),
            "n_inliers": len(est.inliers),
            "inlier_fraction": len(est.inliers) / max(1, len(res.classification.two_bounce)),
            "mse": est.mse,
            "iterations_used": est.iterations_used,
            "low_confidence": est.low_confidence,
            "mirrored_source": est.source,
        }
        diag["plane"] = None if res.plane is None else {"normal": res.plane.normal, "offset": res.plane.offset}
        diag["errors"] = list(res.diagnostics)
        diag["n_spots"] = len(spots)
        return res.points, results, diag

    params = SingleBeamParams(beam_tol=tol, reflectance_fallback=cfg.mode == "transparent")
    sb = reconstruct_single_beam(exposures, lidar, params)
    counts: dict = {}
    for r in sb:
        counts[r.classification.kind] = counts.get(r.classification.kind, 0) + 1
        diag["errors"].extend(r.errors)
    diag["exposure_kinds"] = dict(sorted(counts.items()))
    diag["discarded_2b_exposures"] = counts.get("two_bounce_only", 0)
    diag["unresolved_transparent_exposures"] = sum(
        1 for r in sb if r.classification.kind == "unresolved"
        or (r.classification.kind == "transparent_first" and not r.classification.mirror_spots)
    )
    diag["n_spots"] = sum(len(e.spots) for e in exposures)
    if cfg.mode == "naive":
        pts = naive_pointcloud(exposures, lidar, params)
        results = [_FlatResult(e.beam_index, {i: "direct" for i in range(len(e.spots))}, {i: "1B" for i in range(len(e.spots))})
                   for e in exposures]
        return pts, results, diag
    pts = [p for r in sb for p in r.points]
    return pts, sb, diag


@dataclass
class _FlatResult:
    beam_index: int
    kinds: dict
    roles: dict


def evaluate_stage(scene: Scene, cfg: RunConfig, points, classes: dict, measured, ideal, paths, run_id: str) -> dict:
    """Metrics document.  ``classes`` maps ``(beam_index, spot_index)`` to ``(kind, bounce_class)``."""
    if cfg.mode == "multi_beam":
        flat = [sp for e in measured for sp in e.spots]
        measured = [Exposure(-1, flat)]
    if cfg.sensor:
        ideal_flat = [sp for e in ideal for sp in e.spots]
        grid = sensor_grid(scene, cfg)
        timing = TimingModel.from_noise(scene.noise)
        for e in measured:
            pool = ideal_flat if e.beam_index < 0 else next((x.spots for x in ideal if x.beam_index == e.beam_index), [])
            ev.match_spots(e.spots, pool, 2.0 * grid.pitch, 3.0 * timing.irf_sigma)
    kind_pairs, bounce_pairs, wrong = [], [], []
    for e in measured:
        for i, sp in enumerate(e.spots):
            pred_kind, pred_bounce = classes.get((e.beam_index, i), ("unresolved", "?"))
            truths = sorted({paths[k].spot_kind for k in sp.sources})
            labels = sorted({paths[k].label for k in sp.sources})
            tk = pred_kind if pred_kind in truths else (truths[0] if truths else "spurious")
            tb = pred_bounce if pred_bounce in labels else (labels[0] if labels else "spurious")
            kind_pairs.append((tk, pred_kind))
            bounce_pairs.append((tb, pred_bounce))
            if tk != pred_kind:
                wrong.append({"beam_index": e.beam_index, "spot_index": i, "predicted": pred_kind, "truth": truths})
    surfaces = ev.surface_reports(points, scene)
    n_spots = len(kind_pairs)
    n_correct = sum(1 for t, p in kind_pairs if t == p)
    return {
        "schema": "multibounce.metrics",
        "schema_version": ev.METRICS_SCHEMA_VERSION,
        "run_id": run_id,
        "mode": cfg.mode,
        "n_points": len(points),
        "labels": _label_counts(points),
        "specular_surfaces": {fid: rep.to_dict() for fid, rep in surfaces.items()},
        "surface_distance": ev.surface_distance_summary(points, scene),
        "spot_confusion": ev.confusion_matrix(kind_pairs),
        "bounce_confusion": ev.confusion_matrix(bounce_pairs),
        "spot_accuracy": n_correct / n_spots if n_spots else None,
        "misclassified": wrong,
    }


def _label_counts(points) -> dict:
    out: dict = {}
    for p in points:
        out[p.label] = out.get(p.label, 0) + 1
    return dict(sorted(out.items()))


def _classes_of(results) -> dict:
    return {(r.beam_index, i): (r.kinds[i], r.roles.get(i, "?")) for r in results for i in r.kinds}


def end_to_end(cfg: RunConfig, scene: Optional[Scene] = None) -> tuple[list, dict, dict]:
    """Whole pipeline in memory: points, diagnostics and metrics, no files touched."""
    cfg.validate()
    text = resolve_scene_path(cfg.scene).read_text()
    scene = scene or io.parse_scene(text, cfg.scene)
    rid = run_id_for(cfg, text)
    paths, ideal, measured = simulate_stage(scene, cfg)
    if cfg.sensor:
        measured, _ = sense_stage(scene, cfg, ideal)
    points, results, diag = reconstruct_stage(scene, cfg, measured)
    metrics = evaluate_stage(scene, cfg, points, _classes_of(results), measured, ideal, paths, rid)
    return points, diag, metrics


# --- file stages ----------------------------------------------------------------------


def _load_run(run: Path) -> tuple[RunConfig, Scene, str]:
    cfg_path = run / "config.json"
    if not cfg_path.exists():
        raise ConfigError(f"{run}: no config.json; run `simulate` first")
    doc = io.read_json(cfg_path)
    rid = doc.pop("run_id", "")
    cfg = config_from_mapping(doc)
    scene = io.load_scene(run / "scene.scene")
    return cfg, scene, rid


def _prepare_out(out: Path) -> None:
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {out}: {exc.strerror}") from exc
    if not os.access(out, os.W_OK):
        raise ConfigError(f"output directory {out} is not writable")


def cmd_simulate(cfg: RunConfig) -> Path:
    cfg.validate()
    src = resolve_scene_path(cfg.scene)
    text = src.read_text()
    scene = io.parse_scene(text, src)
    out = Path(cfg.out)
    _prepare_out(out)
    rid = run_id_for(cfg, text)
    (out / "scene.scene").write_text(text)
    io.write_json({**cfg.to_dict(), "run_id": rid}, out / "config.json")
    paths, ideal, measured = simulate_stage(scene, cfg)
    io.write_paths(paths, out / "paths.json", rid)
    io.write_spots(ideal, out / "ideal_spots.csv", rid)
    io.write_spots(measured, out / "spots.csv", rid)
    if cfg.sensor:
        cmd_sense(out)
    return out


def cmd_sense(run: Path, overrides: Optional[dict] = None) -> Path:
    cfg, scene, rid = _load_run(run)
    cfg = dataclasses.replace(cfg, **(overrides or {}), sensor=True)
    cfg.validate()
    ideal, sid = io.read_spots(run / "ideal_spots.csv", range(len(scene.lidar.beams)))
    _check_ids(rid, sid, "ideal_spots.csv")
    measured, cubes = sense_stage(scene, cfg, ideal)
    io.write_spots(measured, run / "spots.csv", rid)
    if cfg.save_cube and cubes:
        total = cubes[0]
        for c in cubes[1:]:
            total = total + c
        save_cube(total, run / "cube.mbhc")
    io.write_json({**cfg.to_dict(), "run_id": rid}, run / "config.json")
    return run


def cmd_reconstruct(run: Path, overrides: Optional[dict] = None) -> Path:
    cfg, scene, rid = _load_run(run)
    cfg = dataclasses.replace(cfg, **(overrides or {}))
    cfg.validate()
    beams = [-1] if cfg.sensor and cfg.mode == "multi_beam" else range(len(scene.lidar.beams))
    measured, sid = io.read_spots(run / "spots.csv", beams)
    _check_ids(rid, sid, "spots.csv")
    points, results, diag = reconstruct_stage(scene, cfg, measured)
    diag["run_id"] = rid
    io.write_pointcloud_csv(points, run / "pointcloud.csv", rid)
    io.write_pointcloud_ply(points, run / "pointcloud.ply", rid)
    io.write_classifications(results, run / "classification.csv", rid)
    io.write_json(diag, run / "diagnostics.json")
    io.write_json({**cfg.to_dict(), "run_id": rid}, run / "config.json")
    return run


def _check_ids(expected: str, found: str, what: str) -> None:
    if expected != found:
        raise io.RunIdMismatch(f"{what} belongs to run {found!r}, expected {expected!r}")


def cmd_evaluate(run: Path, pointcloud: Optional[Path] = None, ground_truth: Optional[Path] = None) -> Path:
    cfg, scene, rid = _load_run(run)
    points, pid = io.read_pointcloud_csv(pointcloud or run / "pointcloud.csv")
    paths, gid = io.read_paths(ground_truth or run / "paths.json")
    if pid != gid:
        raise io.RunIdMismatch(f"point cloud run {pid!r} does not match ground truth run {gid!r}")
    classes, cid = io.read_classifications(run / "classification.csv")
    _check_ids(gid, cid, "classification.csv")
    beams = range(len(scene.lidar.beams))
    ideal, _ = io.read_spots(run / "ideal_spots.csv", beams)
    measured, _ = io.read_spots(run / "spots.csv", [-1] if cfg.sensor and cfg.mode == "multi_beam" else beams)
    metrics = evaluate_stage(scene, cfg, points, classes, measured, ideal, paths, gid)
    io.write_json(metrics, run / "metrics.json")
    return run


def cmd_run(cfg: RunConfig) -> Path:
    out = cmd_simulate(cfg)
    cmd_reconstruct(out)
    cmd_evaluate(out)
    return out


# --- argument parsing ----------------------------------------------------------------


def _default_out(scene: str, mode: str) -> str:
    base = os.environ.get(OUT_ENV, "multibounce_runs")
    return str(Path(base) / f"{Path(scene).stem}_{mode}")


def _add_config_flags(p: argparse.ArgumentParser, with_scene: bool) -> None:
    if with_scene:
        p.add_argument("--scene", help="scene file or bundled scene name")
        p.add_argument("--config", help="YAML or JSON file with RunConfig fields; flags override it")
        p.add_argument("--out", help=f"run directory (default: ${OUT_ENV}/<scene>_<mode>)")
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--sensor", action=argparse.BooleanOptionalAction, default=None,
                   help="re-extract spots from simulated photon histograms")
    p.add_argument("--seed", type=int)
    p.add_argument("--beam-tol-deg", type=float)
    p.add_argument("--min-energy", type=float)
    p.add_argument("--tof-jitter-ps", type=float)
    p.add_argument("--angle-noise-deg", type=float)
    p.add_argument("--ransac-n", type=int)
    p.add_argument("--ransac-d", type=int)
    p.add_argument("--ransac-k", type=int)
    p.add_argument("--ransac-tol", type=float)
    p.add_argument("--coarse-tol", type=float)
    p.add_argument("--p-fa", type=float)
    p.add_argument("--abs-threshold", type=float)
    p.add_argument("--spottiness-threshold", type=float)
    p.add_argument("--window", type=int)
    p.add_argument("--sensor-pixels", type=int)
    p.add_argument("--sensor-bins", type=int)
    p.add_argument("--save-cube", action="store_true", default=None)


def _overrides(ns: argparse.Namespace) -> dict:
    return {k: v for k, v in vars(ns).items() if k in _FIELDS and k not in ("scene", "out") and v is not None}


def _config_from_args(ns: argparse.Namespace) -> RunConfig:
    base: dict = {}
    if ns.config:
        text = Path(ns.config).read_text()
        base = yaml.safe_load(text) or {}
        if not isinstance(base, dict):
            raise ConfigError(f"{ns.config}: config must be a mapping")
    base.update(_overrides(ns))
    if ns.scene:
        base["scene"] = ns.scene
    if not base.get("scene"):
        raise ConfigError("no scene given (use --scene or a config file)")
    base["out"] = ns.out or base.get("out") or _default_out(base["scene"], base.get("mode", "single_beam"))
    return config_from_mapping(base)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="multibounce", description="Multibounce lidar simulation and reconstruction.")
    sub = ap.add_subparsers(dest="command", required=True)
    for name, helptext in (("simulate", "trace a scene and write spots plus ground truth"),
                           ("run", "simulate, reconstruct and evaluate in one go")):
        p = sub.add_parser(name, help=helptext)
        _add_config_flags(p, True)
    p = sub.add_parser("sense", help="render histograms for a run and re-extract its spots")
    p.add_argument("run", help="run directory")
    _add_config_flags(p, False)
    p = sub.add_parser("reconstruct", help="reconstruct a point cloud from a run's spots")
    p.add_argument("run", help="run directory")
    _add_config_flags(p, False)
    p = sub.add_parser("evaluate", help="score a run's point cloud against its ground truth")
    p.add_argument("run", help="run directory")
    p.add_argument("--pointcloud", help="point cloud CSV (default: <run>/pointcloud.csv)")
    p.add_argument("--ground-truth", help="paths JSON (default: <run>/paths.json)")
    return ap


def main(argv=None) -> int:
    ns = build_parser().parse_args(argv)
    try:
        if ns.command in ("simulate", "run"):
            cfg = _config_from_args(ns)
            out = cmd_simulate(cfg) if ns.command == "simulate" else cmd_run(cfg)
        elif ns.command == "sense":
            out = cmd_sense(Path(ns.run), _overrides(ns))
        elif ns.command == "reconstruct":
            out = cmd_reconstruct(Path(ns.run), _overrides(ns))
        else:
            out = cmd_evaluate(Path(ns.run), ns.pointcloud and Path(ns.pointcloud),
                               ns.ground_truth and Path(ns.ground_truth))
    except (ConfigError, io.SceneFormatError, io.RunIdMismatch, ValueError, OSError) as exc:
        print(f"multibounce {ns.command}: error: {exc}", file=sys.stderr)
        return 1
    print(out)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
