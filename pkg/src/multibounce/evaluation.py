"""Accuracy metrics: plane displacement and tilt, plane comparison, truth matching."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .geom import Plane, fit_plane_oriented, normalize, orthonormal_basis
from .scene import PathRecord, Scene, Spot

METRICS_SCHEMA_VERSION = 1


@dataclass(eq=False)
class PlaneErrorReport:
    displacement: np.ndarray  # (N,) signed, along the reference normal [m]
    tilt: np.ndarray  # (N,) [rad], NaN where a point has no normal
    projected: np.ndarray  # (N, 2) in-plane coordinates [m]
    rms_displacement: float
    mean_displacement: float
    rms_tilt: float
    mean_tilt: float

    @property
    def count(self) -> int:
        return len(self.displacement)

    def to_dict(self, per_point: bool = True) -> dict:
        out = {
            "count": self.count,
            "rms_displacement_m": self.rms_displacement,
            "mean_displacement_m": self.mean_displacement,
            "rms_tilt_rad": self.rms_tilt,
            "mean_tilt_rad": self.mean_tilt,
        }
        if per_point:
            out["displacement_m"] = [float(x) for x in self.displacement]
            out["tilt_rad"] = [None if math.isnan(x) else float(x) for x in self.tilt]
            out["projected_m"] = [[float(a), float(b)] for a, b in self.projected]
        return out


def _rms(x: np.ndarray) -> float:
    x = x[~np.isnan(x)]
    return float(np.sqrt(np.mean(x * x))) if len(x) else float("nan")


def _mean(x: np.ndarray) -> float:
    x = x[~np.isnan(x)]
    return float(np.mean(x)) if len(x) else float("nan")


def plane_errors(points, normals, reference: Plane) -> PlaneErrorReport:
    """Signed distances and normal tilts of oriented points against a reference plane.

    ``normals`` may be None, or contain NaN rows, for points without one.
    Tilt ignores normal orientation, so it lies in ``[0, pi/2]``.
    """
    x = np.atleast_2d(np.asarray(points, dtype=float)).reshape(-1, 3)
    if len(x) == 0:
        raise ValueError("plane_errors needs at least one point")
    n = reference.normal
    disp = x @ n - reference.offset
    if normals is None:
        tilt = np.full(len(x), np.nan)
    else:
        m = np.asarray(normals, dtype=float).reshape(len(x), 3)
        norm = np.linalg.norm(m, axis=1)
        # atan2 keeps precision for tiny tilts, where arccos bottoms out near 1e-8
        tilt = np.arctan2(np.linalg.norm(np.cross(m, n), axis=1), np.abs(m @ n))
        tilt[~(norm > 0)] = np.nan
    e1, e2 = orthonormal_basis(n)
    base = x - disp[:, None] * n
    proj = np.stack([base @ e1, base @ e2], axis=1)
    return PlaneErrorReport(disp, tilt, proj, _rms(disp), _mean(disp), _rms(tilt), _mean(tilt))


def residual_errors(points, normals) -> PlaneErrorReport:
    """Scatter of points about their own best-fit plane."""
    x = np.asarray(points, dtype=float).reshape(-1, 3)
    m = np.asarray(normals, dtype=float).reshape(-1, 3)
    return plane_errors(x, m, fit_plane_oriented(x, m))


def compare_planes(a: Plane, b: Plane) -> tuple[float, float]:
    """Normal angle in ``[0, pi/2]`` and offset difference after aligning normal signs."""
    na, nb = normalize(a.normal), normalize(b.normal)
    db = b.offset
    dot = float(na @ nb)
    if dot < 0:
        nb, db, dot = -nb, -db, -dot
    # atan2 form stays accurate for nearly parallel normals
    angle = math.atan2(float(np.linalg.norm(np.cross(na, nb))), dot)
    return angle, abs(a.offset - db)


# --- ground truth matching ----------------------------------------------------


def truth_vertex(role: str, rec: PathRecord) -> tuple[np.ndarray, str]:
    """The path vertex a reconstructed point of the given role estimates, with its facet id."""
    if role == "diffuse":
        k = rec.kinds.index("D")
    elif role == "arrival":
        k = len(rec.kinds) - 1
    elif role == "first":
        k = 0
    else:
        raise ValueError(f"unknown truth role {role!r}")
    return rec.vertices[1 + k], rec.surface_ids[k]


def point_truth(point, paths: Sequence[PathRecord]) -> Optional[tuple[float, np.ndarray, str]]:
    """Closest matching ground-truth vertex over every path merged into the point's spot."""
    if not point.truth_role or not point.sources:
        return None
    best = None
    for pid in point.sources:
        v, fid = truth_vertex(point.truth_role, paths[pid])
        err = float(np.linalg.norm(point.position - v))
        if best is None or err < best[0]:
            best = (err, v, fid)
    return best


def assign_surfaces(points, scene: Scene, reflective_only: bool = True, tol: float = 0.05) -> list:
    """Nearest facet for each point, or None if none lies within ``tol``.

    Works without path bookkeeping, e.g. for spots re-extracted from histograms.
    """
    facets = [f for f in scene.facets if f.material.reflective or not reflective_only]
    out = []
    for p in points:
        best, best_d = None, tol
        for f in facets:
            d = abs(float(f.plane.signed_distance(p)))
            if d > best_d:
                continue
            foot = p - f.plane.signed_distance(p) * f.plane.normal
            if f.contains(foot, tol):
                best, best_d = f.id, d
        out.append(best)
    return out


def surface_reports(points, scene: Scene, labels=("specular_observed", "specular_illuminated")) -> dict:
    """One PlaneErrorReport per reflective facet that received points, keyed by facet id."""
    chosen = [p for p in points if p.label in labels]
    ids = assign_surfaces([p.position for p in chosen], scene)
    groups: dict = {}
    for p, fid in zip(chosen, ids):
        if fid is None:
            continue
        groups.setdefault(fid, []).append(p)
    reports = {}
    for fid in sorted(groups):
        pts = groups[fid]
        facet = scene.facet(fid)
        normals = np.array([p.normal if p.normal is not None else [np.nan] * 3 for p in pts], dtype=float)
        reports[fid] = plane_errors(np.array([p.position for p in pts]), normals, facet.plane)
    return reports


def match_spots(found: Sequence[Spot], ideal: Sequence[Spot], angle_tol: float, tof_tol: float) -> list:
    """Copy path sources from ideal spots onto re-extracted ones.

    Greedy by combined normalized distance; unmatched spots keep empty sources.
    Returns the index into ``ideal`` for each found spot, or -1.
    """
    pairs = []
    for i, a in enumerate(found):
        for j, b in enumerate(ideal):
            da = float(np.arccos(np.clip(a.direction @ b.direction, -1.0, 1.0))) / angle_tol
            dt = abs(a.tof - b.tof) / tof_tol
            if da <= 1.0 and dt <= 1.0:
                pairs.append((da * da + dt * dt, i, j))
    pairs.sort()
    match = [-1] * len(found)
    used = set()
    for _, i, j in pairs:
        if match[i] < 0 and j not in used:
            match[i] = j
            used.add(j)
            found[i].sources = ideal[j].sources
    return match


def spot_truth_kinds(spot: Spot, paths: Sequence[PathRecord]) -> set:
    return {paths[k].spot_kind for k in spot.sources}


def confusion_matrix(pairs) -> dict:
    """Nested ``{truth: {predicted: count}}`` from ``(truth, predicted)`` pairs."""
    out: dict = {}
    for (t, p), n in sorted(Counter(pairs).items()):
        out.setdefault(t, {})[p] = n
    return out


def spot_confusion(exposures, results, paths: Sequence[PathRecord]) -> tuple[dict, list]:
    """Confusion of predicted spot interpretations against ground truth.

    A merged spot counts as correct if any of its source paths agrees.  Spots
    with no ground truth count as truth ``"spurious"``.  Also returns the
    misclassified spots as ``(beam_index, spot_index, predicted, truths)``.
    """
    pairs, wrong = [], []
    for exp, res in zip(exposures, results):
        for i, sp in enumerate(exp.spots):
            pred = res.kinds.get(i, "unresolved")
            truths = spot_truth_kinds(sp, paths)
            if not truths:
                pairs.append(("spurious", pred))
                wrong.append((exp.beam_index, i, pred, ()))
                continue
            t = pred if pred in truths else sorted(truths)[0]
            pairs.append((t, pred))
            if pred not in truths:
                wrong.append((exp.beam_index, i, pred, tuple(sorted(truths))))
    return confusion_matrix(pairs), wrong


def point_error_summary(points, paths: Sequence[PathRecord]) -> dict:
    """Position errors of points that carry ground-truth provenance, grouped by label."""
    by_label: dict = {}
    for p in points:
        m = point_truth(p, paths)
        if m is None or p.label in ("discarded_2b", "unresolved", "false_naive"):
            continue
        by_label.setdefault(p.label, []).append(m[0])
    out = {}
    for label in sorted(by_label):
        e = np.array(by_label[label])
        out[label] = {"count": len(e), "max_error_m": float(e.max()), "rms_error_m": float(np.sqrt(np.mean(e * e)))}
    return out


def distance_to_facet(p, facet) -> float:
    """Euclidean distance from a point to a planar polygon."""
    p = np.asarray(p, dtype=float)
    sd = float(facet.plane.signed_distance(p))
    foot = p - sd * facet.plane.normal
    if facet.contains(foot):
        return abs(sd)
    a = facet.vertices
    b = np.roll(a, -1, axis=0)
    ab = b - a
    t = np.clip(np.einsum("ij,ij->i", p - a, ab) / np.einsum("ij,ij->i", ab, ab), 0.0, 1.0)
    return float(np.min(np.linalg.norm(a + t[:, None] * ab - p, axis=1)))


def surface_distances(points, scene: Scene) -> np.ndarray:
    """Distance from each point to the nearest scene facet."""
    out = np.full(len(points), np.inf)
    for k, p in enumerate(points):
        for f in scene.facets:
            out[k] = min(out[k], distance_to_facet(p, f))
    return out


def surface_distance_summary(points, scene: Scene) -> dict:
    """Per-label count, RMS and max distance to the nearest facet."""
    by_label: dict = {}
    for p in points:
        by_label.setdefault(p.label, []).append(p.position)
    out = {}
    for label in sorted(by_label):
        d = surface_distances(by_label[label], scene)
        out[label] = {"count": len(d), "rms_distance_m": float(np.sqrt(np.mean(d * d))), "max_distance_m": float(d.max())}
    return out
