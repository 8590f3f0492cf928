"""Single-beam reconstruction from the spots of one exposure.

The earliest spot is always the true laser spot.  If it lies on the beam the
beam hit a diffuse surface first and the other spots are two-bounce mirror
images; otherwise a specular surface was hit first, the true spot is a
two-bounce return and the on-beam spot is the three-bounce mirror image.
Several on-beam spots point to a transparent surface.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .geom import DegenerateGeometryError, angle_between, bisector_normal, normalize
from .scene import LidarConfig, Spot

DENOM_TOL = 1e-15

LABELS = (
    "diffuse",
    "specular_observed",
    "specular_illuminated",
    "behind_window",
    "discarded_2b",
    "false_naive",
    "unresolved",
)


class ClassificationError(ValueError):
    """Spots violate the time ordering a classification relies on."""


@dataclass(eq=False)
class ReconstructedPoint:
    position: np.ndarray
    normal: Optional[np.ndarray]
    label: str
    eq_tag: str
    beam_index: int = -1
    sources: tuple = ()
    truth_role: str = ""  # which ground-truth vertex this estimates: diffuse | arrival | first

    def __post_init__(self):
        if self.label not in LABELS:
            raise ValueError(f"unknown label {self.label!r}")
        if self.label.startswith("specular") and self.normal is None:
            raise ValueError("specular points need a normal")


@dataclass
class SingleBeamParams:
    beam_tol: float = math.radians(0.2)
    reflectance_fallback: bool = True
    guard_sigmas: float = 3.0


@dataclass(eq=False)
class ExposureClassification:
    kind: str  # diffuse_first | specular_first | transparent_first | two_bounce_only | one_bounce_only | unresolved | empty
    true_spot: Optional[int] = None
    mirror_spots: list = field(default_factory=list)  # first entry is the on-beam 3B image for specular/transparent-first
    behind_spots: list = field(default_factory=list)
    other_spots: list = field(default_factory=list)


# --- range equations ---------------------------------------------------------


def range_1b(t1: float, theta: float, lidar: LidarConfig) -> float:
    """Bistatic single-scatter range from the receiver.

    ``theta`` is the angle between the arrival direction and the baseline
    vector pointing from the receiver to the transmitter.
    """
    return _range_1b(t1, math.cos(theta), lidar.s, lidar.c)


def _range_1b(t1: float, cos_theta: float, s: float, c: float) -> float:
    denom = c * t1 - s * cos_theta
    if denom <= 0.0:
        raise DegenerateGeometryError("time of flight too short for the baseline")
    return 0.5 * (c * c * t1 * t1 - s * s) / denom


def baseline_cos(direction, lidar: LidarConfig) -> float:
    s = lidar.s
    if s == 0.0:
        return 0.0
    return float(np.dot(direction, lidar.baseline) / s)


def apparent_range(spot: Spot, lidar: LidarConfig) -> float:
    return _range_1b(spot.tof, baseline_cos(spot.direction, lidar), lidar.s, lidar.c)


def apparent_position(spot: Spot, lidar: LidarConfig) -> np.ndarray:
    return lidar.C + apparent_range(spot, lidar) * spot.direction


def range_adjusted_intensity(spot: Spot, lidar: LidarConfig) -> float:
    return apparent_range(spot, lidar) ** 2 * spot.energy


def beam_offset_angle(spot: Spot, beam, lidar: LidarConfig) -> float:
    """Angle at the transmitter between the beam and the spot's apparent position."""
    return angle_between(apparent_position(spot, lidar) - lidar.L, beam)


def _mirror_range(dt: float, one_minus_cos: float, r_dc: float, c: float) -> float:
    """Range from the receiver to a reflection point, law of cosines in triangle D-C-S."""
    denom = dt + one_minus_cos * r_dc / c
    if abs(denom) < DENOM_TOL:
        raise DegenerateGeometryError("mirror-range denominator vanishes")
    return 0.5 * c * dt * (dt + 2.0 * r_dc / c) / denom


def _one_minus_cos(u1, u2) -> float:
    # 1 - cos(delta) == |u1 - u2|^2 / 2 for unit vectors, without cancellation
    d = np.asarray(u1) - np.asarray(u2)
    return 0.5 * float(d @ d)


def solve_diffuse_first(true_spot: Spot, mirror_spot: Spot, lidar: LidarConfig):
    """Diffuse point D, reflection point S and the mirror normal at S."""
    dt = mirror_spot.tof - true_spot.tof
    omc = _one_minus_cos(true_spot.direction, mirror_spot.direction)
    r_dc = apparent_range(true_spot, lidar)
    D = lidar.C + r_dc * true_spot.direction
    if dt < 0.0:
        raise ClassificationError("mirror image arrives before the true spot")
    if dt == 0.0 and omc == 0.0:
        return D, D.copy(), None
    r_sc = _mirror_range(dt, omc, r_dc, lidar.c)
    S = lidar.C + r_sc * mirror_spot.direction
    return D, S, bisector_normal(D, lidar.C, S)


@dataclass(eq=False)
class SpecularFirstSolution:
    D: np.ndarray
    S1: np.ndarray
    S2: np.ndarray
    n1: np.ndarray
    n2: np.ndarray
    others: list = field(default_factory=list)  # (point, normal) for images in other mirrors


def solve_specular_first(
    true_spot: Spot, mirror_spot: Spot, beam, lidar: LidarConfig, other_mirror_spots: Sequence[Spot] = ()
) -> SpecularFirstSolution:
    c = lidar.c
    t2, t3 = true_spot.tof, mirror_spot.tof
    if t3 <= t2:
        raise ClassificationError("three-bounce image must arrive after the two-bounce true spot")
    r_dpc = apparent_range(mirror_spot, lidar)
    r_dc = r_dpc - c * (t3 - t2)
    if r_dc <= 0.0:
        raise DegenerateGeometryError("inconsistent times of flight give a non-positive range")
    D = lidar.C + r_dc * true_spot.direction
    r_s2c = _mirror_range(t3 - t2, _one_minus_cos(true_spot.direction, mirror_spot.direction), r_dc, c)
    S2 = lidar.C + r_s2c * mirror_spot.direction

    beam = normalize(beam)
    r_dpl = c * t2 - r_dc
    r_dl = float(np.linalg.norm(D - lidar.L))
    cos_dl = float(np.dot(D - lidar.L, beam)) / r_dl
    denom = r_dpl - r_dl * cos_dl
    if abs(denom) < DENOM_TOL:
        raise DegenerateGeometryError("D lies on the beam axis; S1 is undetermined")
    r_ls1 = 0.5 * (r_dpl**2 - r_dl**2) / denom
    S1 = lidar.L + r_ls1 * beam

    others = []
    for sp in other_mirror_spots:
        dt = sp.tof - t2
        if dt <= 0.0:
            raise ClassificationError("mirror image arrives before the true spot")
        r = _mirror_range(dt, _one_minus_cos(true_spot.direction, sp.direction), r_dc, c)
        S = lidar.C + r * sp.direction
        others.append((S, bisector_normal(D, lidar.C, S)))
    return SpecularFirstSolution(
        D=D,
        S1=S1,
        S2=S2,
        n1=bisector_normal(lidar.L, D, S1),
        n2=bisector_normal(D, lidar.C, S2),
        others=others,
    )


# --- classification ----------------------------------------------------------


def _on_beam(spots, beam, lidar, beam_tol) -> list:
    out = []
    for i, sp in enumerate(spots):
        try:
            if beam_offset_angle(sp, beam, lidar) <= beam_tol:
                out.append(i)
        except DegenerateGeometryError:
            pass
    return out


def classify_exposure(
    spots: Sequence[Spot], beam, lidar: LidarConfig, beam_tol: float = math.radians(0.2), reflectance_fallback: bool = True
) -> ExposureClassification:
    if not spots:
        return ExposureClassification("empty")
    order = sorted(range(len(spots)), key=lambda i: spots[i].tof)
    on = set(_on_beam(spots, beam, lidar, beam_tol))
    first = order[0]
    if len(spots) == 1:
        return ExposureClassification("one_bounce_only" if first in on else "two_bounce_only", true_spot=first)
    if len(on) >= 2:
        return disambiguate_transparent(spots, sorted(on, key=lambda i: spots[i].tof), beam, lidar)
    rest = [i for i in order if i != first]
    if first in on:
        return ExposureClassification("diffuse_first", true_spot=first, mirror_spots=rest)
    if not on:
        return ExposureClassification("two_bounce_only", true_spot=first, other_spots=rest)
    image = next(iter(on))
    others = [i for i in rest if i != image]
    if reflectance_fallback and len(spots) == 2:
        # an undetected 3B image leaves a behind-window return looking like one;
        # a genuine 3B image is always dimmer than its two-bounce source
        if range_adjusted_intensity(spots[image], lidar) > range_adjusted_intensity(spots[first], lidar):
            return ExposureClassification("transparent_first", true_spot=first, behind_spots=[image])
    return ExposureClassification("specular_first", true_spot=first, mirror_spots=[image] + others)


def disambiguate_transparent(
    spots: Sequence[Spot], on_beam: Sequence[int], beam, lidar: LidarConfig, guard_sigmas: float = 3.0
) -> ExposureClassification:
    """Split on-beam detections into behind-window returns and the mirror image."""
    off = sorted((i for i in range(len(spots)) if i not in set(on_beam)), key=lambda i: spots[i].tof)
    if not off:
        return ExposureClassification("unresolved", other_spots=list(on_beam))
    true = off[0]
    t2 = spots[true].tof
    behind, late = [], []
    for i in on_beam:
        guard = guard_sigmas * math.hypot(spots[i].tof_sigma, spots[true].tof_sigma)
        (behind if spots[i].tof < t2 - guard else late).append(i)
    mirror = []
    if late:
        image = min(late, key=lambda i: range_adjusted_intensity(spots[i], lidar))
        behind += [i for i in late if i != image]
        mirror = [image]
    return ExposureClassification(
        "transparent_first",
        true_spot=true,
        mirror_spots=mirror + off[1:] if mirror else [],
        behind_spots=sorted(behind, key=lambda i: spots[i].tof),
        other_spots=[] if mirror else off[1:],
    )


# --- per-exposure reconstruction ---------------------------------------------


@dataclass(eq=False)
class ExposureResult:
    beam_index: int
    classification: ExposureClassification
    points: list
    roles: dict  # spot index -> predicted bounce class "1B" | "2B" | "3B" | "?"
    errors: list = field(default_factory=list)
    kinds: dict = field(default_factory=dict)  # spot index -> one of SPOT_KINDS


# how a spot was interpreted, finer than its bounce count
SPOT_KINDS = ("direct", "behind", "image_2b", "specular_2b", "image_3b", "unresolved")


def spot_kinds(cls: ExposureClassification, n_spots: int) -> dict:
    kinds = {i: "unresolved" for i in range(n_spots)}
    k = cls.kind
    if k in ("one_bounce_only", "diffuse_first"):
        kinds[cls.true_spot] = "direct"
        for i in cls.mirror_spots:
            kinds[i] = "image_2b"
    elif k in ("two_bounce_only", "specular_first", "transparent_first"):
        kinds[cls.true_spot] = "specular_2b"
        for i in cls.mirror_spots:
            kinds[i] = "image_3b"
        for i in cls.behind_spots:
            kinds[i] = "behind"
    return kinds


def _pt(pos, normal, label, tag, beam_index, spot: Spot, role):
    return ReconstructedPoint(np.asarray(pos, dtype=float), normal, label, tag, beam_index, tuple(spot.sources), role)


def reconstruct_exposure(
    spots: Sequence[Spot], beam, lidar: LidarConfig, beam_index: int = -1, params: Optional[SingleBeamParams] = None
) -> ExposureResult:
    params = params or SingleBeamParams()
    cls = classify_exposure(spots, beam, lidar, params.beam_tol, params.reflectance_fallback)
    pts: list = []
    roles = {i: "?" for i in range(len(spots))}
    errors: list = []
    b = beam_index

    def naive(i, label, tag="Eq1", role="diffuse"):
        pts.append(_pt(apparent_position(spots[i], lidar), None, label, tag, b, spots[i], role))

    def specular_first(true, mirrors):
        image, others = mirrors[0], mirrors[1:]
        sol = solve_specular_first(spots[true], spots[image], beam, lidar, [spots[i] for i in others])
        pts.append(_pt(sol.D, None, "diffuse", "Eq4", b, spots[true], "diffuse"))
        pts.append(_pt(sol.S2, sol.n2, "specular_observed", "Eq5", b, spots[image], "arrival"))
        pts.append(_pt(sol.S1, sol.n1, "specular_illuminated", "Eq7", b, spots[true], "first"))
        for i, (S, n) in zip(others, sol.others):
            pts.append(_pt(S, n, "specular_observed", "Eq5", b, spots[i], "arrival"))
        roles[true] = "2B"
        for i in mirrors:
            roles[i] = "3B"

    try:
        if cls.kind == "one_bounce_only":
            naive(cls.true_spot, "diffuse")
            roles[cls.true_spot] = "1B"
        elif cls.kind == "two_bounce_only":
            # a lone two-bounce spot cannot be placed: discarded, only counted
            roles[cls.true_spot] = "2B"
        elif cls.kind == "diffuse_first":
            t = cls.true_spot
            roles[t] = "1B"
            D = apparent_position(spots[t], lidar)
            pts.append(_pt(D, None, "diffuse", "Eq1", b, spots[t], "diffuse"))
            for i in cls.mirror_spots:
                _, S, n = solve_diffuse_first(spots[t], spots[i], lidar)
                if n is None:
                    continue
                pts.append(_pt(S, n, "specular_observed", "Eq2", b, spots[i], "arrival"))
                roles[i] = "2B"
        elif cls.kind == "specular_first":
            specular_first(cls.true_spot, cls.mirror_spots)
        elif cls.kind == "transparent_first":
            for i in cls.behind_spots:
                naive(i, "behind_window")
                roles[i] = "1B"
            if cls.mirror_spots:
                specular_first(cls.true_spot, cls.mirror_spots)
            else:
                roles[cls.true_spot] = "2B"
    except (DegenerateGeometryError, ClassificationError) as exc:
        errors.append(f"beam {b}: {exc}")
    return ExposureResult(b, cls, pts, roles, errors, spot_kinds(cls, len(spots)))


def reconstruct_single_beam(exposures, lidar: LidarConfig, params: Optional[SingleBeamParams] = None) -> list:
    """Reconstruct every single-beam exposure; results keyed in beam order."""
    results = []
    for exp in exposures:
        beam = lidar.beams[exp.beam_index]
        results.append(reconstruct_exposure(exp.spots, beam, lidar, exp.beam_index, params))
    return results


def naive_pointcloud(exposures, lidar: LidarConfig, params: Optional[SingleBeamParams] = None) -> list:
    """Map every spot with the single-scatter range equation.

    Spots the full pipeline treats as multibounce are labelled ``false_naive``.
    """
    params = params or SingleBeamParams()
    pts = []
    for exp in exposures:
        if exp.beam_index >= 0:
            res = reconstruct_exposure(exp.spots, lidar.beams[exp.beam_index], lidar, exp.beam_index, params)
            roles = res.roles
        else:
            roles = {i: "?" for i in range(len(exp.spots))}
        for i, sp in enumerate(exp.spots):
            try:
                pos = apparent_position(sp, lidar)
            except DegenerateGeometryError:
                continue
            label = "diffuse" if roles.get(i) == "1B" else "false_naive"
            pts.append(ReconstructedPoint(pos, None, label, "Eq1", exp.beam_index, tuple(sp.sources), "diffuse"))
    return pts
