"""Planar mirror mapping from a multi-beam exposure without spot-to-beam association.

Two-bounce returns all look as if they were emitted by the transmitter's
mirror image ``L'``.  Given approximate positions ``x_i`` for the two-bounce
spots, ``L'`` solves a small multilateration problem; the mirror plane then
bisects ``L L'``.  Three-bounce spots are found inside the angular hull of
the mirror's reflection points and unfolded across the plane.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .geom import (
    DegenerateGeometryError,
    Plane,
    convex_hull_contains,
    normalize,
    reflect_dir,
    reflect_point,
    scan_angles,
)
from .recon_sb import ReconstructedPoint, apparent_position
from .scene import LidarConfig, Spot

ON_PLANE_TOL = 1e-9


class ConvergenceError(RuntimeError):
    """Newton iterations ran out; ``best`` holds the best iterate seen."""

    def __init__(self, msg, best):
        super().__init__(msg)
        self.best = best


class RansacError(RuntimeError):
    def __init__(self, code: str, msg: str = ""):
        super().__init__(f"{code}: {msg}" if msg else code)
        self.code = code


@dataclass(eq=False)
class MbClassification:
    one_or_three_bounce: dict  # spot index -> matched beam index
    two_bounce: list

    def __post_init__(self):
        beams = list(self.one_or_three_bounce.values())
        if len(set(beams)) != len(beams):
            raise ValueError("a beam can be matched to at most one spot")
        if set(self.one_or_three_bounce) & set(self.two_bounce):
            raise ValueError("classes must not overlap")


@dataclass(eq=False)
class MirroredSourceEstimate:
    source: np.ndarray  # L'
    inliers: list
    mse: float
    iterations_used: int
    low_confidence: bool = False
    # runner-up models (L', inlier indices, mse), best first
    candidates: list = field(default_factory=list)

    def __post_init__(self):
        if self.mse < 0:
            raise ValueError("mse must be non-negative")


@dataclass
class RansacParams:
    n: int = 4
    d: int = 10
    k: int = 1000
    inlier_tol: Optional[float] = None  # metres; None -> max(3 c sigma_i, min_tol) per point
    min_tol: float = 5e-3
    seed: int = 0
    # misclassified one-bounce points are all consistent with L' = L
    min_source_separation: float = 0.1


# --- step 1: beam intersection -------------------------------------------------


def classify_spots_mb(spots: Sequence[Spot], beams, lidar: LidarConfig, beam_tol: float = math.radians(0.2)) -> MbClassification:
    """Match spots whose apparent positions lie on a transmitted beam.

    Each beam keeps only its angularly closest candidate; everything else is
    treated as two-bounce.
    """
    beams = np.atleast_2d(np.asarray(beams, dtype=float))
    beams = beams / np.linalg.norm(beams, axis=1, keepdims=True)
    best: dict = {}  # beam -> (angle, spot)
    demoted = []
    for i, sp in enumerate(spots):
        try:
            x = apparent_position(sp, lidar)
        except DegenerateGeometryError:
            demoted.append(i)
            continue
        v = normalize(x - lidar.L)
        cosines = np.clip(beams @ v, -1.0, 1.0)
        b = int(np.argmax(cosines))
        ang = float(np.arccos(cosines[b])) if cosines[b] < 1.0 else 0.0
        if ang > beam_tol:
            demoted.append(i)
            continue
        if b in best:
            if ang < best[b][0]:
                demoted.append(best[b][1])
                best[b] = (ang, i)
            else:
                demoted.append(i)
        else:
            best[b] = (ang, i)
    matched = {i: b for b, (_, i) in best.items()}
    return MbClassification(dict(sorted(matched.items())), sorted(demoted))


# --- step 3: interpolation -----------------------------------------------------


def interpolate_2b_positions(two_bounce_dirs, anchor_dirs, anchor_positions, C=(0.0, 0.0, 0.0), k: int = 3) -> np.ndarray:
    """Approximate two-bounce positions from the nearest anchors in angle.

    The range along each two-bounce ray is the inverse-angular-distance
    weighted mean of the ``k`` nearest anchors' ranges.
    """
    U = np.atleast_2d(np.asarray(two_bounce_dirs, dtype=float))
    A = np.atleast_2d(np.asarray(anchor_dirs, dtype=float))
    P = np.atleast_2d(np.asarray(anchor_positions, dtype=float))
    C = np.asarray(C, dtype=float)
    if len(P) == 0 or A.size == 0:
        raise ValueError("interpolation needs at least one anchor")
    if len(U) == 0 or U.size == 0:
        return np.zeros((0, 3))
    U = U / np.linalg.norm(U, axis=1, keepdims=True)
    A = A / np.linalg.norm(A, axis=1, keepdims=True)
    ranges = np.linalg.norm(P - C, axis=1)
    kk = min(k, len(A))
    cross = np.linalg.norm(np.cross(U[:, None, :], A[None, :, :]), axis=2)
    ang = np.arctan2(cross, U @ A.T)
    out = np.empty((len(U), 3))
    for i in range(len(U)):
        near = np.argsort(ang[i], kind="stable")[:kk]
        a = ang[i, near]
        if a[0] < 1e-12:
            r = ranges[near[0]]
        else:
            w = 1.0 / a
            r = float(np.dot(w, ranges[near]) / w.sum())
        out[i] = C + r * U[i]
    return out


# --- step 4: Newton multilateration -------------------------------------------


def _targets(points, tofs, lidar: LidarConfig):
    X = np.asarray(points, dtype=float) - lidar.C
    a = lidar.c * np.asarray(tofs, dtype=float) - np.linalg.norm(X, axis=-1)
    return X, a


def eq8_objective(p, points, tofs, lidar: LidarConfig) -> float:
    X, a = _targets(points, tofs, lidar)
    f = np.sum((X - (np.asarray(p) - lidar.C)) ** 2, axis=1) - a * a
    return 0.5 * float(np.dot(f, f))


def eq8_gradient(p, points, tofs, lidar: LidarConfig) -> np.ndarray:
    X, a = _targets(points, tofs, lidar)
    q = np.asarray(p, dtype=float) - lidar.C
    dv = q - X
    f = np.sum(dv * dv, axis=1) - a * a
    return 2.0 * (f[:, None] * dv).sum(axis=0)


def _newton_batch(X, a, q0, max_iter=100, gtol=1e-9, xtol=1e-12):
    """Damped Newton on the multilateration objective for a batch of problems.

    ``X`` is ``(B, m, 3)``, ``a`` is ``(B, m)`` and ``q0`` is ``(B, 3)``, all in
    receiver-centered coordinates.  Returns ``(q, converged, iterations)``.
    """
    q = np.array(q0, dtype=float)
    B = len(q)
    done = np.zeros(B, dtype=bool)
    iters = np.zeros(B, dtype=int)
    eye = np.eye(3)

    def objective(qq, idx):
        dv = qq[:, None, :] - X[idx]
        f = np.einsum("bmk,bmk->bm", dv, dv) - a[idx] ** 2
        return 0.5 * np.einsum("bm,bm->b", f, f), dv, f

    for _ in range(max_iter):
        act = np.nonzero(~done)[0]
        if len(act) == 0:
            break
        iters[act] += 1
        F, dv, f = objective(q[act], act)
        g = 2.0 * np.einsum("bm,bmk->bk", f, dv)
        gn = np.linalg.norm(g, axis=1)
        conv = gn < gtol
        done[act[conv]] = True
        act, F, dv, f, g = act[~conv], F[~conv], dv[~conv], f[~conv], g[~conv]
        if len(act) == 0:
            break
        H = 4.0 * np.einsum("bmi,bmj->bij", dv, dv) + 2.0 * f.sum(axis=1)[:, None, None] * eye
        lam = np.linalg.eigvalsh(H)
        scale = np.maximum(np.abs(lam).max(axis=1), 1e-300)
        shift = np.where(lam[:, 0] <= 1e-10 * scale, -lam[:, 0] + 1e-6 * scale, 0.0)
        step = -np.linalg.solve(H + shift[:, None, None] * eye, g[:, :, None])[:, :, 0]
        t = np.ones(len(act))
        accepted = np.zeros(len(act), dtype=bool)
        for _ls in range(40):
            trial = q[act] + t[:, None] * step
            Ft, _, _ = objective(trial, act)
            ok = (Ft <= F) & ~accepted
            q[act[ok]] = trial[ok]
            accepted |= ok
            if accepted.all():
                break
            t = np.where(accepted, t, 0.5 * t)
        small = np.linalg.norm(t[:, None] * step, axis=1) < xtol
        done[act[small | ~accepted]] = True
    converged = done.copy()
    return q, converged, iters


def linear_init(points, tofs, lidar: LidarConfig) -> np.ndarray:
    """Closed-form start: differences of the squared-range constraints are linear in ``L'``."""
    X, a = _targets(points, tofs, lidar)
    q = _linear_init_batch(X[None], a[None])[0]
    return q + lidar.C


def _linear_init_batch(X, a):
    # 2 (x_i - x_0) . q = |x_i|^2 - |x_0|^2 - a_i^2 + a_0^2
    A = 2.0 * (X[:, 1:, :] - X[:, :1, :])
    n2 = np.einsum("bmk,bmk->bm", X, X)
    rhs = (n2[:, 1:] - n2[:, :1]) - (a[:, 1:] ** 2 - a[:, :1] ** 2)
    return np.einsum("bij,bj->bi", np.linalg.pinv(A), rhs)


def localize_source_newton(points, tofs, init, lidar: LidarConfig, max_iter: int = 100) -> np.ndarray:
    """Minimize the multilateration objective for ``L'`` by damped Newton steps."""
    X, a = _targets(points, tofs, lidar)
    if len(X) < 4:
        raise ValueError("need at least 4 points")
    init = np.asarray(init, dtype=float)
    if not np.all(np.isfinite(init)):
        raise ValueError("init must be finite")
    q, conv, _ = _newton_batch(X[None], a[None], (init - lidar.C)[None], max_iter=max_iter)
    if not conv[0]:
        raise ConvergenceError(f"no convergence after {max_iter} iterations", q[0] + lidar.C)
    return q[0] + lidar.C


# --- robust estimate ---------------------------------------------------------


def source_residuals(p, points, tofs, lidar: LidarConfig) -> np.ndarray:
    """Per-point range mismatch ``| |x_i - L'| - (c t_i - r_i) |`` in metres."""
    X, a = _targets(points, tofs, lidar)
    return np.abs(np.linalg.norm(X - (np.asarray(p) - lidar.C), axis=1) - a)


def localize_source_ransac(points, tofs, lidar: LidarConfig, params: Optional[RansacParams] = None, tof_sigmas=None) -> MirroredSourceEstimate:
    """RANSAC around the Newton solve; deterministic for a given ``params.seed``."""
    params = params or RansacParams()
    X, a = _targets(points, tofs, lidar)
    m = len(X)
    n, d = params.n, params.d
    if m < n:
        raise RansacError("too_few_points", f"{m} points, need {n}")
    if params.inlier_tol is not None:
        tol = np.full(m, params.inlier_tol)
    else:
        sig = np.zeros(m) if tof_sigmas is None else np.asarray(tof_sigmas, dtype=float)
        tol = np.maximum(3.0 * lidar.c * sig, params.min_tol)
    Lq = lidar.L - lidar.C

    def fit(idx, q0=None):
        Xi, ai = X[idx][None], a[idx][None]
        start = _linear_init_batch(Xi, ai) if q0 is None else q0[None]
        q, _, it = _newton_batch(Xi, ai, start)
        return q[0], int(it[0])

    def score(q, idx):
        r = np.abs(np.linalg.norm(X[idx] - q, axis=1) - a[idx])
        return float(np.mean(r * r))

    if m < n + d + 1:
        idx = np.arange(m)
        q, it = fit(idx)
        return MirroredSourceEstimate(q + lidar.C, idx.tolist(), score(q, idx), it, low_confidence=True)

    # per-iteration sub-seeds keep each draw independent of evaluation order
    samples = np.array([np.random.default_rng([params.seed, i]).choice(m, n, replace=False) for i in range(params.k)])
    Xs, As = X[samples], a[samples]
    q0 = _linear_init_batch(Xs, As)
    bad = ~np.all(np.isfinite(q0), axis=1)
    q0[bad] = 0.0
    qs, _, its = _newton_batch(Xs, As, q0)

    best = None
    refits: dict = {}
    total_iters = int(its.sum())
    for i in range(params.k):
        q = qs[i]
        if bad[i] or not np.all(np.isfinite(q)) or np.linalg.norm(q - Lq) < params.min_source_separation:
            continue
        inl = np.abs(np.linalg.norm(X - q, axis=1) - a) < tol
        if inl.sum() - n <= d:
            continue
        key = inl.tobytes()
        if key not in refits:
            idx = np.nonzero(inl)[0]
            qr, it = fit(idx, q)
            total_iters += it
            refits[key] = (qr, idx, score(qr, idx))
        qr, idx, mse = refits[key]
        if np.linalg.norm(qr - Lq) < params.min_source_separation:
            continue
        if best is None or mse < best[2]:
            best = (qr, idx, mse)
    if best is None:
        raise RansacError("no_consensus", f"no model reached {n + d} inliers in {params.k} iterations")
    qr, idx, mse = best
    ranked = sorted(
        ((q, i, e) for q, i, e in refits.values() if np.linalg.norm(q - Lq) >= params.min_source_separation),
        key=lambda m: m[2],
    )
    cands = [(q + lidar.C, i.tolist(), e) for q, i, e in ranked]
    return MirroredSourceEstimate(qr + lidar.C, idx.tolist(), mse, total_iters, candidates=cands)


# --- steps 5 and 6 ------------------------------------------------------------


def plane_from_source(L, L_prime) -> Plane:
    """Perpendicular bisector of ``L L'``; the normal points from ``L`` toward ``L'``."""
    L = np.asarray(L, dtype=float)
    Lp = np.asarray(L_prime, dtype=float)
    if np.linalg.norm(Lp - L) < 1e-9:
        raise DegenerateGeometryError("mirrored source coincides with the source")
    n = normalize(Lp - L)
    return Plane(n, float(np.dot(n, 0.5 * (L + Lp))))


@dataclass(eq=False)
class ReflectionPoint:
    position: np.ndarray
    spot: int  # spot index, or -1 for a beam intersection
    via: str  # "receiver" | "source" | "beam" | "on_plane"
    beam: int = -1


def _ray_plane(origin, direction, plane: Plane):
    denom = float(np.dot(plane.normal, direction))
    if abs(denom) < 1e-15:
        return None
    t = (plane.offset - float(np.dot(plane.normal, origin))) / denom
    if t <= 0:
        return None
    return origin + t * direction


def recover_reflection_points(plane: Plane, positions, L_prime, lidar: LidarConfig, spot_ids=None, diagnostics=None) -> list:
    """Mirror-surface points from approximate two-bounce positions.

    Points behind the plane (seen from the receiver) are mirror images: the
    receiver ray to them crosses the mirror where the light was reflected.
    Points in front are true spots lit by the deflected beam, which appears
    to come from ``L'``.
    """
    C = lidar.C
    Lp = np.asarray(L_prime, dtype=float)
    side_c = float(plane.signed_distance(C))
    out = []
    positions = np.atleast_2d(np.asarray(positions, dtype=float)) if len(positions) else np.zeros((0, 3))
    ids = list(range(len(positions))) if spot_ids is None else list(spot_ids)
    for sid, x in zip(ids, positions):
        sd = float(plane.signed_distance(x))
        if abs(sd) < ON_PLANE_TOL:
            out.append(ReflectionPoint(np.array(x, dtype=float), sid, "on_plane"))
            continue
        if sd * side_c < 0:
            p, via = _ray_plane(C, x - C, plane), "receiver"
        else:
            p, via = _ray_plane(Lp, x - Lp, plane), "source"
        if p is None:
            if diagnostics is not None:
                diagnostics.append(f"spot {sid}: ray parallel to the mirror plane, skipped")
            continue
        out.append(ReflectionPoint(p, sid, via))
    return out


def beam_plane_points(plane: Plane, beams, lidar: LidarConfig, beam_ids) -> list:
    out = []
    for b in beam_ids:
        p = _ray_plane(lidar.L, np.asarray(beams[b], dtype=float), plane)
        if p is not None:
            out.append(ReflectionPoint(p, -1, "beam", int(b)))
    return out


# --- steps 7 and 8 ------------------------------------------------------------


def _facing_normal(plane: Plane, C) -> np.ndarray:
    return plane.normal if plane.signed_distance(C) > 0 else -plane.normal


def angular_hull(points, C) -> Optional[np.ndarray]:
    """Scan-angle coordinates of points as seen from ``C`` (``None`` if fewer than 3)."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if len(pts) < 3:
        return None
    return scan_angles((pts - C) / np.linalg.norm(pts - C, axis=1, keepdims=True))


def reclassify_and_unfold(
    classification: MbClassification, reflection_points: Sequence[ReflectionPoint], plane: Plane,
    spots: Sequence[Spot], lidar: LidarConfig, diagnostics=None, hull_tol: float = 1e-12,
) -> tuple[list, dict]:
    """Hull test for three-bounce spots, then unfold them across the plane.

    Returns ``(points, roles)`` with roles mapping spot index to "1B" / "3B".
    Mirror points are emitted by the caller.
    """
    C = lidar.C
    roles: dict = {}
    pts = []
    hv = angular_hull([r.position for r in reflection_points], C)
    if hv is None and diagnostics is not None:
        diagnostics.append("fewer than 3 reflection points: unfolding skipped")
    side_c = float(plane.signed_distance(C))

    def in_hull(u) -> bool:
        try:
            return convex_hull_contains(hv, scan_angles(u), hull_tol)
        except DegenerateGeometryError:
            return False

    beams = np.atleast_2d(lidar.beams)
    for i, b in classification.one_or_three_bounce.items():
        sp = spots[i]
        x = apparent_position(sp, lidar)
        inside = False
        # a mirror image always appears beyond the mirror
        if hv is not None and float(plane.signed_distance(x)) * side_c < 0:
            inside = in_hull(sp.direction)
            if not inside:
                # the spot's own beam struck the mirror where the 2B returns say it is
                s1 = _ray_plane(lidar.L, beams[b], plane)
                inside = s1 is not None and in_hull(normalize(s1 - C))
        if inside:
            roles[i] = "3B"
            pts.append(ReconstructedPoint(reflect_point(x, plane), None, "diffuse", "Eq3", b, tuple(sp.sources), "diffuse"))
        else:
            roles[i] = "1B"
            pts.append(ReconstructedPoint(x, None, "diffuse", "Eq1", b, tuple(sp.sources), "diffuse"))
    return pts, roles


# --- refinement of the interpolated positions ---------------------------------


def positions_on_ellipsoid(dirs, tofs, L_prime, lidar: LidarConfig) -> np.ndarray:
    """Point on each receiver ray whose path length via ``L'`` matches the time of flight.

    Solves ``rho + |C + rho u - L'| = c t`` for ``rho``.
    """
    U = np.atleast_2d(np.asarray(dirs, dtype=float))
    ct = lidar.c * np.asarray(tofs, dtype=float)
    w = lidar.C - np.asarray(L_prime, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        rho = (ct * ct - w @ w) / (2.0 * (ct + U @ w))
    rho = np.where(rho > 0, rho, np.nan)
    return lidar.C + rho[:, None] * U


def mirrored_beam_miss(X, L_prime, plane: Plane, beams) -> np.ndarray:
    """Distance from each point to each transmitted beam mirrored through the plane, ``(N, K)``."""
    Bm = np.array([reflect_dir(b, plane.normal) for b in np.atleast_2d(beams)])
    Bm /= np.linalg.norm(Bm, axis=1, keepdims=True)
    R = np.atleast_2d(X) - np.asarray(L_prime, dtype=float)
    tau = R @ Bm.T
    perp = np.einsum("nk,nk->n", R, R)[:, None] - tau**2
    d = np.sqrt(np.clip(perp, 0.0, None))
    # behind the mirrored source the distance is to the ray's origin
    return np.where(tau > 0, d, np.linalg.norm(R, axis=1)[:, None])


def refine_source(dirs, tofs, L_prime, beams, lidar: LidarConfig, f_scale: float = 0.01, rounds: int = 10):
    """Move ``L'`` until every two-bounce point sits on a mirrored beam.

    For a trial ``L'`` the time of flight fixes each point on its receiver
    ray; the residual is its distance to the nearest mirrored beam.  At the
    true ``L'`` all residuals vanish.  Returns ``(L', positions, miss, beam)``.
    """
    from scipy.optimize import least_squares

    Lp = np.asarray(L_prime, dtype=float)
    beams = np.atleast_2d(beams)
    assoc = None
    for _ in range(rounds):
        X = positions_on_ellipsoid(dirs, tofs, Lp, lidar)
        ok = np.all(np.isfinite(X), axis=1)
        miss_all = mirrored_beam_miss(np.where(ok[:, None], X, 0.0), Lp, plane_from_source(lidar.L, Lp), beams)
        new_assoc = np.argmin(miss_all, axis=1)
        if assoc is not None and np.array_equal(new_assoc, assoc):
            break
        assoc = new_assoc
        sel = np.nonzero(ok)[0]
        if len(sel) < 3:
            break

        def resid(q):
            Xq = positions_on_ellipsoid(dirs[sel], tofs[sel], q, lidar)
            pl = plane_from_source(lidar.L, q)
            Bm = np.array([reflect_dir(beams[k], pl.normal) for k in assoc[sel]])
            R = Xq - q
            t = np.einsum("nk,nk->n", R, Bm)
            r = np.linalg.norm(R - t[:, None] * Bm, axis=1)
            return np.nan_to_num(r, nan=1.0)

        sol = least_squares(resid, Lp, loss="soft_l1", f_scale=f_scale, x_scale=1.0, xtol=1e-15, ftol=1e-15, gtol=1e-15)
        Lp = sol.x
    X = positions_on_ellipsoid(dirs, tofs, Lp, lidar)
    ok = np.all(np.isfinite(X), axis=1)
    miss_all = mirrored_beam_miss(np.where(ok[:, None], X, 0.0), Lp, plane_from_source(lidar.L, Lp), beams)
    k = np.argmin(miss_all, axis=1)
    miss = np.where(ok, miss_all[np.arange(len(k)), k], np.inf)
    return Lp, X, miss, k


# --- full pipeline ------------------------------------------------------------


@dataclass
class MultiBeamParams:
    beam_tol: float = math.radians(0.2)
    k_interp: int = 3
    ransac: RansacParams = field(default_factory=RansacParams)
    # interpolated positions are only approximate: the first robust fit uses a loose tolerance
    coarse_tol: float = 0.05
    refine_tol: float = 1e-3
    n_candidates: int = 1
    hull_tol: float = 1e-9


@dataclass(eq=False)
class MultiBeamResult:
    classification: MbClassification
    estimate: Optional[MirroredSourceEstimate]
    plane: Optional[Plane]
    points: list
    roles: dict  # spot index -> "1B" | "2B" | "3B"
    positions_2b: np.ndarray
    reflection_points: list = field(default_factory=list)
    diagnostics: list = field(default_factory=list)


def reconstruct_multi_beam(spots: Sequence[Spot], lidar: LidarConfig, params: Optional[MultiBeamParams] = None) -> MultiBeamResult:
    """Run the whole multi-beam pipeline on one exposure's spots."""
    params = params or MultiBeamParams()
    diags: list = []
    beams = np.atleast_2d(lidar.beams)
    cls = classify_spots_mb(spots, beams, lidar, params.beam_tol)
    roles = {i: "2B" for i in cls.two_bounce}
    anchors = list(cls.one_or_three_bounce)
    tb = cls.two_bounce

    def fallback(msg):
        diags.append(msg)
        pts = [
            ReconstructedPoint(apparent_position(spots[i], lidar), None, "diffuse", "Eq1", b, tuple(spots[i].sources), "diffuse")
            for i, b in cls.one_or_three_bounce.items()
        ]
        roles.update({i: "1B" for i in anchors})
        return MultiBeamResult(cls, None, None, pts, roles, np.zeros((0, 3)), [], diags)

    if not anchors or len(tb) < params.ransac.n:
        return fallback("not enough spots for source localization")

    anchor_pos = np.array([apparent_position(spots[i], lidar) for i in anchors])
    dirs = np.array([spots[i].direction for i in tb])
    tofs = np.array([spots[i].tof for i in tb])
    sigmas = np.array([spots[i].tof_sigma for i in tb])
    X = interpolate_2b_positions(dirs, [spots[i].direction for i in anchors], anchor_pos, lidar.C, params.k_interp)

    coarse = RansacParams(**{**params.ransac.__dict__, "inlier_tol": params.coarse_tol})
    try:
        est = localize_source_ransac(X, tofs, lidar, coarse, sigmas)
    except RansacError as exc:
        return fallback(f"source localization failed: {exc}")

    # refine: move each 2B position onto its mirrored beam, then re-fit on the strict inliers
    tol = np.maximum(3.0 * lidar.c * sigmas, params.refine_tol)
    # the lowest-mse consensus set can be a small coincidental one: refine the
    # leading models and keep the one that explains the most two-bounce spots
    starts = [c[0] for c in est.candidates[: params.n_candidates]] or [est.source]
    best = None
    for q0 in starts:
        Lq, Xq, mq, _ = refine_source(dirs, tofs, q0, beams, lidar, params.coarse_tol)
        if np.linalg.norm(Lq - lidar.L) < params.ransac.min_source_separation:
            continue
        nq = int(np.sum(mq < tol))
        if best is None or nq > best[0] or (nq == best[0] and np.sum(mq[mq < tol]) < best[4]):
            best = (nq, Lq, Xq, mq, float(np.sum(mq[mq < tol])))
    if best is None:
        Lp, Xr, miss = est.source, X, np.full(len(tb), np.inf)
    else:
        _, Lp, Xr, miss, _ = best
    inl = np.nonzero(miss < tol)[0]
    if len(inl) >= params.ransac.n:
        X = np.where(np.isfinite(Xr), Xr, X)
        try:
            Lp = localize_source_newton(X[inl], tofs[inl], Lp, lidar)
        except ConvergenceError as exc:
            Lp = exc.best
    else:
        diags.append(f"refinement kept only {len(inl)} points; using the interpolated fit")
        Lp, inl = est.source, np.array(est.inliers)
    mse = float(np.mean(source_residuals(Lp, X[inl], tofs[inl], lidar) ** 2))
    est = MirroredSourceEstimate(Lp, [tb[i] for i in inl], mse, est.iterations_used, est.low_confidence)
    plane = plane_from_source(lidar.L, Lp)
    normal = _facing_normal(plane, lidar.C)

    refl = recover_reflection_points(plane, X[inl], Lp, lidar, [tb[i] for i in inl], diags)
    pts, r13 = reclassify_and_unfold(cls, refl, plane, spots, lidar, diags, params.hull_tol)
    roles.update(r13)

    mirror_pts = []
    for r in refl:
        sp = spots[r.spot]
        if r.via == "source":
            mirror_pts.append(ReconstructedPoint(r.position, normal, "specular_illuminated", "Eq8", -1, tuple(sp.sources), "first"))
        else:
            mirror_pts.append(ReconstructedPoint(r.position, normal, "specular_observed", "Eq8", -1, tuple(sp.sources), "arrival"))
    # beams whose on-beam spot was unfolded struck the mirror: reclaim their first reflection point
    three = {b: i for i, b in cls.one_or_three_bounce.items() if r13.get(i) == "3B"}
    for rp in beam_plane_points(plane, beams, lidar, sorted(three)):
        sp = spots[three[rp.beam]]
        mirror_pts.append(ReconstructedPoint(rp.position, normal, "specular_illuminated", "Eq8", rp.beam, tuple(sp.sources), "first"))
        refl.append(rp)
    return MultiBeamResult(cls, est, plane, pts + mirror_pts, roles, X, refl, diags)


def mb_spot_kinds(result: MultiBeamResult, n_spots: int) -> dict:
    """Per-spot interpretation in the single-beam vocabulary.

    Two-bounce spots behind the plane are mirror images of directly lit spots;
    those in front were lit through the mirror.  Rejected two-bounce spots stay
    unresolved.
    """
    kinds = {i: "unresolved" for i in range(n_spots)}
    for i, r in result.roles.items():
        if r == "1B":
            kinds[i] = "direct"
        elif r == "3B":
            kinds[i] = "image_3b"
    for rp in result.reflection_points:
        if rp.spot >= 0:
            kinds[rp.spot] = "specular_2b" if rp.via == "source" else "image_2b"
    return kinds
