"""Vector, plane and angle primitives shared by the simulator and the solvers.

Conventions
-----------
World frame: the receiver sits at ``C`` (the origin for bundled scenes), the
boresight is ``+z`` and ``+y`` points up.

``SphericalDir(theta, phi)`` is a polar/azimuth pair around the boresight:
``theta`` is the angle away from ``+z`` and ``phi`` the azimuth measured from
``+x`` toward ``+y``.  Equivalently, ``+z`` is rotated by ``theta`` about
``y`` (into the x-z plane) and the result is then rotated by ``phi`` about
the boresight.  With this choice the spherical law of cosines used by the
range equations is exact.

Detector pixels and angular hulls use a second, flat chart: scan angles
``(h, v)``, i.e. ``+z`` rotated by ``h`` about ``y`` and then by ``v`` about
the fixed ``x`` axis (the galvo-style parameterization).  It has no
singularity near the boresight, so rectangular pixel grids and 2-D convex
hulls behave.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np


class DegenerateGeometryError(ValueError):
    """Raised when an input configuration has no well-defined answer."""


class SphericalDir(NamedTuple):
    theta: float
    phi: float


def normalize(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    n = np.linalg.norm(v)
    if n == 0.0 or not np.isfinite(n):
        raise DegenerateGeometryError("cannot normalize a zero or non-finite vector")
    return v / n


def angle_between(a, b) -> float:
    """Angle in [0, pi] between two vectors, accurate near 0 and pi."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return float(np.arctan2(np.linalg.norm(np.cross(a, b)), np.dot(a, b)))


def dir_from_angles(a: SphericalDir) -> np.ndarray:
    theta, phi = a
    st = np.sin(theta)
    return np.array([st * np.cos(phi), st * np.sin(phi), np.cos(theta)])


def angles_from_dir(u) -> SphericalDir:
    x, y, z = np.asarray(u, dtype=float)
    # atan2 keeps full precision near the pole where acos(z) would not
    theta = float(np.arctan2(np.hypot(x, y), z))
    phi = float(np.arctan2(y, x))
    return SphericalDir(theta, phi)


def angular_separation(a: SphericalDir, b: SphericalDir) -> float:
    return angle_between(dir_from_angles(a), dir_from_angles(b))


def scan_angles(u) -> np.ndarray:
    """Flat detector-chart coordinates ``(h, v)`` of unit vector(s) ``u``.

    Accepts a single vector or an ``(N, 3)`` stack.
    """
    u = np.asarray(u, dtype=float)
    x, y, z = u[..., 0], u[..., 1], u[..., 2]
    h = np.arctan2(x, np.hypot(y, z))
    v = np.arctan2(y, z)
    return np.stack([h, v], axis=-1)


def dir_from_scan_angles(h, v) -> np.ndarray:
    h = np.asarray(h, dtype=float)
    v = np.asarray(v, dtype=float)
    ch = np.cos(h)
    return np.stack([np.sin(h), ch * np.sin(v), ch * np.cos(v)], axis=-1)


@dataclass(frozen=True, eq=False)
class Plane:
    """Plane ``{x : normal . x = offset}`` with a unit normal."""

    normal: np.ndarray
    offset: float

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=float)
        norm = np.linalg.norm(n)
        if abs(norm - 1.0) > 1e-9:
            n = normalize(n)
        object.__setattr__(self, "normal", n)
        object.__setattr__(self, "offset", float(self.offset))

    @classmethod
    def from_point_normal(cls, point, normal) -> "Plane":
        n = normalize(normal)
        return cls(n, float(np.dot(n, point)))

    def signed_distance(self, x) -> np.ndarray:
        return np.asarray(x, dtype=float) @ self.normal - self.offset

    def flipped(self) -> "Plane":
        return Plane(-self.normal, -self.offset)

    def __repr__(self):
        n = ", ".join(f"{c:.6g}" for c in self.normal)
        return f"Plane(normal=[{n}], offset={self.offset:.6g})"


def reflect_point(p, pl: Plane) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    dist = p @ pl.normal - pl.offset
    return p - 2.0 * np.multiply.outer(dist, pl.normal)


def reflect_dir(d, n) -> np.ndarray:
    d = np.asarray(d, dtype=float)
    n = np.asarray(n, dtype=float)
    return d - 2.0 * np.dot(d, n) * n


def bisector_normal(D, C, S) -> np.ndarray:
    """Unit normal at reflection point ``S`` linking ``D`` and ``C`` by the law of reflection."""
    a = normalize(np.asarray(D, dtype=float) - S)
    b = normalize(np.asarray(C, dtype=float) - S)
    s = a + b
    if np.linalg.norm(s) < 1e-12:
        raise DegenerateGeometryError("D and C lie in opposite directions from S")
    return normalize(s)


def ray_plane_intersect(origin, direction, pl: Plane, eps: float = 1e-15):
    """Point where the ray ``origin + t*direction`` (t > 0) meets the plane, or None."""
    origin = np.asarray(origin, dtype=float)
    direction = np.asarray(direction, dtype=float)
    denom = float(np.dot(pl.normal, direction))
    if abs(denom) < eps:
        return None
    t = (pl.offset - float(np.dot(pl.normal, origin))) / denom
    if t <= 0.0:
        return None
    return origin + t * direction


def fit_plane_oriented(points, normals) -> Plane:
    """Average the per-point planes defined by oriented points.

    Each oriented point ``(x_i, n_i)`` defines the plane ``n_i . x = n_i . x_i``;
    the fit averages normals (renormalized) and offsets.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    normals = np.atleast_2d(np.asarray(normals, dtype=float))
    if len(points) == 0:
        raise ValueError("need at least one oriented point")
    if points.shape != normals.shape:
        raise ValueError("points and normals must have matching shapes")
    normals = normals / np.linalg.norm(normals, axis=1, keepdims=True)
    mean_n = normals.mean(axis=0)
    if np.linalg.norm(mean_n) < 1e-6:
        raise DegenerateGeometryError("normals span opposite hemispheres")
    offsets = np.einsum("ij,ij->i", normals, points)
    return Plane(normalize(mean_n), float(offsets.mean()))


def _cross2(o, a, b):
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def convex_hull_2d(pts) -> np.ndarray:
    """Counter-clockwise hull vertices (monotone chain)."""
    pts = np.asarray(pts, dtype=float)
    order = np.lexsort((pts[:, 1], pts[:, 0]))
    p = pts[order]
    lower: list = []
    for q in p:
        while len(lower) >= 2 and _cross2(lower[-2], lower[-1], q) <= 0:
            lower.pop()
        lower.append(q)
    upper: list = []
    for q in p[::-1]:
        while len(upper) >= 2 and _cross2(upper[-2], upper[-1], q) <= 0:
            upper.pop()
        upper.append(q)
    return np.array(lower[:-1] + upper[:-1])


def convex_hull_contains(hull_pts: Sequence, q, tol: float = 1e-12) -> bool:
    """True if 2-D point ``q`` is inside or on the convex hull of ``hull_pts``.

    Coordinates are treated as flat; callers pass scan-angle pairs.
    """
    pts = np.asarray(hull_pts, dtype=float)
    if len(pts) < 3:
        raise DegenerateGeometryError("hull needs at least 3 points")
    hull = convex_hull_2d(pts)
    if len(hull) < 3:
        raise DegenerateGeometryError("hull points are collinear")
    q = np.asarray(q, dtype=float)
    nxt = np.roll(hull, -1, axis=0)
    edge = nxt - hull
    rel = q - hull
    cross = edge[:, 0] * rel[:, 1] - edge[:, 1] * rel[:, 0]
    scale = np.linalg.norm(edge, axis=1)
    return bool(np.all(cross >= -tol * scale))


def orthonormal_basis(n) -> tuple[np.ndarray, np.ndarray]:
    """Two unit vectors spanning the plane orthogonal to ``n``."""
    n = normalize(n)
    helper = np.array([0.0, 1.0, 0.0]) if abs(n[1]) < 0.9 else np.array([1.0, 0.0, 0.0])
    e1 = normalize(np.cross(helper, n))
    e2 = np.cross(n, e1)
    return e1, e2
