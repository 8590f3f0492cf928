"""Planar-facet scenes and an exact multibounce forward model.

Paths are built from an optional chain of specular reflections off the
transmitted beam, exactly one diffuse scattering vertex ``D``, and an optional
chain of specular reflections on the way to the receiver, at most three
interior vertices in total.  Transparent facets both reflect and transmit;
a transmission is not a bounce but attenuates the path.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .geom import Plane, angle_between, dir_from_scan_angles, normalize, orthonormal_basis, reflect_dir, reflect_point, scan_angles

SPEED_OF_LIGHT = 299_792_458.0
EDGE_TOL = 1e-9  # [m] polygon containment / coplanarity tolerance
MAX_BOUNCES = 3


@dataclass(frozen=True)
class Material:
    kind: str  # "diffuse" | "specular" | "transparent"
    albedo: float = 0.0
    reflectance: float = 0.0
    transmittance: float = 0.0

    def __post_init__(self):
        if self.kind not in ("diffuse", "specular", "transparent"):
            raise ValueError(f"unknown material kind {self.kind!r}")
        for name in ("albedo", "reflectance", "transmittance"):
            val = getattr(self, name)
            if not 0.0 <= val <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {val}")
        if self.kind == "transparent" and self.reflectance + self.transmittance > 1.0 + 1e-12:
            raise ValueError("reflectance + transmittance must not exceed 1")

    @classmethod
    def diffuse(cls, albedo: float) -> "Material":
        return cls("diffuse", albedo=albedo)

    @classmethod
    def specular(cls, reflectance: float = 1.0) -> "Material":
        return cls("specular", reflectance=reflectance)

    @classmethod
    def transparent(cls, reflectance: float, transmittance: float) -> "Material":
        return cls("transparent", reflectance=reflectance, transmittance=transmittance)

    @property
    def reflective(self) -> bool:
        return self.kind in ("specular", "transparent")


class Facet:
    """Planar simple polygon with a material."""

    def __init__(self, vertices, material: Material, id: str, object: Optional[str] = None):
        v = np.asarray(vertices, dtype=float)
        if v.ndim != 2 or v.shape[1] != 3 or len(v) < 3:
            raise ValueError(f"facet {id!r}: need >= 3 vertices of 3 coordinates")
        self.vertices = v
        self.material = material
        self.id = str(id)
        self.object = object
        # Newell normal is robust for any simple polygon
        nxt = np.roll(v, -1, axis=0)
        n = np.array(
            [
                np.sum((v[:, 1] - nxt[:, 1]) * (v[:, 2] + nxt[:, 2])),
                np.sum((v[:, 2] - nxt[:, 2]) * (v[:, 0] + nxt[:, 0])),
                np.sum((v[:, 0] - nxt[:, 0]) * (v[:, 1] + nxt[:, 1])),
            ]
        )
        if np.linalg.norm(n) < 1e-15:
            raise ValueError(f"facet {id!r}: degenerate polygon")
        self.plane = Plane.from_point_normal(v.mean(axis=0), n)
        off = np.abs(self.plane.signed_distance(v))
        if off.max() > EDGE_TOL:
            raise ValueError(f"facet {id!r}: vertices not coplanar (max deviation {off.max():.3g} m)")
        self._e1, self._e2 = orthonormal_basis(self.plane.normal)
        self._poly = self._to2d(v)

    def __repr__(self):
        return f"Facet({self.id!r}, {self.material.kind}, {len(self.vertices)} vertices)"

    def _to2d(self, p):
        p = np.asarray(p, dtype=float)
        return np.stack([p @ self._e1, p @ self._e2], axis=-1)

    def contains(self, p, tol: float = EDGE_TOL) -> bool:
        """Point-in-polygon test for a point already on the facet plane; boundary counts."""
        q = self._to2d(p)
        a = self._poly
        b = np.roll(a, -1, axis=0)
        ab = b - a
        t = np.clip(np.einsum("ij,ij->i", q - a, ab) / np.einsum("ij,ij->i", ab, ab), 0.0, 1.0)
        closest = a + t[:, None] * ab
        if np.min(np.linalg.norm(closest - q, axis=1)) <= tol:
            return True
        crosses = (a[:, 1] > q[1]) != (b[:, 1] > q[1])
        with np.errstate(divide="ignore", invalid="ignore"):
            x_at = a[:, 0] + (q[1] - a[:, 1]) * ab[:, 0] / ab[:, 1]
        return bool(np.count_nonzero(crosses & (q[0] < x_at)) % 2)


@dataclass(frozen=True)
class DetectorGrid:
    """Rectangular pixel grid over scan angles ``(h, v)`` in radians."""

    h_min: float
    h_max: float
    v_min: float
    v_max: float
    n_h: int
    n_v: int

    @property
    def pitch_h(self) -> float:
        return (self.h_max - self.h_min) / self.n_h

    @property
    def pitch_v(self) -> float:
        return (self.v_max - self.v_min) / self.n_v

    @property
    def pitch(self) -> float:
        return 0.5 * (self.pitch_h + self.pitch_v)

    def pixel_coords(self, u) -> np.ndarray:
        """Continuous pixel coordinates; pixel ``(i, j)`` is centered on integers."""
        hv = scan_angles(u)
        i = (hv[..., 0] - self.h_min) / self.pitch_h - 0.5
        j = (hv[..., 1] - self.v_min) / self.pitch_v - 0.5
        return np.stack([i, j], axis=-1)

    def direction_at(self, i, j) -> np.ndarray:
        h = self.h_min + (np.asarray(i, dtype=float) + 0.5) * self.pitch_h
        v = self.v_min + (np.asarray(j, dtype=float) + 0.5) * self.pitch_v
        return dir_from_scan_angles(h, v)

    def in_fov(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        hv = scan_angles(u)
        return (
            (u[..., 2] > 0)
            & (hv[..., 0] >= self.h_min)
            & (hv[..., 0] <= self.h_max)
            & (hv[..., 1] >= self.v_min)
            & (hv[..., 1] <= self.v_max)
        )


def beam_grid(L, h_range, v_range, n_h: int, n_v: int) -> np.ndarray:
    """Unit beam directions on a uniform scan-angle grid, row-major in v then h."""
    hs = np.linspace(h_range[0], h_range[1], n_h)
    vs = np.linspace(v_range[0], v_range[1], n_v)
    hh, vv = np.meshgrid(hs, vs)
    return dir_from_scan_angles(hh.ravel(), vv.ravel())


@dataclass(eq=False)
class LidarConfig:
    L: np.ndarray
    C: np.ndarray
    beams: np.ndarray
    grid: DetectorGrid
    c: float = SPEED_OF_LIGHT

    def __post_init__(self):
        self.L = np.asarray(self.L, dtype=float)
        self.C = np.asarray(self.C, dtype=float)
        beams = np.atleast_2d(np.asarray(self.beams, dtype=float)).reshape(-1, 3)
        if len(beams):
            norms = np.linalg.norm(beams, axis=1)
            if np.any(np.abs(norms - 1.0) > 1e-9):
                beams = beams / norms[:, None]
        self.beams = beams

    @property
    def baseline(self) -> np.ndarray:
        return self.L - self.C

    @property
    def s(self) -> float:
        return float(np.linalg.norm(self.L - self.C))


@dataclass(eq=False)
class PathRecord:
    """Ground-truth propagation path from ``L`` to ``C``."""

    vertices: np.ndarray  # (k + 2, 3) including L and C
    kinds: str  # one letter per interior vertex: D diffuse, S specular
    surface_ids: tuple
    path_length: float
    relative_energy: float
    beam_index: int
    transmissions: tuple = ()
    path_id: int = -1

    @property
    def bounce_class(self) -> int:
        return len(self.kinds)

    @property
    def label(self) -> str:
        return f"{self.bounce_class}B"

    @property
    def spot_kind(self) -> str:
        """Ground-truth interpretation of the spot this path produces."""
        if self.kinds == "D":
            return "behind" if self.transmissions else "direct"
        return {"DS": "image_2b", "SD": "specular_2b", "SDS": "image_3b"}.get(self.kinds, "unresolved")

    @property
    def multi_specular(self) -> bool:
        return "SS" in self.kinds

    @property
    def signature(self) -> str:
        return "L" + self.kinds + "C"

    @property
    def diffuse_vertex(self) -> np.ndarray:
        return self.vertices[1 + self.kinds.index("D")]

    @property
    def arrival_vertex(self) -> np.ndarray:
        return self.vertices[-2]


@dataclass(eq=False)
class Spot:
    """A return seen by the receiver: arrival direction (unit vector from C), time, energy."""

    direction: np.ndarray
    tof: float
    energy: float
    tof_sigma: float = 0.0
    sources: tuple = ()

    def __post_init__(self):
        self.direction = np.asarray(self.direction, dtype=float)

    @property
    def angles(self):
        from .geom import angles_from_dir

        return angles_from_dir(self.direction)


@dataclass(eq=False)
class Exposure:
    """Spots recorded while one beam (or, for a flash, several) was firing."""

    beam_index: int
    spots: list = field(default_factory=list)


class Scene:
    def __init__(self, facets: Sequence[Facet], lidar: LidarConfig, noise: Optional[dict] = None, name: str = ""):
        self.facets = list(facets)
        ids = [f.id for f in self.facets]
        if len(set(ids)) != len(ids):
            raise ValueError("facet ids must be unique")
        self.lidar = lidar
        self.noise = dict(noise or {})
        self.name = name
        self._by_id = {f.id: f for f in self.facets}
        if self.facets:
            self._normals = np.array([f.plane.normal for f in self.facets])
            self._offsets = np.array([f.plane.offset for f in self.facets])
        else:
            self._normals = np.zeros((0, 3))
            self._offsets = np.zeros(0)
        self._mirror_cache = None

    def _mirror_tables(self):
        """Per-scene arrays for the reflective facets, built lazily.

        ``c1[g]`` is the receiver mirrored in facet ``g``; ``c12[a, b]`` is the
        receiver mirrored in ``b`` and then in ``a``.  Bounding spheres give a
        cheap rejection test before the exact polygon check.
        """
        if self._mirror_cache is None:
            idx = np.array([i for i, f in enumerate(self.facets) if f.material.reflective], dtype=int)
            N = self._normals[idx] if len(idx) else np.zeros((0, 3))
            o = self._offsets[idx] if len(idx) else np.zeros(0)
            C = self.lidar.C
            c1 = C - 2.0 * (N @ C - o)[:, None] * N
            d = np.einsum("ak,bk->ab", N, c1) - o[:, None]
            c12 = c1[None, :, :] - 2.0 * d[:, :, None] * N[:, None, :]
            centers = np.array([self.facets[i].vertices.mean(axis=0) for i in idx]).reshape(-1, 3)
            radii = np.array(
                [np.linalg.norm(self.facets[i].vertices - centers[k], axis=1).max() for k, i in enumerate(idx)]
            )
            self._mirror_cache = (idx, N, o, c1, c12, centers, radii + 10 * EDGE_TOL)
        return self._mirror_cache

    def facet(self, fid: str) -> Facet:
        return self._by_id[fid]

    # --- ray queries -------------------------------------------------------

    def first_hit(self, origin, direction, exclude: int = -1):
        """Nearest facet hit by a ray; returns ``(index, point)`` or None."""
        if not self.facets:
            return None
        with np.errstate(divide="ignore", invalid="ignore"):
            denom = self._normals @ direction
            t = (self._offsets - self._normals @ origin) / denom
        t = np.where(np.abs(denom) < 1e-15, np.inf, t)
        t[t <= EDGE_TOL] = np.inf
        if 0 <= exclude < len(t):
            t[exclude] = np.inf
        for idx in np.argsort(t):
            if not np.isfinite(t[idx]):
                break
            p = origin + t[idx] * direction
            if self.facets[idx].contains(p):
                return int(idx), p
        return None

    def segment_transmission(self, p, q, exclude=()):
        """``(clear, factor, crossed_ids)`` for the open segment p -> q.

        Opaque facets block; transparent facets multiply the transmittance.
        """
        if not self.facets:
            return True, 1.0, ()
        seg = q - p
        length = np.linalg.norm(seg)
        dp = self._normals @ p - self._offsets
        dq = self._normals @ q - self._offsets
        candidates = np.nonzero((dp * dq) < 0)[0]
        factor = 1.0
        crossed = []
        t_eps = EDGE_TOL / max(length, 1e-300)
        for idx in candidates:
            if idx in exclude:
                continue
            t = dp[idx] / (dp[idx] - dq[idx])
            if t <= t_eps or t >= 1.0 - t_eps:
                continue
            f = self.facets[idx]
            if not f.contains(p + t * seg):
                continue
            if f.material.kind == "transparent":
                factor *= f.material.transmittance
                crossed.append((t, f.id))
            else:
                return False, 0.0, ()
        crossed.sort()
        return True, factor, tuple(fid for _, fid in crossed)


# --- forward model ------------------------------------------------------------


def _same_side(n, a, b) -> bool:
    return float(np.dot(n, a)) * float(np.dot(n, b)) > 0.0


def _return_legs(scene: Scene, D, d_idx: int, incoming, budget: int):
    """Receiver legs from diffuse point D: yields (points, facet_idxs, factor, crossings)."""
    C = scene.lidar.C
    facets = scene.facets
    n_d = facets[d_idx].plane.normal
    lit_side = -incoming

    def visible(p, q, exclude):
        return scene.segment_transmission(p, q, exclude)

    # direct
    if _same_side(n_d, lit_side, C - D):
        ok, fac, crossed = visible(D, C, {d_idx})
        if ok:
            yield [], [], fac, crossed
    if budget < 1:
        return
    idx, N, o, c1, c12, centers, radii = scene._mirror_tables()
    if len(idx) == 0:
        return
    sc = N @ C - o
    sd = N @ D - o
    with np.errstate(divide="ignore", invalid="ignore"):
        S_all = D + (sd / (sd + sc))[:, None] * (c1 - D)
    near = np.linalg.norm(S_all - centers, axis=1) <= radii
    for k in np.nonzero((sd * sc > 0.0) & near & (idx != d_idx))[0]:
        g, S = int(idx[k]), S_all[k]
        if not facets[g].contains(S) or not _same_side(n_d, lit_side, S - D):
            continue
        ok1, f1, x1 = visible(D, S, {d_idx, g})
        if not ok1:
            continue
        ok2, f2, x2 = visible(S, C, {g})
        if not ok2:
            continue
        yield [S], [g], f1 * f2 * facets[g].material.reflectance, x1 + x2
    if budget < 2 or len(idx) < 2:
        return
    # first reflection in facet a (nearer D), then in facet b (nearer C)
    s2 = np.einsum("ak,bk->ab", N, c1) - o[:, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        Sa = D + (sd[:, None] / (sd[:, None] + s2))[:, :, None] * (c12 - D)
    ok = (sd[:, None] * s2 > 0.0) & ~np.eye(len(idx), dtype=bool)
    ok &= (idx != d_idx)[:, None] & (idx != d_idx)[None, :]
    ok &= np.linalg.norm(Sa - centers[:, None, :], axis=2) <= radii[:, None]
    for ka, kb in zip(*np.nonzero(ok)):
        g1, g2 = int(idx[ka]), int(idx[kb])
        sa_pt = Sa[ka, kb]
        sa = float(sa_pt @ N[kb] - o[kb])
        if sa * sc[kb] <= 0.0:
            continue
        Sb = sa_pt + (sa / (sa + sc[kb])) * (c1[kb] - sa_pt)
        if not (facets[g1].contains(sa_pt) and facets[g2].contains(Sb)):
            continue
        if not _same_side(n_d, lit_side, sa_pt - D):
            continue
        legs = [visible(D, sa_pt, {d_idx, g1}), visible(sa_pt, Sb, {g1, g2}), visible(Sb, C, {g2})]
        if not all(ok for ok, _, _ in legs):
            continue
        fac = np.prod([f for _, f, _ in legs]) * facets[g1].material.reflectance * facets[g2].material.reflectance
        yield [sa_pt, Sb], [g1, g2], float(fac), sum((x for _, _, x in legs), ())


def trace_beam(scene: Scene, beam, beam_index: int = 0, max_bounces: int = MAX_BOUNCES) -> list:
    """Every path with at most ``max_bounces`` interior vertices for one transmitted beam."""
    lidar = scene.lidar
    beam = normalize(beam)
    paths: list = []

    def forward(origin, d, chain, chain_ids, factor, crossings, exclude):
        hit = scene.first_hit(origin, d, exclude)
        if hit is None:
            return
        idx, p = hit
        f = scene.facets[idx]
        if f.material.kind == "diffuse":
            budget = max_bounces - len(chain) - 1
            if budget < 0:
                return
            fwd_fac = factor * f.material.albedo / np.pi
            for ret_pts, ret_ids, ret_fac, ret_x in _return_legs(scene, p, idx, d, budget):
                verts = np.array([lidar.L, *chain, p, *ret_pts, lidar.C])
                seg = np.linalg.norm(np.diff(verts, axis=0), axis=1)
                k = len(chain) + 1
                r_rx = float(seg[k:].sum())
                kinds = "S" * len(chain) + "D" + "S" * len(ret_pts)
                ids = tuple(chain_ids) + (f.id,) + tuple(scene.facets[g].id for g in ret_ids)
                paths.append(
                    PathRecord(
                        vertices=verts,
                        kinds=kinds,
                        surface_ids=ids,
                        path_length=float(seg.sum()),
                        relative_energy=fwd_fac * ret_fac / r_rx**2,
                        beam_index=beam_index,
                        transmissions=tuple(crossings) + tuple(ret_x),
                    )
                )
            return
        # reflective facet: need room for the diffuse vertex after this reflection
        if len(chain) + 2 <= max_bounces:
            forward(
                p,
                reflect_dir(d, f.plane.normal),
                chain + [p],
                chain_ids + [f.id],
                factor * f.material.reflectance,
                crossings,
                idx,
            )
        if f.material.kind == "transparent":
            forward(p, d, chain, chain_ids, factor * f.material.transmittance, crossings + [f.id], idx)

    forward(lidar.L, beam, [], [], 1.0, [], -1)
    paths.sort(key=lambda r: (r.path_length, r.signature))
    return paths


def trace_scene(scene: Scene, max_bounces: int = MAX_BOUNCES) -> list:
    """Trace every configured beam; path ids are assigned globally in order."""
    records = []
    for b, beam in enumerate(scene.lidar.beams):
        records.extend(trace_beam(scene, beam, b, max_bounces))
    for i, r in enumerate(records):
        r.path_id = i
    return records


def spots_from_paths(
    paths: Sequence[PathRecord],
    lidar: LidarConfig,
    min_energy: float = 0.0,
    fov_filter: bool = True,
    merge: bool = True,
    time_resolution: float = 128e-12,
) -> list:
    """Ideal spots for a set of paths (typically those of one exposure).

    Paths arriving within one detector pixel and one ``time_resolution`` of
    each other are merged into a single spot: energies add and the earliest
    time of flight wins.  Returns separated in time stay separate spots even
    when they share a pixel.
    """
    spots: list = []
    pitch = lidar.grid.pitch
    for rec in sorted(paths, key=lambda r: r.path_length):
        u = normalize(rec.arrival_vertex - lidar.C)
        if fov_filter and not lidar.grid.in_fov(u):
            continue
        tof = rec.path_length / lidar.c
        merged = False
        if merge:
            for sp in spots:
                if angle_between(sp.direction, u) < pitch and abs(tof - sp.tof) < time_resolution:
                    sp.energy += rec.relative_energy
                    sp.sources = sp.sources + (rec.path_id,)
                    merged = True
                    break
        if not merged:
            spots.append(Spot(u, tof, rec.relative_energy, 0.0, (rec.path_id,)))
    return [sp for sp in spots if sp.energy > min_energy]


def simulate_exposures(scene: Scene, paths: Optional[Sequence[PathRecord]] = None, **kwargs) -> list:
    """One exposure per beam, with ideal spots."""
    if paths is None:
        paths = trace_scene(scene)
    by_beam: dict = {}
    for r in paths:
        by_beam.setdefault(r.beam_index, []).append(r)
    return [
        Exposure(b, spots_from_paths(by_beam.get(b, []), scene.lidar, **kwargs)) for b in range(len(scene.lidar.beams))
    ]


def flash_exposure(scene: Scene, paths: Optional[Sequence[PathRecord]] = None, **kwargs) -> Exposure:
    """All beams fired at once: a single exposure with merged spots."""
    if paths is None:
        paths = trace_scene(scene)
    return Exposure(-1, spots_from_paths(paths, scene.lidar, **kwargs))


def mirror_image_position(p, facet: Facet) -> np.ndarray:
    if not facet.material.reflective:
        raise ValueError(f"facet {facet.id!r} is diffuse and has no mirror image")
    return reflect_point(p, facet.plane)
