"""Cached scenes and small oracles shared by the test modules."""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from multibounce.scene import simulate_exposures, trace_scene
from multibounce.scenes import BUILDERS


@lru_cache(maxsize=None)
def traced(name: str):
    sc = BUILDERS[name]()
    paths = trace_scene(sc)
    return sc, paths, simulate_exposures(sc, paths)


def unit(v):
    v = np.asarray(v, dtype=float)
    return v / np.sqrt(v @ v)


def angle_oracle(a, b) -> float:
    """Angle between directions via the half-chord, independent of the package helpers."""
    a, b = unit(a), unit(b)
    return float(2.0 * np.arcsin(min(1.0, np.sqrt(((a - b) ** 2).sum()) / 2.0)))


def line_angle(a, b) -> float:
    """Angle between undirected lines."""
    t = angle_oracle(a, b)
    return min(t, np.pi - t)


def assumptions_hold(beam_paths, lidar) -> bool:
    """Every three-bounce image comes with its visible two-bounce true spot."""
    fov = [p for p in beam_paths if lidar.grid.in_fov(unit(p.arrival_vertex - lidar.C))]
    kinds = {p.kinds for p in fov}
    return not ("SDS" in kinds and "SD" not in kinds)
