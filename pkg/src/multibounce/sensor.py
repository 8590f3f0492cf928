"""Photon-count histograms: rendering ideal spots into a cube and pulling spots back out.

The cube is indexed ``counts[i, j, k]`` with ``i`` the horizontal pixel,
``j`` the vertical pixel and ``k`` the time bin.  Bin ``k`` is centered at
``k * bin_width``.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage, optimize, special

from .geom import normalize, orthonormal_basis
from .scene import DetectorGrid, Spot

FWHM_TO_SIGMA = 1.0 / (2.0 * math.sqrt(2.0 * math.log(2.0)))
NOISE_FRACTION = 0.1


@dataclass(frozen=True)
class TimingModel:
    irf_fwhm: float = 128e-12
    bin_width: float = 16e-12
    n_bins: int = 2048
    background_rate: float = 0.05
    signal_scale: float = 2.0e5
    dwell_time: float = 1.0

    def __post_init__(self):
        if not self.irf_fwhm > 0:
            raise ValueError("irf_fwhm must be positive")
        if not self.bin_width > 0:
            raise ValueError("bin_width must be positive")
        if self.n_bins < 10:
            raise ValueError("need at least 10 time bins")
        if self.background_rate < 0 or self.signal_scale < 0 or self.dwell_time < 0:
            raise ValueError("rates and scales must be non-negative")

    @property
    def irf_sigma(self) -> float:
        return self.irf_fwhm * FWHM_TO_SIGMA

    @property
    def n_noise_bins(self) -> int:
        return max(1, int(round(NOISE_FRACTION * self.n_bins)))

    @property
    def fit_half_width(self) -> int:
        # +-2 bins at 128 ps / 16 ps
        return max(1, int(round(0.25 * self.irf_fwhm / self.bin_width)))

    @classmethod
    def from_noise(cls, noise: dict) -> "TimingModel":
        """Build from a scene ``noise`` section (picosecond keys)."""
        kw = {}
        if "irf_fwhm_ps" in noise:
            kw["irf_fwhm"] = float(noise["irf_fwhm_ps"]) * 1e-12
        if "bin_width_ps" in noise:
            kw["bin_width"] = float(noise["bin_width_ps"]) * 1e-12
        for key in ("n_bins",):
            if key in noise:
                kw[key] = int(noise[key])
        for key in ("background_rate", "signal_scale", "dwell_time"):
            if key in noise:
                kw[key] = float(noise[key])
        return cls(**kw)


@dataclass(eq=False)
class HistogramCube:
    counts: np.ndarray  # (n_h, n_v, n_bins) unsigned counts
    grid: DetectorGrid
    bin_width: float

    @property
    def shape(self):
        return self.counts.shape

    def pixel_directions(self) -> np.ndarray:
        ii, jj = np.meshgrid(np.arange(self.grid.n_h), np.arange(self.grid.n_v), indexing="ij")
        return self.grid.direction_at(ii, jj)

    def __add__(self, other: "HistogramCube") -> "HistogramCube":
        # summing single-beam cubes emulates one flash exposure
        if self.counts.shape != other.counts.shape or self.bin_width != other.bin_width:
            raise ValueError("cubes must share a grid and binning")
        return HistogramCube(self.counts + other.counts, self.grid, self.bin_width)


@dataclass(frozen=True)
class PixelDetection:
    detected: bool
    tof: float
    tof_sigma: float
    energy: float


@dataclass(eq=False)
class DetectionGrid:
    """Per-pixel detection results stored as parallel ``(n_h, n_v)`` arrays."""

    detected: np.ndarray
    tof: np.ndarray
    tof_sigma: np.ndarray
    energy: np.ndarray
    grid: DetectorGrid
    # kept so spot extraction can re-gate neighbouring pixels at a spot's time
    cube: Optional["HistogramCube"] = None
    background: Optional[np.ndarray] = None
    irf_sigma: float = 0.0

    def gated_energy(self, i0, i1, j0, j1, tof: float) -> np.ndarray:
        """Background-subtracted counts within +-2 IRF sigma of ``tof`` for a pixel block."""
        c = self.cube
        half = max(1, int(math.ceil(2.0 * self.irf_sigma / c.bin_width)))
        m = int(round(tof / c.bin_width))
        k0, k1 = max(m - half, 0), min(m + half + 1, c.counts.shape[2])
        block = c.counts[i0:i1, j0:j1, k0:k1].sum(axis=2, dtype=np.int64).astype(float)
        return block - self.background[i0:i1, j0:j1] * (k1 - k0)

    def __getitem__(self, ij) -> PixelDetection:
        i, j = ij
        return PixelDetection(bool(self.detected[i, j]), float(self.tof[i, j]), float(self.tof_sigma[i, j]),
                              float(self.energy[i, j]))

    @property
    def n_detected(self) -> int:
        return int(self.detected.sum())


# --- rendering ----------------------------------------------------------------


def _temporal_profile(tof: float, timing: TimingModel) -> tuple[int, np.ndarray]:
    """Bin-integrated Gaussian IRF: ``(first_bin, probabilities)`` over +-5 sigma."""
    w, sig = timing.bin_width, timing.irf_sigma
    k0 = int(math.floor((tof - 5 * sig) / w))
    k1 = int(math.ceil((tof + 5 * sig) / w)) + 1
    k0c, k1c = max(k0, 0), min(k1, timing.n_bins)
    if k1c <= k0c:
        return 0, np.zeros(0)
    edges = (np.arange(k0c, k1c + 1) - 0.5) * w
    cdf = special.ndtr((edges - tof) / sig)
    return k0c, np.diff(cdf)


def _footprint(pix: np.ndarray, grid: DetectorGrid, sigma_px: float):
    """Pixel indices and weights of a Gaussian footprint centered at continuous ``pix``."""
    r = int(math.ceil(3 * sigma_px))
    ci, cj = int(round(pix[0])), int(round(pix[1]))
    di = np.arange(ci - r, ci + r + 1)
    dj = np.arange(cj - r, cj + r + 1)
    ii, jj = np.meshgrid(di, dj, indexing="ij")
    w = np.exp(-((ii - pix[0]) ** 2 + (jj - pix[1]) ** 2) / (2 * sigma_px**2))
    w /= w.sum()
    keep = (ii >= 0) & (ii < grid.n_h) & (jj >= 0) & (jj < grid.n_v)
    return ii[keep], jj[keep], w[keep]


def render_histograms(
    spots: Sequence[Spot], grid: DetectorGrid, timing: TimingModel, rng_seed: int = 0, footprint_sigma: float = 1.0
) -> HistogramCube:
    """Poisson photon counts for a set of spots plus uniform background.

    Spots outside the field of view deposit nothing.
    """
    rng = np.random.default_rng(rng_seed)
    shape = (grid.n_h, grid.n_v, timing.n_bins)
    if timing.background_rate > 0:
        counts = rng.poisson(timing.background_rate, size=shape).astype(np.uint32)
    else:
        counts = np.zeros(shape, dtype=np.uint32)
    for sp in spots:
        if not grid.in_fov(sp.direction):
            continue
        total = timing.signal_scale * sp.energy * timing.dwell_time
        if total <= 0:
            continue
        k0, prof = _temporal_profile(sp.tof, timing)
        if len(prof) == 0:
            continue
        ii, jj, w = _footprint(grid.pixel_coords(sp.direction), grid, footprint_sigma)
        mean = total * w[:, None] * prof[None, :]
        counts[ii, jj, k0 : k0 + len(prof)] += rng.poisson(mean).astype(np.uint32)
    return HistogramCube(counts, grid, timing.bin_width)


# --- per-pixel detection -------------------------------------------------------


def matched_kernel(timing: TimingModel) -> np.ndarray:
    """Gaussian of the IRF width, truncated at +-3 sigma, unit peak."""
    s = timing.irf_sigma / timing.bin_width
    r = int(math.ceil(3 * s))
    k = np.arange(-r, r + 1)
    return np.exp(-0.5 * (k / s) ** 2)


def chernoff_threshold(background: float, kernel: np.ndarray, alpha: float) -> float:
    """Smallest tau with a Chernoff bound ``P(sum g_k n_k >= tau) <= alpha``.

    ``n_k`` are i.i.d. Poisson(background); the bound is conservative.
    """
    if background <= 0:
        return 0.0
    log_alpha = math.log(alpha)
    g = np.asarray(kernel, dtype=float)

    def log_bound(tau):
        # inf over s > 0 of  -s tau + b sum(exp(s g) - 1)
        f = lambda s: -s * tau + background * float(np.sum(np.expm1(s * g)))
        res = optimize.minimize_scalar(f, bounds=(1e-12, 50.0), method="bounded")
        return min(res.fun, 0.0)

    mean = background * g.sum()
    lo, hi = mean, mean + 10.0
    while log_bound(hi) > log_alpha:
        hi = mean + 2 * (hi - mean)
    return float(optimize.brentq(lambda t: log_bound(t) - log_alpha, lo, hi, xtol=1e-6))


def detect_pixels(
    cube: HistogramCube, timing: TimingModel, p_fa: float = 1e-3, abs_threshold: float = 5.0,
    background_floor: float = 1e-3,
) -> DetectionGrid:
    """Matched-filter detection and sub-bin timing for every pixel.

    ``p_fa`` is the per-pixel false-alarm probability; it is split evenly over
    the bins (union bound) before the Chernoff threshold is solved.
    ``abs_threshold`` applies to the matched-filter peak in counts.
    """
    if not (0 < p_fa < 1) or abs_threshold <= 0:
        raise ValueError("thresholds must be positive (and p_fa < 1)")
    counts = cube.counts
    n_h, n_v, n_bins = counts.shape
    n_noise = timing.n_noise_bins
    noise_sum = counts[:, :, :n_noise].sum(axis=2, dtype=np.int64)
    bg = np.maximum(noise_sum / n_noise, background_floor)
    # thresholds use an upper confidence bound so a low background draw does not
    # lower the bar; integer sums keep the number of distinct values small
    bg_hi = np.maximum((noise_sum + 3.0 * np.sqrt(noise_sum + 1.0) + 1.0) / n_noise, background_floor)

    kernel = matched_kernel(timing)
    response = ndimage.correlate1d(counts.astype(np.float32), kernel.astype(np.float32), axis=2, mode="constant")
    response[:, :, :n_noise] = 0.0
    peak_bin = np.argmax(response, axis=2)
    peak = np.take_along_axis(response, peak_bin[:, :, None], axis=2)[:, :, 0].astype(float)

    alpha = p_fa / n_bins
    # background estimates take few distinct values: solve the threshold once per value
    tau = np.empty_like(bg_hi)
    for val in np.unique(bg_hi):
        tau[bg_hi == val] = chernoff_threshold(float(val), kernel, alpha)
    candidate = (peak > tau) & (peak > abs_threshold)

    detected = np.zeros((n_h, n_v), dtype=bool)
    tof = np.full((n_h, n_v), np.nan)
    tof_sigma = np.full((n_h, n_v), np.nan)
    energy = np.zeros((n_h, n_v))
    hw = timing.fit_half_width
    w = timing.bin_width
    for i, j in zip(*np.nonzero(candidate)):
        m = int(peak_bin[i, j])
        k = np.arange(max(m - hw, 0), min(m + hw + 1, n_bins))
        n = counts[i, j, k].astype(float)
        b = bg[i, j]
        sig = np.clip(n - b, 0.0, None)
        total = sig.sum()
        e = n.sum() - b * len(k)
        if total <= 0 or e <= 0:
            continue
        t = float(np.dot(k, sig) / total) * w
        # centroid variance from Poisson counts, plus bin quantization
        var = float(np.dot((k * w - t) ** 2, n)) / total**2 + w * w / 12.0 / total
        detected[i, j] = True
        tof[i, j] = t
        tof_sigma[i, j] = math.sqrt(var)
        energy[i, j] = e
    return DetectionGrid(detected, tof, tof_sigma, energy, cube.grid, cube, bg, timing.irf_sigma)


# --- spot extraction ----------------------------------------------------------

_LAPLACE = np.full((3, 3), -1.0 / 8.0)
_LAPLACE[1, 1] = 1.0


def spottiness(energy_image: np.ndarray) -> np.ndarray:
    """Spot-filter response over box-filter response.

    A Gaussian spot of one-pixel sigma scores about 0.94, a flat patch 0.
    """
    e = np.asarray(energy_image, dtype=float)
    lap = ndimage.correlate(e, _LAPLACE, mode="constant")
    box = ndimage.uniform_filter(e, size=3, mode="constant")
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(box > 0, lap / box, 0.0)
    return out


def extract_spots(
    detections: DetectionGrid, threshold: float = 0.3, window: int = 3, energies: Optional[np.ndarray] = None
) -> list:
    """Group detected pixels into spots.

    ``energies`` overrides the per-pixel energy image (defaults to the
    detection energies).  When the detections still reference their cube,
    the window centroid and energy use counts re-gated at the anchor's time,
    so faint footprint edges that missed detection still contribute.
    Returned spots are sorted by time of flight.
    """
    if window % 2 != 1 or window < 1:
        raise ValueError("window must be a positive odd number")
    grid = detections.grid
    e_img = np.where(detections.detected, detections.energy if energies is None else energies, 0.0)
    e_img = np.clip(e_img, 0.0, None)
    mask = detections.detected & (spottiness(e_img) > threshold)
    labels, n = ndimage.label(mask, structure=np.ones((3, 3)))
    half = window // 2
    found = []
    for lab in range(1, n + 1):
        ii, jj = np.nonzero(labels == lab)
        k = int(np.argmax(e_img[ii, jj]))
        ai, aj = int(ii[k]), int(jj[k])
        i0, i1 = max(ai - half, 0), min(ai + half + 1, grid.n_h)
        j0, j1 = max(aj - half, 0), min(aj + half + 1, grid.n_v)
        det = detections.detected[i0:i1, j0:j1]
        sig = detections.tof_sigma[i0:i1, j0:j1][det]
        tofs = detections.tof[i0:i1, j0:j1][det]
        wts = 1.0 / sig**2
        tof = float((wts * tofs).sum() / wts.sum())
        if detections.cube is not None and energies is None:
            we = detections.gated_energy(i0, i1, j0, j1, float(detections.tof[ai, aj]))
        else:
            we = e_img[i0:i1, j0:j1]
        tot = we.sum()
        if tot <= 0:
            continue
        wi, wj = np.meshgrid(np.arange(i0, i1), np.arange(j0, j1), indexing="ij")
        ci, cj = float((wi * we).sum() / tot), float((wj * we).sum() / tot)
        found.append((float(tot), ci, cj, tof, float(1.0 / math.sqrt(wts.sum()))))

    # non-maximum suppression by energy
    found.sort(key=lambda s: -s[0])
    min_sep = math.ceil(window / 2)
    kept = []
    for s in found:
        if all(math.hypot(s[1] - o[1], s[2] - o[2]) >= min_sep for o in kept):
            kept.append(s)
    spots = [Spot(grid.direction_at(ci, cj), tof, e, ts) for e, ci, cj, tof, ts in kept]
    spots.sort(key=lambda s: s.tof)
    return spots


def sense(
    spots: Sequence[Spot], grid: DetectorGrid, timing: TimingModel, rng_seed: int = 0, p_fa: float = 1e-3,
    abs_threshold: float = 5.0, spottiness_threshold: float = 0.3, window: int = 3,
) -> list:
    """Render, detect and extract in one call."""
    cube = render_histograms(spots, grid, timing, rng_seed)
    det = detect_pixels(cube, timing, p_fa, abs_threshold)
    return extract_spots(det, spottiness_threshold, window)


# --- spot-level noise ---------------------------------------------------------


def perturb_spots(spots: Sequence[Spot], tof_sigma: float, angle_sigma: float, rng) -> list:
    """Gaussian timing jitter and isotropic angular jitter applied directly to spots.

    ``angle_sigma`` (radians) is the per-axis standard deviation of the tilt.
    The reported ``tof_sigma`` of each spot is set to the applied jitter.
    """
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    out = []
    for sp in spots:
        e1, e2 = orthonormal_basis(sp.direction)
        a, b = rng.normal(0.0, angle_sigma, 2) if angle_sigma > 0 else (0.0, 0.0)
        d = normalize(sp.direction + a * e1 + b * e2)
        dt = rng.normal(0.0, tof_sigma) if tof_sigma > 0 else 0.0
        out.append(replace(sp, direction=d, tof=sp.tof + dt, tof_sigma=max(tof_sigma, sp.tof_sigma)))
    return out


# --- binary cube file ---------------------------------------------------------

CUBE_MAGIC = b"MBHC"
CUBE_VERSION = 1
_HEADER = struct.Struct("<4sHIIId4d")


def save_cube(cube: HistogramCube, path) -> None:
    """Little-endian header, then u32 counts with the horizontal index slowest."""
    g = cube.grid
    n_h, n_v, n_bins = cube.counts.shape
    head = _HEADER.pack(CUBE_MAGIC, CUBE_VERSION, n_h, n_v, n_bins, cube.bin_width, g.h_min, g.h_max, g.v_min, g.v_max)
    with open(path, "wb") as f:
        f.write(head)
        f.write(np.ascontiguousarray(cube.counts, dtype="<u4").tobytes())


def load_cube(path) -> HistogramCube:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise ValueError(f"{path}: truncated cube header")
    magic, version, n_h, n_v, n_bins, bw, h0, h1, v0, v1 = _HEADER.unpack_from(data)
    if magic != CUBE_MAGIC:
        raise ValueError(f"{path}: not a histogram cube (bad magic {magic!r})")
    if version != CUBE_VERSION:
        raise ValueError(f"{path}: unsupported cube version {version}")
    expected = _HEADER.size + 4 * n_h * n_v * n_bins
    if len(data) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(data)}")
    counts = np.frombuffer(data, dtype="<u4", offset=_HEADER.size).reshape(n_h, n_v, n_bins).astype(np.uint32)
    return HistogramCube(counts, DetectorGrid(h0, h1, v0, v1, n_h, n_v), bw)
