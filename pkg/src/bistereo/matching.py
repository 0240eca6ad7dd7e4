"""Engineered feature extraction, cost volume, lookup, and candidate seeding.

Features are deterministic: census sign bits over a configurable window
plus locally mean/variance-normalized intensity at two scales, block
averaged to 1/4 resolution and L2-normalized per pixel.  Matching costs
are plain inner products of these unit vectors, so every valid cost lies
in [-1, 1]; positions without a valid match carry the sentinel cost -1.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import uniform_filter

SENTINEL_COST = -1.0

# Luminance weights for RGB input (BT.601).
_LUMA = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class FeatureMap:
    """Dense per-pixel unit feature vectors at 1/4 input resolution."""

    data: np.ndarray  # (H, W, C) float32, unit L2 norm per pixel

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class CostVolume:
    """Immutable matching costs indexed (row, col, disparity)."""

    cost: np.ndarray  # (H, W, D) float32

    @property
    def height(self) -> int:
        return self.cost.shape[0]

    @property
    def width(self) -> int:
        return self.cost.shape[1]

    @property
    def dmax(self) -> int:
        return self.cost.shape[2]


@dataclass(frozen=True)
class CandidateSet:
    """Per-pixel top-2 (disparity, score) pairs, descending by score."""

    disparity: np.ndarray  # (H, W, 2) int32
    score: np.ndarray  # (H, W, 2) float32


def to_grayscale(image: np.ndarray) -> np.ndarray:
    """Grayscale float64 in [0, 1] from uint8/float gray or RGB input."""
    img = np.asarray(image)
    if img.dtype == np.uint8:
        img = img.astype(np.float64) / 255.0
    else:
        img = img.astype(np.float64)
    if img.ndim == 3:
        img = img @ _LUMA
    if img.ndim != 2:
        raise ValueError(f"expected 2-D gray or 3-D RGB raster, got shape {img.shape}")
    return img


def extract_features(image: np.ndarray, census_window: int = 7) -> FeatureMap:
    """Compute unit-norm matching features at 1/4 resolution.

    Census channels are sign(neighbor - center) over the window (zero on
    constant regions); the two extra channels are the intensity
    normalized by local mean/stddev at the census scale and at twice
    that scale.  After 4x4 block averaging, each pixel vector is
    L2-normalized; pixels with zero norm receive the canonical unit
    vector (1, 0, ..., 0).
    """
    gray = to_grayscale(image)
    h, w = gray.shape
    if h % 4 != 0 or w % 4 != 0:
        raise ValueError(f"image dimensions must be divisible by 4, got {h}x{w}")
    if census_window < 3 or census_window % 2 == 0:
        raise ValueError("census_window must be an odd integer >= 3")

    r = census_window // 2
    n_census = census_window * census_window - 1
    full = np.empty((h, w, n_census + 2), dtype=np.float32)
    padded = np.pad(gray, r, mode="edge")
    ch = 0
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            if dy == 0 and dx == 0:
                continue
            shifted = padded[r + dy : r + dy + h, r + dx : r + dx + w]
            full[:, :, ch] = np.sign(shifted - gray)
            ch += 1
    for win in (census_window, 2 * census_window + 1):
        mean = uniform_filter(gray, size=win, mode="nearest")
        sq_mean = uniform_filter(gray * gray, size=win, mode="nearest")
        var = np.maximum(sq_mean - mean * mean, 0.0)
        full[:, :, ch] = (gray - mean) / np.sqrt(var + 1e-8)
        ch += 1
    pooled = full.reshape(h // 4, 4, w // 4, 4, full.shape[-1]).mean(axis=(1, 3))

    norm = np.sqrt(np.sum(pooled.astype(np.float64) ** 2, axis=-1))
    flat = norm <= 1e-12
    pooled[flat] = 0.0
    pooled[flat, 0] = 1.0
    norm = np.where(flat, 1.0, norm)
    pooled = (pooled / norm[..., None].astype(np.float32)).astype(np.float32)
    return FeatureMap(pooled)


def feature_contrast(fm: FeatureMap) -> np.ndarray:
    """Local texture strength in [0, 1] from feature-vector dispersion.

    Averages (1 - <f(p), f(q)>)/2 over the 4-neighborhood; 0 on constant
    regions (identical canonical vectors), larger where features vary.
    """
    f = fm.data.astype(np.float64)
    h, w = f.shape[:2]
    acc = np.zeros((h, w))
    count = np.zeros((h, w))
    for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1)):
        ys = slice(max(dy, 0), h + min(dy, 0))
        yn = slice(max(-dy, 0), h + min(-dy, 0))
        xs = slice(max(dx, 0), w + min(dx, 0))
        xn = slice(max(-dx, 0), w + min(-dx, 0))
        dot = np.sum(f[ys, xs] * f[yn, xn], axis=-1)
        acc[ys, xs] += (1.0 - dot) / 2.0
        count[ys, xs] += 1.0
    return np.clip(acc / np.maximum(count, 1.0), 0.0, 1.0)


def _fill_cost_rows(cost, left, right, row0, row1):
    d = cost.shape[2]
    w = left.shape[1]
    lf = left[row0:row1]
    rf = right[row0:row1]
    for disp in range(d):
        if disp >= w:
            cost[row0:row1, :, disp] = SENTINEL_COST
            continue
        dot = np.einsum("rcx,rcx->rc", lf[:, disp:], rf[:, : w - disp])
        cost[row0:row1, disp:, disp] = np.clip(dot, -1.0, 1.0)
        cost[row0:row1, :disp, disp] = SENTINEL_COST


def build_cost_volume(
    left: FeatureMap, right: FeatureMap, dmax: int, workers: int = 1
) -> CostVolume:
    """Inner-product cost volume; sentinel -1 where col - d < 0.

    Rows are partitioned across workers; every output cell is written by
    exactly one worker, so the result is bit-identical for any count.
    """
    if left.data.shape != right.data.shape:
        raise ValueError(
            f"feature shapes differ: {left.data.shape} vs {right.data.shape}"
        )
    if dmax < 1:
        raise ValueError("dmax must be >= 1")
    h, w = left.height, left.width
    cost = np.empty((h, w, dmax), dtype=np.float32)
    workers = max(1, int(workers))
    if workers == 1 or h < 2 * workers:
        _fill_cost_rows(cost, left.data, right.data, 0, h)
    else:
        bounds = np.linspace(0, h, workers + 1, dtype=int)
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [
                pool.submit(_fill_cost_rows, cost, left.data, right.data, a, b)
                for a, b in zip(bounds[:-1], bounds[1:])
                if b > a
            ]
            for fut in futures:
                fut.result()
    cost.flags.writeable = False
    return CostVolume(cost)


def aggregate_cost(cv: CostVolume, size: int) -> CostVolume:
    """Box-average each disparity plane over space, keeping sentinels.

    Raw inner-product costs are per-pixel and self-similar texture puts
    spurious near-1 peaks at incoherent disparities; averaging over a
    spatial window keeps peaks that neighbors agree on and flattens the
    rest.  Sentinel cells do not contribute to their neighbors' means
    and stay sentinel in the output.  size <= 1 returns the input.
    """
    if size <= 1:
        return cv
    valid = cv.cost > SENTINEL_COST
    m = valid.astype(np.float32)
    num = uniform_filter(cv.cost * m, size=(size, size, 1), mode="nearest")
    den = uniform_filter(m, size=(size, size, 1), mode="nearest")
    agg = np.where(valid, num / np.maximum(den, 1e-9), np.float32(SENTINEL_COST))
    agg = agg.astype(np.float32)
    agg.flags.writeable = False
    return CostVolume(agg)


def profile_baseline(cv: CostVolume) -> np.ndarray:
    """Per-pixel median cost over valid bins, (H, W) float64.

    Self-similar texture floats the typical cost well above zero, so
    judging whether a bin is a peak needs this reference level.
    Sentinel bins are excluded; every pixel has at least one valid bin.
    """
    vals = np.where(cv.cost > SENTINEL_COST, cv.cost.astype(np.float64), np.nan)
    return np.nanmedian(vals, axis=2)


def opposite_view_purity(cv: CostVolume) -> np.ndarray:
    """Best above-baseline cost per right-view pixel, (H, W) float64.

    Re-slicing the volume by the right-view pixel it matches,
    cost[r, d] = cost[r + d, d], measures how fully a single disparity
    explains that pixel.  Content seen through a transparent surface
    stays mixed in both views, so its best match is capped well below
    the clean single-surface level; sampling this map at c - mu tells
    whether a disparity hypothesis at left pixel c points at mixed or
    at clean content in the other view.
    """
    cost = cv.cost.astype(np.float64)
    h, w, dmax = cost.shape
    stack = np.full((h, w, dmax), np.nan)
    cols = np.arange(w)
    for d in range(dmax):
        src = cols[: w - d] + d
        vals = cost[:, src, d]
        stack[:, : w - d, d] = np.where(vals > SENTINEL_COST, vals, np.nan)
    base = np.nanmedian(stack, axis=2)
    best = np.nanmax(stack, axis=2)
    return np.clip(best - base, 0.0, None)


def lookup(
    cv: CostVolume,
    disparity_field: np.ndarray,
    radius: int,
    upper: np.ndarray | None = None,
) -> np.ndarray:
    """Sample a thin cost slab around a fractional disparity field.

    Channel k in [-radius, radius] holds the linearly interpolated cost
    at disparity d + k; sample positions are clamped to [0, dmax - 1],
    and additionally to a per-pixel `upper` bound when one is given
    (disparities past the image's left edge have no correspondence, so
    column c admits only d <= c).  Returns (H, W, 2*radius + 1) float64.
    """
    if radius < 0:
        raise ValueError("radius must be >= 0")
    cost = cv.cost.astype(np.float64)
    dmax = cv.dmax
    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    pos = np.clip(np.asarray(disparity_field, dtype=np.float64)[..., None] + offsets, 0.0, dmax - 1.0)
    if upper is not None:
        pos = np.minimum(pos, np.asarray(upper, dtype=np.float64)[..., None])
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, dmax - 1)
    t = pos - lo
    c_lo = np.take_along_axis(cost, lo, axis=2)
    c_hi = np.take_along_axis(cost, hi, axis=2)
    return (1.0 - t) * c_lo + t * c_hi


def extract_candidates(
    cv: CostVolume, nms_radius: int, score_floor: float = SENTINEL_COST
) -> CandidateSet:
    """Top-2 cost bins per pixel with a minimum mutual separation.

    The first candidate is the global argmax; the second is the best bin
    at distance >= nms_radius from it (ties resolved to the lowest
    disparity).  When no second bin scores above score_floor the first
    candidate is duplicated.
    """
    if nms_radius < 1:
        raise ValueError("nms_radius must be >= 1")
    cost = cv.cost.astype(np.float64)
    h, w, d = cost.shape
    d0 = np.argmax(cost, axis=2)
    s0 = np.take_along_axis(cost, d0[..., None], axis=2)[..., 0]
    bins = np.arange(d)
    allowed = np.abs(bins[None, None, :] - d0[..., None]) >= nms_radius
    masked = np.where(allowed, cost, -np.inf)
    d1 = np.argmax(masked, axis=2)
    s1 = np.take_along_axis(masked, d1[..., None], axis=2)[..., 0]
    dup = ~np.isfinite(s1) | (s1 <= score_floor)
    d1 = np.where(dup, d0, d1)
    s1 = np.where(dup, s0, s1)
    disparity = np.stack([d0, d1], axis=-1).astype(np.int32)
    score = np.stack([s0, s1], axis=-1).astype(np.float32)
    return CandidateSet(disparity, score)
