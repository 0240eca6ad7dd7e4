"""Iterative two-label disparity solver.

The solver maintains a bivariate Gaussian state per quarter-resolution
pixel: two disparity means (label 0 = foreground = larger disparity),
two standard deviations, and a correlation.  Each iteration fits a
quadratic to cost samples around each mean and takes a damped Newton
step toward the local maximum, then re-canonicalizes the labels.  The
covariance half of the state is estimated from the cost profile shape,
the step magnitudes, and local feature contrast; by default only after
the final iteration, optionally every iteration.

Means live in quarter-resolution bins internally and are scaled by 4
during convex upsampling back to full resolution.  Sigma and rho are
upsampled without scaling.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import median_filter, uniform_filter

from . import matching
from .gaussian import SIGMA_FLOOR, sigmoid, softplus

POOL = 4  # fixed feature downsampling factor


@dataclass(frozen=True)
class SolverConfig:
    iterations: int = 32
    dmax: int = 192  # full-resolution disparity range in pixels
    lookup_radius: int = 4
    step_clamp: float = 1.0
    damping: float = 0.1
    accept_slack: float = 0.05  # max sampled-cost drop a mean step may cause
    nms_radius: int = 4
    census_window: int = 7
    cost_aggregation: int = 5  # spatial box size for cost smoothing; <=1 disables
    border_fill_rows: int = 3  # quarter-res rows without census support, each side
    border_fill_cols: int = 4  # quarter-res cols without census support, right side
    init_sigma: float = 2.0
    init_rho: float = 0.5
    covariance_every_iteration: bool = False
    workers: int = 1

    @property
    def dmax_bins(self) -> int:
        return -(-self.dmax // POOL)


@dataclass(frozen=True)
class CovarianceCoeffs:
    """Coefficients of the covariance scores and the hypothesis merge.

    Raw scores are mapped through softplus (sigma) and a logistic
    (rho).  Sigma grows with cost-profile flatness and with the size of
    the last mean update.  Rho drops with evidence for two distinct
    surfaces, the product of five gates in [0, 1]:

      * separation: clip(|mu0 - mu1| / separation_ref, 0, 1);
      * prominence: weaker peak / stronger peak (above baseline),
        mapped through a soft knee from prominence_lo to prominence_hi
        (a faint second surface is still a surface, so full credit
        comes well below equality);
      * budget: a soft knee from budget_hi down to budget_lo on the
        stronger peak's above-baseline cost.  Features are normalized,
        so two co-visible surfaces split the correlation energy between
        their peaks; when one disparity alone explains nearly all of
        it, the weaker peak cannot be a second surface, however sharp
        and spatially coherent it looks (periodic texture builds
        exactly such ghosts one period away);
      * support: fraction of the 8 strided neighbor pixels whose cost
        at this pixel's weaker-label disparity reaches support_ratio of
        this pixel's own cost there, all above baseline, with the bar
        never dropping below support_anchor of the neighbor's best so
        that background fluctuations cannot vouch for a barely present
        peak;
      * contrast: clip(contrast / contrast_gate_ref, 0, 1), because a
        texture-free patch cannot attest to even one surface, let alone
        two (its correlation peaks are aliases).

    A second matchable surface scores near 1 on all gates.  A spurious
    correlation peak is as sharp as a real one on self-similar texture,
    but it matches only at its own pixel, so support rejects it; ghost
    peaks of near-periodic texture are locally extended, so only budget
    rejects those.  Support reads the cost volume rather than comparing
    neighbor states, so one pixel's verdict does not feed back into its
    neighbors'.  All cost comparisons are relative (self-similar
    texture floats the baseline cost level well above zero), and the
    stride must exceed the cost aggregation box, which smears spurious
    peaks over nearby pixels.  Low feature contrast pushes rho up (an
    ambiguous region is treated as one surface):

        raw_sigma_i = sigma_bias + sigma_flatness_gain * flatness_i
                      + sigma_step_gain * min(|step_i|, 1)
        raw_rho = rho_bias - rho_evidence_gain * evidence
                  - rho_separation_gain * separation / dmax_bins
                  + rho_lowcontrast_gain * lowcontrast

    with flatness_i = 1 - clip(-curvature_i, 0, curvature_ref) /
    curvature_ref.  The same evidence drives the per-iteration merge:
    where it falls below merge_threshold the weaker-peak mean is pulled
    toward the stronger by merge_rate of their gap, so single-surface
    pixels end with both hypotheses in one basin.
    """

    sigma_bias: float = -0.43
    sigma_flatness_gain: float = 4.4
    sigma_step_gain: float = 2.0
    curvature_ref: float = 0.05
    rho_bias: float = 2.5
    rho_evidence_gain: float = 7.0
    rho_separation_gain: float = 1.0
    rho_lowcontrast_gain: float = 1.0
    separation_ref: float = 5.0  # bins
    prominence_radius: int = 2  # bins
    prominence_lo: float = 0.25  # weaker/stronger ratio where credit starts
    prominence_hi: float = 0.6  # ratio earning full credit
    budget_lo: float = 0.55  # stronger-peak excess still fully two-surface
    budget_hi: float = 0.85  # stronger-peak excess that rules out a second
    support_stride: int = 5  # px between sampled neighbors
    support_ratio: float = 0.5  # fraction of the pixel's own above-baseline cost
    support_anchor: float = 0.35  # floor on that bar, vs the neighbor's best
    contrast_gate_ref: float = 0.15  # contrast granting full two-surface credit
    contrast_ref: float = 0.3
    merge_threshold: float = 0.25
    merge_rate: float = 0.3
    diffusion_window: int = 9  # px, median window for hypothesis proposals
    diffusion_ratio: float = 0.35  # proposal peak as fraction of the pixel's best
    diffusion_guard: float = 2.0  # bins a proposal must keep from the other label
    rescue_window: int = 11  # px, neighborhood for the region rescue pass
    rescue_quorum: float = 0.25  # split-neighbor fraction that triggers a rescue
    rescue_quadrant: float = 0.15  # split share every directional band must hold
    surround_window: int = 31  # px, band reach for the enclosure test
    consensus_window: int = 15  # px, neighborhood for the rescue median pair
    rescue_keep: float = 0.12  # pair plausibility a rescued pixel must reach
    rescue_polish: int = 4  # mean-update iterations after re-seeding
    rescue_leash: float = 1.25  # bins the polish may move a mean off consensus
    rescue_passes: int = 5  # rescue rounds; each grows the region one rim
    stray_trigger: float = 1.0  # bins off consensus that re-seed a split pixel
    mixing_frac_own: float = 0.7  # own-frame mixing bar, split-median toward clean
    mixing_frac_locus: float = 0.5  # other-frame mixing bar, same parameterization
    rho_region_gain: float = 5.0  # rho drop per unit split-neighbor fraction
    rho_claim_gain: float = 2.0  # extra rho drop on rescue-claimed pixels
    upsample_temperature: float = 0.1
    upsample_mu_scale: float = 1.0  # bins; disparity gap at which a neighbor fades
    upsample_rho_scale: float = 0.25  # rho gap at which a neighbor fades


@dataclass
class GaussianField:
    """Per-pixel bivariate Gaussian parameters as (H, W) planes."""

    mu0: np.ndarray
    mu1: np.ndarray
    sigma0: np.ndarray
    sigma1: np.ndarray
    rho: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.mu0.shape

    def copy(self) -> "GaussianField":
        return GaussianField(
            self.mu0.copy(), self.mu1.copy(), self.sigma0.copy(),
            self.sigma1.copy(), self.rho.copy(),
        )


@dataclass
class IterationTrace:
    mean_snapshots: list = field(default_factory=list)  # (mu0, mu1) copies per iteration
    mean_abs_step: list = field(default_factory=list)
    objective: list = field(default_factory=list)  # mean sampled cost at the means


@dataclass(frozen=True)
class CostContext:
    """A cost volume bundled with the per-pixel references for sampling it.

    upper bounds the usable disparity at each pixel (column index: a
    disparity past the image's left edge has no correspondence), base is
    the typical cost level (see matching.profile_baseline), other_purity
    is the right-view single-surface strength map (see
    matching.opposite_view_purity), and contrast is the local texture
    strength, None when unknown.
    """

    cv: matching.CostVolume
    upper: np.ndarray
    base: np.ndarray
    other_purity: np.ndarray | None = None
    contrast: np.ndarray | None = None


def make_context(
    cv: matching.CostVolume, contrast: np.ndarray | None = None
) -> CostContext:
    h, w = cv.cost.shape[:2]
    upper = np.broadcast_to(np.arange(w, dtype=np.float64), (h, w))
    return CostContext(
        cv=cv,
        upper=upper,
        base=matching.profile_baseline(cv),
        other_purity=matching.opposite_view_purity(cv),
        contrast=contrast,
    )


def canonicalize(f: GaussianField) -> GaussianField:
    """Return an equivalent field with mu0 >= mu1 everywhere.

    Swapping a pixel's labels exchanges (mu, sigma) pairs and keeps rho,
    which leaves the represented distribution unchanged.  Ties keep the
    incoming order.
    """
    swap = f.mu0 < f.mu1
    return GaussianField(
        mu0=np.where(swap, f.mu1, f.mu0),
        mu1=np.where(swap, f.mu0, f.mu1),
        sigma0=np.where(swap, f.sigma1, f.sigma0),
        sigma1=np.where(swap, f.sigma0, f.sigma1),
        rho=f.rho.copy(),
    )


def init_state(cands: matching.CandidateSet, cfg: SolverConfig) -> GaussianField:
    """Seed the state from the two cost-volume candidates."""
    h, w = cands.disparity.shape[:2]
    f = GaussianField(
        mu0=cands.disparity[:, :, 0].astype(np.float64),
        mu1=cands.disparity[:, :, 1].astype(np.float64),
        sigma0=np.full((h, w), cfg.init_sigma),
        sigma1=np.full((h, w), cfg.init_sigma),
        rho=np.full((h, w), cfg.init_rho),
    )
    return canonicalize(f)


def _fit_axes(radius: int) -> tuple[np.ndarray, np.ndarray, float, float]:
    k = np.arange(-radius, radius + 1, dtype=np.float64)
    p2 = k * k - np.mean(k * k)
    return k, p2, float(np.sum(k * k)), float(np.sum(p2 * p2))


def fit_parabola(samples: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Least-squares quadratic fit over a symmetric sample window.

    samples has shape (..., 2r+1) taken at integer offsets -r..r from
    the center.  Returns (g, h): the fitted slope and second derivative
    at the center.  The offset basis {1, k, k^2 - mean(k^2)} is
    orthogonal over the window, so the coefficients are independent
    projections.
    """
    radius = (samples.shape[-1] - 1) // 2
    if radius < 1:
        raise ValueError("parabola fit needs at least 3 samples")
    k, p2, kk, p2p2 = _fit_axes(radius)
    g = samples @ k / kk
    h = 2.0 * (samples @ p2) / p2p2
    return g, h


def update_mean(
    f: GaussianField, ctx: CostContext, cfg: SolverConfig, radius: int
) -> tuple[np.ndarray, np.ndarray]:
    """Propose per-label mean updates from local quadratic fits.

    Where the fitted profile is concave the step is a damped Newton step
    toward the fitted maximum, g / (|h| * (1 + damping)); elsewhere the
    profile gives no usable curvature and the mean is nudged uphill by
    `damping` bins.  Steps are clamped to +-step_clamp.

    A step is kept only if the sampled cost at the destination is no
    more than accept_slack below the cost at the current mean.  A wide
    fit window over a multi-peak profile puts the vertex near the window
    centroid rather than the local peak; without the gate such fits walk
    converged means off their peaks.  The slack leaves room for subpixel
    motion, where linear interpolation makes any move off an integer bin
    look slightly downhill.
    """
    deltas = []
    for mu in (f.mu0, f.mu1):
        slab = matching.lookup(ctx.cv, mu, radius, ctx.upper)
        g, h = fit_parabola(slab)
        concave = h < -1e-12
        newton = g / ((1.0 + cfg.damping) * np.abs(h) + 1e-12)
        nudge = np.sign(g) * cfg.damping
        delta = np.where(concave, newton, nudge)
        delta = np.clip(delta, -cfg.step_clamp, cfg.step_clamp)
        here = matching.lookup(ctx.cv, mu, 0, ctx.upper)[:, :, 0]
        there = matching.lookup(ctx.cv, mu + delta, 0, ctx.upper)[:, :, 0]
        deltas.append(np.where(there >= here - cfg.accept_slack, delta, 0.0))
    return deltas[0], deltas[1]


def _shift(plane: np.ndarray, di: int, dj: int) -> np.ndarray:
    """out[y, x] = plane[y + di, x + dj] with edge clamping."""
    h, w = plane.shape
    pad = max(abs(di), abs(dj))
    padded = np.pad(plane, pad, mode="edge")
    return padded[pad + di : pad + di + h, pad + dj : pad + dj + w]


def _sample_columns(plane: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """plane sampled per row at fractional column xs, inf where off-image."""
    h, w = plane.shape
    off = (xs < 0.0) | (xs > w - 1.0)
    xc = np.clip(xs, 0.0, w - 1.0)
    x0 = np.floor(xc).astype(int)
    x1 = np.minimum(x0 + 1, w - 1)
    t = xc - x0
    rows = np.arange(h)[:, None]
    out = plane[rows, x0] * (1.0 - t) + plane[rows, x1] * t
    return np.where(off, np.inf, out)


def _plane_support(
    ctx: CostContext, mu: np.ndarray, stride: int, ratio: float, anchor: float
) -> np.ndarray:
    """Fraction of 8 strided neighbor pixels whose cost supports mu.

    For each neighbor offset the cost volume is sampled at the neighbor
    pixel with this pixel's disparity; the neighbor counts as support
    when its cost there, above its own baseline, reaches `ratio` of
    what this pixel itself scores at mu, but never less than `ratio *
    anchor` of the neighbor's own best.  A real surface extends across
    pixels and keeps matching there, a spurious peak matches only where
    it arose; the anchor keeps a near-invisible peak from being vouched
    for by ordinary cost fluctuations.  Reading the volume instead of
    comparing neighbor means keeps the measure independent of what the
    neighbors currently believe.  Edges are clamped.
    """
    own = np.clip(
        np.max(matching.lookup(ctx.cv, mu, 1, ctx.upper), axis=2) - ctx.base,
        0.0,
        None,
    )
    best = np.clip(ctx.cv.cost.max(axis=2).astype(np.float64) - ctx.base, 0.0, None)
    support = np.zeros(mu.shape)
    for di in (-stride, 0, stride):
        for dj in (-stride, 0, stride):
            if di == 0 and dj == 0:
                continue
            shifted_mu = _shift(mu, di, dj)
            at_me = np.max(matching.lookup(ctx.cv, shifted_mu, 1, ctx.upper), axis=2)
            excess = np.clip(at_me - ctx.base, 0.0, None)
            bar = np.maximum(_shift(own, di, dj), anchor * best)
            need = ratio * np.maximum(bar, 1e-6)
            support += _shift((excess >= need).astype(np.float64), -di, -dj)
    return support / 8.0


def _evidence_gates(
    f: GaussianField, ctx: CostContext, coeffs: CovarianceCoeffs
) -> dict[str, np.ndarray]:
    """The individual evidence gates plus the per-label peak excesses."""
    peaks = [
        np.max(matching.lookup(ctx.cv, mu, coeffs.prominence_radius, ctx.upper), axis=2)
        - ctx.base
        for mu in (f.mu0, f.mu1)
    ]
    stronger = np.maximum(peaks[0], peaks[1])
    weaker = np.minimum(peaks[0], peaks[1])
    ratio = np.where(
        stronger > 1e-6,
        np.clip(weaker, 0.0, None) / np.maximum(stronger, 1e-6),
        0.0,
    )
    prominence = np.clip(
        (ratio - coeffs.prominence_lo)
        / (coeffs.prominence_hi - coeffs.prominence_lo),
        0.0,
        1.0,
    )
    budget = np.clip(
        (coeffs.budget_hi - stronger) / (coeffs.budget_hi - coeffs.budget_lo),
        0.0,
        1.0,
    )
    weaker_mu = np.where(peaks[0] <= peaks[1], f.mu0, f.mu1)
    support = _plane_support(
        ctx, weaker_mu, coeffs.support_stride, coeffs.support_ratio,
        coeffs.support_anchor,
    )
    separation = np.clip(np.abs(f.mu0 - f.mu1) / coeffs.separation_ref, 0.0, 1.0)
    if ctx.contrast is not None:
        cgate = np.clip(ctx.contrast / coeffs.contrast_gate_ref, 0.0, 1.0)
    else:
        cgate = np.ones_like(separation)
    return {
        "separation": separation,
        "prominence": prominence,
        "budget": budget,
        "support": support,
        "contrast": cgate,
        "peak0": peaks[0],
        "peak1": peaks[1],
    }


def two_surface_evidence(
    f: GaussianField, ctx: CostContext, coeffs: CovarianceCoeffs
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Score in [0, 1] that a pixel sees two surfaces; see CovarianceCoeffs.

    Also returns the per-label above-baseline thin-slab peaks
    (peak0, peak1).
    """
    g = _evidence_gates(f, ctx, coeffs)
    evidence = (
        g["separation"] * g["prominence"] * g["budget"] * g["support"] * g["contrast"]
    )
    return evidence, g["peak0"], g["peak1"]


def pair_plausibility(
    f: GaussianField, ctx: CostContext, coeffs: CovarianceCoeffs
) -> np.ndarray:
    """Evidence without the prominence gate; see rescue_hypotheses.

    A barely visible surface fails prominence by definition, yet a pair
    holding one is still distinguishable from a fabricated pair: the
    weaker disparity must be matchable at strided neighbors (support)
    and the stronger peak must leave it room in the feature budget.
    """
    g = _evidence_gates(f, ctx, coeffs)
    return g["separation"] * g["budget"] * g["support"] * g["contrast"]


def diffuse_hypotheses(
    f: GaussianField, ctx: CostContext, coeffs: CovarianceCoeffs
) -> None:
    """Re-seed each mean from its neighborhood median where supported.

    A weak but real surface loses the per-pixel candidate race to
    stronger spurious bins at many pixels, yet it is the only structure
    the pixels agree on: spurious peaks land at incoherent disparities,
    so the median over a window votes them out.  The median is adopted
    only where it moves the mean by over a bin, the cost volume holds a
    peak there of at least diffusion_ratio of the pixel's best cost
    (both above baseline), and it stays diffusion_guard bins away from
    the other label's mean.  The first two confine propagation to
    regions where the proposed surface actually matches; the guard
    keeps diffusion from collapsing the two hypotheses onto one
    surface, which is the merge step's decision to make.  Mutates the
    mean planes in place; labels may need re-canonicalizing after.
    """
    best = np.clip(
        ctx.cv.cost.max(axis=2).astype(np.float64) - ctx.base, 0.0, None
    )
    for name, other in (("mu0", "mu1"), ("mu1", "mu0")):
        mu = getattr(f, name)
        prop = median_filter(mu, size=coeffs.diffusion_window, mode="nearest")
        peak = np.max(matching.lookup(ctx.cv, prop, 1, ctx.upper), axis=2)
        excess = np.clip(peak - ctx.base, 0.0, None)
        adopt = (
            (np.abs(prop - mu) > 1.0)
            & (excess >= coeffs.diffusion_ratio * np.maximum(best, 1e-6))
            & (np.abs(prop - getattr(f, other)) >= coeffs.diffusion_guard)
        )
        setattr(f, name, np.where(adopt, prop, mu))


def merge_hypotheses(
    f: GaussianField, ctx: CostContext, coeffs: CovarianceCoeffs
) -> None:
    """Pull the weaker-peak mean toward the stronger where evidence is low.

    Mutates the mean planes in place.  Pixels at or above
    merge_threshold keep both hypotheses untouched.
    """
    evidence, peak0, peak1 = two_surface_evidence(f, ctx, coeffs)
    pull = np.where(evidence < coeffs.merge_threshold, coeffs.merge_rate, 0.0)
    toward0 = peak0 >= peak1
    f.mu1 = np.where(toward0, f.mu1 + pull * (f.mu0 - f.mu1), f.mu1)
    f.mu0 = np.where(toward0, f.mu0, f.mu0 + pull * (f.mu1 - f.mu0))


_BAND_GAP = 4  # px a band starts from the pixel; past the aggregation smear
_BAND_MIN = 0.02  # absolute band density floor; an empty band never encloses


def _band_floor(mask: np.ndarray, reach: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    """Mask density in four directional bands; returns (min, mean) planes.

    Each band is a width-wide box running from _BAND_GAP to reach pixels
    away on one side (left, right, up, down).  The min is high only
    where the mask surrounds the pixel on all four sides at that range;
    a pixel flanked on one side, however densely, floors at zero.  The
    gap keeps a pixel's own cluster from vouching for itself through
    evidence smeared a few pixels outward.
    """
    span = reach - _BAND_GAP
    if span % 2 == 0:
        span += 1
    shift = _BAND_GAP + span // 2
    m = mask.astype(np.float64)
    horiz = uniform_filter(m, size=(width, span), mode="constant")
    vert = uniform_filter(m, size=(span, width), mode="constant")
    bands = [
        _shift(horiz, 0, shift),
        _shift(horiz, 0, -shift),
        _shift(vert, shift, 0),
        _shift(vert, -shift, 0),
    ]
    stack = np.stack(bands)
    return stack.min(axis=0), stack.mean(axis=0)


def _median_over(plane: np.ndarray, mask: np.ndarray, window: int, sel: np.ndarray) -> np.ndarray:
    """Median of plane over mask-true pixels in each window, at sel pixels.

    Returns a full plane, NaN where sel is false or the window holds no
    mask-true pixel.
    """
    r = window // 2
    padded = np.pad(
        np.where(mask, plane, np.nan), r, mode="constant", constant_values=np.nan
    )
    windows = np.lib.stride_tricks.sliding_window_view(padded, (window, window))
    out = np.full(plane.shape, np.nan)
    ys, xs = np.nonzero(sel)
    if ys.size == 0:
        return out
    chosen = windows[ys, xs].reshape(ys.size, -1)
    counts = np.sum(np.isfinite(chosen), axis=1)
    vals = np.full(ys.size, np.nan)
    nonempty = counts > 0
    if nonempty.any():
        vals[nonempty] = np.nanmedian(chosen[nonempty], axis=1)
    out[ys, xs] = vals
    return out


def rescue_hypotheses(
    f: GaussianField,
    ctx: CostContext,
    cfg: SolverConfig,
    coeffs: CovarianceCoeffs,
    claimed: np.ndarray | None = None,
) -> np.ndarray:
    """Re-seed pixels that disagree with a confidently split region.

    A transparent surface is patchily matchable: stains and reflections
    anchor it at some pixels while clean stretches show almost no local
    peak, so per-pixel evidence leaves holes in an otherwise solid
    region, and self-similar texture plants ghost peaks a couple of
    bins off the surface that locally outscore it.  Where at least
    rescue_quorum of the rescue_window is split, two kinds of pixel
    adopt the split neighbors' median pair from a consensus_window
    neighborhood: unsplit holes, and split strays whose stronger mean
    sits more than diffusion_guard from the consensus.  Both get a few
    polish iterations to settle onto whatever peaks exist.  A hole
    keeps the pair where pair_plausibility clears a bar.  On a
    one-sided frontier the bar is the full rescue_keep: a pixel just
    outside the pane fails it because the weaker disparity matches
    nowhere near it, while a clean stretch of real pane passes on its
    faint residue.  The bar falls toward a tenth of that where
    directional bands reaching surround_window pixels left, right,
    up, and down each hold rescue_quadrant of their mean split
    density and the surround quorum deepens: a hole amid an
    established surface needs almost no evidence of its own, and only
    a hole sees the rim in every direction at that range.  A stray
    keeps the pair only where plausibility did not drop, so consensus
    breaks ties between a ghost and the true surface without
    overriding genuine structure.  Failures revert.

    Mutates the mean planes in place.  Returns the claimed mask: the
    pixels rescue has settled onto a pair so far.  They count as split
    for later passes, so the region grows one rim per pass and deep
    holes fill from the outside in; callers thread the mask back in
    and hand the final one to estimate_covariance.  Raw evidence
    splits seed the quorum but are not claimed by themselves: a ghost
    cluster outside any surface never earns the claim treatment.

    Plausibility alone cannot contain the growth: pixels just past the
    surface's rim look locally like clean stretches of it (the matching
    footprint smears the mixing signature a few pixels outward, and the
    strip the surface shadows in the other view is attenuated to
    through-glass level for a full disparity gap of columns).  So a
    hole keeps its pair only where both frames show mixing: its own
    stronger peak stays below the scene's single-surface level, and the
    right-view locus its adopted disparity points at is itself mixed.
    A pixel right of the surface fails the first test, one left of it
    fails the second (its locus lands on clean background left of the
    surface's footprint), and rows above or below fail both; the two
    thresholds sit midway between the split pixels' own medians and the
    clean-scene medians.  A locus off the image edge cannot be
    verified, so it never keeps a claim.
    """
    g = _evidence_gates(f, ctx, coeffs)
    before = g["separation"] * g["budget"] * g["support"] * g["contrast"]
    evidence = before * g["prominence"]
    if claimed is None:
        claimed = np.zeros(evidence.shape, dtype=bool)
    split = (evidence >= coeffs.merge_threshold) | claimed
    frac = uniform_filter(split.astype(np.float64), coeffs.rescue_window, mode="constant")
    surround = uniform_filter(
        split.astype(np.float64), coeffs.surround_window, mode="constant"
    )
    floor, around = _band_floor(split, coeffs.surround_window, coeffs.rescue_window)
    enclosure = np.where(
        floor >= _BAND_MIN,
        np.clip(floor / np.maximum(coeffs.rescue_quadrant * around, _BAND_MIN), 0.0, 1.0),
        0.0,
    )
    region = frac >= coeffs.rescue_quorum
    if not region.any():
        return claimed
    m0 = _median_over(f.mu0, split, coeffs.consensus_window, region)
    m1 = _median_over(f.mu1, split, coeffs.consensus_window, region)
    hole = region & ~split
    off0 = np.abs(np.where(np.isfinite(m0), m0, f.mu0) - f.mu0)
    off1 = np.abs(np.where(np.isfinite(m1), m1, f.mu1) - f.mu1)
    stray = region & split & (np.maximum(off0, off1) >= coeffs.stray_trigger)
    ok = (
        (hole | stray)
        & np.isfinite(m0)
        & np.isfinite(m1)
        & (np.abs(m0 - m1) >= coeffs.diffusion_guard)
    )
    if not ok.any():
        return claimed
    other = (
        ctx.other_purity
        if ctx.other_purity is not None
        else matching.opposite_view_purity(ctx.cv)
    )
    stronger = np.maximum(g["peak0"], g["peak1"])
    locus = _sample_columns(other, ctx.upper - f.mu0)
    mixed_in = np.median(stronger[split])
    locus_in = np.median(locus[split & np.isfinite(locus)])
    far = (frac < 0.5 * coeffs.rescue_quorum) & ~split
    pure_out = np.median(stronger[far]) if far.any() else np.median(stronger)
    pure_loc = np.median(other)
    own_bar = mixed_in + coeffs.mixing_frac_own * (pure_out - mixed_in)
    loc_bar = locus_in + coeffs.mixing_frac_locus * (pure_loc - locus_in)
    saved0, saved1 = f.mu0.copy(), f.mu1.copy()
    f.mu0 = np.where(ok, m0, f.mu0)
    f.mu1 = np.where(ok, m1, f.mu1)
    for _ in range(coeffs.rescue_polish):
        d0, d1 = update_mean(f, ctx, cfg, max(1, cfg.lookup_radius // 2))
        f.mu0 = np.minimum(np.clip(f.mu0 + d0, 0.0, ctx.cv.dmax - 1.0), ctx.upper)
        f.mu1 = np.minimum(np.clip(f.mu1 + d1, 0.0, ctx.cv.dmax - 1.0), ctx.upper)
    # a polish walk far off the consensus means the local profile
    # disagrees with the neighborhood vote; the vote wins at a hole
    leash0 = ok & (np.abs(f.mu0 - m0) > coeffs.rescue_leash)
    leash1 = ok & (np.abs(f.mu1 - m1) > coeffs.rescue_leash)
    f.mu0 = np.where(leash0, m0, f.mu0)
    f.mu1 = np.where(leash1, m1, f.mu1)
    g = _evidence_gates(f, ctx, coeffs)
    after = g["separation"] * g["budget"] * g["support"] * g["contrast"]
    stronger = np.maximum(g["peak0"], g["peak1"])
    locus = _sample_columns(other, ctx.upper - f.mu0)
    depth = np.clip(
        (surround - coeffs.rescue_quorum) / (0.5 - coeffs.rescue_quorum), 0.0, 1.0
    )
    bar = coeffs.rescue_keep * (1.0 - 0.9 * depth * enclosure)
    both_mixed = (stronger <= own_bar) & (locus <= loc_bar)
    keep = np.where(stray, after >= before, (after >= bar) & both_mixed)
    revert = ok & ~keep
    f.mu0 = np.where(revert, saved0, f.mu0)
    f.mu1 = np.where(revert, saved1, f.mu1)
    swap = f.mu0 < f.mu1
    f.mu0, f.mu1 = np.where(swap, f.mu1, f.mu0), np.where(swap, f.mu0, f.mu1)
    f.sigma0, f.sigma1 = (
        np.where(swap, f.sigma1, f.sigma0),
        np.where(swap, f.sigma0, f.sigma1),
    )
    return claimed | (ok & keep)


def estimate_covariance(
    f: GaussianField,
    steps: tuple[np.ndarray, np.ndarray],
    ctx: CostContext,
    cfg: SolverConfig,
    coeffs: CovarianceCoeffs,
    claimed: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Estimate (sigma0, sigma1, rho) planes; see CovarianceCoeffs.

    `claimed` marks pixels the rescue passes settled onto a split pair;
    they join the region vote and get a direct rho push so a rescued
    pixel whose own evidence stays faint still reports the pair.
    """
    sigmas = []
    for mu, step in zip((f.mu0, f.mu1), steps):
        slab = matching.lookup(ctx.cv, mu, cfg.lookup_radius, ctx.upper)
        _, h = fit_parabola(slab)
        sharp = np.clip(-h, 0.0, coeffs.curvature_ref) / coeffs.curvature_ref
        raw = (
            coeffs.sigma_bias
            + coeffs.sigma_flatness_gain * (1.0 - sharp)
            + coeffs.sigma_step_gain * np.minimum(np.abs(step), 1.0)
        )
        sigmas.append(np.maximum(softplus(raw), SIGMA_FLOOR))

    evidence, _, _ = two_surface_evidence(f, ctx, coeffs)
    separation = np.abs(f.mu0 - f.mu1)
    if ctx.contrast is not None:
        lowcontrast = np.clip(1.0 - ctx.contrast / coeffs.contrast_ref, 0.0, 1.0)
    else:
        lowcontrast = 0.0
    # the pixel detector is patchy on faint surfaces; a pixel surrounded
    # by confident splits is almost surely on the same pane, so the
    # neighborhood votes rho down where its own evidence falls short
    split = evidence >= coeffs.merge_threshold
    if claimed is not None:
        split = split | claimed
    region = uniform_filter(split.astype(np.float64), coeffs.rescue_window, mode="constant")
    raw_rho = (
        coeffs.rho_bias
        - coeffs.rho_evidence_gain * evidence
        - coeffs.rho_separation_gain * separation / ctx.cv.dmax
        - coeffs.rho_region_gain * region
        + coeffs.rho_lowcontrast_gain * lowcontrast
    )
    if claimed is not None:
        raw_rho = raw_rho - coeffs.rho_claim_gain * claimed
    return sigmas[0], sigmas[1], sigmoid(raw_rho)


def fill_border(f: GaussianField, rows: int, cols: int) -> None:
    """Copy the nearest supported state into the outer border band.

    Census windows at the image edge read padded pixels while the
    matching window in the other view reads real content, so the cost
    has no valid support in a thin band (top and bottom `rows`, right
    `cols`, all in quarter-resolution pixels; the left side is governed
    by the per-column disparity bound instead).  Mutates f in place.
    """
    for plane in (f.mu0, f.mu1, f.sigma0, f.sigma1, f.rho):
        if rows > 0:
            plane[:rows, :] = plane[rows : rows + 1, :]
            plane[-rows:, :] = plane[-rows - 1 : -rows, :]
        if cols > 0:
            plane[:, -cols:] = plane[:, -cols - 1 : -cols]


def _neighbor_stack(plane: np.ndarray) -> np.ndarray:
    """(H, W) -> (H, W, 9) stack of the 3x3 neighborhood, edges clamped."""
    h, w = plane.shape
    padded = np.pad(plane, 1, mode="edge")
    out = np.empty((h, w, 9), dtype=plane.dtype)
    for i in range(3):
        for j in range(3):
            out[:, :, 3 * i + j] = padded[i : i + h, j : j + w]
    return out


def _tent_table() -> np.ndarray:
    """(POOL, POOL, 9) bilinear weights of each subpixel over the 3x3 grid.

    Output pixel (R, C) sits at coarse coordinate (R + 0.5) / POOL - 0.5
    relative to its parent, an offset of at most half a coarse pixel, so
    only the two nearest neighbors per axis get weight.
    """
    table = np.zeros((POOL, POOL, 9))
    for sy in range(POOL):
        dy = (sy + 0.5) / POOL - 0.5
        wy = (max(0.0, -dy), 1.0 - abs(dy), max(0.0, dy))
        for sx in range(POOL):
            dx = (sx + 0.5) / POOL - 0.5
            wx = (max(0.0, -dx), 1.0 - abs(dx), max(0.0, dx))
            for i in range(3):
                for j in range(3):
                    table[sy, sx, 3 * i + j] = wy[i] * wx[j]
    return table


def upsample_weights(
    ctx: CostContext, f: GaussianField, coeffs: CovarianceCoeffs
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Derive convex-combination weights from cost confidence.

    For each coarse pixel the sampled cost at the current mean acts as a
    confidence; a softmax over the 3x3 neighborhood prefers copying
    from confident neighbors, and a bilinear tent keeps the combination
    anchored to the subpixel position.  The mean and rho planes carry
    step discontinuities (a pane edge), so their weights also fade with
    the neighbor's distance in the plane's own value, which keeps the
    interpolation from smearing values across the edge.  Returns
    (w_mu0, w_mu1, w_sigma, w_rho); w_sigma and w_rho blend both
    labels' confidences.
    """
    conf0 = matching.lookup(ctx.cv, f.mu0, 0, ctx.upper)[:, :, 0]
    conf1 = matching.lookup(ctx.cv, f.mu1, 0, ctx.upper)[:, :, 0]

    h, w = conf0.shape
    tent = np.tile(_tent_table().astype(np.float32), (h, w, 1))

    def derive(conf: np.ndarray, guide: np.ndarray | None = None, scale: float = 1.0) -> np.ndarray:
        nb = _neighbor_stack(conf / coeffs.upsample_temperature)
        nb -= nb.max(axis=2, keepdims=True)
        sm = np.exp(nb)
        if guide is not None:
            gap = np.abs(_neighbor_stack(guide) - guide[:, :, None])
            sm = sm * np.exp(-gap / scale)
        sm /= sm.sum(axis=2, keepdims=True)
        up = np.repeat(np.repeat(sm.astype(np.float32), POOL, axis=0), POOL, axis=1)
        weights = up * tent
        weights /= weights.sum(axis=2, keepdims=True)
        return weights

    shared = 0.5 * (conf0 + conf1)
    return (
        derive(conf0, f.mu0, coeffs.upsample_mu_scale),
        derive(conf1, f.mu1, coeffs.upsample_mu_scale),
        derive(shared),
        derive(shared, f.rho, coeffs.upsample_rho_scale),
    )


def convex_upsample(plane: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Upsample (H, W) -> (POOL*H, POOL*W) by convex neighbor combination.

    weights has shape (POOL*H, POOL*W, 9) over the 3x3 coarse
    neighborhood (edges clamped).  Weights are clipped nonnegative and
    renormalized, so every output value lies inside the local value
    range of its coarse neighborhood.
    """
    h, w = plane.shape
    if weights.shape != (POOL * h, POOL * w, 9):
        raise ValueError(f"weights shape {weights.shape} does not match plane {plane.shape}")
    wts = np.clip(weights.astype(np.float64), 0.0, None)
    wts /= np.maximum(wts.sum(axis=2, keepdims=True), 1e-30)
    nb = _neighbor_stack(plane.astype(np.float64))
    up = np.repeat(np.repeat(nb, POOL, axis=0), POOL, axis=1)
    return np.sum(up * wts, axis=2)


def run(
    left: np.ndarray,
    right: np.ndarray,
    cfg: SolverConfig | None = None,
    coeffs: CovarianceCoeffs | None = None,
) -> tuple[GaussianField, IterationTrace]:
    """Match a rectified pair and return a full-resolution Gaussian field.

    The returned means are disparities in full-resolution pixels.  The
    trace records, per iteration, copies of the (quarter-resolution)
    mean planes, the mean absolute step, and the mean sampled cost at
    the means.
    """
    cfg = cfg or SolverConfig()
    coeffs = coeffs or CovarianceCoeffs()
    fl = matching.extract_features(left, cfg.census_window)
    fr = matching.extract_features(right, cfg.census_window)
    contrast = matching.feature_contrast(fl)
    cv = matching.aggregate_cost(
        matching.build_cost_volume(fl, fr, cfg.dmax_bins, workers=cfg.workers),
        cfg.cost_aggregation,
    )
    state = init_state(matching.extract_candidates(cv, cfg.nms_radius), cfg)
    ctx = make_context(cv, contrast)

    trace = IterationTrace()
    # wide lookup while far from convergence, tight at the end: a fit
    # window much wider than the cost peak drags the vertex toward the
    # window's centroid, so the final polish needs a narrow slab
    quarter = cfg.iterations // 4
    for it in range(cfg.iterations):
        if it < quarter:
            radius = 2 * cfg.lookup_radius
        elif it >= cfg.iterations - quarter:
            radius = max(1, cfg.lookup_radius // 2)
        else:
            radius = cfg.lookup_radius
        d0, d1 = update_mean(state, ctx, cfg, radius)
        mu0 = np.minimum(np.clip(state.mu0 + d0, 0.0, cv.dmax - 1.0), ctx.upper)
        mu1 = np.minimum(np.clip(state.mu1 + d1, 0.0, cv.dmax - 1.0), ctx.upper)
        swap = mu0 < mu1
        state.mu0 = np.where(swap, mu1, mu0)
        state.mu1 = np.where(swap, mu0, mu1)
        state.sigma0, state.sigma1 = (
            np.where(swap, state.sigma1, state.sigma0),
            np.where(swap, state.sigma0, state.sigma1),
        )
        d0, d1 = np.where(swap, d1, d0), np.where(swap, d0, d1)

        merge_hypotheses(state, ctx, coeffs)

        diffuse_hypotheses(state, ctx, coeffs)
        swap = state.mu0 < state.mu1
        state.mu0, state.mu1 = (
            np.where(swap, state.mu1, state.mu0),
            np.where(swap, state.mu0, state.mu1),
        )
        state.sigma0, state.sigma1 = (
            np.where(swap, state.sigma1, state.sigma0),
            np.where(swap, state.sigma0, state.sigma1),
        )

        if cfg.covariance_every_iteration:
            state.sigma0, state.sigma1, state.rho = estimate_covariance(
                state, (d0, d1), ctx, cfg, coeffs
            )

        trace.mean_snapshots.append((state.mu0.copy(), state.mu1.copy()))
        trace.mean_abs_step.append(float(0.5 * (np.mean(np.abs(d0)) + np.mean(np.abs(d1)))))
        at0 = matching.lookup(cv, state.mu0, 0, ctx.upper)[:, :, 0]
        at1 = matching.lookup(cv, state.mu1, 0, ctx.upper)[:, :, 0]
        trace.objective.append(float(0.5 * (np.mean(at0) + np.mean(at1))))

    claimed = None
    for _ in range(coeffs.rescue_passes):
        claimed = rescue_hypotheses(state, ctx, cfg, coeffs, claimed)
    state.sigma0, state.sigma1, state.rho = estimate_covariance(
        state, (d0, d1), ctx, cfg, coeffs, claimed
    )

    fill_border(state, cfg.border_fill_rows, cfg.border_fill_cols)
    w0, w1, ws, wr = upsample_weights(ctx, state, coeffs)
    full = GaussianField(
        mu0=POOL * convex_upsample(state.mu0, w0),
        mu1=POOL * convex_upsample(state.mu1, w1),
        sigma0=convex_upsample(state.sigma0, ws),
        sigma1=convex_upsample(state.sigma1, ws),
        rho=convex_upsample(state.rho, wr),
    )
    return canonicalize(full), trace
