"""Training losses over a predicted Gaussian field.

Per-pixel targets come from a GroundTruth bundle: a foreground and a
background disparity plane plus the transparent-region mask.  Outside
the mask both ground-truth labels collapse to the foreground value.
All losses are means over valid pixels; an empty region is defined as
zero and flagged with EmptyRegionWarning.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import gaussian
from .solver import GaussianField


class EmptyRegionWarning(UserWarning):
    """A loss term was evaluated over an empty pixel set."""


@dataclass(frozen=True)
class LossConfig:
    beta0: float = 1e-5  # likelihood term weight
    beta1: float = 1.0  # correlation term weight
    gamma: float = 0.9  # per-iteration decay
    rho_gt_normal: float = 0.95
    rho_gt_transparent: float = 0.0


@dataclass
class GroundTruth:
    """Two-surface disparity ground truth, full resolution, in pixels.

    Outside transparent_mask the background plane equals the foreground
    plane.  valid marks pixels that participate in losses and metrics;
    None means all valid.
    """

    fg_disparity: np.ndarray
    bg_disparity: np.ndarray
    transparent_mask: np.ndarray
    valid: np.ndarray | None = None

    def valid_mask(self) -> np.ndarray:
        if self.valid is None:
            return np.ones(self.fg_disparity.shape, dtype=bool)
        return self.valid


@dataclass(frozen=True)
class LossReport:
    l_mu: float
    l_d: float
    l_lh: float
    l_rho: float
    total: float  # l_mu + l_d + beta0 * l_lh + beta1 * l_rho


def _masked_mean(values: np.ndarray, mask: np.ndarray, name: str) -> float:
    if not np.any(mask):
        warnings.warn(f"{name} evaluated over an empty region", EmptyRegionWarning)
        return 0.0
    return float(np.mean(values[mask]))


def _targets(gt: GroundTruth) -> tuple[np.ndarray, np.ndarray]:
    t0 = gt.fg_disparity
    t1 = np.where(gt.transparent_mask, gt.bg_disparity, gt.fg_disparity)
    return t0, t1


def loss_mu(f: GaussianField, gt: GroundTruth) -> float:
    """L1 on both mean planes against the two-surface targets."""
    t0, t1 = _targets(gt)
    err = 0.5 * (np.abs(f.mu0 - t0) + np.abs(f.mu1 - t1))
    return _masked_mean(err, gt.valid_mask(), "mean loss")


def loss_fused(fused: np.ndarray, gt: GroundTruth) -> float:
    """L1 on the fused disparity against the foreground, normal areas only."""
    mask = gt.valid_mask() & ~gt.transparent_mask
    return _masked_mean(np.abs(fused - gt.fg_disparity), mask, "fused loss")


def loss_likelihood(f: GaussianField, gt: GroundTruth) -> float:
    """Mean negative log likelihood of the ground-truth pair."""
    t0, t1 = _targets(gt)
    nll = gaussian.nll_values(t0, t1, f.mu0, f.mu1, f.sigma0, f.sigma1, f.rho)
    return _masked_mean(nll, gt.valid_mask(), "likelihood loss")


def loss_rho(rho: np.ndarray, gt: GroundTruth, cfg: LossConfig) -> float:
    """L1 on the correlation against its per-region target."""
    target = np.where(gt.transparent_mask, cfg.rho_gt_transparent, cfg.rho_gt_normal)
    return _masked_mean(np.abs(rho - target), gt.valid_mask(), "correlation loss")


def evaluate_losses(
    f: GaussianField, fused: np.ndarray, gt: GroundTruth, cfg: LossConfig | None = None
) -> LossReport:
    cfg = cfg or LossConfig()
    l_mu = loss_mu(f, gt)
    l_d = loss_fused(fused, gt)
    l_lh = loss_likelihood(f, gt)
    l_r = loss_rho(f.rho, gt, cfg)
    return LossReport(
        l_mu=l_mu,
        l_d=l_d,
        l_lh=l_lh,
        l_rho=l_r,
        total=l_mu + l_d + cfg.beta0 * l_lh + cfg.beta1 * l_r,
    )


def total_loss(reports: list[LossReport], cfg: LossConfig | None = None) -> float:
    """Decayed sum over iterations: sum_i gamma^(M-i) * total_i, i = 1..M."""
    cfg = cfg or LossConfig()
    if not reports:
        raise ValueError("total_loss needs at least one iteration report")
    m = len(reports)
    return float(sum(cfg.gamma ** (m - i) * r.total for i, r in enumerate(reports, start=1)))
