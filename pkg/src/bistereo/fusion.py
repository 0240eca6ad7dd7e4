"""Label fusion: collapse or keep the two disparity hypotheses per pixel.

A pixel whose correlation is at or above alpha is treated as a single
surface and its two means are fused with inverse-variance weights; a
pixel below alpha keeps both surfaces (label 0 = foreground, label 1 =
background).  The fused value is a convex combination, so it always
lies between the two means.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .solver import GaussianField


@dataclass(frozen=True)
class FusionConfig:
    alpha: float = 0.5


@dataclass
class LabeledDisparity:
    """Fused two-surface disparity result, full resolution, in pixels.

    On normal pixels (transparent_mask False) foreground, background,
    and fused are all the fused single-surface value.  On transparent
    pixels foreground and background keep the two hypotheses and fused
    carries the foreground.
    """

    fused: np.ndarray
    foreground: np.ndarray
    background: np.ndarray
    transparent_mask: np.ndarray
    rho: np.ndarray


def fusion_weights(f: GaussianField) -> tuple[np.ndarray, np.ndarray]:
    """Inverse-variance weights (w0, w1); w0 + w1 = 1."""
    p0 = 1.0 / np.square(f.sigma0)
    p1 = 1.0 / np.square(f.sigma1)
    total = p0 + p1
    return p0 / total, p1 / total


def fuse(f: GaussianField, cfg: FusionConfig | None = None) -> LabeledDisparity:
    cfg = cfg or FusionConfig()
    w0, w1 = fusion_weights(f)
    single = w0 * f.mu0 + w1 * f.mu1
    split = f.rho < cfg.alpha
    return LabeledDisparity(
        fused=np.where(split, f.mu0, single),
        foreground=np.where(split, f.mu0, single),
        background=np.where(split, f.mu1, single),
        transparent_mask=split,
        rho=f.rho.copy(),
    )
