"""Closed-form bivariate Gaussian math for the two-label disparity state.

Each pixel carries a pair of disparity labels modeled jointly as a 2-D
Gaussian with mean (mu0, mu1), per-label standard deviations (sigma0,
sigma1) and a correlation coefficient rho in [0, 1).  Label 0 is the
foreground (nearer surface, larger-or-equal disparity), label 1 the
background.  The covariance matrix is

    [[sigma0^2,            rho*sigma0*sigma1],
     [rho*sigma0*sigma1,   sigma1^2         ]]

All densities, likelihoods and gradients below are evaluated in closed
form (no matrix inversion at runtime).  Functions ending in `_values`
are elementwise and broadcast over numpy arrays; the dataclass wrappers
operate on scalar parameter records.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

LOG_2PI = float(np.log(2.0 * np.pi))

# Post-activation floors: keep sigma strictly positive and rho strictly
# inside [0, 1) even when the raw inputs saturate float64.
SIGMA_FLOOR = 1e-8
RHO_CEIL = 1.0 - 1e-9

# Floor applied to (1 - rho^2) inside logs and divisions when clamping
# is enabled (the default).
ONE_MINUS_RHO2_FLOOR = 1e-12


class DegenerateCovarianceError(ValueError):
    """Raised when 1 - rho^2 underflows to zero and clamping is disabled."""


@dataclass(frozen=True)
class BivariateGaussian:
    """Activated per-pixel parameters; sigma > 0 and 0 <= rho < 1."""

    mu0: float
    mu1: float
    sigma0: float
    sigma1: float
    rho: float


@dataclass(frozen=True)
class RawGaussian:
    """Unconstrained pre-activation parameters."""

    mu0: float
    mu1: float
    s0_raw: float
    s1_raw: float
    rho_raw: float


def softplus(x):
    """ln(1 + exp(x)), stable for large |x|."""
    return np.logaddexp(0.0, x)


def sigmoid(x):
    return expit(x)


def activate(raw: RawGaussian) -> BivariateGaussian:
    """Map raw parameters to the constrained domain.

    sigma_i = softplus(s_i_raw) floored at SIGMA_FLOOR, rho =
    sigmoid(rho_raw) capped at RHO_CEIL; means pass through unchanged.
    """
    s0 = float(np.maximum(softplus(raw.s0_raw), SIGMA_FLOOR))
    s1 = float(np.maximum(softplus(raw.s1_raw), SIGMA_FLOOR))
    rho = float(np.clip(sigmoid(raw.rho_raw), 1.0 - RHO_CEIL, RHO_CEIL))
    return BivariateGaussian(raw.mu0, raw.mu1, s0, s1, rho)


def _safe_one_minus_rho2(rho, clamp: bool):
    s = 1.0 - np.asarray(rho, dtype=float) ** 2
    if clamp:
        return np.maximum(s, ONE_MINUS_RHO2_FLOOR)
    if np.any(s <= 0.0):
        raise DegenerateCovarianceError("1 - rho^2 underflowed to zero")
    return s


def log_pdf_values(x0, x1, mu0, mu1, sigma0, sigma1, rho, clamp: bool = True):
    """Elementwise log-density of the bivariate Gaussian.

    Returns -ln(2*pi) - ln(sigma0) - ln(sigma1) - 0.5*ln(1 - rho^2)
    - 0.5*q with q the Mahalanobis quadratic form, broadcasting over
    array inputs.
    """
    z0 = (np.asarray(x0, dtype=float) - mu0) / sigma0
    z1 = (np.asarray(x1, dtype=float) - mu1) / sigma1
    s = _safe_one_minus_rho2(rho, clamp)
    quad = (z0 * z0 - 2.0 * rho * z0 * z1 + z1 * z1) / s
    return -LOG_2PI - np.log(sigma0) - np.log(sigma1) - 0.5 * np.log(s) - 0.5 * quad


def nll_values(x0, x1, mu0, mu1, sigma0, sigma1, rho, clamp: bool = True):
    """Elementwise negative log-likelihood."""
    return -log_pdf_values(x0, x1, mu0, mu1, sigma0, sigma1, rho, clamp=clamp)


def nll_grad_values(x0, x1, mu0, mu1, sigma0, sigma1, rho, clamp: bool = True):
    """Analytic partial derivatives of the NLL.

    With z_i = (x_i - mu_i)/sigma_i and s = 1 - rho^2:

        d/dmu0    = -(z0 - rho*z1) / (s*sigma0)
        d/dmu1    = -(z1 - rho*z0) / (s*sigma1)
        d/dsigma0 = (1 - z0*(z0 - rho*z1)/s) / sigma0
        d/dsigma1 = (1 - z1*(z1 - rho*z0)/s) / sigma1
        d/drho    = -rho/s + (rho*(z0^2 + z1^2) - (1 + rho^2)*z0*z1) / s^2

    Returns a tuple (d_mu0, d_mu1, d_sigma0, d_sigma1, d_rho) of arrays
    broadcast to the common shape.
    """
    z0 = (np.asarray(x0, dtype=float) - mu0) / sigma0
    z1 = (np.asarray(x1, dtype=float) - mu1) / sigma1
    s = _safe_one_minus_rho2(rho, clamp)
    a0 = z0 - rho * z1
    a1 = z1 - rho * z0
    d_mu0 = -a0 / (s * sigma0)
    d_mu1 = -a1 / (s * sigma1)
    d_sigma0 = (1.0 - z0 * a0 / s) / sigma0
    d_sigma1 = (1.0 - z1 * a1 / s) / sigma1
    d_rho = -rho / s + (rho * (z0 * z0 + z1 * z1) - (1.0 + rho * rho) * z0 * z1) / (s * s)
    return d_mu0, d_mu1, d_sigma0, d_sigma1, d_rho


def log_pdf(x, p: BivariateGaussian, clamp: bool = True) -> float:
    """Log-density at the disparity pair x = (x0, x1)."""
    return float(
        log_pdf_values(x[0], x[1], p.mu0, p.mu1, p.sigma0, p.sigma1, p.rho, clamp=clamp)
    )


def nll(p: BivariateGaussian, x_gt, clamp: bool = True) -> float:
    """Negative log-likelihood of the ground-truth pair x_gt."""
    return -log_pdf(x_gt, p, clamp=clamp)


def nll_grad(p: BivariateGaussian, x_gt, clamp: bool = True) -> np.ndarray:
    """Gradient of nll over (mu0, mu1, sigma0, sigma1, rho), shape (5,)."""
    parts = nll_grad_values(
        x_gt[0], x_gt[1], p.mu0, p.mu1, p.sigma0, p.sigma1, p.rho, clamp=clamp
    )
    return np.array([float(g) for g in parts])


def marginal(p: BivariateGaussian, label: int) -> tuple[float, float]:
    """Marginal (mean, stddev) of one label; each marginal integrates to 1."""
    if label == 0:
        return p.mu0, p.sigma0
    if label == 1:
        return p.mu1, p.sigma1
    raise IndexError(f"label must be 0 or 1, got {label}")


def covariance(p: BivariateGaussian) -> np.ndarray:
    """Assemble the 2x2 covariance matrix."""
    off = p.rho * p.sigma0 * p.sigma1
    return np.array(
        [[p.sigma0**2, off], [off, p.sigma1**2]]
    )
