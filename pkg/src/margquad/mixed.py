"""Mixed-effects models: group 2 has fixed, known prior scales.

The group-2 columns are rescaled so their coefficients get unit normal
priors; the result is a two-group density with sigma_3 pinned to 1.  With
sigma_3 = 1 the spherical coordinates of the two-group engine satisfy

    sigma_2 = cot(theta),   sigma_1 = cot(phi) / sin(theta),
    rho = 1 / (sin(phi) sin(theta)),

so the marginal is a 2-D integral over (theta, phi) with
d sigma_1 d sigma_2 = d theta d phi / (sin(phi)^2 sin(theta)^3), and each
theta node still needs only one eigendecomposition.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import DimensionMismatch, NonPositiveScale
from .model import TWO_GROUP, ModelInput, PosteriorSummary
from .quadrature import QuadratureConfig, adaptive_theta, gauss_legendre, map_nodes, scan_bounds
from .twogroup import (
    ThetaRecord,
    alpha_beta,
    change_measure,
    combine_records,
    precompute,
    record_from_phi,
    summarize,
    theta_slice,
)

HALF_PI = 0.5 * math.pi


@dataclass(frozen=True, eq=False)
class MixedReduction:
    X_hat: np.ndarray
    back_map: np.ndarray  # s_j: beta_2j = s_j * beta_hat_j
    model: ModelInput  # reduced two-group model (sigma_3 fixed at 1)

    def coefficient_factors(self) -> np.ndarray:
        return np.concatenate([np.ones(self.model.k1), self.back_map])


def reduce(model: ModelInput) -> MixedReduction:
    """Non-centered reparametrization beta_hat = beta_2 / s, X_hat = X_2 s."""
    if not model.is_mixed:
        raise ValueError("reduce expects a mixed model")
    s = np.asarray(model.prior_scales, dtype=float)
    if np.any(~np.isfinite(s)) or np.any(s <= 0):
        raise NonPositiveScale("prior scales must be finite and > 0")
    X2h = model.X2 * s[None, :]
    X_hat = np.hstack([model.X1, X2h])
    reduced = ModelInput(model.X1, X2h, model.y, TWO_GROUP, None)
    return MixedReduction(X_hat, s.copy(), reduced)


def _log_density(pre, sl, phi, sin_t):
    """log marginal density at (sigma_1, sigma_2) plus the log Jacobian."""
    log_alpha, beta, den = alpha_beta(sl, phi)
    sphi, cphi = np.sin(phi), np.cos(phi)
    rho = 1.0 / (sphi * sin_t)
    c = pre.d_norm_sq / cphi**2 + beta
    lm = (
        log_alpha
        - (pre.n - pre.k) * np.log(cphi)
        - pre.n * np.log(rho)
        - 0.5 * rho * rho
        - 0.5 * c / (rho * rho)
    )
    return lm - 2.0 * np.log(sphi) - 3.0 * math.log(sin_t), den


def _theta_record(pre, theta: float, cfg: QuadratureConfig, full: bool) -> ThetaRecord:
    sin_t = math.sin(theta)
    k = pre.k
    if sin_t < 1e-12:
        # sigma_2 -> infinity; the half-normal prior kills the integrand
        nan = np.full(k, np.nan)
        return ThetaRecord(-np.inf, nan, np.full((k, k), np.nan) if full else nan, np.nan, np.nan)
    sl = theta_slice(pre, pre.k1, theta)
    lo, hi = scan_bounds(lambda p: _log_density(pre, sl, p, sin_t)[0], 0.0, HALF_PI, cfg.phi_scan_nodes, cfg.drop_factor)
    rule = gauss_legendre(cfg.phi_nodes, lo, hi)
    phi = rule.nodes
    logd, den = _log_density(pre, sl, phi, sin_t)
    s2 = np.sin(phi) ** 2
    c2 = np.cos(phi) ** 2
    m = s2[:, None] * sl.u / den
    # rho^2 sin^2 cos^2 / den with rho = 1 / (sin(phi) sin(theta))
    var = (c2 / sin_t**2)[:, None] / den
    A = sl.q[:, None] * sl.V
    sig1 = np.cos(phi) / (np.sin(phi) * sin_t)
    sig2 = np.full_like(phi, math.cos(theta) / sin_t)
    zeros = np.zeros((3, phi.size))
    return record_from_phi(
        np.log(rule.weights) + logd,
        zeros,
        m,
        var,
        A,
        np.stack([sig1, sig2]),
        np.stack([sig1**2, sig2**2]),
        full,
        (lo, hi),
    )


def fit_mixed(
    model: ModelInput,
    cfg: Optional[QuadratureConfig] = None,
    covariance: bool = True,
    threads: Optional[int] = None,
) -> PosteriorSummary:
    """Posterior moments of a mixed model, reported in the original scale.

    ``log_norm_const`` is log of the integral of
    exp(-(s1^2 + s2^2)/2) / (s1^n s2^k1) * likelihood * exp(-|b1|^2/(2 s2^2)
    - sum_j b2j^2 / (2 tau_j^2)) over b and (s1, s2), where tau are the
    fixed prior scales (their normal normalizers are not included).
    """
    if not model.is_mixed:
        raise ValueError("fit_mixed expects a mixed model")
    if model.n < model.k:
        raise DimensionMismatch(f"mixed model needs n >= k, got n={model.n}, k={model.k}")
    cfg = cfg or QuadratureConfig()
    red = reduce(model)
    pre = precompute(red.model)
    f = lambda thetas: map_nodes(lambda t: _theta_record(pre, float(t), cfg, covariance), thetas, threads)
    res = adaptive_theta(f, cfg, reduce=combine_records, measure=change_measure)
    s = summarize(res, covariance, {"path": "mixed"})
    return back_map(s, red)


def back_map(s: PosteriorSummary, red: MixedReduction) -> PosteriorSummary:
    f = red.coefficient_factors()
    cov = None if s.beta_cov is None else s.beta_cov * np.outer(f, f)
    # the reduced density carries exp(-1/2) from sigma_3 = 1 and integrates
    # over beta_hat = beta_2 / s
    log_I = s.log_norm_const + 0.5 + float(np.sum(np.log(red.back_map)))
    return PosteriorSummary(
        beta_mean=s.beta_mean * f,
        beta_sd=s.beta_sd * f,
        scale_mean=s.scale_mean,
        scale_sd=s.scale_sd,
        log_norm_const=log_I,
        beta_cov=cov,
        info=s.info,
    )


mixed_moments = fit_mixed
