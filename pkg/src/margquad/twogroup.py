"""Posterior moments of the two-group normal-normal model.

The coefficients are integrated out analytically.  The remaining density
over (sigma_1, sigma_2, sigma_3) is written in spherical coordinates

    sigma_1 = rho cos(phi)
    sigma_2 = rho sin(phi) cos(theta)
    sigma_3 = rho sin(phi) sin(theta)

and integrated by quadrature: rho analytically-bounded Gauss-Legendre,
phi Gauss-Legendre on a scanned sub-interval, theta adaptive.  For a fixed
theta every phi and rho node shares one symmetric eigendecomposition of
D X^t X D with D = diag(cos(theta) I_1, sin(theta) I_2).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import EigenFailure, ImproperPosterior, NonPositiveVariance
from .model import ModelInput, PosteriorSummary
from .quadrature import (
    QuadratureConfig,
    adaptive_theta,
    gauss_legendre,
    log_rho_integrals,
    log_rho_laplace,
    map_nodes,
    scan_bounds,
    tree_sum,
)

HALF_PI = 0.5 * math.pi
LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True, eq=False)
class Precompute:
    beta_tilde: np.ndarray
    d_norm_sq: float
    X: np.ndarray
    XtX: np.ndarray
    Xty: np.ndarray
    yty: float
    n: int
    k1: int
    fit_sq: float  # ||X beta_tilde||^2

    @property
    def k(self) -> int:
        return self.XtX.shape[0]


@dataclass(frozen=True, eq=False)
class ThetaSlice:
    theta: float
    lam: np.ndarray
    V: np.ndarray
    w_tilde: np.ndarray
    u: np.ndarray  # V^t D X^t y, equal to lam * w_tilde
    q: np.ndarray  # diagonal of D(theta)
    big: np.ndarray  # eigenvalues handled by the direct formula
    s_small: float  # sum of u^2 / lam over the remaining eigenvalues


def precompute(model: ModelInput) -> Precompute:
    """Minimum-norm least-squares fit and the Gram quantities reused per theta."""
    X = model.X
    y = model.y
    beta_tilde, *_ = np.linalg.lstsq(X, y, rcond=None)
    r = y - X @ beta_tilde
    d = float(r @ r)
    yty = float(y @ y)
    if yty == 0.0 and model.n > 2:
        raise ImproperPosterior("y is identically zero; the posterior is improper")
    if model.n > model.k and d <= 1e-24 * yty:
        raise ImproperPosterior("y lies in the column space of X; the posterior is improper")
    fit_sq = max(yty - d, 0.0)
    return Precompute(beta_tilde, d, X, X.T @ X, X.T @ y, yty, model.n, model.k1, fit_sq)


def theta_weights(k1: int, k: int, theta: float) -> np.ndarray:
    return np.concatenate([np.full(k1, math.cos(theta)), np.full(k - k1, math.sin(theta))])


def theta_slice(pre: Precompute, k1: int, theta: float) -> ThetaSlice:
    """Eigendecomposition of X_theta^t X_theta and the rotated LS solution.

    Near theta = 0 or pi/2 one group's eigenvalues shrink like the square
    of the angle while u^2 / lam stays finite.  Those terms (below
    ``1e-6 * lam_max``) are never divided out: their total is recovered
    from sum(u^2 / lam) = ||X beta_tilde||^2, which holds for every theta,
    so the integrand is continuous up to both endpoints.
    """
    q = theta_weights(k1, pre.k, theta)
    M = q[:, None] * pre.XtX * q[None, :]
    try:
        lam, V = np.linalg.eigh(M)
    except np.linalg.LinAlgError as exc:
        raise EigenFailure(f"eigendecomposition failed at theta={theta!r}: {exc}") from exc
    lam = np.maximum(lam, 0.0)
    u = V.T @ (q * pre.Xty)
    big = lam > 1e-6 * lam[-1]
    safe = np.where(big, lam, 1.0)
    w = np.where(big, u / safe, 0.0)
    small = ~big
    if np.any(small):
        with np.errstate(divide="ignore", invalid="ignore"):
            direct = np.where(small & (lam > 0), u / np.where(lam > 0, lam, 1.0), 0.0)
        w = np.where(small, direct, w)
    s_small = max(pre.fit_sq - float(np.sum(u[big] ** 2 / lam[big])), 0.0)
    return ThetaSlice(float(theta), lam, V, w, u, q, big, s_small)


def alpha_beta(sl: ThetaSlice, phi):
    """log alpha(phi, theta) and beta(phi, theta) for one slice.

    Vectorized over ``phi``; returns ``(log_alpha, beta, den)`` where
    ``den[i, j] = lam_j sin^2 phi_i + cos^2 phi_i``.
    """
    phi = np.asarray(phi, dtype=float)
    s2 = np.sin(phi) ** 2
    c2 = np.cos(phi) ** 2
    den = sl.lam * s2[..., None] + c2[..., None]
    log_alpha = -0.5 * np.sum(np.log(den) - LOG_2PI, axis=-1)
    u2 = sl.u**2
    lam = np.where(sl.big, sl.lam, 1.0)
    beta = np.sum(np.where(sl.big, u2 / lam, 0.0) / den, axis=-1)
    if not np.all(sl.big):
        tail = sl.s_small - s2 * np.sum(np.where(sl.big, 0.0, u2) / den, axis=-1)
        beta = beta + np.maximum(tail, 0.0) / c2
    return log_alpha, beta, den


def _log_phi_parts(pre: Precompute, sl: ThetaSlice, phi, cfg: QuadratureConfig, powers=(0,), laplace=False):
    log_alpha, beta, den = alpha_beta(sl, phi)
    cphi = np.cos(phi)
    c = pre.d_norm_sq / cphi**2 + beta
    base = log_alpha + np.log(np.sin(phi)) - (pre.n - pre.k) * np.log(cphi)
    if laplace:
        logR = np.stack([log_rho_laplace(c, pre.n, p) for p in powers])
    else:
        logR = log_rho_integrals(c, pre.n, powers, cfg.rho_nodes, cfg.drop_factor)
    return base, logR, den


@dataclass(eq=False)
class ThetaRecord:
    """Moments conditional on one theta node (normalized within the node).

    ``cov`` is the full k x k conditional covariance or only its diagonal.
    ``s1``/``s2`` are E[sigma_i] and E[sigma_i^2].
    """

    log_I: float
    mean: np.ndarray
    cov: np.ndarray
    s1: np.ndarray
    s2: np.ndarray
    bounds: tuple = ()


def record_from_phi(
    log_w, logR, m, var_factor, A, s1_terms, s2_terms, full: bool, bounds=()
) -> ThetaRecord:
    """Collapse per-phi moments to one theta record.

    ``log_w`` are log weights (quadrature weight times integrand without
    the rho factor), ``logR`` the log rho integrals for powers 0, 1, 2,
    ``m`` (p x k) the conditional means of w, ``var_factor`` (p x k) the
    conditional variances of w divided by rho^2, ``A`` maps w to beta.
    """
    L0 = log_w + logR[0]
    top = np.max(L0)
    if not np.isfinite(top):
        k = A.shape[0]
        nan = np.full(k, np.nan)
        return ThetaRecord(-np.inf, nan, np.full((k, k) if full else k, np.nan), np.nan, np.nan, bounds)
    e0 = np.exp(L0 - top)
    Z = e0.sum()
    log_I = float(top + math.log(Z))
    w0 = e0 / Z
    w1 = np.exp(log_w + logR[1] - log_I)
    w2 = np.exp(log_w + logR[2] - log_I)
    mbar = w0 @ m
    evar = w2 @ var_factor
    dev = (m - mbar) * np.sqrt(w0)[:, None]
    mu = A @ mbar
    if full:
        Cw = dev.T @ dev
        Cw[np.diag_indices_from(Cw)] += evar
        cov = A @ Cw @ A.T
        cov = 0.5 * (cov + cov.T)
    else:
        AD = A @ dev.T
        cov = (A * A) @ evar + np.einsum("ij,ij->i", AD, AD)
    s1 = s1_terms @ w1
    s2 = s2_terms @ w2
    return ThetaRecord(log_I, mu, cov, s1, s2, bounds)


def _theta_record(pre: Precompute, theta: float, cfg: QuadratureConfig, full: bool) -> ThetaRecord:
    sl = theta_slice(pre, pre.k1, theta)

    def logf(phi):
        base, logR, _ = _log_phi_parts(pre, sl, phi, cfg, laplace=True)
        return base + logR[0]

    lo, hi = scan_bounds(logf, 0.0, HALF_PI, cfg.phi_scan_nodes, cfg.drop_factor)
    rule = gauss_legendre(cfg.phi_nodes, lo, hi)
    phi = rule.nodes
    base, logR, den = _log_phi_parts(pre, sl, phi, cfg, (0, 1, 2))
    s2 = np.sin(phi) ** 2
    c2 = np.cos(phi) ** 2
    m = s2[:, None] * sl.u / den
    var_factor = (s2 * c2)[:, None] / den
    A = sl.q[:, None] * sl.V
    ct, st = math.cos(theta), math.sin(theta)
    sphi, cphi = np.sin(phi), np.cos(phi)
    s1_terms = np.stack([cphi, sphi * ct, sphi * st])
    s2_terms = np.stack([c2, s2 * ct * ct, s2 * st * st])
    return record_from_phi(np.log(rule.weights) + base, logR, m, var_factor, A, s1_terms, s2_terms, full, (lo, hi))


@dataclass(eq=False)
class Combined:
    log_I: float
    mean: np.ndarray
    cov: np.ndarray
    s1: np.ndarray
    s2: np.ndarray

    @property
    def var(self) -> np.ndarray:
        return np.diagonal(self.cov) if self.cov.ndim == 2 else self.cov

    @property
    def scale_var(self) -> np.ndarray:
        return np.maximum(self.s2 - self.s1**2, 0.0)


def combine_records(weights, records) -> Combined:
    """Law-of-total-moments reduction over theta nodes.

    Sums run through :func:`tree_sum` in node order, so results do not
    depend on how nodes were scheduled across threads.
    """
    lw = np.log(np.asarray(weights, dtype=float)) + np.array([r.log_I for r in records])
    top = np.max(lw)
    if not np.isfinite(top):
        raise ImproperPosterior("marginal integrand vanished on every theta node")
    p = np.exp(lw - top)
    live = [i for i in range(len(records)) if p[i] > 0]
    P = tree_sum(p[i] for i in live)
    pi = {i: p[i] / P for i in live}
    mean = tree_sum(pi[i] * records[i].mean for i in live)
    full = records[live[0]].cov.ndim == 2

    def centered(i):
        dm = records[i].mean - mean
        return records[i].cov + (np.outer(dm, dm) if full else dm * dm)

    cov = tree_sum(pi[i] * centered(i) for i in live)
    s1 = tree_sum(pi[i] * records[i].s1 for i in live)
    s2 = tree_sum(pi[i] * records[i].s2 for i in live)
    return Combined(float(top + math.log(P)), mean, cov, s1, s2)


def change_measure(old: Combined, new: Combined) -> float:
    """Largest relative change between successive theta estimates.

    Means are compared on the scale max(|mean|, sd) so coefficients near
    zero do not force spurious refinement.
    """
    if not (np.isfinite(old.log_I) and np.isfinite(new.log_I)):
        return np.inf
    sd_new = np.sqrt(np.maximum(new.var, 0.0))
    sd_old = np.sqrt(np.maximum(old.var, 0.0))
    tiny = np.finfo(float).tiny
    scale = np.maximum(np.maximum(np.abs(new.mean), sd_new), tiny)
    parts = [
        abs(new.log_I - old.log_I),
        np.max(np.abs(new.mean - old.mean) / scale),
        np.max(np.abs(sd_new - sd_old) / np.maximum(sd_new, tiny)),
        np.max(np.abs(new.s1 - old.s1) / np.maximum(np.abs(new.s1), tiny)),
        np.max(np.abs(new.s2 - old.s2) / np.maximum(np.abs(new.s2), tiny)),
    ]
    return float(max(parts))


def summarize(res, full: bool, info: dict) -> PosteriorSummary:
    comb: Combined = res.value
    var = comb.var
    if np.any(var < -1e-10):
        raise NonPositiveVariance(f"negative posterior variance {var.min():.3g}")
    cov = None
    if full:
        cov = comb.cov.copy()
        idx = np.diag_indices_from(cov)
        cov[idx] = np.maximum(cov[idx], 0.0)
        var = np.diagonal(cov)
    sd = np.sqrt(np.maximum(var, 0.0))
    info = dict(info)
    info.update(
        theta_nodes=res.nodes,
        theta_evaluations=res.evaluations,
        theta_error=res.error,
        converged=res.converged,
    )
    return PosteriorSummary(
        beta_mean=comb.mean,
        beta_sd=sd,
        scale_mean=comb.s1,
        scale_sd=np.sqrt(comb.scale_var),
        log_norm_const=comb.log_I,
        beta_cov=cov,
        info=info,
    )


def fit_two_group(
    model: ModelInput,
    cfg: Optional[QuadratureConfig] = None,
    covariance: bool = True,
    threads: Optional[int] = None,
) -> PosteriorSummary:
    """Posterior moments of a two-group model by the general path.

    ``covariance=False`` skips the k^3 per-node covariance assembly and
    returns only the diagonal (as ``beta_sd``).
    """
    if model.is_mixed:
        raise ValueError("use mixed.fit_mixed for mixed models")
    cfg = cfg or QuadratureConfig()
    pre = precompute(model)
    f = lambda thetas: map_nodes(lambda t: _theta_record(pre, float(t), cfg, covariance), thetas, threads)
    res = adaptive_theta(f, cfg, reduce=combine_records, measure=change_measure)
    return summarize(res, covariance, {"path": "two_group"})


def log_norm_constant(model: ModelInput, cfg: Optional[QuadratureConfig] = None) -> float:
    return fit_two_group(model, cfg, covariance=False).log_norm_const


def posterior_means(model: ModelInput, cfg: Optional[QuadratureConfig] = None) -> np.ndarray:
    return fit_two_group(model, cfg, covariance=False).beta_mean


def posterior_covariance(model: ModelInput, cfg: Optional[QuadratureConfig] = None):
    """Return ``(cov, mean)``."""
    s = fit_two_group(model, cfg, covariance=True)
    return s.beta_cov, s.beta_mean


def scale_moments(model: ModelInput, cfg: Optional[QuadratureConfig] = None):
    """Return ``(mean, sd)`` of (sigma_1, sigma_2, sigma_3)."""
    s = fit_two_group(model, cfg, covariance=False)
    return s.scale_mean, s.scale_sd
