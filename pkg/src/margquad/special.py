"""Fast path for two-group models with one nonzero per row in each group.

With one-hot style designs X^t X = [[D1, B^t], [B, D2]] where D1 and D2
are diagonal.  The scale parameters are written as

    (sigma_1, sigma_2, sigma_3) = rho (cos(theta), nu, sin(theta)),

and for fixed (nu, theta) the coefficient precision (times sigma_1^2) is
M = X^t X + diag(cos^2 / nu^2 I_1, cot^2 I_2).  Its determinant follows
from the Schur complement on the diagonal group-2 block and its inverse
from the block (Sherman-Morrison-Woodbury) form, so the only dense work
is on k1 x k1 matrices.  For fixed theta the Schur complement is
S = D1 - B^t P2 B + cos^2/nu^2, and one eigendecomposition of
D1 - B^t P2 B serves every nu node.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import SingularMatrix
from .model import ModelInput, PosteriorSummary
from .quadrature import (
    QuadratureConfig,
    adaptive_theta,
    gauss_legendre,
    log_rho_integrals,
    log_rho_laplace,
    map_nodes,
    peak_bounds_halfline,
)
from .twogroup import ThetaRecord, change_measure, combine_records, precompute, summarize

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True, eq=False)
class StructuredDesign:
    D1: np.ndarray  # diagonal of X1^t X1
    D2: np.ndarray  # diagonal of X2^t X2
    B: np.ndarray  # X2^t X1, shape (k2, k1)
    Xty: np.ndarray
    y_norm_sq: float

    @property
    def k1(self) -> int:
        return self.D1.shape[0]

    @property
    def k2(self) -> int:
        return self.D2.shape[0]

    def gram(self) -> np.ndarray:
        return np.block([[np.diag(self.D1), self.B.T], [self.B, np.diag(self.D2)]])


@dataclass(frozen=True)
class NuThetaNode:
    nu2: float
    theta: float


def _one_per_row(A: np.ndarray):
    nz = A != 0
    if np.any(nz.sum(axis=1) > 1):
        return None
    # all-zero rows map to column 0 with value 0 and contribute nothing
    col = np.argmax(nz, axis=1)
    return col, A[np.arange(A.shape[0]), col]


def detect_structure(model: ModelInput) -> Optional[StructuredDesign]:
    """Factored Gram blocks if every row of X1 and X2 has at most one nonzero."""
    if model.is_mixed:
        return None
    r1 = _one_per_row(model.X1)
    r2 = _one_per_row(model.X2)
    if r1 is None or r2 is None:
        return None
    (c1, v1), (c2, v2) = r1, r2
    D1 = np.bincount(c1, weights=v1 * v1, minlength=model.k1)
    D2 = np.bincount(c2, weights=v2 * v2, minlength=model.k2)
    B = np.zeros((model.k2, model.k1))
    np.add.at(B, (c2, c1), v1 * v2)
    y = model.y
    Xty = np.concatenate(
        [
            np.bincount(c1, weights=v1 * y, minlength=model.k1),
            np.bincount(c2, weights=v2 * y, minlength=model.k2),
        ]
    )
    return StructuredDesign(D1, D2, B, Xty, float(y @ y))


def _node_blocks(sd: StructuredDesign, node: NuThetaNode):
    c2 = math.cos(node.theta) ** 2
    a = c2 / node.nu2**2
    with np.errstate(divide="ignore"):
        b = c2 / math.sin(node.theta) ** 2
    P2 = 1.0 / (sd.D2 + b)
    S = np.diag(sd.D1 + a) - sd.B.T @ (P2[:, None] * sd.B)
    S = 0.5 * (S + S.T)
    try:
        L = np.linalg.cholesky(S)
    except np.linalg.LinAlgError as exc:
        raise SingularMatrix(f"Schur complement not positive definite at {node}") from exc
    return P2, L


def schur_logdet(sd: StructuredDesign, node: NuThetaNode) -> float:
    """log det(X^t X + R) via the Schur complement of the diagonal block."""
    P2, L = _node_blocks(sd, node)
    return float(-np.sum(np.log(P2)) + 2.0 * np.sum(np.log(np.diagonal(L))))


def smw_solve(sd: StructuredDesign, node: NuThetaNode, rhs) -> np.ndarray:
    """Solve (X^t X + R) x = rhs with one k1 x k1 factorization.

    Block elimination of the diagonal group-2 block: the correction to
    diag(., P2) is [I; -P2 B] S^-1 [I, -B^t P2].
    """
    P2, L = _node_blocks(sd, node)
    rhs = np.asarray(rhs, dtype=float)
    r1, r2 = rhs[: sd.k1], rhs[sd.k1 :]
    t = r1 - sd.B.T @ (P2 * r2)
    y_ = np.linalg.solve(L, t)
    x1 = np.linalg.solve(L.T, y_)
    x2 = P2 * (r2 - sd.B @ x1)
    return np.concatenate([x1, x2])


@dataclass(eq=False)
class _ThetaSetup:
    theta: float
    c2: float
    s2: float
    E: np.ndarray  # 1 / (D2 sin^2 + cos^2)
    lam: np.ndarray  # eigenvalues of D1 - B^t P2 B
    U: np.ndarray
    Fu: np.ndarray  # [U; -P2 B U]
    a1: np.ndarray  # U^t beta_tilde_1
    ag: np.ndarray  # U^t B^t E beta_tilde_2
    base: float


def _setup(sd: StructuredDesign, pre, theta: float) -> _ThetaSetup:
    c2 = math.cos(theta) ** 2
    s2 = math.sin(theta) ** 2
    E = 1.0 / (sd.D2 * s2 + c2)
    P2 = s2 * E
    PB = P2[:, None] * sd.B
    K = np.diag(sd.D1) - sd.B.T @ PB
    lam, U = np.linalg.eigh(0.5 * (K + K.T))
    lam = np.maximum(lam, 0.0)
    bt1, bt2 = pre.beta_tilde[: sd.k1], pre.beta_tilde[sd.k1 :]
    g = sd.B.T @ (E * bt2)
    Fu = np.vstack([U, -PB @ U])
    base = 0.5 * (sd.k1 + sd.k2) * LOG_2PI - 0.5 * float(np.sum(np.log(sd.D2 * s2 + c2)))
    base -= (pre.n - sd.k1 - sd.k2) * 0.5 * math.log(c2)
    return _ThetaSetup(theta, c2, s2, E, lam, U, Fu, U.T @ bt1, U.T @ g, base)


def _nu_parts(sd, pre, st: _ThetaSetup, nu, cfg, powers=(0,), laplace=False):
    """Per-nu quantities: log weight without the radial factor, log radial
    integrals, conditional means and the Schur eigen-denominators."""
    nu = np.asarray(nu, dtype=float)
    v2 = nu * nu
    den = v2[:, None] * st.lam + st.c2
    z = (st.a1 - v2[:, None] * st.ag) / den
    x1 = z @ st.U.T
    bt2 = pre.beta_tilde[sd.k1 :]
    x2 = st.E * bt2 - st.s2 * st.E * (x1 @ sd.B.T)
    x = np.hstack([x1, x2])
    c = pre.d_norm_sq / st.c2 + x @ sd.Xty
    c = np.maximum(c, 0.0)
    mean = pre.beta_tilde - st.c2 * x
    lp = np.log1p(v2)
    if laplace:
        logR = np.stack([log_rho_laplace(c * (1.0 + v2), pre.n, p) for p in powers])
    else:
        logR = log_rho_integrals(c * (1.0 + v2), pre.n, powers, cfg.rho_nodes, cfg.drop_factor)
    for i, p in enumerate(powers):
        logR[i] += 0.5 * (pre.n - 3 - p) * lp
    log_w = st.base - 0.5 * np.sum(np.log(den), axis=1)
    return log_w, logR, mean, den


def _record(sd, pre, theta, cfg, cov_mode) -> ThetaRecord:
    k = sd.k1 + sd.k2
    if math.cos(theta) < 1e-12:
        # sigma_1 -> 0: the integrand vanishes faster than any power
        nan = np.full(k, np.nan)
        return ThetaRecord(-np.inf, nan, nan if cov_mode is False else np.full((k, k), np.nan), np.nan, np.nan)
    st = _setup(sd, pre, theta)

    def logf(nu):
        lw, logR, _, _ = _nu_parts(sd, pre, st, nu, cfg, laplace=True)
        return lw + logR[0]

    lo, hi, peak = peak_bounds_halfline(logf, cfg.drop_factor, with_peak=True)
    # nu is a scale ratio with a long right tail, so integrate in a log
    # variable: u = log(nu) away from zero, else nu = a (e^u - 1)
    if lo > 0.0:
        rule = gauss_legendre(cfg.nu_nodes, math.log(lo), math.log(hi))
        nu = np.exp(rule.nodes)
        log_rw = np.log(rule.weights) + rule.nodes
    else:
        a = max(peak, 1e-3 * hi)
        rule = gauss_legendre(cfg.nu_nodes, 0.0, math.log1p(hi / a))
        nu = a * np.expm1(rule.nodes)
        log_rw = np.log(rule.weights) + math.log(a) + rule.nodes
    lw, logR, mean, den = _nu_parts(sd, pre, st, nu, cfg, (0, 1, 2))
    L0 = log_rw + lw
    top = np.max(L0 + logR[0])
    w0 = np.exp(L0 + logR[0] - top)
    Z = w0.sum()
    log_I = float(top + math.log(Z))
    w0 /= Z
    w1 = np.exp(L0 + logR[1] - log_I)
    w2 = np.exp(L0 + logR[2] - log_I)

    mbar = w0 @ mean
    dev = (mean - mbar) * np.sqrt(w0)[:, None]
    h = (st.c2 * nu * nu)[:, None] / den  # Schur part of cos^2 M^-1 in the U basis
    hbar = w2 @ h
    diag0 = np.concatenate([np.zeros(sd.k1), st.c2 * st.s2 * st.E]) * w2.sum()
    if cov_mode is False:
        cov = diag0 + (st.Fu**2) @ hbar + np.sum(dev * dev, axis=0)
    else:
        cov = (st.Fu * hbar) @ st.Fu.T + dev.T @ dev
        cov[np.diag_indices_from(cov)] += diag0
        cov = 0.5 * (cov + cov.T)
    ct, s_t = math.cos(theta), math.sin(theta)
    s1 = np.array([ct * w1.sum(), w1 @ nu, s_t * w1.sum()])
    s2 = np.array([ct * ct * w2.sum(), w2 @ (nu * nu), s_t * s_t * w2.sum()])
    return ThetaRecord(log_I, mbar, cov, s1, s2, (lo, hi))


def special_moments(
    model: ModelInput,
    cfg: Optional[QuadratureConfig] = None,
    covariance: bool = True,
    threads: Optional[int] = None,
    design: Optional[StructuredDesign] = None,
) -> PosteriorSummary:
    """Posterior moments of a structured two-group model.

    The groups are swapped internally when k1 > k2 so that the dense
    Schur block is the smaller one; results are reported in the original
    order.
    """
    cfg = cfg or QuadratureConfig()
    if model.k1 > model.k2:
        s = special_moments(model.swapped(), cfg, covariance, threads)
        return _unswap(s, model.k1, model.k2)
    sd = design if design is not None else detect_structure(model)
    if sd is None:
        raise ValueError("design does not have one nonzero per row in each group")
    pre = precompute(model)
    f = lambda thetas: map_nodes(lambda t: _record(sd, pre, float(t), cfg, covariance), thetas, threads)
    res = adaptive_theta(f, cfg, reduce=combine_records, measure=change_measure)
    return summarize(res, covariance, {"path": "special"})


def _unswap(s: PosteriorSummary, k1: int, k2: int) -> PosteriorSummary:
    # swapped model has its k2 old-group-2 columns first
    perm = np.concatenate([np.arange(k2, k2 + k1), np.arange(k2)])
    sperm = np.array([0, 2, 1])
    cov = None if s.beta_cov is None else s.beta_cov[np.ix_(perm, perm)]
    return PosteriorSummary(
        beta_mean=s.beta_mean[perm],
        beta_sd=s.beta_sd[perm],
        scale_mean=s.scale_mean[sperm],
        scale_sd=s.scale_sd[sperm],
        log_norm_const=s.log_norm_const,
        beta_cov=cov,
        info=dict(s.info, swapped=True),
    )
