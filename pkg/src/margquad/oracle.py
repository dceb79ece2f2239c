"""Slow, independent reference computations.

Nothing here uses the spherical parametrization or the bound search of
:mod:`margquad.quadrature`: posterior moments are obtained by a plain
tensor grid over the scale parameters, with exact Gaussian moments of the
coefficients at every grid point.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp
from scipy.stats import qmc

from .errors import GridTooCoarse, SingularMatrix
from .model import ModelInput, PosteriorSummary

LOG_2PI = math.log(2.0 * math.pi)


def _prior_precisions(model: ModelInput, sigma: np.ndarray) -> np.ndarray:
    """Diagonal prior precisions, one row per sigma point."""
    s2 = sigma[:, 1:2]
    g1 = np.repeat(1.0 / s2**2, model.k1, axis=1)
    if model.is_mixed:
        g2 = np.broadcast_to(1.0 / model.prior_scales**2, (sigma.shape[0], model.k2))
    else:
        g2 = np.repeat(1.0 / sigma[:, 2:3] ** 2, model.k2, axis=1)
    return np.hstack([g1, g2])


def conditional_moments(model: ModelInput, sigma, _gram=None):
    """Exact Gaussian moments of beta given the scale parameters.

    ``sigma`` is (sigma_1, sigma_2, sigma_3) for two-group models and
    (sigma_1, sigma_2) for mixed ones, or a stack of such rows.  Returns
    ``(mean, cov, log_evidence)`` where log_evidence is log of the
    unnormalized density integrated over beta at that sigma, including the
    half-normal scale prior factors.
    """
    sig = np.asarray(sigma, dtype=float)
    single = sig.ndim == 1
    sig = np.atleast_2d(sig)
    if np.any(sig <= 0):
        raise ValueError("all sigma components must be > 0")
    if _gram is None:
        X = model.X
        _gram = (X.T @ X, X.T @ model.y, float(model.y @ model.y))
    XtX, Xty, yty = _gram
    s1 = sig[:, 0]
    A = XtX[None, :, :] / (s1**2)[:, None, None]
    prec = _prior_precisions(model, sig)
    idx = np.arange(model.k)
    A[:, idx, idx] += prec
    b = Xty[None, :] / (s1**2)[:, None]
    try:
        L = np.linalg.cholesky(A)
    except np.linalg.LinAlgError as exc:
        raise SingularMatrix(f"conditional precision not positive definite: {exc}") from exc
    eye = np.broadcast_to(np.eye(model.k), A.shape)
    Linv = np.linalg.solve(L, eye)
    cov = np.swapaxes(Linv, 1, 2) @ Linv
    mean = np.einsum("nij,nj->ni", cov, b)
    logdet = 2.0 * np.sum(np.log(np.diagonal(L, axis1=1, axis2=2)), axis=1)
    log_ev = (
        -0.5 * np.sum(sig**2, axis=1)
        - model.n * np.log(s1)
        - model.k1 * np.log(sig[:, 1])
        + 0.5 * model.k * LOG_2PI
        - 0.5 * logdet
        - 0.5 * (yty / s1**2 - np.einsum("ni,ni->n", b, mean))
    )
    if not model.is_mixed:
        log_ev -= model.k2 * np.log(sig[:, 2])
    if single:
        return mean[0], cov[0], float(log_ev[0])
    return mean, cov, log_ev


def _panel_rule(edges, per_panel, log_scale=False):
    x, w = np.polynomial.legendre.leggauss(per_panel)
    edges = np.asarray(edges, dtype=float)
    if log_scale:
        edges = np.log(edges)
    h = 0.5 * np.diff(edges)
    nodes = (edges[:-1, None] + h[:, None] * (x[None, :] + 1.0)).reshape(-1)
    weights = (h[:, None] * w[None, :]).reshape(-1)
    if log_scale:
        nodes = np.exp(nodes)
        weights = weights * nodes
    return nodes, weights


@dataclass(frozen=True, eq=False)
class SigmaGrid:
    """Tensor grid over the scale parameters.

    Dimension d is split into panels at ``edges[d]`` with ``per_panel``
    Gauss-Legendre nodes in each, in log(sigma) when ``log_dims[d]``.
    """

    edges: tuple
    per_panel: int = 10
    log_dims: tuple = ()
    first_factor: int = 1  # node multiplier for dimension 0

    @property
    def dim(self) -> int:
        return len(self.edges)

    @property
    def bounds(self) -> tuple:
        return tuple((float(e[0]), float(e[-1])) for e in self.edges)

    def rules(self):
        logs = self.log_dims or (False,) * self.dim
        sizes = [self.per_panel * (self.first_factor if d == 0 else 1) for d in range(self.dim)]
        return [_panel_rule(e, m, lg) for e, m, lg in zip(self.edges, sizes, logs)]

    def points(self):
        rules = self.rules()
        mesh = np.meshgrid(*[r[0] for r in rules], indexing="ij")
        wmesh = np.meshgrid(*[r[1] for r in rules], indexing="ij")
        pts = np.stack([m.reshape(-1) for m in mesh], axis=1)
        w = np.prod(np.stack([m.reshape(-1) for m in wmesh], axis=1), axis=1)
        return pts, w

    def refined(self, factor=2) -> "SigmaGrid":
        return SigmaGrid(self.edges, factor * self.per_panel, self.log_dims, self.first_factor)


def _log_ev_batched(model, pts, chunk=50000):
    X = model.X
    gram = (X.T @ X, X.T @ model.y, float(model.y @ model.y))
    out = np.empty(pts.shape[0])
    for s in range(0, pts.shape[0], chunk):
        out[s : s + chunk] = conditional_moments(model, pts[s : s + chunk], gram)[2]
    return out


def _scan(model, axes_pts):
    mesh = np.meshgrid(*axes_pts, indexing="ij")
    pts = np.stack([m.reshape(-1) for m in mesh], axis=1)
    return _log_ev_batched(model, pts).reshape(tuple(len(a) for a in axes_pts))


def _profiles(le):
    """Per-dimension profile: max of the scan over all other dimensions."""
    dim = le.ndim
    return [np.max(le, axis=tuple(i for i in range(dim) if i != d)) for d in range(dim)]


def _marginals(le):
    """Per-dimension log marginal of the scan (sum over the other dimensions)."""
    dim = le.ndim
    return [logsumexp(le, axis=tuple(i for i in range(dim) if i != d)) for d in range(dim)]


def _box(prof, top, log_drop):
    idx = np.nonzero(prof >= top - log_drop)[0]
    return idx[0] - 1, idx[-1] + 1


PANEL_LEVELS = tuple(0.5 * j * j for j in range(1, 9))  # about one sd apart


def sigma_grid(
    model: ModelInput,
    per_panel=6,
    first_factor=5,
    coarse=36,
    fine=32,
    span=(1e-5, 30.0),
    log_drop=math.log(1e16),
) -> SigmaGrid:
    """Composite Gauss-Legendre tensor grid on a box found by two scans.

    A log-spaced scan over ``span`` brackets the region within
    ``exp(log_drop)`` of the maximum; a second scan with ``fine`` points
    per dimension inside that bracket trims it to one cell beyond the last
    point above the threshold.  The noise scale is integrated in
    log(sigma_1) on one panel, where its marginal is close to Gaussian and
    vanishes quickly toward 0.  Prior scales have a finite density at 0
    and are integrated linearly, from 0 when the box reaches down there,
    on panels whose edges sit where the scanned marginal has dropped by
    0.5 j^2 log-units from its peak (j = 1..8), roughly one posterior sd
    apart, plus panels graded geometrically toward 0.  Panels are at most
    one scanned-marginal sd wide in the bulk and three in the tails.  The first dimension gets ``first_factor`` times ``per_panel``
    nodes.
    """
    dim = 2 if model.is_mixed else 3
    g = np.geomspace(span[0], span[1], coarse)
    le = _scan(model, [g] * dim)
    top = np.max(le)
    box = []
    for prof in _profiles(le):
        lo_i, hi_i = _box(prof, top, log_drop)
        if hi_i >= coarse:
            raise GridTooCoarse("posterior mass reaches the top of the sigma scan")
        box.append((0.0 if lo_i < 0 else g[lo_i], g[hi_i]))
    scan = [np.geomspace(max(box[0][0], span[0]), box[0][1], fine)]
    for lo, hi in box[1:]:
        scan.append(np.linspace(lo, hi, fine + 1)[1:] if lo == 0 else np.linspace(lo, hi, fine))
    le = _scan(model, scan)
    top = np.max(le)
    X = model.X
    lam_max = float(np.linalg.eigvalsh(X.T @ X)[-1])
    edges_all = []
    margs = _marginals(le)
    for d, prof in enumerate(_profiles(le)):
        pts = scan[d]
        lo_i, hi_i = _box(prof, top, log_drop)
        if d == 0:
            ratio = pts[1] / pts[0]
            lo = pts[lo_i] if lo_i >= 0 else pts[0] / ratio
            hi = pts[hi_i] if hi_i < len(pts) else pts[-1] * ratio
            edges = np.array([lo, hi])
        else:
            step = pts[1] - pts[0]
            lo = pts[lo_i] if lo_i >= 0 else max(pts[0] - step, 0.0)
            hi = pts[hi_i] if hi_i < len(pts) else pts[-1] + step
            if lo <= 2 * step:
                lo = 0.0
            marg = margs[d]
            peak = int(np.argmax(marg))
            cuts = {lo, hi}
            for level in PANEL_LEVELS:
                below = marg < marg[peak] - level
                right = np.nonzero(below[peak:])[0]
                left = np.nonzero(below[:peak])[0]
                if right.size:
                    cuts.add(pts[peak + right[0]])
                if left.size:
                    cuts.add(pts[left[-1]])
            if lo == 0.0:
                # the marginal in a prior scale has complex singularities
                # near +-i sigma_1 / sqrt(lambda); grade panels toward 0
                first = min(c for c in cuts if c > 0)
                c = edges_all[0][0] / math.sqrt(lam_max) / 8.0
                while c < first:
                    cuts.add(c)
                    c *= 2.0
            edges = np.array(sorted(c for c in cuts if lo <= c <= hi))
            wts = np.exp(marg - marg.max())
            wts /= wts.sum()
            mu = wts @ pts
            width = max(math.sqrt(max(wts @ (pts - mu) ** 2, 0.0)), step)
            bulk = pts[marg >= marg.max() - PANEL_LEVELS[3]]
            xl, xr = bulk[0] - step, bulk[-1] + step
            pieces = [edges[:1]]
            for a, b in zip(edges[:-1], edges[1:]):
                cap = width if (b > xl and a < xr) else 3.0 * width
                n_sub = max(1, int(math.ceil((b - a) / cap)))
                pieces.append(np.linspace(a, b, n_sub + 1)[1:])
            edges = np.concatenate(pieces)
        edges.setflags(write=False)
        edges_all.append(edges)
    return SigmaGrid(tuple(edges_all), per_panel, (True,) + (False,) * (dim - 1), first_factor)


def _prior_rows(model: ModelInput, outer: np.ndarray) -> np.ndarray:
    """Prior precisions for each row of prior-scale values."""
    g1 = np.repeat(1.0 / outer[:, :1] ** 2, model.k1, axis=1)
    if model.is_mixed:
        g2 = np.broadcast_to(1.0 / model.prior_scales**2, (outer.shape[0], model.k2))
    else:
        g2 = np.repeat(1.0 / outer[:, 1:2] ** 2, model.k2, axis=1)
    return np.hstack([g1, g2])


def _grid_blocks(model: ModelInput, grid: SigmaGrid, chunk=512):
    """Log weights and eigen-factors of the conditional Gaussians on a grid.

    For each combination of prior scales the prior precision P is fixed,
    and one eigendecomposition P^-1/2 X^t X P^-1/2 = Q diag(g) Q^t gives
    the Gaussian moments for every sigma_1 in closed form.  The values
    agree with :func:`conditional_moments` (dense Cholesky) point by point.
    """
    rules = grid.rules()
    s1n, s1w = rules[0]
    outer_rules = rules[1:]
    mesh = np.meshgrid(*[r[0] for r in outer_rules], indexing="ij")
    wmesh = np.meshgrid(*[r[1] for r in outer_rules], indexing="ij")
    outer = np.stack([m_.reshape(-1) for m_ in mesh], axis=1)
    ow = np.prod(np.stack([m_.reshape(-1) for m_ in wmesh], axis=1), axis=1)

    X = model.X
    XtX, Xty, yty = X.T @ X, X.T @ model.y, float(model.y @ model.y)
    n, k, k1 = model.n, model.k, model.k1
    S2 = s1n**2
    base_s1 = -0.5 * S2 - n * np.log(s1n) + np.log(s1w) - 0.5 * yty / S2

    blocks = []
    for st in range(0, outer.shape[0], chunk):
        o = outer[st : st + chunk]
        prec = _prior_rows(model, o)
        dh = 1.0 / np.sqrt(prec)
        G = dh[:, :, None] * XtX[None] * dh[:, None, :]
        g, Q = np.linalg.eigh(G)
        g = np.maximum(g, 0.0)
        h = np.einsum("jki,jk->ji", Q, dh * Xty)
        gs = g[:, None, :] + S2[None, :, None]  # (J, m1, k)
        log_o = -0.5 * np.sum(o**2, axis=1) - k1 * np.log(o[:, 0]) - 0.5 * np.sum(np.log(prec), axis=1)
        if not model.is_mixed:
            log_o -= model.k2 * np.log(o[:, 1])
        log_o += np.log(ow[st : st + chunk]) + 0.5 * k * LOG_2PI
        le = (
            log_o[:, None]
            + base_s1[None, :]
            - 0.5 * np.sum(np.log(gs / S2[None, :, None]), axis=2)
            + 0.5 * np.sum(h[:, None, :] ** 2 / gs, axis=2) / S2[None, :]
        )
        A = dh[:, :, None] * Q  # beta = A z, z | sigma independent normal
        blocks.append((le, A, g, h, o))

    top = max(float(np.max(b_[0])) for b_ in blocks)
    Z = sum(float(np.exp(b_[0] - top).sum()) for b_ in blocks)
    log_I = top + math.log(Z)
    return blocks, log_I, s1n, S2


def _grid_moments(model: ModelInput, grid: SigmaGrid, assemble="centered", chunk=512):
    """Posterior moments on a tensor grid (see :func:`_grid_blocks`)."""
    blocks, log_I, s1n, S2 = _grid_blocks(model, grid, chunk)
    k = model.k

    def rotated(g, h):
        gs = g[:, None, :] + S2[None, :, None]
        return h[:, None, :] / gs, S2[None, :, None] / gs

    mean = np.zeros(k)
    ecov = np.zeros((k, k))
    emm = np.zeros((k, k))
    s1 = np.zeros(grid.dim)
    s2 = np.zeros(grid.dim)
    for le, A, g, h, o in blocks:
        p = np.exp(le - log_I)
        zm, zv = rotated(g, h)
        B = zm @ np.swapaxes(A, 1, 2)  # (J, m1, k) conditional means of beta
        pf = p.reshape(-1)
        Bf = B.reshape(-1, k)
        mean += pf @ Bf
        pv = np.einsum("jm,jmb->jb", p, zv)
        Ap = np.swapaxes(A * pv[:, None, :], 0, 1).reshape(k, -1)
        ecov += Ap @ np.swapaxes(A, 0, 1).reshape(k, -1).T
        emm += (Bf * pf[:, None]).T @ Bf
        po = p.sum(axis=1)
        pm = p.sum(axis=0)
        s1[0] += pm @ s1n
        s2[0] += pm @ S2
        s1[1:] += po @ o
        s2[1:] += po @ o**2
    if assemble == "centered":
        cmean = np.zeros((k, k))
        for le, A, g, h, o in blocks:
            pf = np.exp(le - log_I).reshape(-1)
            zm, _ = rotated(g, h)
            Bf = (zm @ np.swapaxes(A, 1, 2)).reshape(-1, k) - mean
            cmean += (Bf * pf[:, None]).T @ Bf
        cov = ecov + cmean
    elif assemble == "raw":
        cov = ecov + emm - np.outer(mean, mean)
    else:
        raise ValueError(f"unknown assembly {assemble!r}")
    cov = 0.5 * (cov + cov.T)
    return log_I, mean, cov, s1, s2


def brute_force_summary(
    model: ModelInput,
    grid: SigmaGrid | None = None,
    self_check=True,
    per_panel=6,
    assemble="centered",
    escalations=1,
) -> PosteriorSummary:
    """Posterior summary by dense quadrature over the scale parameters.

    With ``self_check`` the computation is repeated with twice as many
    nodes per panel and the finer result is returned.  If some mean moves
    by more than 1e-7 on the scale max(|mean|, sd), the check is retried
    from the doubled grid up to ``escalations`` times before
    :class:`GridTooCoarse` is raised.

    The normalizer follows the package convention: for mixed models the
    fixed prior scales do not contribute their own normalizing factors.
    """
    if grid is None:
        grid = sigma_grid(model, per_panel=per_panel)
    res = _grid_moments(model, grid, assemble)
    info = {"path": "oracle", "panels": [len(e) - 1 for e in grid.edges]}
    if self_check:
        for attempt in range(escalations + 1):
            fine = grid.refined()
            res2 = _grid_moments(model, fine, assemble)
            sd = np.sqrt(np.maximum(np.diagonal(res2[2]), 0.0))
            delta = float(np.max(np.abs(res2[1] - res[1]) / np.maximum(np.abs(res2[1]), sd)))
            grid, res = fine, res2
            if delta <= 1e-7:
                break
        else:
            raise GridTooCoarse(f"doubling the sigma grid moved a mean by {delta:.3g} (relative)")
        info["self_check_delta"] = delta
    info["per_panel"] = grid.per_panel
    log_I, mean, cov, s1, s2 = res
    return PosteriorSummary(
        beta_mean=mean,
        beta_sd=np.sqrt(np.maximum(np.diagonal(cov), 0.0)),
        scale_mean=s1,
        scale_sd=np.sqrt(np.maximum(s2 - s1**2, 0.0)),
        log_norm_const=log_I,
        beta_cov=cov,
        info=info,
    )


def posterior_draws(model: ModelInput, size: int, seed=0, grid: SigmaGrid | None = None, per_panel=6) -> dict:
    """Joint draws of (sigma, beta) from the grid-discretized posterior.

    A grid node is picked with probability proportional to its quadrature
    weight times the marginal density, then beta is drawn from the exact
    conditional Gaussian at that node.  Returns ``{"beta", "sigma"}``.
    """
    if grid is None:
        grid = sigma_grid(model, per_panel=per_panel)
    blocks, log_I, s1n, _ = _grid_blocks(model, grid)
    rng = np.random.default_rng(seed)
    probs = np.concatenate([np.exp(b_[0] - log_I).reshape(-1) for b_ in blocks])
    probs /= probs.sum()
    pick = np.sort(rng.choice(probs.size, size=size, p=probs))
    m1 = s1n.size
    beta = np.empty((size, model.k))
    sigma = np.empty((size, grid.dim))
    start = 0
    pos = 0
    for le, A, g, h, o in blocks:
        stop = start + le.size
        hi = np.searchsorted(pick, stop)
        sel = pick[pos:hi] - start
        j, m = np.divmod(sel, m1)
        s2 = s1n[m] ** 2
        gs = g[j] + s2[:, None]
        z = h[j] / gs + np.sqrt(s2[:, None] / gs) * rng.standard_normal((sel.size, model.k))
        beta[pos:hi] = np.einsum("nij,nj->ni", A[j], z)
        sigma[pos:hi, 0] = s1n[m]
        sigma[pos:hi, 1:] = o[j]
        start, pos = stop, hi
    order = rng.permutation(size)
    return {"beta": beta[order], "sigma": sigma[order]}


def gaussian_lemma_check(C, beta_tilde, mc_points=2**16, seed=0, quad_nodes=96, proposal_scale=1.2) -> dict:
    """Check the three Gaussian integral identities for exp(-(b - bt)^t C (b - bt)).

    The integral is pi^(k/2) / sqrt(det C), the first moment that times
    bt and the second moment that times (C^-1 / 2 + bt bt^t).  Each is
    evaluated two ways: a product of 1-D Gauss-Legendre rules in the
    eigenbasis of C, and scrambled-Sobol importance sampling from a widened
    normal proposal.  Returned deviations are relative (moments on the
    scale of the exact values).
    """
    C = np.asarray(C, dtype=float)
    bt = np.asarray(beta_tilde, dtype=float)
    k = bt.size
    lam, Q = np.linalg.eigh(0.5 * (C + C.T))
    if lam[0] <= 0:
        raise ValueError("C must be positive definite")
    mass = math.pi ** (k / 2) / math.sqrt(float(np.prod(lam)))
    second = 0.5 * np.linalg.inv(C) + np.outer(bt, bt)
    sd = np.sqrt(np.diagonal(0.5 * np.linalg.inv(C)))
    mscale = np.maximum(np.abs(bt), sd)
    sscale = np.max(np.abs(second))

    def deviations(I, m1, m2):
        return {
            "integral": abs(I - mass) / mass,
            "first_moment": float(np.max(np.abs(m1 / I - bt) / mscale)),
            "second_moment": float(np.max(np.abs(m2 / I - second)) / sscale),
        }

    # tensor quadrature: in z = Q^t (b - bt) the integrand factorizes
    x, w = np.polynomial.legendre.leggauss(quad_nodes)
    halfw = 10.0 / np.sqrt(lam)
    zs = x[None, :] * halfw[:, None]
    ws = w[None, :] * halfw[:, None]
    g = np.exp(-lam[:, None] * zs**2)
    i0 = np.sum(ws * g, axis=1)
    i1 = np.sum(ws * g * zs, axis=1)
    i2 = np.sum(ws * g * zs**2, axis=1)
    I = float(np.prod(i0))
    Ez = np.array([i1[j] * np.prod(np.delete(i0, j)) for j in range(k)])
    Ezz = np.empty((k, k))
    for a in range(k):
        for b in range(k):
            if a == b:
                Ezz[a, b] = i2[a] * np.prod(np.delete(i0, a))
            else:
                Ezz[a, b] = i1[a] * i1[b] * np.prod(np.delete(i0, [a, b]))
    m1 = I * bt + Q @ Ez
    m2 = I * np.outer(bt, bt) + np.outer(bt, Q @ Ez) + np.outer(Q @ Ez, bt) + Q @ Ezz @ Q.T
    quad = deviations(I, m1, m2)

    # importance sampling with N(bt, s^2 (2C)^-1)
    sob = qmc.Sobol(k, scramble=True, seed=seed)
    u = sob.random(mc_points)
    from scipy.stats import norm

    zstd = norm.ppf(u)
    L = np.linalg.cholesky(np.linalg.inv(2.0 * C))
    s = proposal_scale
    b = bt + s * zstd @ L.T
    d = b - bt
    log_target = -np.einsum("ni,ij,nj->n", d, C, d)
    log_prop = (
        -0.5 * np.sum(zstd**2, axis=1)
        - 0.5 * k * LOG_2PI
        - k * math.log(s)
        - float(np.sum(np.log(np.diagonal(L))))
    )
    wt = np.exp(log_target - log_prop)
    Imc = float(np.mean(wt))
    m1mc = (wt @ b) / mc_points
    m2mc = (b * wt[:, None]).T @ b / mc_points
    mc = deviations(Imc, m1mc, m2mc)
    return {"exact_integral": mass, "quadrature": quad, "monte_carlo": mc}
