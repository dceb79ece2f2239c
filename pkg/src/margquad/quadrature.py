"""Quadrature rules and adaptive integration bounds.

Everything that touches the radial integrand

    psi(rho; c, n) = rho**(2 - n) * exp(-rho**2 / 2 - c / (2 rho**2))

works in log space: for n ~ 1e5 the raw integrand over/underflows any
floating format.
"""
from __future__ import annotations

import math
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields, replace
from fractions import Fraction
from functools import lru_cache
from typing import Callable, Optional

import numpy as np
from scipy.optimize import minimize_scalar
from scipy.special import logsumexp

from .errors import BisectionFailure, ImproperPosterior, InvalidInterval, NoConvergence


@dataclass(frozen=True)
class QuadRule:
    nodes: np.ndarray
    weights: np.ndarray
    a: float
    b: float

    def integrate(self, f):
        return self.weights @ f(self.nodes)


@dataclass(frozen=True)
class QuadratureConfig:
    """Node counts and tolerances for the marginal integrals.

    ``nu_nodes`` is the per-slice rule size for the structured fast path.
    """

    rho_nodes: int = 80
    phi_nodes: int = 80
    phi_scan_nodes: int = 100
    theta_nodes: int = 10
    drop_factor: float = 1e20
    theta_tol: float = 1e-8
    theta_doubling: bool = True
    theta_max_nodes: int = 512
    nu_nodes: int = 80

    def __post_init__(self):
        for name in ("rho_nodes", "phi_nodes", "phi_scan_nodes", "theta_nodes", "theta_max_nodes", "nu_nodes"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not self.drop_factor > 1:
            raise ValueError("drop_factor must be > 1")
        if not self.theta_tol > 0:
            raise ValueError("theta_tol must be > 0")

    def doubled(self) -> "QuadratureConfig":
        """Every node count doubled (used for self-consistency checks)."""
        return replace(
            self,
            rho_nodes=2 * self.rho_nodes,
            phi_nodes=2 * self.phi_nodes,
            phi_scan_nodes=2 * self.phi_scan_nodes,
            theta_nodes=2 * self.theta_nodes,
            theta_max_nodes=2 * self.theta_max_nodes,
            nu_nodes=2 * self.nu_nodes,
        )

    @classmethod
    def from_mapping(cls, d: dict) -> "QuadratureConfig":
        known = {f.name: f.type for f in fields(cls)}
        kw = {}
        for key, val in d.items():
            if key not in known:
                raise KeyError(f"unknown quadrature option {key!r}")
            default = getattr(cls, key)
            if isinstance(default, bool):
                if isinstance(val, str):
                    val = val.strip().lower() in ("1", "true", "yes", "on")
                kw[key] = bool(val)
            elif isinstance(default, int):
                kw[key] = int(val)
            else:
                kw[key] = float(val)
        return cls(**kw)


# ---------------------------------------------------------------------------
# rules


@lru_cache(maxsize=64)
def _legendre_ref(m: int):
    x, w = np.polynomial.legendre.leggauss(m)
    x.setflags(write=False)
    w.setflags(write=False)
    return x, w


def _check_interval(a, b):
    if not (np.isfinite(a) and np.isfinite(b)) or not a < b:
        raise InvalidInterval(f"need finite a < b, got ({a}, {b})")


def gauss_legendre(m: int, a: float = -1.0, b: float = 1.0) -> QuadRule:
    """m-point Gauss-Legendre rule on (a, b); exact for degree <= 2m - 1."""
    if m < 1:
        raise ValueError("m must be >= 1")
    _check_interval(a, b)
    x, w = _legendre_ref(int(m))
    half = 0.5 * (b - a)
    return QuadRule(a + half * (x + 1.0), half * w, float(a), float(b))


@lru_cache(maxsize=64)
def _clenshaw_curtis_ref(m: int):
    j = np.arange(m + 1)
    # sin form keeps x exactly antisymmetric and makes order-m points
    # bitwise equal to the even-indexed order-2m points
    x = np.sin(np.pi * (m - 2 * j) / (2 * m))
    t = j * np.pi / m
    w = np.ones(m + 1)
    for kk in range(1, m // 2 + 1):
        bk = 1.0 if 2 * kk == m else 2.0
        w -= bk / (4 * kk * kk - 1) * np.cos(2 * kk * t)
    c = np.full(m + 1, 2.0)
    c[0] = c[-1] = 1.0
    w *= c / m
    x.setflags(write=False)
    w.setflags(write=False)
    return x, w


def chebyshev_practical(m: int, a: float = -1.0, b: float = 1.0) -> QuadRule:
    """Clenshaw-Curtis rule of order m (m + 1 practical Chebyshev points).

    Nodes include both endpoints and increase from a to b.  The order-m
    nodes coincide bitwise with the even-indexed nodes of order 2m.
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    _check_interval(a, b)
    x, w = _clenshaw_curtis_ref(int(m))
    half = 0.5 * (b - a)
    nodes = a + half * (1.0 - x)
    return QuadRule(nodes, half * w, float(a), float(b))


# ---------------------------------------------------------------------------
# radial integrand


def log_psi(rho, c, n):
    """log of rho**(2-n) exp(-rho^2/2 - c/(2 rho^2))."""
    rho = np.asarray(rho, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = -0.5 * rho * rho - 0.5 * c / (rho * rho) - (n - 2) * np.log(rho)
    return out


def rho_peak(c, n):
    """Location of the maximum of psi(.; c, n).

    Root of rho**4 + (n - 2) rho**2 - c = 0.  Uses the cancellation-free
    form of the quadratic root when n > 2.
    """
    c = np.asarray(c, dtype=float)
    m = n - 2.0
    disc = np.sqrt(4.0 * c + m * m)
    with np.errstate(divide="ignore", invalid="ignore"):
        if m > 0:
            r2 = np.where(c > 0, 2.0 * c / (disc + m), 0.0)
        else:
            r2 = 0.5 * (disc - m)
    out = np.sqrt(r2)
    return float(out) if out.ndim == 0 else out


def _log_psi_pos(rho, c, n):
    # rho > 0 guaranteed by the callers
    return -0.5 * rho * rho - 0.5 * c / (rho * rho) - (n - 2) * np.log(rho)


def bisect_drop(logf, inside, outside, target, iters=40):
    """Vectorized bisection for logf(x) == target.

    ``logf(inside) >= target`` and ``logf(outside) < target`` are assumed;
    returns the outer end of the final bracket, so the result always
    satisfies ``logf <= target``.
    """
    a = np.array(inside, dtype=float, copy=True)
    b = np.array(outside, dtype=float, copy=True)
    for _ in range(iters):
        mid = 0.5 * (a + b)
        high = logf(mid) >= target
        a = np.where(high, mid, a)
        b = np.where(high, b, mid)
    return b


def rho_bounds(c, n, drop_factor=1e20):
    """Integration bounds (lo, hi) for psi(.; c, n).

    psi at each bound is below its peak by at least ``drop_factor``.  The
    upper bisection is seeded on [rho_max, rho_max + 40/sqrt(-s)] where s
    is the second derivative of log psi at the peak; the seed offset is
    doubled (up to 60 times) until it brackets.
    """
    c = np.asarray(c, dtype=float)
    scalar = c.ndim == 0
    c = np.atleast_1d(c)
    if np.any(c < 0):
        raise ValueError("c must be >= 0")
    if np.any(c == 0) and n > 2:
        raise ImproperPosterior(f"radial integral diverges at 0 for c = 0 and n = {n}")
    rm = np.atleast_1d(rho_peak(c, n))
    log_drop = math.log(drop_factor)
    with np.errstate(divide="ignore", invalid="ignore"):
        top = np.where(rm > 0, log_psi(rm, c, n), 0.0)
    target = top - log_drop
    zero_peak = rm == 0
    with np.errstate(divide="ignore", invalid="ignore"):
        s = np.where(zero_peak, -1.0, -1.0 - 3.0 * c / rm**4 + (n - 2) / rm**2)
    s = np.minimum(s, -1e-300)
    offset = 40.0 / np.sqrt(-s)
    f = lambda r: _log_psi_pos(r, c, n)
    for _ in range(61):
        bad = f(rm + offset) >= target
        if not np.any(bad):
            break
        offset = np.where(bad, 2.0 * offset, offset)
    else:
        raise BisectionFailure("upper radial bound seed failed to bracket after 60 doublings")
    # both bisections in one vectorized pass: [lower bounds, upper bounds]
    seed = np.where(zero_peak, 1.0, rm)
    cc = np.concatenate([c, c])
    tt = np.concatenate([target, target])
    both = bisect_drop(
        lambda r: _log_psi_pos(r, cc, n),
        np.concatenate([seed, rm]),
        np.concatenate([np.zeros_like(rm), rm + offset]),
        tt,
    )
    m = rm.size
    lo = np.where(zero_peak, 0.0, both[:m])
    hi = both[m:]
    if scalar:
        return float(lo[0]), float(hi[0])
    return lo, hi


def log_rho_integrals(c, n, powers=(0,), rule_size=80, drop_factor=1e20):
    """log of int rho**(2 + p - n) exp(-rho^2/2 - c/(2 rho^2)) d rho.

    Vectorized over ``c``; returns shape ``(len(powers),) + c.shape``.  All
    powers share one Gauss-Legendre grid (in log rho) whose interval is
    the union of the bounds for the smallest and largest power.
    """
    c = np.asarray(c, dtype=float)
    shape = c.shape
    c = c.reshape(-1)
    powers = tuple(int(p) for p in powers)
    pmin, pmax = min(powers), max(powers)
    lo, hi = rho_bounds(c, n - pmin, drop_factor)
    if pmax != pmin:
        lo2, hi2 = rho_bounds(c, n - pmax, drop_factor)
        lo, hi = np.minimum(lo, lo2), np.maximum(hi, hi2)
    x, w = _legendre_ref(int(rule_size))
    # Gauss-Legendre in t = log(rho) where the bound allows it: the
    # integrand spans several decades of rho when c is small relative to n
    log_space = lo > 0
    with np.errstate(divide="ignore"):
        a = np.where(log_space, np.log(np.where(log_space, lo, 1.0)), lo)
        b = np.where(log_space, np.log(hi), hi)
    width = b - a
    t = a[:, None] + 0.5 * width[:, None] * (x[None, :] + 1.0)
    nodes = np.where(log_space[:, None], np.exp(t), t)
    logr = np.log(nodes)
    logw = np.log(0.5 * w)[None, :] + np.log(width)[:, None] + np.where(log_space[:, None], logr, 0.0)
    base = -0.5 * nodes**2 - 0.5 * c[:, None] / nodes**2
    out = np.empty((len(powers), c.size))
    for i, p in enumerate(powers):
        out[i] = logsumexp(logw + base - (n - 2 - p) * logr, axis=1)
    return out.reshape((len(powers),) + shape)


def log_rho_laplace(c, n, power=0):
    """Laplace approximation (in t = log rho) of the radial integral.

    Cheap and smooth in ``c``; used only where integration bounds are
    searched, never for the returned moments.
    """
    c = np.asarray(c, dtype=float)
    m = n - power
    r = np.maximum(rho_peak(c, m - 1), 1e-300)
    r2 = r * r
    with np.errstate(divide="ignore", invalid="ignore"):
        g = (3 - m) * np.log(r) - 0.5 * r2 - 0.5 * c / r2
        curv = 2.0 * r2 + 2.0 * c / r2
    return g + 0.5 * np.log(2.0 * np.pi / curv)


def integrate_rho(c, n, extra_power=0, rule_size=80, drop_factor=1e20):
    """log of the radial integral with integrand rho**(2 + extra_power - n) ...

    The integrand is positive, so the log carries the full value.
    """
    out = log_rho_integrals(c, n, (extra_power,), rule_size, drop_factor)[0]
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# bound search in an angular variable


def scan_bounds(logf: Callable, a: float, b: float, scan_nodes: int, drop_factor: float, passes: int = 2):
    """Truncate (a, b) to where ``exp(logf)`` is within drop_factor of its peak.

    ``logf`` is evaluated at Gauss-Legendre points; the new upper bound is
    the first point past the observed maximum that falls below
    max/drop_factor, the lower bound the last such point before it.  The
    second pass rescans the narrowed interval so sharp peaks get tight
    bounds.
    """
    log_drop = math.log(drop_factor)
    lo, hi = a, b
    for _ in range(passes):
        rule = gauss_legendre(scan_nodes, lo, hi)
        g = np.asarray(logf(rule.nodes), dtype=float)
        g = np.where(np.isnan(g), -np.inf, g)
        if not np.any(np.isfinite(g)):
            return lo, hi
        i = int(np.argmax(g))
        below = g < g[i] - log_drop
        after = np.nonzero(below[i + 1 :])[0]
        before = np.nonzero(below[:i])[0]
        new_hi = rule.nodes[i + 1 + after[0]] if after.size else hi
        new_lo = rule.nodes[before[-1]] if before.size else lo
        if new_lo == lo and new_hi == hi:
            break
        lo, hi = float(new_lo), float(new_hi)
    return lo, hi


def peak_bounds_halfline(logf: Callable, drop_factor: float, scan_points: int = 64, iters: int = 24, with_peak=False):
    """Bounds on [0, inf) for a unimodal integrand given by ``logf``.

    The peak is bracketed on a scan in t = atan(x) and refined by
    golden-section search.  Both bounds are then located by one joint
    bisection on the drop-factor threshold, seeded with the scan cells
    where the threshold is crossed.  ``logf`` must accept x = 0 and
    arrays of points.  With ``with_peak`` the approximate peak location is
    returned as a third value.
    """
    t = np.arange(scan_points) * (0.5 * np.pi / scan_points)
    xs = np.tan(t)
    g = np.asarray(logf(xs), dtype=float)
    g = np.where(np.isnan(g), -np.inf, g)
    i = int(np.argmax(g))
    if i == 0:
        t_peak, g_peak = 0.0, g[0]
    else:
        t_hi = t[i + 1] if i + 1 < scan_points else 0.5 * (t[i] + 0.5 * np.pi)
        one = lambda tt: -float(logf(np.array([math.tan(tt)]))[0])
        res = minimize_scalar(one, bracket=(t[i - 1], t[i], t_hi), method="golden", tol=1e-4)
        t_peak, g_peak = float(res.x), -float(res.fun)
        if g_peak < g[i]:
            t_peak, g_peak = t[i], g[i]
    target = g_peak - math.log(drop_factor)
    x_peak = math.tan(t_peak)

    below = g < target
    left = np.nonzero(below & (t < t_peak))[0]
    right = np.nonzero(below & (t > t_peak))[0]
    need_lo = x_peak > 0.0 and left.size > 0
    if right.size:
        out = xs[right[0]]
        inside_hi = xs[right[0] - 1] if right[0] > 0 and xs[right[0] - 1] > x_peak else x_peak
    else:
        out = max(2.0 * x_peak, 2.0 * xs[-1])
        for _ in range(61):
            if logf(np.array([out]))[0] < target:
                break
            out *= 2.0
        else:
            raise BisectionFailure("upper bound search did not bracket")
        inside_hi = max(x_peak, xs[-1])
    if need_lo:
        j = left[-1]
        inside_lo = xs[j + 1] if xs[j + 1] < x_peak else x_peak
        both = bisect_drop(
            lambda x: np.asarray(logf(x), dtype=float),
            np.array([inside_lo, inside_hi]),
            np.array([xs[j], out]),
            target,
            iters=iters,
        )
        out = (float(both[0]), float(both[1]))
    else:
        hi = bisect_drop(lambda x: np.asarray(logf(x), dtype=float), np.array([inside_hi]), np.array([out]), target, iters)
        out = (0.0, float(hi[0]))
    return out + (x_peak,) if with_peak else out


# ---------------------------------------------------------------------------
# outer angle integration


@dataclass
class ThetaIntegral:
    value: object
    error: float
    nodes: int
    evaluations: int
    converged: bool


def deterministic_mode() -> bool:
    """True when MARGQUAD_DETERMINISTIC is set to a truthy value."""
    return os.environ.get("MARGQUAD_DETERMINISTIC", "").strip().lower() in ("1", "true", "yes", "on")


def resolve_threads(threads: Optional[int] = None) -> int:
    if deterministic_mode():
        return 1
    if threads is None:
        threads = int(os.environ.get("MARGQUAD_THREADS", "1") or 1)
    return max(1, int(threads))


def map_nodes(fn: Callable, xs, threads: Optional[int] = None) -> list:
    """``[fn(x) for x in xs]``, optionally on a thread pool; order is kept."""
    xs = list(xs)
    n = resolve_threads(threads)
    if n == 1 or len(xs) < 2:
        return [fn(x) for x in xs]
    with ThreadPoolExecutor(max_workers=min(n, len(xs))) as ex:
        return list(ex.map(fn, xs))


def tree_sum(items):
    """Pairwise sum in a fixed order; bit-stable for a fixed input order."""
    items = list(items)
    if not items:
        raise ValueError("empty sum")
    while len(items) > 1:
        nxt = [items[i] + items[i + 1] for i in range(0, len(items) - 1, 2)]
        if len(items) % 2:
            nxt.append(items[-1])
        items = nxt
    return items[0]


def _default_reduce(weights, records):
    return tree_sum(w * np.asarray(r, dtype=float) for w, r in zip(weights, records))


def _default_measure(old, new):
    old = np.asarray(old, dtype=float)
    new = np.asarray(new, dtype=float)
    return float(np.max(np.abs(new - old) / np.maximum(np.abs(new), 1.0)))


def adaptive_theta(
    f: Callable,
    cfg: QuadratureConfig,
    reduce: Optional[Callable] = None,
    measure: Optional[Callable] = None,
    a: float = 0.0,
    b: float = 0.5 * np.pi,
) -> ThetaIntegral:
    """Integrate over the outer angle with error control by node doubling.

    ``f`` maps an array of angles to a sequence of per-node records.
    ``reduce(weights, records)`` turns weighted records into an estimate
    (default: the weighted sum) and ``measure(old, new)`` gives the
    relative change between successive estimates.

    With ``cfg.theta_doubling`` the rule is nested Clenshaw-Curtis of order
    theta_nodes, 2*theta_nodes, ...; each level evaluates only the new
    points.  Otherwise a Gauss-Legendre rule with theta_nodes points is
    checked against one with twice as many, and the finer value returned.
    """
    reduce = reduce or _default_reduce
    measure = measure or _default_measure
    if not cfg.theta_doubling:
        m = cfg.theta_nodes
        r1 = gauss_legendre(m, a, b)
        r2 = gauss_legendre(2 * m, a, b)
        v1 = reduce(r1.weights, list(f(r1.nodes)))
        v2 = reduce(r2.weights, list(f(r2.nodes)))
        err = measure(v1, v2)
        return ThetaIntegral(v2, err, 2 * m, 3 * m, err < cfg.theta_tol)

    cache: dict = {}
    evaluations = 0

    def level(order):
        nonlocal evaluations
        rule = chebyshev_practical(order, a, b)
        keys = [Fraction(j, order) for j in range(order + 1)]
        todo = [i for i, key in enumerate(keys) if key not in cache]
        if todo:
            recs = list(f(rule.nodes[todo]))
            evaluations += len(todo)
            for i, rec in zip(todo, recs):
                cache[keys[i]] = rec
        return rule, reduce(rule.weights, [cache[key] for key in keys])

    order = max(1, cfg.theta_nodes)
    rule, value = level(order)
    err = np.inf
    while 2 * order + 1 <= cfg.theta_max_nodes:
        order *= 2
        rule, new = level(order)
        err = measure(value, new)
        value = new
        if err < cfg.theta_tol:
            return ThetaIntegral(value, err, order + 1, evaluations, True)
    warnings.warn(
        f"outer angle integral did not reach tol {cfg.theta_tol:g} "
        f"(estimated error {err:.3g} with {order + 1} nodes)",
        NoConvergence,
        stacklevel=2,
    )
    return ThetaIntegral(value, err, order + 1, evaluations, False)
