"""Acceptance criteria 1-10.  Each test prints one PASS/FAIL line (visible
with ``pytest -v`` or ``-s``) before asserting."""

import math
import subprocess
import sys
import time
import warnings

import numpy as np
import pytest
from scipy.stats import ortho_group

from margquad.errors import RankDeficiencyWarning
from margquad.mixed import fit_mixed, mixed_moments
from margquad.model import PosteriorSummary, validate
from margquad.mrp import PoststratTable, mrp_combine
from margquad.oracle import brute_force_summary, gaussian_lemma_check, posterior_draws
from margquad.pipeline import FitConfig, run_fit
from margquad.quadrature import (
    chebyshev_practical,
    gauss_legendre,
    log_psi,
    rho_bounds,
    rho_peak,
)
from margquad.special import special_moments
from margquad.synth import gen_abortion, gen_rats
from margquad.twogroup import fit_two_group

from conftest import random_mixed, random_structured, random_two_group

MOMENTS = ("beta_mean", "beta_sd", "beta_cov", "scale_mean", "scale_sd")


@pytest.fixture
def report(capsys):
    def emit(number, title, ok, detail):
        with capsys.disabled():
            print(f"\ncriterion {number} ({title}): {'PASS' if ok else 'FAIL'}  {detail}")
        return ok

    return emit


def rel_floor(a, b, floor):
    """max |a - b| / max(|b|, floor)."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b) / np.maximum(np.abs(b), floor)))


def worst_moments(s, ref, floor):
    return max(rel_floor(getattr(s, k), getattr(ref, k), floor) for k in MOMENTS)


def test_c1_oracle_equivalence(report):
    rng = np.random.default_rng(1)
    worst, engine, oracle = 0.0, 0.0, 0.0
    for _ in range(50):
        m = random_two_group(rng)
        t = time.perf_counter()
        s = fit_two_group(m)
        engine += time.perf_counter() - t
        t = time.perf_counter()
        o = brute_force_summary(m)
        oracle += time.perf_counter() - t
        worst = max(worst, worst_moments(s, o, 1e-8))
    ok = worst <= 1e-6 and engine < 60.0
    detail = f"50 instances, worst rel {worst:.2e} (tol 1e-6, floor 1e-8), engine {engine:.1f} s (< 60), oracle {oracle:.1f} s"
    assert report(1, "oracle equivalence", ok, detail)


def test_c2_special_equivalence(report):
    rng = np.random.default_rng(2)
    worst = 0.0
    paths = set()
    for i in range(20):
        k1 = int(rng.integers(1, 4))
        k2 = int(rng.integers(2, 51))
        m = random_structured(rng, int(rng.integers(3 * k2, 6 * k2 + 10)), k1, k2, scaled=bool(i % 2))
        s = special_moments(m)
        g = fit_two_group(m)
        paths.add(s.info["path"])
        worst = max(worst, worst_moments(s, g, 1e-8))
        worst = max(worst, abs(s.log_norm_const - g.log_norm_const) / max(1.0, abs(g.log_norm_const)))
    ok = worst <= 1e-7 and paths == {"special"}
    assert report(2, "special-case equivalence", ok, f"20 instances k1<=3 k2<=50, worst rel {worst:.2e} (tol 1e-7)")


def test_c3_mixed_equivalence(report):
    # back-map convention first: first-power scaling matches the oracle on
    # the original model, squared scaling does not
    rng = np.random.default_rng(2024)
    X = rng.normal(size=(25, 4))
    y = X @ [0.5, -0.3, 1.2, 0.8] + 0.6 * rng.normal(size=25)
    scales = np.array([2.5, 0.4])
    m = validate(X[:, :2], X[:, 2:], y, kind="mixed", prior_scales=scales)
    o = brute_force_summary(m)
    first = rel_floor(fit_mixed(m).beta_mean, o.beta_mean, 1e-8)
    sq = fit_mixed(validate(X[:, :2], X[:, 2:] * scales**2, y, kind="mixed", prior_scales=np.ones(2)))
    squared = rel_floor(sq.beta_mean * np.r_[1.0, 1.0, scales**2], o.beta_mean, 1e-8)
    backmap_ok = first <= 1e-6 and squared > 1e-2

    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(20):
        m = random_mixed(rng)
        worst = max(worst, worst_moments(mixed_moments(m), brute_force_summary(m), 1e-8))
    ok = backmap_ok and worst <= 1e-6
    detail = f"back-map first-power {first:.1e} vs squared {squared:.1e}; 20 instances worst rel {worst:.2e} (tol 1e-6)"
    assert report(3, "mixed-effects equivalence", ok, detail)


def _benchmark(d):
    cfg = FitConfig.from_mapping(d.config)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RankDeficiencyWarning)
        return run_fit(d.columns, d.data, cfg, threads=1, check=True)


def test_c4_abortion_benchmark(report):
    d = gen_abortion(seed=0)
    assert (d.n, len(d.config["group1"]), len(d.config["group2"])) == (5000, 50, 19)
    r = _benchmark(d)
    err = r.consistency["max_rel"]
    ok = r.seconds <= 5.0 and err <= 1e-7 and r.summary.info["converged"]
    assert report(4, "abortion-scale benchmark", ok, f"{r.seconds:.2f} s (<= 5), self-consistency {err:.1e} (<= 1e-7)")


def test_c5_rats_benchmark(report):
    r = _benchmark(gen_rats(100, 20, seed=0))
    err = r.consistency["max_rel"]
    ok = r.seconds <= 60.0 and err <= 1e-6 and r.summary.info["converged"]
    detail = f"path {r.summary.info['path']}, {r.seconds:.2f} s (<= 60), self-consistency {err:.1e} (<= 1e-6)"
    assert report(5, "rats-scale benchmark", ok, detail)


def test_c6_quadrature_suite(report):
    rng = np.random.default_rng(6)
    gl = 0.0
    for m in range(1, 11):
        for _ in range(5):
            a, b = sorted(rng.uniform(-3, 3, size=2))
            coef = rng.normal(size=2 * m)
            P = np.polynomial.polynomial.Polynomial(coef).integ()
            exact = P(b) - P(a)
            got = gauss_legendre(m, a, b).integrate(lambda x: np.polynomial.polynomial.polyval(x, coef))
            gl = max(gl, abs(got - exact) / max(1.0, abs(exact)))

    nested = all(
        set(chebyshev_practical(m, 0.0, 1.0).nodes.tolist()) <= set(chebyshev_practical(2 * m, 0.0, 1.0).nodes.tolist())
        for m in (2, 3, 5, 8, 10, 16, 64)
    )

    fd = 0.0
    for _ in range(100):
        c = 10 ** rng.uniform(-2, 4)
        n = int(rng.integers(3, 2000))
        r = rho_peak(c, n)
        h = 1e-5 * r
        d = (log_psi(r + h, c, n) - log_psi(r - h, c, n)) / (2 * h)
        fd = max(fd, abs(d * h) / (1 + abs(log_psi(r, c, n))))

    contract = True
    for _ in range(100):
        c = 10 ** rng.uniform(-3, 6)
        n = int(10 ** rng.uniform(math.log10(3), 5))
        drop = 10 ** rng.uniform(2, 20)
        lo, hi = rho_bounds(c, n, drop)
        rm = rho_peak(c, n)
        top = log_psi(rm, c, n)
        contract &= lo < rm < hi
        contract &= bool(log_psi(hi, c, n) <= top - math.log(drop))
        contract &= lo == 0.0 or bool(log_psi(lo, c, n) <= top - math.log(drop))

    ok = gl <= 1e-13 and nested and fd <= 1e-8 and contract
    detail = f"GL m<=10 err {gl:.1e} (1e-13), nesting {nested}, peak FD {fd:.1e} (1e-8), bounds contract 100/100 {contract}"
    assert report(6, "quadrature unit suite", ok, detail)


def test_c7_gaussian_lemma(report):
    rng = np.random.default_rng(7)
    worst = 0.0
    for k in range(1, 7):
        for _ in range(3):
            A = rng.normal(size=(k, k))
            C = A @ A.T + 0.3 * np.eye(k)
            r = gaussian_lemma_check(C, rng.normal(size=k))
            worst = max(worst, max(r["quadrature"].values()))
    ok = worst <= 1e-10
    assert report(7, "Gaussian lemma", ok, f"3 identities, k=1..6, worst rel {worst:.1e} (tol 1e-10)")


def test_c8_symmetries(report):
    rng = np.random.default_rng(8)
    err = {"sign": 0.0, "perm": 0.0, "orth": 0.0, "swap": 0.0}
    for _ in range(4):
        m = random_two_group(rng, n=int(rng.integers(15, 35)), k1=3, k2=3)
        a = fit_two_group(m)
        scale = max(1.0, float(np.abs(a.beta_mean).max()))

        f = fit_two_group(validate(m.X1, m.X2, -m.y))
        err["sign"] = max(err["sign"], float(np.max(np.abs(f.beta_mean + a.beta_mean))) / scale)

        p1, p2 = rng.permutation(3), rng.permutation(3)
        p = fit_two_group(validate(m.X1[:, p1], m.X2[:, p2], m.y))
        idx = np.r_[p1, 3 + p2]
        err["perm"] = max(err["perm"], rel_floor(p.beta_mean, a.beta_mean[idx], 1e-8))

        U1 = ortho_group.rvs(3, random_state=int(rng.integers(1 << 30)))
        U2 = ortho_group.rvs(3, random_state=int(rng.integers(1 << 30)))
        r = fit_two_group(validate(m.X1 @ U1, m.X2 @ U2, m.y))
        want = np.r_[U1.T @ a.beta_mean[:3], U2.T @ a.beta_mean[3:]]
        err["orth"] = max(err["orth"], float(np.max(np.abs(r.beta_mean - want))) / scale)

        w = fit_two_group(m.swapped())
        perm = np.r_[3:6, 0:3]
        err["swap"] = max(
            err["swap"],
            rel_floor(w.beta_mean[perm], a.beta_mean, 1e-8),
            rel_floor(w.scale_mean[[0, 2, 1]], a.scale_mean, 1e-8),
        )
    ok = max(err.values()) <= 1e-8
    detail = ", ".join(f"{k} {v:.1e}" for k, v in err.items()) + " (tol 1e-8)"
    assert report(8, "symmetry properties", ok, detail)


def test_c9_mrp_propagation(report):
    rng = np.random.default_rng(9)
    X = rng.normal(size=(30, 6))
    y = X @ rng.normal(size=6) + 0.7 * rng.normal(size=30)
    m = validate(X[:, :3], X[:, 3:], y)
    names = tuple(f"b{i}" for i in range(6))
    table = PoststratTable(("c1", "c2", "c3", "c4"), names, rng.uniform(-1, 1, size=(4, 6)))
    est = mrp_combine(fit_two_group(m), table, names)
    u = posterior_draws(m, 10**6, seed=9)["beta"] @ table.weights.T
    var = u.var(axis=0, ddof=1)
    se = np.sqrt(np.mean((u - u.mean(axis=0)) ** 4, axis=0) - var**2) / math.sqrt(u.shape[0])
    z = np.abs(est.sd**2 - var) / se
    ok = bool(np.all(z < 3.0))
    assert report(9, "MRP propagation", ok, f"k=6, 4 cells, 1e6 draws, max |z| {z.max():.2f} (< 3)")


def test_c10_determinism(report, tmp_path):
    def cli(*args):
        subprocess.run([sys.executable, "-m", "margquad", *map(str, args)], check=True, capture_output=True)

    data, conf = tmp_path / "d.csv", tmp_path / "d.toml"
    cli("gen", "survey", "--cells", 30, "--respondents", 3000, "--seed", 5, "--out", data, "--config", conf)
    outs = []
    for i in range(2):
        out = tmp_path / f"fit{i}.json"
        cli("fit", "--data", data, "--config", conf, "--out", out, "--deterministic", "--threads", 1)
        outs.append(out.read_bytes())
    ok = outs[0] == outs[1]
    assert report(10, "determinism", ok, f"two CLI runs, {len(outs[0])} bytes, identical {ok}")
