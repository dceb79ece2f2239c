import warnings

import numpy as np
import pytest

from margquad.errors import RankDeficiencyWarning
from margquad.model import validate


def random_two_group(rng, n=None, k1=None, k2=None):
    n = int(rng.integers(10, 41)) if n is None else n
    k1 = int(rng.integers(1, 5)) if k1 is None else k1
    k2 = int(rng.integers(1, 5)) if k2 is None else k2
    X = rng.normal(size=(n, k1 + k2))
    beta = rng.normal(size=k1 + k2) * rng.uniform(0.2, 1.5)
    y = X @ beta + rng.normal(size=n) * rng.uniform(0.3, 1.5)
    return validate(X[:, :k1], X[:, k1:], y)


def random_mixed(rng, n=None, k1=None, k2=None):
    n = int(rng.integers(10, 41)) if n is None else n
    k1 = int(rng.integers(1, 5)) if k1 is None else k1
    k2 = int(rng.integers(1, 5)) if k2 is None else k2
    X = rng.normal(size=(n, k1 + k2))
    beta = rng.normal(size=k1 + k2) * rng.uniform(0.2, 1.5)
    y = X @ beta + rng.normal(size=n) * rng.uniform(0.3, 1.5)
    scales = rng.uniform(0.3, 3.0, size=k2)
    return validate(X[:, :k1], X[:, k1:], y, kind="mixed", prior_scales=scales)


def random_structured(rng, n, k1, k2, scaled=False):
    """One nonzero per row in each group (indicator, or scaled indicator in X2)."""
    c1 = rng.integers(0, k1, n)
    c2 = rng.integers(0, k2, n)
    c1[:k1] = np.arange(k1)
    c2[:k2] = np.arange(k2)
    X1 = np.zeros((n, k1))
    X1[np.arange(n), c1] = 1.0
    X2 = np.zeros((n, k2))
    X2[np.arange(n), c2] = rng.normal(size=n) if scaled else 1.0
    b = np.concatenate([rng.normal(size=k1) * 0.8, rng.normal(size=k2) * 0.5])
    y = np.hstack([X1, X2]) @ b + rng.normal(size=n) * 0.7
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RankDeficiencyWarning)
        return validate(X1, X2, y)


def rel_err(a, b, floor=1e-8):
    """max |a - b| / max(|b|, floor) elementwise."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b) / np.maximum(np.abs(b), floor)))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
