import numpy as np
import pytest

from margquad.errors import DimensionMismatch, MissingCovariance, NonFinite, NonPositiveScale, ValidationError
from margquad.model import (
    ModelInput,
    PosteriorSummary,
    apply_standardization,
    standardize,
    unstandardize,
    validate,
)


def test_identity_case_is_valid(rng):
    m = validate(np.ones((4, 1)), rng.normal(size=(4, 1)), rng.normal(size=4))
    assert isinstance(m, ModelInput)
    assert (m.n, m.k1, m.k2, m.k) == (4, 1, 1, 2)
    assert not m.is_mixed


def test_length_mismatch(rng):
    with pytest.raises(DimensionMismatch):
        validate(np.ones((4, 1)), np.ones((4, 1)), np.ones(3))


def test_nan_rejected():
    X2 = np.ones((4, 1))
    X2[2, 0] = np.nan
    with pytest.raises(NonFinite):
        validate(np.ones((4, 1)), X2, np.arange(4.0))


def test_two_group_needs_n_ge_k(rng):
    with pytest.raises(DimensionMismatch):
        validate(rng.normal(size=(3, 2)), rng.normal(size=(3, 2)), rng.normal(size=3))


def test_empty_group_rejected(rng):
    with pytest.raises(DimensionMismatch):
        validate(rng.normal(size=(5, 2)), np.zeros((5, 0)), rng.normal(size=5))


def test_mixed_prior_scales(rng):
    X1, X2, y = rng.normal(size=(6, 2)), rng.normal(size=(6, 2)), rng.normal(size=6)
    with pytest.raises(NonPositiveScale):
        validate(X1, X2, y, kind="mixed", prior_scales=[1.0, 0.0])
    with pytest.raises(ValidationError):
        validate(X1, X2, y, kind="mixed")
    with pytest.raises(ValidationError):
        validate(X1, X2, y, prior_scales=[1.0, 1.0])
    m = validate(X1, X2, y, kind="mixed", prior_scales=[1.0, 2.0])
    assert m.is_mixed and np.array_equal(m.prior_scales, [1.0, 2.0])


def test_validate_idempotent(rng):
    m = validate(rng.normal(size=(8, 2)), rng.normal(size=(8, 3)), rng.normal(size=8))
    m2 = validate(m.X1, m.X2, m.y, m.kind, m.prior_scales)
    assert np.array_equal(m.X, m2.X) and np.array_equal(m.y, m2.y) and m.kind == m2.kind


def test_inputs_are_frozen(rng):
    m = validate(rng.normal(size=(8, 2)), rng.normal(size=(8, 3)), rng.normal(size=8))
    with pytest.raises(ValueError):
        m.X1[0, 0] = 1.0


def test_swapped(rng):
    m = validate(rng.normal(size=(8, 2)), rng.normal(size=(8, 3)), rng.normal(size=8))
    s = m.swapped()
    assert (s.k1, s.k2) == (3, 2)
    assert np.array_equal(s.X1, m.X2) and np.array_equal(s.X2, m.X1)


def test_standardize_y_scale(rng):
    y = rng.normal(size=50)
    y = 2.0 * (y - y.mean()) / y.std(ddof=1)
    m = validate(np.ones((50, 1)), rng.normal(size=(50, 1)), y)
    ms, std = standardize(m)
    assert std.y_scale == pytest.approx(2.0, rel=1e-14)
    assert ms.y.std(ddof=1) == pytest.approx(1.0, rel=1e-14)


def test_standardize_unit_data_is_identity(rng):
    z = rng.normal(size=(30, 3))
    z = (z - z.mean(0)) / z.std(0, ddof=1)
    m = validate(z[:, :1], z[:, 1:2], z[:, 2])
    ms, std = standardize(m)
    assert np.allclose(std.column_scales, 1.0, rtol=1e-14)
    assert std.y_scale == pytest.approx(1.0, rel=1e-14)
    assert np.allclose(ms.X, m.X, rtol=1e-14, atol=0)


def test_indicator_columns_untouched(rng):
    ind = (rng.uniform(size=(20, 1)) > 0.5).astype(float)
    m = validate(ind, 5.0 * rng.normal(size=(20, 1)), rng.normal(size=20))
    ms, std = standardize(m, center=True)
    assert std.indicator.tolist() == [True, False]
    assert std.column_scales[0] == 1.0 and std.column_shifts[0] == 0.0
    assert np.array_equal(ms.X1, m.X1)
    assert std.centered.tolist() == [False, True]


def test_round_trip(rng):
    m = validate(5 * rng.normal(size=(25, 2)) + 3, rng.normal(size=(25, 2)), 7 * rng.normal(size=25))
    for center in (False, True):
        ms, std = standardize(m, center=center)
        back = unstandardize(ms, std)
        assert np.allclose(back.X, m.X, rtol=1e-14, atol=1e-14 * np.abs(m.X).max())
        assert np.allclose(back.y, m.y, rtol=1e-14, atol=0)
        again = apply_standardization(m, std)
        assert np.array_equal(again.X, ms.X)


def test_summary_invariants():
    with pytest.raises(ValueError):
        PosteriorSummary(np.zeros(2), np.array([1.0, -1.0]), np.ones(3), np.ones(3), 0.0)
    with pytest.raises(ValueError):
        PosteriorSummary(np.zeros(2), np.ones(2), np.ones(3), np.ones(3), 0.0, beta_cov=np.array([[1.0, 0.1], [0.2, 1.0]]))
    cov = np.array([[1.0, 0.5, 0.0], [0.5, 2.0, 0.1], [0.0, 0.1, 3.0]])
    s = PosteriorSummary(np.zeros(3), np.sqrt(np.diag(cov)), np.ones(3), np.ones(3), 0.0, beta_cov=cov)
    assert np.array_equal(s.covariance_block([2, 0]), cov[np.ix_([2, 0], [2, 0])])
    r = s.restricted([0, 1])
    assert r.cov_index == (0, 1)
    assert np.array_equal(r.covariance_block([1]), [[2.0]])
    with pytest.raises(MissingCovariance):
        r.covariance_block([2])
    bare = PosteriorSummary(np.zeros(3), np.ones(3), np.ones(3), np.ones(3), 0.0)
    with pytest.raises(MissingCovariance):
        bare.covariance_block([0])


def test_unstandardize_summary_scales_moments(rng):
    m = validate(rng.normal(size=(20, 2)) * [2.0, 3.0], rng.normal(size=(20, 1)) * 4.0, rng.normal(size=20) * 5.0)
    _, std = standardize(m)
    cov = np.diag([1.0, 2.0, 3.0])
    s = PosteriorSummary(np.ones(3), np.sqrt(np.diag(cov)), np.ones(3), np.ones(3), 0.0, beta_cov=cov)
    f = std.y_scale / std.column_scales
    u = std.unstandardize_summary(s)
    assert np.allclose(u.beta_mean, f)
    assert np.allclose(u.beta_cov, cov * np.outer(f, f))
    assert np.allclose(u.scale_mean, std.y_scale)
    r = std.unstandardize_summary(s.restricted([2]))
    assert np.allclose(r.beta_cov, [[3.0 * f[2] ** 2]])
