"""Model inputs, validation, standardization and the posterior summary type.

Scale-parameter convention used throughout the package:

* ``sigma_1`` -- likelihood (noise) scale,
* ``sigma_2`` -- prior scale shared by the group-1 coefficients,
* ``sigma_3`` -- prior scale shared by the group-2 coefficients.

For the mixed model ``sigma_3`` does not exist; the group-2 coefficients
carry fixed per-coefficient prior scales instead.  Every scale parameter has
a half-normal(0, 1) prior.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .errors import (
    DimensionMismatch,
    MissingCovariance,
    NonFinite,
    NonPositiveScale,
    RankDeficiencyWarning,
    ValidationError,
)

TWO_GROUP = "two_group"
MIXED = "mixed"


def _frozen(a, ndim):
    a = np.array(a, dtype=float, copy=True)
    if a.ndim == 1 and ndim == 2:
        a = a[:, None]
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class ModelInput:
    """Validated regression data.

    Build instances with :func:`validate`; the constructor does no checking.
    """

    X1: np.ndarray
    X2: np.ndarray
    y: np.ndarray
    kind: str = TWO_GROUP
    prior_scales: Optional[np.ndarray] = None

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def k1(self) -> int:
        return self.X1.shape[1]

    @property
    def k2(self) -> int:
        return self.X2.shape[1]

    @property
    def k(self) -> int:
        return self.k1 + self.k2

    @property
    def X(self) -> np.ndarray:
        return np.hstack([self.X1, self.X2])

    @property
    def is_mixed(self) -> bool:
        return self.kind == MIXED

    def swapped(self) -> "ModelInput":
        """Same data with the two coefficient groups exchanged (two-group only)."""
        if self.is_mixed:
            raise ValidationError("group swap is only defined for two-group models")
        return ModelInput(self.X2, self.X1, self.y, TWO_GROUP, None)


def validate(X1, X2, y, kind: str = TWO_GROUP, prior_scales=None) -> ModelInput:
    """Check shapes and values and return an immutable :class:`ModelInput`.

    Raises
    ------
    DimensionMismatch
        Row counts differ, a group is empty, or (two-group) ``n < k``.
    NonFinite
        Any entry is NaN or infinite.
    NonPositiveScale
        A mixed-model prior scale is not strictly positive.
    """
    X1 = np.asarray(X1, dtype=float)
    X2 = np.asarray(X2, dtype=float)
    y = np.asarray(y, dtype=float)
    if X1.ndim == 1:
        X1 = X1[:, None]
    if X2.ndim == 1:
        X2 = X2[:, None]
    if y.ndim != 1:
        y = y.reshape(-1) if y.ndim == 2 and 1 in y.shape else y
        if y.ndim != 1:
            raise DimensionMismatch(f"y must be a vector, got shape {y.shape}")
    if X1.ndim != 2 or X2.ndim != 2:
        raise DimensionMismatch("X1 and X2 must be matrices")
    n = y.shape[0]
    if X1.shape[0] != n or X2.shape[0] != n:
        raise DimensionMismatch(
            f"row counts differ: X1 has {X1.shape[0]}, X2 has {X2.shape[0]}, y has {n}"
        )
    if n < 1 or X1.shape[1] < 1 or X2.shape[1] < 1:
        raise DimensionMismatch("need n >= 1 and at least one column per group")
    for name, arr in (("X1", X1), ("X2", X2), ("y", y)):
        if not np.all(np.isfinite(arr)):
            bad = np.argwhere(~np.isfinite(arr))[0]
            raise NonFinite(f"{name} has a non-finite entry at index {tuple(int(i) for i in bad)}")
    k = X1.shape[1] + X2.shape[1]
    if kind == TWO_GROUP:
        if prior_scales is not None:
            raise ValidationError("prior_scales only apply to mixed models")
        if n < k:
            raise DimensionMismatch(f"two-group model needs n >= k, got n={n}, k={k}")
        scales = None
    elif kind == MIXED:
        if prior_scales is None:
            raise ValidationError("mixed model needs prior_scales for the group-2 columns")
        scales = np.broadcast_to(np.asarray(prior_scales, dtype=float), (X2.shape[1],))
        if not np.all(np.isfinite(scales)) or np.any(scales <= 0):
            raise NonPositiveScale("mixed prior scales must be finite and > 0")
        scales = _frozen(scales, 1)
    else:
        raise ValidationError(f"unknown model kind {kind!r}")

    gram = np.vstack([X1.T, X2.T]) @ np.hstack([X1, X2])
    ev = np.linalg.eigvalsh(gram)
    if ev[-1] <= 0 or ev[0] < 1e-12 * ev[-1]:
        warnings.warn(
            "X^t X is numerically rank deficient; zero eigenvalues are handled analytically",
            RankDeficiencyWarning,
            stacklevel=2,
        )
    return ModelInput(_frozen(X1, 2), _frozen(X2, 2), _frozen(y, 1), kind, scales)


@dataclass(frozen=True, eq=False)
class PosteriorSummary:
    """Posterior moments of the coefficients and scale parameters.

    ``scale_mean``/``scale_sd`` hold (sigma_1, sigma_2, sigma_3) for the
    two-group model and (sigma_1, sigma_2) for the mixed model.
    ``info`` carries diagnostics such as node counts and error estimates.
    ``beta_cov`` covers all coefficients, or only those listed in
    ``cov_index`` (in that order) when it is set.
    """

    beta_mean: np.ndarray
    beta_sd: np.ndarray
    scale_mean: np.ndarray
    scale_sd: np.ndarray
    log_norm_const: float
    beta_cov: Optional[np.ndarray] = None
    info: dict = field(default_factory=dict)
    cov_index: Optional[tuple] = None

    def __post_init__(self):
        if np.any(self.beta_sd < 0):
            raise ValueError("negative posterior sd")
        if self.beta_cov is not None:
            c = self.beta_cov
            m = len(self.beta_mean) if self.cov_index is None else len(self.cov_index)
            if c.shape != (m, m) or not np.array_equal(c, c.T):
                raise ValueError("beta_cov must be a symmetric matrix matching cov_index")
            if np.any(np.diagonal(c) < 0):
                raise ValueError("beta_cov has a negative diagonal entry")

    def covariance_block(self, idx) -> np.ndarray:
        """Covariance among coefficients ``idx``; raises MissingCovariance."""
        idx = [int(i) for i in idx]
        if self.beta_cov is None:
            raise MissingCovariance("summary carries no covariance")
        if self.cov_index is None:
            return self.beta_cov[np.ix_(idx, idx)]
        pos = {j: p for p, j in enumerate(self.cov_index)}
        missing = [i for i in idx if i not in pos]
        if missing:
            raise MissingCovariance(f"no covariance for coefficients {missing}")
        sel = [pos[i] for i in idx]
        return self.beta_cov[np.ix_(sel, sel)]

    def restricted(self, idx) -> "PosteriorSummary":
        """Copy keeping only the covariance among ``idx``."""
        idx = tuple(int(i) for i in idx)
        return replace(self, beta_cov=self.covariance_block(idx), cov_index=idx)


@dataclass(frozen=True, eq=False)
class Standardization:
    """Affine map between the user's units and the standardized model.

    ``x_std = (x - shift) / scale`` column-wise and ``y_std = y / y_scale``.
    Indicator (0/1) and constant columns keep ``scale == 1`` and are flagged.
    """

    y_scale: float
    column_scales: np.ndarray
    centered: np.ndarray
    column_shifts: np.ndarray
    indicator: np.ndarray

    def coefficient_factors(self) -> np.ndarray:
        """Multipliers taking standardized coefficients to original units."""
        return self.y_scale / self.column_scales

    def unstandardize_summary(self, s: PosteriorSummary) -> PosteriorSummary:
        f = self.coefficient_factors()
        fc = f if s.cov_index is None else f[list(s.cov_index)]
        cov = None if s.beta_cov is None else s.beta_cov * np.outer(fc, fc)
        return replace(
            s,
            beta_mean=s.beta_mean * f,
            beta_sd=s.beta_sd * f,
            beta_cov=cov,
            scale_mean=s.scale_mean * self.y_scale,
            scale_sd=s.scale_sd * self.y_scale,
        )


def _is_indicator(col: np.ndarray) -> bool:
    return bool(np.all((col == 0) | (col == 1)))


def standardize(model: ModelInput, center=False) -> tuple[ModelInput, Standardization]:
    """Rescale ``y`` and the continuous columns of X to unit sample sd.

    ``center`` is a bool (all continuous columns) or a boolean mask over the
    ``k`` columns.  Indicator and constant columns are never touched.
    """
    X = model.X
    k = X.shape[1]
    want_center = np.broadcast_to(np.asarray(center, dtype=bool), (k,))
    scales = np.ones(k)
    shifts = np.zeros(k)
    indicator = np.zeros(k, dtype=bool)
    centered = np.zeros(k, dtype=bool)
    for j in range(k):
        col = X[:, j]
        sd = col.std(ddof=1) if len(col) > 1 else 0.0
        if _is_indicator(col) or sd == 0:
            indicator[j] = True
            continue
        scales[j] = sd
        if want_center[j]:
            shifts[j] = col.mean()
            centered[j] = True
    y_sd = model.y.std(ddof=1) if model.n > 1 else 0.0
    y_scale = float(y_sd) if y_sd > 0 else 1.0
    std = Standardization(y_scale, _frozen(scales, 1), centered, _frozen(shifts, 1), indicator)
    return apply_standardization(model, std), std


def apply_standardization(model: ModelInput, std: Standardization) -> ModelInput:
    Xs = (model.X - std.column_shifts) / std.column_scales
    return ModelInput(
        _frozen(Xs[:, : model.k1], 2),
        _frozen(Xs[:, model.k1 :], 2),
        _frozen(model.y / std.y_scale, 1),
        model.kind,
        model.prior_scales,
    )


def unstandardize(model: ModelInput, std: Standardization) -> ModelInput:
    X = model.X * std.column_scales + std.column_shifts
    return ModelInput(
        _frozen(X[:, : model.k1], 2),
        _frozen(X[:, model.k1 :], 2),
        _frozen(model.y * std.y_scale, 1),
        model.kind,
        model.prior_scales,
    )
