"""Dataset ingestion, configuration, path dispatch and JSON reporting."""
from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .errors import ValidationError
from .mixed import fit_mixed
from .model import MIXED, TWO_GROUP, ModelInput, PosteriorSummary, Standardization, standardize, validate
from .mrp import PoststratTable
from .quadrature import QuadratureConfig, deterministic_mode
from .special import detect_structure, special_moments
from .twogroup import fit_two_group

FORMAT_VERSION = 1
_QUAD_KEYS = {f for f in QuadratureConfig.__dataclass_fields__}
_TOP_KEYS = {
    "kind",
    "group1",
    "group2",
    "outcome",
    "cell_id",
    "prior_scales",
    "covariance",
    "standardize",
    "center",
    "force_general",
    "quadrature",
}


@dataclass(frozen=True)
class FitConfig:
    """Column roles, priors, quadrature overrides and output options.

    ``covariance`` is ``"none"``, ``"all"``, ``"group1"``, ``"group2"`` or
    a list of coefficient names.  Mixed ``prior_scales`` apply to the
    coefficients of the standardized model.
    """

    group1: tuple
    group2: tuple
    outcome: str
    kind: str = TWO_GROUP
    cell_id: Optional[str] = None
    prior_scales: Optional[tuple] = None
    quadrature: QuadratureConfig = field(default_factory=QuadratureConfig)
    covariance: object = "none"
    standardize: bool = True
    center: bool = False
    force_general: bool = False

    def __post_init__(self):
        if self.kind not in (TWO_GROUP, MIXED):
            raise ValidationError(f"unknown model kind {self.kind!r}")
        if not isinstance(self.outcome, str) or not self.outcome:
            raise ValidationError("exactly one outcome column is required")
        if len(self.group1) < 1 or len(self.group2) < 1:
            raise ValidationError("each group needs at least one column")
        roles = list(self.group1) + list(self.group2) + [self.outcome]
        if self.cell_id is not None:
            roles.append(self.cell_id)
        dup = sorted({r for r in roles if roles.count(r) > 1})
        if dup:
            raise ValidationError(f"columns assigned more than one role: {dup}")
        if self.kind == MIXED:
            if self.prior_scales is None or len(self.prior_scales) != len(self.group2):
                raise ValidationError("mixed models need one prior scale per group-2 column")
        elif self.prior_scales is not None:
            raise ValidationError("prior_scales only apply to mixed models")
        cov = self.covariance
        if isinstance(cov, str):
            if cov not in ("none", "all", "group1", "group2"):
                raise ValidationError(f"unknown covariance option {cov!r}")
        else:
            bad = [c for c in cov if c not in self.group1 and c not in self.group2]
            if bad:
                raise ValidationError(f"covariance requested for unknown coefficients {bad}")

    @property
    def names(self) -> tuple:
        return tuple(self.group1) + tuple(self.group2)

    def covariance_index(self) -> Optional[tuple]:
        cov = self.covariance
        k1, k = len(self.group1), len(self.names)
        if isinstance(cov, str):
            return {"none": None, "all": tuple(range(k)), "group1": tuple(range(k1)), "group2": tuple(range(k1, k))}[cov]
        pos = {n: i for i, n in enumerate(self.names)}
        return tuple(sorted({pos[c] for c in cov}))

    @classmethod
    def from_mapping(cls, d: dict) -> "FitConfig":
        d = dict(d)
        quad = dict(d.pop("quadrature", {}) or {})
        for key in list(d):
            if key in _QUAD_KEYS:
                quad[key] = d.pop(key)
        unknown = sorted(set(d) - _TOP_KEYS)
        if unknown:
            raise ValidationError(f"unknown configuration keys: {unknown}")
        for key in ("group1", "group2", "outcome"):
            if key not in d:
                raise ValidationError(f"configuration is missing {key!r}")
        if isinstance(d["outcome"], (list, tuple)):
            if len(d["outcome"]) != 1:
                raise ValidationError("exactly one outcome column is required")
            d["outcome"] = d["outcome"][0]
        g1, g2 = d.pop("group1"), d.pop("group2")
        g1 = (g1,) if isinstance(g1, str) else tuple(g1)
        g2 = (g2,) if isinstance(g2, str) else tuple(g2)
        ps = d.pop("prior_scales", None)
        if ps is not None:
            ps = tuple(float(v) for v in (ps if isinstance(ps, (list, tuple)) else [ps] * len(g2)))
        cov = d.pop("covariance", "none")
        if isinstance(cov, bool):
            cov = "all" if cov else "none"
        if not isinstance(cov, str):
            cov = tuple(cov)
        try:
            q = QuadratureConfig.from_mapping(quad)
        except (KeyError, ValueError) as exc:
            raise ValidationError(f"quadrature options: {exc}") from exc
        return cls(group1=g1, group2=g2, prior_scales=ps, covariance=cov, quadrature=q, **d)


def load_config(path) -> FitConfig:
    with open(path, "rb") as fh:
        try:
            raw = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ValidationError(f"{path}: {exc}") from exc
    return FitConfig.from_mapping(raw)


def read_csv(path):
    """Numeric CSV with a header row; returns (columns, matrix)."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValidationError(f"{path}: empty file (a header row is required)") from None
        header = [h.strip() for h in header]
        if len(set(header)) != len(header):
            raise ValidationError(f"{path}:1: duplicate column names")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ValidationError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            vals = []
            for col, v in enumerate(row, start=1):
                try:
                    x = float(v)
                except ValueError:
                    raise ValidationError(f"{path}:{lineno}:{col} ({header[col - 1]}): not a number: {v!r}") from None
                if not math.isfinite(x):
                    raise ValidationError(f"{path}:{lineno}:{col} ({header[col - 1]}): non-finite value")
                vals.append(x)
            rows.append(vals)
    return tuple(header), np.array(rows, dtype=float).reshape(len(rows), len(header))


def build_model(columns, data, cfg: FitConfig) -> ModelInput:
    pos = {c: i for i, c in enumerate(columns)}
    missing = [c for c in cfg.names + (cfg.outcome,) if c not in pos]
    if missing:
        raise ValidationError(f"columns not found in data: {missing}")
    X1 = data[:, [pos[c] for c in cfg.group1]]
    X2 = data[:, [pos[c] for c in cfg.group2]]
    y = data[:, pos[cfg.outcome]]
    return validate(X1, X2, y, cfg.kind, cfg.prior_scales)


def fit_model(
    model: ModelInput,
    cfg: Optional[QuadratureConfig] = None,
    covariance: bool = True,
    threads: Optional[int] = None,
    force_general: bool = False,
) -> PosteriorSummary:
    """Dispatch: mixed, then structured two-group, then the general path."""
    if model.is_mixed:
        return fit_mixed(model, cfg, covariance, threads)
    if not force_general:
        sd = detect_structure(model)
        if sd is not None:
            return special_moments(model, cfg, covariance, threads, sd)
    return fit_two_group(model, cfg, covariance, threads)


def self_consistency(a: PosteriorSummary, b: PosteriorSummary) -> dict:
    """Largest absolute and relative differences between two summaries.

    Means are compared relative to max(|mean|, sd); sds and scale moments
    relative to themselves.
    """
    tiny = np.finfo(float).tiny
    abs_parts = [
        np.abs(a.beta_mean - b.beta_mean),
        np.abs(a.beta_sd - b.beta_sd),
        np.abs(a.scale_mean - b.scale_mean),
        np.abs(a.scale_sd - b.scale_sd),
    ]
    rel_parts = [
        abs_parts[0] / np.maximum(np.maximum(np.abs(b.beta_mean), b.beta_sd), tiny),
        abs_parts[1] / np.maximum(b.beta_sd, tiny),
        abs_parts[2] / np.maximum(np.abs(b.scale_mean), tiny),
        abs_parts[3] / np.maximum(b.scale_sd, tiny),
    ]
    return {
        "max_abs": float(max(np.max(p) for p in abs_parts)),
        "max_rel": float(max(np.max(p) for p in rel_parts)),
    }


@dataclass
class FitResult:
    config: FitConfig
    model: ModelInput
    summary_std: PosteriorSummary
    standardization: Optional[Standardization]
    summary: PosteriorSummary  # original units
    seconds: float
    consistency: Optional[dict] = None


def run_fit(
    columns,
    data,
    cfg: FitConfig,
    threads: Optional[int] = None,
    table: Optional[PoststratTable] = None,
    check: bool = False,
) -> FitResult:
    model = build_model(columns, data, cfg)
    std = None
    work = model
    if cfg.standardize:
        work, std = standardize(model, center=cfg.center)
    cov_idx = cfg.covariance_index()
    if table is not None:
        pos = {n: i for i, n in enumerate(cfg.names)}
        unknown = [c for c in table.coefficients if c not in pos]
        if unknown:
            raise ValidationError(f"table references unknown coefficients: {unknown}")
        used = np.any(table.weights != 0, axis=0)
        extra = {pos[c] for c, u in zip(table.coefficients, used) if u}
        cov_idx = tuple(sorted(set(cov_idx or ()) | extra))
    want_cov = bool(cov_idx)
    t0 = time.perf_counter()
    s = fit_model(work, cfg.quadrature, want_cov, threads, cfg.force_general)
    seconds = time.perf_counter() - t0
    if want_cov and len(cov_idx) < model.k:
        s = s.restricted(cov_idx)
    consistency = None
    if check:
        s2 = fit_model(work, cfg.quadrature.doubled(), False, threads, cfg.force_general)
        consistency = self_consistency(s, s2)
    orig = std.unstandardize_summary(s) if std is not None else s
    return FitResult(cfg, model, s, std, orig, seconds, consistency)


def _finite_or_none(v):
    return float(v) if v is not None and math.isfinite(v) else None


def _floats(a):
    return [float(x) for x in np.asarray(a).reshape(-1)]


def _summary_block(s: PosteriorSummary, names, scale_names) -> dict:
    out = {
        "coefficients": [
            {"name": n, "mean": float(m), "sd": float(sd)} for n, m, sd in zip(names, s.beta_mean, s.beta_sd)
        ],
        "scales": [
            {"name": n, "mean": float(m), "sd": float(sd)} for n, m, sd in zip(scale_names, s.scale_mean, s.scale_sd)
        ],
    }
    if s.beta_cov is not None:
        idx = range(len(names)) if s.cov_index is None else s.cov_index
        out["covariance"] = {
            "names": [names[i] for i in idx],
            "matrix": [_floats(row) for row in s.beta_cov],
        }
    else:
        out["covariance"] = None
    return out


def scale_names(kind: str) -> tuple:
    if kind == MIXED:
        return ("sigma_1 (noise)", "sigma_2 (group 1 prior)")
    return ("sigma_1 (noise)", "sigma_2 (group 1 prior)", "sigma_3 (group 2 prior)")


def result_to_json(res: FitResult, standardized_output: bool = False, include_timing: Optional[bool] = None) -> dict:
    """JSON-ready report.  Timing is omitted (null) in deterministic mode so
    repeated runs are byte-identical."""
    if include_timing is None:
        include_timing = not deterministic_mode()
    cfg = res.config
    s = res.summary
    info = s.info
    doc = {
        "format_version": FORMAT_VERSION,
        "model": {
            "kind": cfg.kind,
            "path": info.get("path"),
            "n": res.model.n,
            "k1": res.model.k1,
            "k2": res.model.k2,
            "group1": list(cfg.group1),
            "group2": list(cfg.group2),
            "outcome": cfg.outcome,
        },
        "units": "original",
    }
    doc.update(_summary_block(s, cfg.names, scale_names(cfg.kind)))
    # sigma_1 is in outcome units; prior scales apply to standardized
    # coefficients and are only multiplied by the outcome scale
    doc["prior_scale_units"] = "standardized x y_scale" if res.standardization is not None else "original"
    doc["log_norm_const"] = float(res.summary_std.log_norm_const)
    doc["log_norm_const_units"] = "standardized" if res.standardization is not None else "original"
    q = cfg.quadrature
    doc["quadrature"] = {
        "rho_nodes": q.rho_nodes,
        "phi_nodes": q.phi_nodes,
        "phi_scan_nodes": q.phi_scan_nodes,
        "nu_nodes": q.nu_nodes,
        "theta_nodes": q.theta_nodes,
        "theta_doubling": q.theta_doubling,
        "theta_tol": q.theta_tol,
        "drop_factor": q.drop_factor,
        "theta_nodes_used": info.get("theta_nodes"),
        "theta_evaluations": info.get("theta_evaluations"),
        "theta_change": _finite_or_none(info.get("theta_error")),
        "converged": bool(info.get("converged", False)),
    }
    std = res.standardization
    if std is not None:
        doc["standardization"] = {
            "y_scale": float(std.y_scale),
            "columns": [
                {"name": n, "scale": float(sc), "shift": float(sh), "indicator": bool(ind), "centered": bool(ce)}
                for n, sc, sh, ind, ce in zip(cfg.names, std.column_scales, std.column_shifts, std.indicator, std.centered)
            ],
        }
    else:
        doc["standardization"] = None
    if res.consistency is not None:
        doc["self_consistency"] = res.consistency
    if standardized_output:
        doc["standardized"] = _summary_block(res.summary_std, cfg.names, scale_names(cfg.kind))
    doc["timing"] = {"fit_seconds": res.seconds} if include_timing else None
    return doc


def summary_from_json(doc: dict):
    """Rebuild ``(PosteriorSummary, names)`` from a report (original units)."""
    coefs = doc["coefficients"]
    names = tuple(c["name"] for c in coefs)
    cov = doc.get("covariance")
    beta_cov, cov_index = None, None
    if cov is not None:
        pos = {n: i for i, n in enumerate(names)}
        cov_index = tuple(pos[n] for n in cov["names"])
        beta_cov = np.array(cov["matrix"], dtype=float).reshape(len(cov_index), len(cov_index))
    s = PosteriorSummary(
        beta_mean=np.array([c["mean"] for c in coefs], dtype=float),
        beta_sd=np.array([c["sd"] for c in coefs], dtype=float),
        scale_mean=np.array([c["mean"] for c in doc["scales"]], dtype=float),
        scale_sd=np.array([c["sd"] for c in doc["scales"]], dtype=float),
        log_norm_const=float(doc.get("log_norm_const", float("nan"))),
        beta_cov=beta_cov,
        cov_index=cov_index,
    )
    return s, names
