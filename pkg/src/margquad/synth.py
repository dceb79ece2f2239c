"""Synthetic datasets shaped like the motivating applications.

Every generator is deterministic for a given seed and returns a
:class:`Dataset` (column names, numeric matrix, and a matching fit
configuration).
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .mrp import PoststratTable

# generating parameters for gen_rats, in data units
RATS_TRUTH = {"sigma_noise": 0.5, "sigma_intercept": 1.0, "sigma_slope": 0.3}


@dataclass(frozen=True, eq=False)
class Dataset:
    columns: tuple
    data: np.ndarray
    config: dict = field(default_factory=dict)
    table: Optional[PoststratTable] = None

    @property
    def n(self) -> int:
        return self.data.shape[0]

    def column(self, name: str) -> np.ndarray:
        return self.data[:, self.columns.index(name)]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(self.columns)
            for row in self.data:
                wr.writerow([_fmt(v) for v in row])

    def write_config(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(config_text(self.config))


def _fmt(v: float) -> str:
    v = float(v)
    return str(int(v)) if v.is_integer() and abs(v) < 1e15 else repr(v)


def config_text(cfg: dict) -> str:
    """Serialize a flat fit configuration as TOML."""
    out = []
    for key, val in cfg.items():
        if isinstance(val, dict):
            continue
        out.append(f"{key} = {_toml(val)}")
    for key, val in cfg.items():
        if isinstance(val, dict):
            out.append(f"\n[{key}]")
            out.extend(f"{k} = {_toml(v)}" for k, v in val.items())
    return "\n".join(out) + "\n"


def _toml(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml(x) for x in v) + "]"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def gen_rats(J: int = 100, T: int = 20, seed: int = 0) -> Dataset:
    """Growth-curve data: per-rat intercepts and slopes in centered week.

    X1 holds rat indicators, X2 the same indicators times (week - mean
    week); y = alpha_j + beta_j (w - w_bar) + noise with the scales in
    ``RATS_TRUTH``.
    """
    if J < 2 or T < 2:
        raise ValueError("need at least 2 rats and 2 weeks")
    rng = np.random.default_rng(seed)
    alpha = rng.normal(0.0, RATS_TRUTH["sigma_intercept"], J)
    beta = rng.normal(0.0, RATS_TRUTH["sigma_slope"], J)
    week = np.arange(T, dtype=float)
    wc = week - week.mean()
    rat = np.repeat(np.arange(J), T)
    wcol = np.tile(wc, J)
    y = alpha[rat] + beta[rat] * wcol + rng.normal(0.0, RATS_TRUTH["sigma_noise"], J * T)
    X1 = np.zeros((J * T, J))
    X1[np.arange(J * T), rat] = 1.0
    X2 = X1 * wcol[:, None]
    g1 = [f"rat{j + 1}" for j in range(J)]
    g2 = [f"slope{j + 1}" for j in range(J)]
    cols = tuple(g1 + g2 + ["y"])
    cfg = {"kind": "two_group", "group1": g1, "group2": g2, "outcome": "y"}
    return Dataset(cols, np.column_stack([X1, X2, y]), cfg)


def gen_survey(cells: int = 20, respondents: int = 2000, seed: int = 0, age_groups: int = 6) -> Dataset:
    """MRP-shaped survey data and its poststratification table.

    Respondents fall in geographic cells (group 1, hierarchical prior);
    the intercept, age-group indicators and cell population density form
    group 2 with fixed unit prior scales.  The table weights each cell's
    intercept, density and population age mix (rows sum to one over age).
    """
    if cells < 1 or respondents < 1:
        raise ValueError("counts must be >= 1")
    rng = np.random.default_rng(seed)
    size = rng.dirichlet(np.full(cells, 2.0))
    cell = np.concatenate([np.arange(min(cells, respondents)), rng.choice(cells, max(respondents - cells, 0), p=size)])
    cell = np.sort(cell)
    density = np.round(rng.lognormal(0.0, 0.8, cells), 6)
    age_sample = rng.dirichlet(np.full(age_groups, 3.0), cells)
    age = np.array([rng.choice(age_groups, p=age_sample[c]) for c in cell])
    u = rng.normal(0.0, 0.4, cells)
    a = rng.normal(0.0, 0.3, age_groups)
    b0, bd = 1.0, 0.25
    y = b0 + u[cell] + a[age] + bd * density[cell] + rng.normal(0.0, 1.0, respondents)
    n = respondents
    Xc = np.zeros((n, cells))
    Xc[np.arange(n), cell] = 1.0
    Xa = np.zeros((n, age_groups))
    Xa[np.arange(n), age] = 1.0
    g1 = [f"cell{c + 1}" for c in range(cells)]
    g2 = ["intercept"] + [f"age{j + 1}" for j in range(age_groups)] + ["density"]
    data = np.column_stack([Xc, np.ones(n), Xa, density[cell], y])
    cfg = {
        "kind": "mixed",
        "group1": g1,
        "group2": g2,
        "outcome": "y",
        "prior_scales": [1.0] * len(g2),
        "covariance": "all",
    }
    # population age mix differs from the sample
    pop = rng.dirichlet(np.full(age_groups, 3.0), cells)
    coefs = tuple(g1 + g2)
    W = np.zeros((cells, len(coefs)))
    W[np.arange(cells), np.arange(cells)] = 1.0
    W[:, cells] = 1.0
    W[:, cells + 1 : cells + 1 + age_groups] = pop
    W[:, -1] = density
    table = PoststratTable(tuple(g1), coefs, W)
    return Dataset(tuple(g1 + g2 + ["y"]), data, cfg, table)


def gen_abortion(n: int = 5000, seed: int = 0) -> Dataset:
    """Opinion-survey-shaped mixed model: 50 states pooled hierarchically,
    19 fixed-prior covariates (intercept, 4 ethnicity, 6 age, 6 education,
    sex and state vote share); y is a 0..6 support score."""
    rng = np.random.default_rng(seed)
    S = 50
    state = np.concatenate([np.arange(S), rng.integers(0, S, n - S)])
    eth = rng.choice(4, n, p=[0.65, 0.15, 0.12, 0.08])
    age = rng.integers(0, 6, n)
    edu = rng.integers(0, 6, n)
    male = rng.integers(0, 2, n).astype(float)
    repvote = np.round(rng.uniform(0.3, 0.7, S), 4)
    lin = (
        3.0
        + rng.normal(0, 0.3, S)[state]
        + rng.normal(0, 0.4, 4)[eth]
        + rng.normal(0, 0.2, 6)[age]
        + rng.normal(0, 0.3, 6)[edu]
        + 0.2 * male
        + 4.0 * (repvote[state] - 0.5)
    )
    y = np.clip(np.round(lin + rng.normal(0, 1.5, n)), 0, 6)

    def onehot(v, m):
        out = np.zeros((n, m))
        out[np.arange(n), v] = 1.0
        return out

    g1 = [f"state{s + 1}" for s in range(S)]
    g2 = (
        ["intercept"]
        + [f"eth{j + 1}" for j in range(4)]
        + [f"age{j + 1}" for j in range(6)]
        + [f"edu{j + 1}" for j in range(6)]
        + ["male", "repvote"]
    )
    data = np.column_stack([onehot(state, S), np.ones(n), onehot(eth, 4), onehot(age, 6), onehot(edu, 6), male, repvote[state], y])
    cfg = {"kind": "mixed", "group1": g1, "group2": g2, "outcome": "y", "prior_scales": [1.0] * len(g2)}
    return Dataset(tuple(g1 + g2 + ["y"]), data, cfg)
