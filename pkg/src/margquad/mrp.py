"""Poststratification: linear combinations of posterior coefficients.

Each cell estimate is u = sum_i delta_i beta_i, with mean delta^t E[beta]
and variance delta^t Cov(beta) delta.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import MissingCovariance, ValidationError
from .model import PosteriorSummary


@dataclass(frozen=True, eq=False)
class PoststratTable:
    """One row per cell: weights over a named subset of coefficients."""

    cells: tuple
    coefficients: tuple
    weights: np.ndarray  # (len(cells), len(coefficients))

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.shape != (len(self.cells), len(self.coefficients)):
            raise ValidationError("poststratification weights do not match cells x coefficients")
        if not np.all(np.isfinite(w)):
            raise ValidationError("poststratification weights must be finite")

    @classmethod
    def read_csv(cls, path) -> "PoststratTable":
        """Wide CSV: a ``cell`` column followed by one column per coefficient."""
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        if not rows:
            raise ValidationError(f"{path}: empty table")
        header = rows[0]
        if not header or header[0] != "cell":
            raise ValidationError(f"{path}: first column must be 'cell'")
        cells, data = [], []
        for lineno, row in enumerate(rows[1:], start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ValidationError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            cells.append(row[0])
            try:
                data.append([float(v) for v in row[1:]])
            except ValueError as exc:
                raise ValidationError(f"{path}:{lineno}: {exc}") from exc
        w = np.array(data, dtype=float).reshape(len(cells), len(header) - 1)
        return cls(tuple(cells), tuple(header[1:]), w)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["cell", *self.coefficients])
            for cell, row in zip(self.cells, self.weights):
                wr.writerow([cell, *(repr(float(v)) for v in row)])


@dataclass(frozen=True, eq=False)
class CellEstimates:
    cells: tuple
    mean: np.ndarray
    sd: np.ndarray

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["cell", "mean", "sd"])
            for c, m, s in zip(self.cells, self.mean, self.sd):
                wr.writerow([c, repr(float(m)), repr(float(s))])


def mrp_combine(summary: PosteriorSummary, table: PoststratTable, names: Sequence[str]) -> CellEstimates:
    """Per-cell mean and sd of the weighted coefficient sums.

    ``names`` labels the coefficients of ``summary`` in order.  Rows that
    touch a single coefficient may fall back to its marginal sd; any other
    row needs the covariance of every coefficient it references.
    """
    pos = {n: i for i, n in enumerate(names)}
    missing = [c for c in table.coefficients if c not in pos]
    if missing:
        raise ValidationError(f"table references unknown coefficients: {missing}")
    idx = np.array([pos[c] for c in table.coefficients], dtype=int)
    W = table.weights
    mean = W @ summary.beta_mean[idx]
    used = np.nonzero(np.any(W != 0, axis=0))[0]
    try:
        block = summary.covariance_block(idx[used])
    except MissingCovariance:
        block = None
    var = np.empty(len(table.cells))
    for r in range(len(table.cells)):
        nz = np.nonzero(W[r, used])[0]
        if block is not None:
            d = W[r, used[nz]]
            var[r] = d @ block[np.ix_(nz, nz)] @ d
        elif nz.size <= 1:
            j = idx[used[nz]] if nz.size else idx[:0]
            var[r] = float(np.sum((W[r, used[nz]] * summary.beta_sd[j]) ** 2))
        else:
            refs = [table.coefficients[used[i]] for i in nz]
            raise MissingCovariance(f"cell {table.cells[r]!r} needs the covariance of {refs}")
    return CellEstimates(table.cells, mean, np.sqrt(np.maximum(var, 0.0)))
