"""Per-iteration optimization records and their CSV serialization."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .measures import GaussianMeasure

BASE_COLUMNS = ("iter", "objective", "err_seen", "err_unseen", "grad_norm", "wall_ms")


def _fmt(x) -> str:
    x = float(x)
    if math.isnan(x):
        return "nan"
    return repr(x)


def gaussian_params(g: GaussianMeasure) -> np.ndarray:
    """Mean followed by the row-major lower triangle of the Cholesky factor."""
    rows, cols = np.tril_indices(g.dim)
    return np.concatenate([g.mean, g.cov_factor[rows, cols]])


def gaussian_from_params(params, d: int) -> GaussianMeasure:
    params = np.asarray(params, dtype=float)
    L = np.zeros((d, d))
    L[np.tril_indices(d)] = params[d:]
    return GaussianMeasure(params[:d], L)


def param_names(d: int) -> list[str]:
    rows, cols = np.tril_indices(d)
    return [f"m{i}" for i in range(d)] + [f"L{i}_{j}" for i, j in zip(rows, cols)]


@dataclass
class IterationRecord:
    iter: int
    objective: float
    err_seen: float = float("nan")
    err_unseen: float = float("nan")
    grad_norm: float = float("nan")
    wall_ms: float = float("nan")
    params: np.ndarray = field(default_factory=lambda: np.zeros(0))
    extra: dict = field(default_factory=dict)


@dataclass
class OptimizationTrace:
    """Rows ``0..K`` for a run of ``K`` completed iterations; row 0 is the initial state."""

    records: list = field(default_factory=list)
    param_columns: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)
    final: object = None
    summary: dict = field(default_factory=dict)

    def append(self, record: IterationRecord):
        self.records.append(record)

    @property
    def completed_iterations(self) -> int:
        return max(len(self.records) - 1, 0)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records], dtype=float)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(list(BASE_COLUMNS) + list(self.param_columns))
        for r in self.records:
            row = [str(int(r.iter))] + [
                _fmt(getattr(r, c)) for c in BASE_COLUMNS[1:]
            ]
            row += [_fmt(p) for p in r.params]
            writer.writerow(row)
        return buf.getvalue()

    def write_csv(self, path):
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(self.to_csv())

    @classmethod
    def read_csv(cls, path) -> "OptimizationTrace":
        with open(path, encoding="utf-8", newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            trace = cls(param_columns=header[len(BASE_COLUMNS):])
            for row in reader:
                vals = [float(v) for v in row[1:len(BASE_COLUMNS)]]
                trace.append(IterationRecord(
                    int(row[0]), *vals,
                    params=np.array([float(v) for v in row[len(BASE_COLUMNS):]]),
                ))
        return trace
