"""Per-iteration metrics rows and their stable CSV schema.

One row is recorded per iteration, computed at the across-worker mean
iterate *before* that iteration's update, matching the time-averaged
stationarity measure the convergence analysis bounds.  CSV files use the
fixed header below, 17-significant-digit decimals (lossless float64
round-trip), and LF line endings.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

CSV_HEADER = "t,f_mean,grad_norm,consensus_x,consensus_m,grad_est_err"


def format_float(x: float) -> str:
    """17 significant digits: parses back to the identical float64."""
    return f"{x:.17g}"


@dataclass(frozen=True)
class MetricsRow:
    """Snapshot at iteration t of the mean-iterate loss, the full-gradient
    Frobenius norm, both consensus errors, and the gradient-estimation error
    ||mean_k grad f_k(X_k) - mean_k M_k||_F."""

    t: int
    f_mean: float
    grad_norm: float
    consensus_x: float
    consensus_m: float
    grad_est_err: float

    def is_finite(self) -> bool:
        return all(
            math.isfinite(v)
            for v in (
                self.f_mean,
                self.grad_norm,
                self.consensus_x,
                self.consensus_m,
                self.grad_est_err,
            )
        )

    def csv_line(self) -> str:
        return ",".join(
            [str(self.t)]
            + [
                format_float(v)
                for v in (
                    self.f_mean,
                    self.grad_norm,
                    self.consensus_x,
                    self.consensus_m,
                    self.grad_est_err,
                )
            ]
        )


def write_metrics_csv(path: str | Path, rows: Iterable[MetricsRow]) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write(CSV_HEADER + "\n")
        for row in rows:
            fh.write(row.csv_line() + "\n")


def read_metrics_csv(path: str | Path) -> list[MetricsRow]:
    rows = []
    with open(path, "r", newline="\n") as fh:
        header = fh.readline().strip()
        if header != CSV_HEADER:
            raise ValueError(f"unexpected metrics header: {header!r}")
        for line in fh:
            t, *vals = line.strip().split(",")
            rows.append(MetricsRow(int(t), *(float(v) for v in vals)))
    return rows


def time_averaged_grad_norm(rows: Iterable[MetricsRow], squared: bool = False) -> float:
    """(1/T) sum_t ||grad f(mean X_t)||_F, or the squared variant."""
    rows = list(rows)
    if squared:
        return sum(r.grad_norm**2 for r in rows) / len(rows)
    return sum(r.grad_norm for r in rows) / len(rows)
