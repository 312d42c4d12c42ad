"""Class-incremental evaluation metrics over the accuracy matrix.

``a[i][tau]`` is the test accuracy of task tau after learning task i
(both 1-based, tau <= i). After a full T-task run:

    avg_acc    = (1/T) * sum_tau a[T][tau]
    forgetting = (1/(T-1)) * sum_{tau<T} max_{i<T} (a[i][tau] - a[T][tau])
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import UsageError

__all__ = ["AccuracyMatrix", "compute_metrics", "avg_accuracy"]


@dataclass
class AccuracyMatrix:
    """Lower-triangular accuracy grid, filled one row per learned task."""

    n_tasks: int
    rows: list[list[float]] = field(default_factory=list)

    def add_row(self, accuracies) -> None:
        row = [float(a) for a in accuracies]
        if len(self.rows) >= self.n_tasks:
            raise UsageError(f"matrix already has all {self.n_tasks} rows")
        if len(row) != len(self.rows) + 1:
            raise UsageError(f"row {len(self.rows) + 1} must have {len(self.rows) + 1} entries")
        for a in row:
            if not (0.0 <= a <= 1.0):
                raise UsageError(f"accuracy {a} outside [0, 1]")
        self.rows.append(row)

    @property
    def complete(self) -> bool:
        return len(self.rows) == self.n_tasks

    def entry(self, i: int, tau: int) -> float:
        """a_{i,tau}, 1-based with tau <= i."""
        return self.rows[i - 1][tau - 1]

    def flat(self) -> list[float]:
        """Row-major lower triangle as one list."""
        return [a for row in self.rows for a in row]

    @staticmethod
    def from_flat(values) -> "AccuracyMatrix":
        values = list(values)
        t = int((np.sqrt(8 * len(values) + 1) - 1) / 2)
        if t * (t + 1) // 2 != len(values):
            raise UsageError(f"{len(values)} values is not a triangular count")
        m = AccuracyMatrix(n_tasks=t)
        pos = 0
        for i in range(1, t + 1):
            m.add_row(values[pos : pos + i])
            pos += i
        return m


def compute_metrics(m: AccuracyMatrix) -> tuple[float, float]:
    """Exact (avg_acc, forgetting) for a complete matrix; needs T >= 2."""
    if not m.complete:
        raise UsageError(f"matrix has {len(m.rows)} of {m.n_tasks} rows")
    t = m.n_tasks
    avg_acc = sum(m.entry(t, tau) for tau in range(1, t + 1)) / t
    if t == 1:
        raise UsageError("forgetting is undefined for a single task")
    total = 0.0
    for tau in range(1, t):
        total += max(m.entry(i, tau) for i in range(tau, t)) - m.entry(t, tau)
    return avg_acc, total / (t - 1)


def avg_accuracy(m: AccuracyMatrix) -> float:
    """Final-row mean accuracy alone (defined even for T = 1)."""
    if not m.complete:
        raise UsageError(f"matrix has {len(m.rows)} of {m.n_tasks} rows")
    return sum(m.rows[-1]) / m.n_tasks
