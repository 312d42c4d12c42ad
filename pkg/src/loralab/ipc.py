"""Sensitivity-based importance of parameter matrices and freeze selection.

The instantaneous importance of an entry is |w * dL/dw|. Per mini-batch
step this is smoothed by an exponential moving average, and a second EMA
tracks the local variation (uncertainty) of the raw signal around the
smoothed one. An entry's score is the product of the two averages; a
matrix's score is the mean over its entries. After each task the highest
scoring unfrozen matrices are selected for freezing.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .errors import ShapeError, UsageError

__all__ = [
    "IpcConfig",
    "ImportanceTracker",
    "FreezeSet",
    "accumulate_step",
    "matrix_scores",
    "select_freeze_set",
    "location_key",
]

_LOC_RE = re.compile(r"^block(\d+)\.(\w+)$")


def location_key(location: str) -> tuple[int, str]:
    """Stable sort key (block index, weight name) for a location id."""
    m = _LOC_RE.match(location)
    if not m:
        raise UsageError(f"malformed location id {location!r}")
    return int(m.group(1)), m.group(2)


@dataclass
class IpcConfig:
    beta1: float = 0.85
    beta2: float = 0.85
    top_p: float = 0.10
    # Whether top_p counts the not-yet-frozen matrices (default) or all.
    count_base: str = "unfrozen"

    def validate(self) -> "IpcConfig":
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise UsageError("beta1 and beta2 must lie in (0, 1)")
        if not (0.0 <= self.top_p <= 1.0):
            raise UsageError("top_p must lie in [0, 1]")
        if self.count_base not in ("unfrozen", "all"):
            raise UsageError("count_base must be 'unfrozen' or 'all'")
        return self


@dataclass
class ImportanceTracker:
    """Per-task EMA state (smoothed importance and uncertainty) per location."""

    task_id: int
    ibar: dict[str, np.ndarray] = field(default_factory=dict)
    ubar: dict[str, np.ndarray] = field(default_factory=dict)
    steps: int = 0


def accumulate_step(
    tracker: ImportanceTracker,
    w_eff: Mapping[str, np.ndarray],
    grad_w: Mapping[str, np.ndarray],
    cfg: IpcConfig,
) -> None:
    """Fold one optimizer step's effective weights and gradients into the EMAs.

    Entrywise, with i = |w * g| and the EMAs starting at zero:
        ibar <- beta1*ibar + (1-beta1)*i
        ubar <- beta2*ubar + (1-beta2)*|i - ibar_prev|
    """
    if set(w_eff) != set(grad_w):
        raise UsageError("w_eff and grad_w must cover the same locations")
    for loc, w in w_eff.items():
        g = grad_w[loc]
        if w.shape != g.shape:
            raise ShapeError(f"{loc}: weight shape {w.shape} != grad shape {g.shape}")
        inst = np.abs(w * g)
        prev = tracker.ibar.get(loc)
        if prev is None:
            prev = np.zeros_like(inst)
            tracker.ubar[loc] = np.zeros_like(inst)
        tracker.ibar[loc] = cfg.beta1 * prev + (1.0 - cfg.beta1) * inst
        tracker.ubar[loc] = cfg.beta2 * tracker.ubar[loc] + (1.0 - cfg.beta2) * np.abs(inst - prev)
    tracker.steps += 1


def matrix_scores(tracker: ImportanceTracker) -> dict[str, float]:
    """Mean over entries of ibar * ubar, per tracked location."""
    if tracker.steps == 0:
        raise UsageError("tracker has accumulated no steps")
    return {
        loc: float(np.mean(tracker.ibar[loc] * tracker.ubar[loc]))
        for loc in tracker.ibar
    }


@dataclass
class FreezeSet:
    task_id: int
    locations: list[str]
    scores: list[float]


def select_freeze_set(
    scores: Mapping[str, float],
    already_frozen: set[str],
    cfg: IpcConfig,
    task_id: int = 0,
) -> FreezeSet:
    """Pick the top-p highest scoring locations not yet frozen.

    Sorted by score descending with ties broken by (block index, weight
    name) ascending; the count is ceil(top_p * base), where base counts the
    remaining unfrozen locations (or all of them, per config).
    """
    if not scores:
        raise UsageError("empty score map")
    remaining = [loc for loc in scores if loc not in already_frozen]
    base = len(remaining) if cfg.count_base == "unfrozen" else len(scores)
    count = min(math.ceil(cfg.top_p * base), len(remaining))
    ranked = sorted(remaining, key=lambda loc: (-scores[loc],) + location_key(loc))
    chosen = ranked[:count]
    return FreezeSet(task_id=task_id, locations=chosen, scores=[scores[c] for c in chosen])
