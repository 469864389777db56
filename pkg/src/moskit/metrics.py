"""Utterance- and system-level MSE / LCC / SRCC evaluation.

Correlations are computed from scratch (sample Pearson, Spearman as Pearson
of average ranks) so tie handling and failure behavior are explicit: a
constant vector raises instead of returning NaN, so a degenerate prediction
set fails loudly during checkpoint selection.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import DatasetSplit
from .errors import CoverageError, ShapeError, UndefinedCorrelationError

EVAL_LEVELS = ("utterance", "system")


@dataclass(frozen=True)
class EvalReport:
    """One row of the evaluation protocol at one level."""

    level: str
    mse: float
    lcc: float
    srcc: float
    n: int

    def to_row(self) -> str:
        return (
            f"{self.level},{self.mse:.6f},{self.lcc:.6f},{self.srcc:.6f},{self.n}"
        )

    @staticmethod
    def header() -> str:
        return "level,mse,lcc,srcc,n"


def _paired(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.size != b.size:
        raise ShapeError(f"length mismatch: {a.size} vs {b.size}")
    if a.size < 2:
        raise UndefinedCorrelationError(
            f"correlation needs at least 2 points, got {a.size}"
        )
    return a, b


def pearson_lcc(a, b) -> float:
    """Sample Pearson correlation; raises on constant input."""
    a, b = _paired(a, b)
    da = a - a.mean()
    db = b - b.mean()
    # single sqrt over the product: sqrt(s*s) == s exactly in IEEE-754,
    # so the self-correlation of any non-constant vector is exactly 1.0
    denom = np.sqrt((da**2).sum() * (db**2).sum())
    if denom == 0.0:
        raise UndefinedCorrelationError(
            "correlation undefined: at least one input vector is constant"
        )
    return float(np.clip((da * db).sum() / denom, -1.0, 1.0))


def average_ranks(x) -> np.ndarray:
    """Average (fractional) ranks, 1-based; ties share their rank mean."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    order = np.argsort(x, kind="stable")
    ranks = np.empty(x.size, dtype=np.float64)
    i = 0
    while i < x.size:
        j = i
        while j + 1 < x.size and x[order[j + 1]] == x[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman_srcc(a, b) -> float:
    """Spearman rank correlation: Pearson over average-ranked values."""
    a, b = _paired(a, b)
    return pearson_lcc(average_ranks(a), average_ranks(b))


def evaluate(
    predictions: dict[str, float], truth: DatasetSplit, level: str
) -> EvalReport:
    """Score a prediction set against the split's mean opinion scores.

    Utterance level compares per-utterance predictions to per-utterance mean
    scores. System level first averages predictions and mean scores within
    each system, then compares the per-system means.
    """
    if level not in EVAL_LEVELS:
        raise ShapeError(f"unknown level {level!r}, expected one of {EVAL_LEVELS}")
    missing = tuple(
        s.utt_id for s in truth.samples if s.utt_id not in predictions
    )
    if missing:
        shown = ", ".join(missing[:10])
        more = "" if len(missing) <= 10 else f" (+{len(missing) - 10} more)"
        raise CoverageError(
            f"predictions missing for {len(missing)} utterances: {shown}{more}",
            missing=missing,
        )

    if level == "utterance":
        pred = np.array([predictions[s.utt_id] for s in truth.samples])
        target = np.array([s.mean_score for s in truth.samples])
    else:
        by_system: dict[str, list[tuple[float, float]]] = {}
        for s in truth.samples:
            by_system.setdefault(s.system_id, []).append(
                (predictions[s.utt_id], s.mean_score)
            )
        if len(by_system) < 2:
            raise UndefinedCorrelationError(
                f"system-level evaluation needs >= 2 systems, got {len(by_system)}"
            )
        pred = np.array(
            [np.mean([p for p, _ in pairs]) for _, pairs in sorted(by_system.items())]
        )
        target = np.array(
            [np.mean([t for _, t in pairs]) for _, pairs in sorted(by_system.items())]
        )

    mse = float(((pred - target) ** 2).mean())
    return EvalReport(
        level=level,
        mse=mse,
        lcc=pearson_lcc(pred, target),
        srcc=spearman_srcc(pred, target),
        n=pred.size,
    )
