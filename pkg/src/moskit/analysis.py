"""Post-hoc analyses: prediction deviations and exports for later probing.

The deviation tools compare two models by how far each one's prediction
lands from the mean score, per utterance. The agreement export collects
samples whose listeners all gave the same score, pairing that score with
time-averaged features so rater agreement can be studied against signal
properties. The learning-curve export reduces a training log to
(step, validation utterance MSE) pairs.
"""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Mapping

import numpy as np

from .dataset import DatasetSplit, agreement_filter
from .errors import AlignmentError, CoverageError, DependencyError, ParseError
from .metrics import pearson_lcc
from .training import FeatureSource

AGREEMENT_META_COLUMNS = ("utt_id", "split", "score")
LEARNING_CURVE_HEADER = ("step", "valid_utt_mse")


def absolute_deviation(
    predictions: Mapping[str, float], truth: DatasetSplit
) -> dict[str, float]:
    """|prediction - mean score| for every sample in the split."""
    missing = [s.utt_id for s in truth.samples if s.utt_id not in predictions]
    if missing:
        shown = ", ".join(missing[:10])
        raise CoverageError(
            f"predictions missing for {len(missing)} utterances: {shown}",
            missing=tuple(missing),
        )
    return {
        s.utt_id: abs(float(predictions[s.utt_id]) - s.mean_score)
        for s in truth.samples
    }


def deviation_correlation(
    dev_a: Mapping[str, float], dev_b: Mapping[str, float]
) -> float:
    """Pearson correlation of two per-utterance deviation maps.

    Both maps must cover exactly the same utterances; anything on one side
    only is reported so mismatched evaluations fail loudly.
    """
    only_a = sorted(set(dev_a) - set(dev_b))
    only_b = sorted(set(dev_b) - set(dev_a))
    if only_a or only_b:
        parts = []
        if only_a:
            parts.append(f"only in first: {', '.join(only_a[:10])}")
        if only_b:
            parts.append(f"only in second: {', '.join(only_b[:10])}")
        raise AlignmentError(f"deviation maps disagree; {'; '.join(parts)}")
    utt_ids = sorted(dev_a)
    a = np.array([dev_a[u] for u in utt_ids], dtype=np.float64)
    b = np.array([dev_b[u] for u in utt_ids], dtype=np.float64)
    return pearson_lcc(a, b)


def export_agreement_features(
    splits: Mapping[str, DatasetSplit],
    source: FeatureSource,
    out_path: str | Path,
) -> int:
    """Write unanimous-rating samples with time-averaged features.

    One row per sample whose listeners all gave the same score: utt_id, the
    split it came from, the shared score, then one column per feature
    dimension holding the mean over frames. Samples without stored features
    are skipped rather than failing the export. Returns the row count.
    """
    rows: list[tuple[str, str, int, np.ndarray]] = []
    dim: int | None = None
    for split_name, split in splits.items():
        for sample in agreement_filter(split).samples:
            try:
                matrix = np.asarray(source.get(sample.utt_id), dtype=np.float64)
            except DependencyError:
                continue
            if dim is None:
                dim = matrix.shape[0]
            elif matrix.shape[0] != dim:
                raise AlignmentError(
                    f"feature dim changed from {dim} to {matrix.shape[0]} "
                    f"at utterance {sample.utt_id!r}"
                )
            rows.append(
                (sample.utt_id, split_name, sample.scores[0], matrix.mean(axis=1))
            )
    out_path = Path(out_path)
    with open(out_path, "w", newline="") as handle:
        handle.write(
            "# unanimous-rating samples with time-averaged features; "
            f"{len(rows)} rows\n"
        )
        writer = csv.writer(handle)
        feat_cols = [f"feat_{i}" for i in range(dim or 0)]
        writer.writerow(list(AGREEMENT_META_COLUMNS) + feat_cols)
        for utt_id, split_name, score, means in rows:
            writer.writerow(
                [utt_id, split_name, score] + [f"{v:.8g}" for v in means]
            )
    return len(rows)


def export_learning_curve(log_path: str | Path, out_path: str | Path) -> int:
    """Reduce a training log to (step, validation utterance MSE) rows.

    Returns the number of points written; a header-only log yields a
    header-only output.
    """
    log_path = Path(log_path)
    with open(log_path, newline="") as handle:
        reader = csv.reader(handle)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty training log") from None
        try:
            step_col = header.index("step")
            mse_col = header.index("valid_utt_mse")
        except ValueError:
            raise ParseError(
                f"training log must have 'step' and 'valid_utt_mse' columns, "
                f"got {header}",
                line=1,
            ) from None
        points: list[tuple[int, float]] = []
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                points.append((int(row[step_col]), float(row[mse_col])))
            except (ValueError, IndexError) as exc:
                raise ParseError(f"bad log row: {exc}", line=line_no) from None
    out_path = Path(out_path)
    with open(out_path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(LEARNING_CURVE_HEADER)
        for step, mse in points:
            writer.writerow([step, f"{mse:.6f}"])
    return len(points)
