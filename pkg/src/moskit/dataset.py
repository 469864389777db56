"""Rating manifests: ingestion, validation, aggregation, and LD expansion.

A manifest is UTF-8 CSV with header ``utt_id,system_id,wav_path,listener_id,score``
and one row per individual rating. Rows are grouped per utterance into
:class:`RatedSample`; a whole file becomes a :class:`DatasetSplit`.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping

from .errors import ParseError, UnknownListenerError, ValidationError

MANIFEST_HEADER = ("utt_id", "system_id", "wav_path", "listener_id", "score")
SPLIT_NAMES = ("train", "valid", "test")

# listener index 0 is reserved for the virtual mean listener
MEAN_LISTENER_INDEX = 0


@dataclass(frozen=True)
class RatedSample:
    """One utterance with its per-listener integer scores."""

    utt_id: str
    system_id: str
    wav_path: str
    ratings: tuple[tuple[str, int], ...]

    def __post_init__(self):
        if not self.ratings:
            raise ValidationError(f"sample {self.utt_id!r} has no ratings")
        seen: set[str] = set()
        for listener_id, score in self.ratings:
            if not isinstance(score, int) or isinstance(score, bool):
                raise ValidationError(
                    f"sample {self.utt_id!r}: score {score!r} is not an integer"
                )
            if not 1 <= score <= 5:
                raise ValidationError(
                    f"sample {self.utt_id!r}: score {score} outside 1..5"
                )
            if listener_id in seen:
                raise ValidationError(
                    f"sample {self.utt_id!r}: duplicate listener {listener_id!r}"
                )
            seen.add(listener_id)

    @property
    def scores(self) -> tuple[int, ...]:
        return tuple(score for _, score in self.ratings)

    @property
    def mean_score(self) -> float:
        return sum(self.scores) / len(self.scores)


@dataclass(frozen=True)
class DatasetSplit:
    """A named collection of rated samples plus its listener registry."""

    name: str
    samples: tuple[RatedSample, ...]
    listener_registry: frozenset[str]

    def __post_init__(self):
        if self.name not in SPLIT_NAMES:
            raise ValidationError(
                f"split name {self.name!r} not one of {SPLIT_NAMES}"
            )
        seen: set[str] = set()
        for sample in self.samples:
            if sample.utt_id in seen:
                raise ValidationError(f"duplicate utt_id {sample.utt_id!r} in split")
            seen.add(sample.utt_id)
        union = frozenset(
            lid for sample in self.samples for lid, _ in sample.ratings
        )
        if union != self.listener_registry:
            raise ValidationError(
                "listener registry does not match the listeners present in samples"
            )

    @classmethod
    def from_samples(cls, name: str, samples: Iterable[RatedSample]) -> DatasetSplit:
        samples = tuple(samples)
        registry = frozenset(lid for s in samples for lid, _ in s.ratings)
        return cls(name=name, samples=samples, listener_registry=registry)

    def __len__(self) -> int:
        return len(self.samples)

    def utt_ids(self) -> tuple[str, ...]:
        return tuple(s.utt_id for s in self.samples)

    def sample_by_id(self, utt_id: str) -> RatedSample:
        for sample in self.samples:
            if sample.utt_id == utt_id:
                return sample
        raise KeyError(utt_id)


@dataclass(frozen=True)
class LDEntry:
    """One training target: an (utterance, listener index) pair and its score.

    Index 0 is the mean listener and carries the sample's mean score;
    indices >= 1 carry that listener's integer score.
    """

    utt_id: str
    listener_index: int
    target_score: float


def load_manifest(path: str | Path, split_name: str) -> DatasetSplit:
    """Read a rating manifest into a validated split (samples sorted by utt_id)."""
    path = Path(path)
    grouped: dict[str, dict] = {}
    seen_pairs: set[tuple[str, str]] = set()
    with path.open("r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty manifest, header expected", line=1)
        if tuple(h.strip() for h in header) != MANIFEST_HEADER:
            raise ParseError(
                f"{path}: bad header {header!r}, expected {','.join(MANIFEST_HEADER)}",
                line=1,
            )
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 5:
                raise ParseError(
                    f"{path}: expected 5 fields, got {len(row)}", line=lineno
                )
            utt_id, system_id, wav_path, listener_id, score_text = (
                field.strip() for field in row
            )
            if not utt_id or not listener_id:
                raise ParseError(f"{path}: empty utt_id or listener_id", line=lineno)
            try:
                score = int(score_text)
            except ValueError:
                raise ParseError(
                    f"{path}: score {score_text!r} is not an integer", line=lineno
                ) from None
            if not 1 <= score <= 5:
                raise ValidationError(
                    f"{path} line {lineno}: score {score} outside 1..5"
                )
            if (utt_id, listener_id) in seen_pairs:
                raise ValidationError(
                    f"{path} line {lineno}: duplicate rating for "
                    f"({utt_id!r}, {listener_id!r})"
                )
            seen_pairs.add((utt_id, listener_id))
            group = grouped.setdefault(
                utt_id, {"system_id": system_id, "wav_path": wav_path, "ratings": []}
            )
            if group["system_id"] != system_id or group["wav_path"] != wav_path:
                raise ValidationError(
                    f"{path} line {lineno}: utterance {utt_id!r} has inconsistent "
                    "system_id or wav_path across rows"
                )
            group["ratings"].append((listener_id, score))

    samples = [
        RatedSample(
            utt_id=utt_id,
            system_id=group["system_id"],
            wav_path=group["wav_path"],
            ratings=tuple(group["ratings"]),
        )
        for utt_id, group in sorted(grouped.items())
    ]
    return DatasetSplit.from_samples(split_name, samples)


def save_manifest(split: DatasetSplit, path: str | Path) -> None:
    """Write a split back to manifest CSV (inverse of load_manifest)."""
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_HEADER)
        for sample in split.samples:
            for listener_id, score in sample.ratings:
                writer.writerow(
                    [sample.utt_id, sample.system_id, sample.wav_path,
                     listener_id, score]
                )


def build_listener_index(registry: Iterable[str]) -> dict[str, int]:
    """Map listener ids to dense indices 1..L (0 stays reserved), sorted for determinism."""
    return {lid: i for i, lid in enumerate(sorted(registry), start=1)}


def expand_ld_entries(
    split: DatasetSplit,
    include_mean_listener: bool = True,
    registry: Mapping[str, int] | None = None,
) -> list[LDEntry]:
    """Expand a split into per-listener training entries.

    One entry per rating, mapped through the training listener registry;
    with ``include_mean_listener`` an extra index-0 entry per sample carries
    the mean score. Listeners absent from the registry are an error: entries
    are only ever expanded for training data.
    """
    if registry is None:
        registry = build_listener_index(split.listener_registry)
    entries: list[LDEntry] = []
    for sample in split.samples:
        if include_mean_listener:
            entries.append(
                LDEntry(sample.utt_id, MEAN_LISTENER_INDEX, sample.mean_score)
            )
        for listener_id, score in sample.ratings:
            try:
                index = registry[listener_id]
            except KeyError:
                raise UnknownListenerError(
                    f"listener {listener_id!r} (utterance {sample.utt_id!r}) "
                    "is not in the training registry"
                ) from None
            entries.append(LDEntry(sample.utt_id, index, float(score)))
    return entries


def agreement_filter(split: DatasetSplit) -> DatasetSplit:
    """Keep only samples whose listeners all assigned the identical score."""
    kept = tuple(s for s in split.samples if len(set(s.scores)) == 1)
    return DatasetSplit.from_samples(split.name, kept)
