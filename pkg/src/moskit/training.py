"""Training loop, objectives, and checkpoint selection.

Objectives operate on utterance-level scores within a minibatch: plain MSE
against listener-dependent targets, negative Pearson correlation, or their
weighted sum. Validation happens every `eval_every` steps with the mean
listener; each validation writes a checkpoint, and the best one is the
highest validation system-level SRCC (earliest step on ties).
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Iterator, Protocol, Sequence

import numpy as np
import torch

from .dataset import DatasetSplit, LDEntry, build_listener_index, expand_ld_entries
from .errors import (
    ConfigError,
    DependencyError,
    ShapeError,
    TrainingError,
    ValidationError,
)
from .features import read_feature_file
from .metrics import EvalReport, evaluate
from .model import ListenerDependentNet, ModelConfig, predict_mean_listener, save_checkpoint

OBJECTIVES = ("mse", "neg_lcc", "mse_plus_k_lcc")
LCC_EPS = 1e-8

TRAINING_LOG_NAME = "training_log.csv"
TRAINING_LOG_HEADER = (
    "step",
    "train_loss",
    "valid_utt_srcc",
    "valid_sys_srcc",
    "valid_utt_mse",
    "valid_utt_lcc",
    "valid_sys_mse",
    "valid_sys_lcc",
)


@dataclass(frozen=True)
class TrainConfig:
    objective: str = "mse"
    k: float = 1.0
    batch_size: int = 15
    max_steps: int = 200_000
    eval_every: int = 1000
    seed: int = 0
    learning_rate: float = 1e-4
    include_mean_listener: bool = True

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ConfigError(
                f"unknown objective {self.objective!r}; choose from {OBJECTIVES}"
            )
        if self.objective == "mse_plus_k_lcc" and not self.k > 0:
            raise ConfigError(f"k must be > 0, got {self.k}")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2")
        if self.max_steps < 0:
            raise ConfigError("max_steps must be >= 0")
        if self.eval_every < 1:
            raise ConfigError("eval_every must be >= 1")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")


def _as_float_pair(
    predicted, targets
) -> tuple[torch.Tensor, torch.Tensor]:
    p = torch.as_tensor(predicted)
    if not p.is_floating_point():
        p = p.to(torch.get_default_dtype())
    t = torch.as_tensor(targets)
    t = t.to(dtype=p.dtype)
    if p.shape != t.shape:
        raise ShapeError(f"shape mismatch: {tuple(p.shape)} vs {tuple(t.shape)}")
    if p.ndim != 1:
        raise ShapeError(f"expected 1-d score vectors, got {p.ndim}-d")
    return p, t


def mse_ld_loss(predicted, targets) -> torch.Tensor:
    """Mean squared error over (utterance, listener) scores."""
    p, t = _as_float_pair(predicted, targets)
    if p.numel() < 1:
        raise ValidationError("mse needs at least one pair")
    return ((p - t) ** 2).mean()


def neg_lcc_loss(predicted, targets) -> torch.Tensor:
    """Negative Pearson correlation of the batch, guarded by a small eps.

    Uses population moments; the eps in the denominator keeps the value
    finite (and the gradient usable) when either side is constant.
    """
    p, t = _as_float_pair(predicted, targets)
    if p.numel() < 2:
        raise ValidationError("correlation needs at least two pairs")
    dp = p - p.mean()
    dt = t - t.mean()
    cov = (dp * dt).mean()
    # the variance clamp keeps sqrt's gradient finite on exactly constant
    # input; at that scale the eps term dominates the denominator anyway
    std_p = dp.pow(2).mean().clamp_min(1e-24).sqrt()
    std_t = dt.pow(2).mean().clamp_min(1e-24).sqrt()
    return -cov / (std_p * std_t + LCC_EPS)


def combined_loss(predicted, targets, k: float) -> torch.Tensor:
    """mse + k * neg_lcc with k > 0."""
    if not k > 0:
        raise ConfigError(f"k must be > 0, got {k}")
    return mse_ld_loss(predicted, targets) + k * neg_lcc_loss(predicted, targets)


class FeatureSource(Protocol):
    def get(self, utt_id: str) -> np.ndarray:
        """Return the (D, T) feature matrix for one utterance."""
        ...


class DirectoryFeatureSource:
    """Reads `<utt_id>.feat` files from a directory, caching matrices."""

    def __init__(self, directory: str | Path):
        self.directory = Path(directory)
        self._cache: dict[str, np.ndarray] = {}

    def get(self, utt_id: str) -> np.ndarray:
        if utt_id not in self._cache:
            path = self.directory / f"{utt_id}.feat"
            if not path.is_file():
                raise DependencyError(f"missing feature file: {path}")
            data, _ = read_feature_file(path)
            self._cache[utt_id] = data
        return self._cache[utt_id]


class InMemoryFeatureSource:
    """Feature matrices held in a dict, mainly for tests."""

    def __init__(self, matrices: dict[str, np.ndarray]):
        self._matrices = {
            utt_id: np.asarray(m, dtype=np.float32) for utt_id, m in matrices.items()
        }

    def get(self, utt_id: str) -> np.ndarray:
        if utt_id not in self._matrices:
            raise DependencyError(f"no features for utterance {utt_id!r}")
        return self._matrices[utt_id]


def make_batches(
    entries: Sequence[LDEntry], batch_size: int, rng_seed: int
) -> Iterator[list[LDEntry]]:
    """Endless stream of shuffled batches; reshuffles each pass.

    A trailing batch is kept unless it has fewer than two entries, which
    would make correlation objectives undefined.
    """
    if batch_size < 2:
        raise ValidationError("batch_size must be >= 2")
    if not entries:
        raise ValidationError("no training entries")
    entries = list(entries)
    rng = np.random.default_rng(rng_seed)
    while True:
        order = rng.permutation(len(entries))
        for start in range(0, len(entries), batch_size):
            chunk = order[start : start + batch_size]
            if len(chunk) < 2:
                continue
            yield [entries[i] for i in chunk]


@dataclass(frozen=True)
class Batch:
    features: torch.Tensor  # (B, Tmax, D)
    mask: torch.Tensor  # (B, Tmax)
    listener_index: torch.Tensor  # (B,)
    targets: torch.Tensor  # (B,)
    utt_ids: tuple[str, ...]


def collate_batch(entries: Sequence[LDEntry], source: FeatureSource) -> Batch:
    """Zero-pad variable-length features to the batch max and build a mask."""
    mats = [np.asarray(source.get(e.utt_id), dtype=np.float32) for e in entries]
    dims = {m.shape[0] for m in mats}
    if len(dims) != 1:
        raise ShapeError(f"mixed feature dims in one batch: {sorted(dims)}")
    dim = dims.pop()
    t_max = max(m.shape[1] for m in mats)
    feats = np.zeros((len(mats), t_max, dim), dtype=np.float32)
    mask = np.zeros((len(mats), t_max), dtype=np.float32)
    for i, m in enumerate(mats):
        feats[i, : m.shape[1]] = m.T
        mask[i, : m.shape[1]] = 1.0
    return Batch(
        features=torch.from_numpy(feats),
        mask=torch.from_numpy(mask),
        listener_index=torch.tensor(
            [e.listener_index for e in entries], dtype=torch.long
        ),
        targets=torch.tensor([e.target_score for e in entries], dtype=torch.float32),
        utt_ids=tuple(e.utt_id for e in entries),
    )


@dataclass(frozen=True)
class ValidationMetrics:
    utterance: EvalReport
    system: EvalReport


@dataclass(frozen=True)
class CheckpointRecord:
    step: int
    path: Path
    valid_metrics: ValidationMetrics


def _objective_fn(cfg: TrainConfig) -> Callable[..., torch.Tensor]:
    if cfg.objective == "mse":
        return mse_ld_loss
    if cfg.objective == "neg_lcc":
        return neg_lcc_loss
    return lambda p, t: combined_loss(p, t, cfg.k)


def validate_model(
    model: ListenerDependentNet, valid: DatasetSplit, source: FeatureSource
) -> ValidationMetrics:
    """Mean-listener predictions on a split, scored at both levels."""
    predictions = {
        sample.utt_id: predict_mean_listener(model, source.get(sample.utt_id))
        for sample in valid.samples
    }
    return ValidationMetrics(
        utterance=evaluate(predictions, valid, "utterance"),
        system=evaluate(predictions, valid, "system"),
    )


def run_training(
    cfg: TrainConfig,
    train: DatasetSplit,
    valid: DatasetSplit,
    feature_source: FeatureSource,
    out_dir: str | Path,
    model_cfg: ModelConfig | None = None,
    step_callback: Callable[[int, float], None] | None = None,
) -> list[CheckpointRecord]:
    """Train a listener-dependent predictor; returns one record per eval.

    Seeding both torch and the batch shuffler from cfg.seed makes reruns
    reproduce the same loss sequence and byte-identical checkpoints.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    registry = build_listener_index(train.listener_registry)
    entries = expand_ld_entries(
        train, include_mean_listener=cfg.include_mean_listener, registry=registry
    )
    if not entries:
        raise ValidationError("training split produced no entries")

    input_dim = int(np.asarray(feature_source.get(train.samples[0].utt_id)).shape[0])
    if model_cfg is None:
        model_cfg = ModelConfig(
            input_dim=input_dim,
            num_listeners=len(registry),
            has_mean_listener=cfg.include_mean_listener,
        )
    else:
        if model_cfg.input_dim != input_dim:
            raise ConfigError(
                f"model input_dim {model_cfg.input_dim} != feature dim {input_dim}"
            )
        if model_cfg.num_listeners != len(registry):
            raise ConfigError(
                f"model num_listeners {model_cfg.num_listeners} != "
                f"{len(registry)} listeners in the training split"
            )
        if model_cfg.has_mean_listener != cfg.include_mean_listener:
            raise ConfigError("model and trainer disagree on the mean listener")

    torch.manual_seed(cfg.seed)
    model = ListenerDependentNet(model_cfg)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    objective = _objective_fn(cfg)
    batches = make_batches(entries, cfg.batch_size, cfg.seed)

    records: list[CheckpointRecord] = []
    losses_since_eval: list[float] = []
    log_path = out_dir / TRAINING_LOG_NAME
    with open(log_path, "w", newline="") as log_file:
        log = csv.writer(log_file)
        log.writerow(TRAINING_LOG_HEADER)
        for step in range(1, cfg.max_steps + 1):
            batch = collate_batch(next(batches), feature_source)
            model.train()
            optimizer.zero_grad()
            utt_scores, _ = model(batch.features, batch.listener_index, batch.mask)
            loss = objective(utt_scores, batch.targets)
            if not torch.isfinite(loss):
                raise TrainingError(
                    f"non-finite loss at step {step}; "
                    f"batch utterances: {', '.join(batch.utt_ids)}"
                )
            loss.backward()
            optimizer.step()
            loss_value = float(loss.detach())
            losses_since_eval.append(loss_value)
            if step_callback is not None:
                step_callback(step, loss_value)
            if step % cfg.eval_every == 0:
                metrics = validate_model(model, valid, feature_source)
                ckpt_path = out_dir / f"step_{step:08d}.ckpt"
                save_checkpoint(
                    ckpt_path,
                    model,
                    registry,
                    step=step,
                    extra={"train_config": asdict(cfg)},
                )
                records.append(CheckpointRecord(step, ckpt_path, metrics))
                log.writerow(
                    [
                        step,
                        f"{float(np.mean(losses_since_eval)):.6f}",
                        f"{metrics.utterance.srcc:.6f}",
                        f"{metrics.system.srcc:.6f}",
                        f"{metrics.utterance.mse:.6f}",
                        f"{metrics.utterance.lcc:.6f}",
                        f"{metrics.system.mse:.6f}",
                        f"{metrics.system.lcc:.6f}",
                    ]
                )
                log_file.flush()
                losses_since_eval.clear()
    return records


def select_best_checkpoint(records: Sequence[CheckpointRecord]) -> CheckpointRecord:
    """Highest validation system-level SRCC; earliest step wins ties."""
    if not records:
        raise ValidationError("no checkpoints to select from")
    best = None
    for record in sorted(records, key=lambda r: r.step):
        if best is None or record.valid_metrics.system.srcc > best.valid_metrics.system.srcc:
            best = record
    return best
