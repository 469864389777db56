"""Command-line interface: extract features, train, evaluate, analyze.

Exit codes: 0 success, 1 runtime error, 2 partial batch failure (some files
of an extraction failed), 64 usage error (bad flags, unknown config key,
unknown recipe). The MOSKIT_SEED environment variable overrides the seed
from the training config file.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import os
import sys
from pathlib import Path

from .analysis import (
    absolute_deviation,
    deviation_correlation,
    export_agreement_features,
    export_learning_curve,
)
from .dataset import SPLIT_NAMES, load_manifest
from .errors import ConfigError, MoskitError, ParseError
from .features import (
    EMBEDDING_RECIPES,
    RECIPES,
    FeatureConfig,
    build_features,
    write_feature_file,
)
from .metrics import EVAL_LEVELS, evaluate
from .model import load_checkpoint, predict_mean_listener
from .training import DirectoryFeatureSource, TrainConfig, run_training, select_best_checkpoint

PREDICTIONS_HEADER = ("utt_id", "system_id", "predicted_mos")

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_PARTIAL = 2
EXIT_USAGE = 64


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


_CONFIG_TYPES = {
    "objective": str,
    "k": float,
    "batch_size": int,
    "max_steps": int,
    "eval_every": int,
    "seed": int,
    "learning_rate": float,
    "include_mean_listener": None,  # parsed as bool below
}

_TRUE_WORDS = {"true", "yes", "on", "1"}
_FALSE_WORDS = {"false", "no", "off", "0"}


def _parse_bool(value: str) -> bool:
    lowered = value.lower()
    if lowered in _TRUE_WORDS:
        return True
    if lowered in _FALSE_WORDS:
        return False
    raise ValueError(f"not a boolean: {value!r}")


def parse_train_config(path: str | Path) -> TrainConfig:
    """Read a flat key=value config file into a TrainConfig.

    Blank lines and `#` comments are ignored; keys must be TrainConfig
    fields. MOSKIT_SEED, when set, replaces the seed.
    """
    values = {}
    with open(path) as handle:
        for line_no, raw in enumerate(handle, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if not sep or not key:
                raise _UsageError(f"{path}:{line_no}: expected key=value")
            if key not in _CONFIG_TYPES:
                raise _UsageError(f"{path}:{line_no}: unknown config key {key!r}")
            convert = _CONFIG_TYPES[key] or _parse_bool
            try:
                values[key] = convert(value)
            except ValueError as exc:
                raise _UsageError(f"{path}:{line_no}: bad value for {key}: {exc}")
    cfg = TrainConfig(**values)
    env_seed = os.environ.get("MOSKIT_SEED")
    if env_seed is not None:
        try:
            cfg = dataclasses.replace(cfg, seed=int(env_seed))
        except ValueError:
            raise _UsageError(f"MOSKIT_SEED must be an integer, got {env_seed!r}")
    return cfg


def _read_predictions(path: str | Path) -> dict[str, float]:
    with open(path, newline="") as handle:
        reader = csv.reader(handle)
        header = next(reader, None)
        if header is None or tuple(header) != PREDICTIONS_HEADER:
            raise ParseError(
                f"{path}: expected header {','.join(PREDICTIONS_HEADER)}", line=1
            )
        predictions = {}
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise ParseError(f"{path}: expected 3 fields", line=line_no)
            try:
                predictions[row[0]] = float(row[2])
            except ValueError:
                raise ParseError(
                    f"{path}: bad predicted_mos {row[2]!r}", line=line_no
                ) from None
    return predictions


def _write_predictions(path: str | Path, split, predictions: dict[str, float]) -> None:
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(PREDICTIONS_HEADER)
        for sample in split.samples:
            writer.writerow(
                [sample.utt_id, sample.system_id, f"{predictions[sample.utt_id]:.6f}"]
            )


def cmd_extract(args) -> int:
    if args.recipe in EMBEDDING_RECIPES and not args.embeddings:
        raise _UsageError(
            f"recipe {args.recipe!r} reads precomputed embeddings; "
            "pass the embedding_dir with --embeddings"
        )
    split = load_manifest(args.manifest, args.split)
    cfg = FeatureConfig(
        embedding_dir=Path(args.embeddings) if args.embeddings else None
    )
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    failures: list[tuple[str, str]] = []
    written = 0
    for sample in split.samples:
        try:
            matrix = build_features(sample, args.recipe, cfg)
            write_feature_file(
                out_dir / f"{sample.utt_id}.feat", matrix.data, matrix.frame_rate
            )
            written += 1
        except (MoskitError, OSError) as exc:
            failures.append((sample.utt_id, str(exc)))
    print(f"extracted {written} of {len(split)} utterances to {out_dir}")
    for utt_id, message in failures:
        print(f"FAILED {utt_id}: {message}", file=sys.stderr)
    return EXIT_PARTIAL if failures else EXIT_OK


def cmd_train(args) -> int:
    cfg = parse_train_config(args.config)
    train = load_manifest(args.train, "train")
    valid = load_manifest(args.valid, "valid")
    source = DirectoryFeatureSource(args.features)
    records = run_training(cfg, train, valid, source, args.out)
    if not records:
        print("no checkpoints written (max_steps below eval_every)")
        return EXIT_OK
    best = select_best_checkpoint(records)
    print(
        f"best checkpoint: {best.path} "
        f"(step {best.step}, valid system SRCC {best.valid_metrics.system.srcc:.4f})"
    )
    return EXIT_OK


def cmd_evaluate(args) -> int:
    model, _, _ = load_checkpoint(args.ckpt)
    split = load_manifest(args.manifest, args.split)
    source = DirectoryFeatureSource(args.features)
    predictions = {
        sample.utt_id: predict_mean_listener(model, source.get(sample.utt_id))
        for sample in split.samples
    }
    levels = [
        level
        for level, wanted in (("utterance", args.utterance), ("system", args.system))
        if wanted
    ] or list(EVAL_LEVELS)
    for level in levels:
        report = evaluate(predictions, split, level)
        print(
            f"{report.level} level: n={report.n} mse={report.mse:.6f} "
            f"lcc={report.lcc:.6f} srcc={report.srcc:.6f}"
        )
    _write_predictions(args.predictions, split, predictions)
    return EXIT_OK


def cmd_analyze_deviation(args) -> int:
    truth = load_manifest(args.manifest, args.split)
    dev_a = absolute_deviation(_read_predictions(args.pred_a), truth)
    dev_b = absolute_deviation(_read_predictions(args.pred_b), truth)
    lcc = deviation_correlation(dev_a, dev_b)
    print(f"deviation correlation: {lcc:.6f}")
    if args.out:
        with open(args.out, "w", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(["utt_id", "deviation_a", "deviation_b"])
            for utt_id in sorted(dev_a):
                writer.writerow(
                    [utt_id, f"{dev_a[utt_id]:.6f}", f"{dev_b[utt_id]:.6f}"]
                )
    return EXIT_OK


def cmd_analyze_agreement(args) -> int:
    splits = {}
    for name, path in (("train", args.train), ("valid", args.valid), ("test", args.test)):
        if path:
            splits[name] = load_manifest(path, name)
    if not splits:
        raise _UsageError("give at least one of --train/--valid/--test")
    rows = export_agreement_features(
        splits, DirectoryFeatureSource(args.features), args.out
    )
    print(f"wrote {rows} unanimous-rating rows to {args.out}")
    return EXIT_OK


def cmd_analyze_curve(args) -> int:
    points = export_learning_curve(args.log, args.out)
    print(f"wrote {points} learning-curve points to {args.out}")
    return EXIT_OK


def build_parser() -> _Parser:
    parser = _Parser(prog="moskit", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract", help="compute features for every manifest row")
    p.add_argument("--manifest", required=True)
    p.add_argument("--recipe", required=True, choices=RECIPES)
    p.add_argument("--out", required=True)
    p.add_argument("--embeddings", help="directory of precomputed <utt_id>.feat embeddings")
    p.add_argument("--split", default="train", choices=SPLIT_NAMES)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("train", help="train a listener-dependent predictor")
    p.add_argument("--config", required=True)
    p.add_argument("--train", required=True)
    p.add_argument("--valid", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a manifest with a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--utterance", action="store_true", help="report utterance level")
    p.add_argument("--system", action="store_true", help="report system level")
    p.add_argument("--predictions", default="predictions.csv")
    p.add_argument("--split", default="test", choices=SPLIT_NAMES)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("analyze", help="post-hoc analyses")
    analyze = p.add_subparsers(dest="analysis", required=True)

    q = analyze.add_parser("deviation", help="correlate two models' deviations")
    q.add_argument("--pred-a", required=True)
    q.add_argument("--pred-b", required=True)
    q.add_argument("--manifest", required=True)
    q.add_argument("--split", default="test", choices=SPLIT_NAMES)
    q.add_argument("--out")
    q.set_defaults(func=cmd_analyze_deviation)

    q = analyze.add_parser(
        "agreement-export", help="export unanimous samples with averaged features"
    )
    q.add_argument("--train")
    q.add_argument("--valid")
    q.add_argument("--test")
    q.add_argument("--features", required=True)
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_analyze_agreement)

    q = analyze.add_parser("learning-curve", help="export (step, valid MSE) points")
    q.add_argument("--log", required=True)
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_analyze_curve)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (MoskitError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
