import re

import numpy as np
import pytest

from conftest import make_sine, write_wav
from moskit.cli import main, parse_train_config
from moskit.dataset import DatasetSplit, RatedSample, load_manifest, save_manifest
from moskit.features import read_feature_file

SCORES = {
    "u0": (2, 3), "u1": (3, 3), "u2": (3, 4),
    "u3": (4, 4), "u4": (4, 5), "u5": (5, 5),
}
SYSTEMS = {"u0": "sysA", "u1": "sysA", "u2": "sysB",
           "u3": "sysB", "u4": "sysC", "u5": "sysC"}


def build_corpus(root):
    """Six short wavs, three systems, two listeners; an 80/20-ish split."""
    root.mkdir(exist_ok=True)
    samples = {}
    for i, (utt, scores) in enumerate(sorted(SCORES.items())):
        wav = write_wav(root / f"{utt}.wav", make_sine(250.0 + 60.0 * i, 0.25))
        ratings = tuple(zip(("P", "Q"), scores))
        samples[utt] = RatedSample(utt, SYSTEMS[utt], str(wav), ratings)
    train = DatasetSplit.from_samples(
        "train", [samples[u] for u in ("u0", "u2", "u4")]
    )
    valid = DatasetSplit.from_samples(
        "valid", [samples[u] for u in ("u1", "u3", "u5")]
    )
    save_manifest(train, root / "train.csv")
    save_manifest(valid, root / "valid.csv")
    return root / "train.csv", root / "valid.csv"


TRAIN_CONFIG = """\
# toy run
objective = neg_lcc
batch_size = 4
max_steps = 10
eval_every = 5
seed = 3
learning_rate = 0.001
"""


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """Manifests, extracted melspec features, and one trained checkpoint."""
    root = tmp_path_factory.mktemp("cli")
    train_manifest, valid_manifest = build_corpus(root / "corpus")
    features = root / "feats"
    for manifest, split in ((train_manifest, "train"), (valid_manifest, "valid")):
        code = main([
            "extract", "--manifest", str(manifest), "--recipe", "melspec",
            "--out", str(features), "--split", split,
        ])
        assert code == 0
    config = root / "train.cfg"
    config.write_text(TRAIN_CONFIG)
    out_dir = root / "run"
    code = main([
        "train", "--config", str(config), "--train", str(train_manifest),
        "--valid", str(valid_manifest), "--features", str(features),
        "--out", str(out_dir),
    ])
    assert code == 0
    ckpts = sorted(out_dir.glob("*.ckpt"))
    assert ckpts
    return {
        "root": root,
        "train_manifest": train_manifest,
        "valid_manifest": valid_manifest,
        "features": features,
        "out_dir": out_dir,
        "ckpt": ckpts[0],
        "log": out_dir / "training_log.csv",
    }


class TestExtract:
    def test_writes_feature_files(self, pipeline):
        for utt in ("u0", "u2", "u4", "u1", "u3", "u5"):
            data, rate = read_feature_file(pipeline["features"] / f"{utt}.feat")
            assert data.shape[0] == 80
            assert rate == 125.0

    def test_partial_failure_exits_2(self, tmp_path, capsys):
        train_manifest, _ = build_corpus(tmp_path / "corpus")
        split = load_manifest(train_manifest, "train")
        broken = DatasetSplit.from_samples(
            "train",
            list(split.samples[:-1])
            + [RatedSample("ghost", "sysZ", str(tmp_path / "missing.wav"),
                           (("P", 3),))],
        )
        manifest = tmp_path / "broken.csv"
        save_manifest(broken, manifest)
        out = tmp_path / "feats"
        code = main(["extract", "--manifest", str(manifest), "--recipe",
                     "melspec", "--out", str(out)])
        captured = capsys.readouterr()
        assert code == 2
        assert "FAILED ghost" in captured.err
        assert len(list(out.glob("*.feat"))) == 2

    def test_unknown_recipe_is_usage_error(self, pipeline, capsys):
        code = main(["extract", "--manifest", str(pipeline["train_manifest"]),
                     "--recipe", "plp", "--out", "/tmp/x"])
        assert code == 64
        assert "usage error" in capsys.readouterr().err

    def test_wav2vec_recipe_needs_embeddings_flag(self, pipeline, capsys):
        code = main(["extract", "--manifest", str(pipeline["train_manifest"]),
                     "--recipe", "wav2vec", "--out", "/tmp/x"])
        assert code == 64
        assert "embedding_dir" in capsys.readouterr().err

    def test_wav2vec_extract_from_embedding_dir(self, pipeline, tmp_path):
        from moskit.features import write_feature_file

        emb_dir = tmp_path / "emb"
        emb_dir.mkdir()
        rng = np.random.default_rng(0)
        for utt in ("u0", "u2", "u4"):
            write_feature_file(
                emb_dir / f"{utt}.feat",
                rng.normal(size=(512, 12)).astype(np.float32), 50.0,
            )
        out = tmp_path / "w2v"
        code = main(["extract", "--manifest", str(pipeline["train_manifest"]),
                     "--recipe", "wav2vec", "--out", str(out),
                     "--embeddings", str(emb_dir)])
        assert code == 0
        data, _ = read_feature_file(out / "u0.feat")
        assert data.shape == (512, 12)


class TestTrain:
    def test_reports_best_checkpoint(self, pipeline, capsys, tmp_path):
        config = tmp_path / "c.cfg"
        config.write_text(TRAIN_CONFIG)
        code = main([
            "train", "--config", str(config),
            "--train", str(pipeline["train_manifest"]),
            "--valid", str(pipeline["valid_manifest"]),
            "--features", str(pipeline["features"]),
            "--out", str(tmp_path / "run"),
        ])
        out = capsys.readouterr().out
        assert code == 0
        assert re.search(r"best checkpoint: \S+ \(step \d+", out)

    def test_unknown_config_key_names_it(self, pipeline, tmp_path, capsys):
        config = tmp_path / "c.cfg"
        config.write_text("objective = mse\nmomentum = 0.9\n")
        code = main([
            "train", "--config", str(config),
            "--train", str(pipeline["train_manifest"]),
            "--valid", str(pipeline["valid_manifest"]),
            "--features", str(pipeline["features"]),
            "--out", str(tmp_path / "run"),
        ])
        captured = capsys.readouterr()
        assert code == 64
        assert "momentum" in captured.err

    def test_lcc_objective_rejects_batch_of_one(self, pipeline, tmp_path, capsys):
        config = tmp_path / "c.cfg"
        config.write_text("objective = neg_lcc\nbatch_size = 1\n")
        code = main([
            "train", "--config", str(config),
            "--train", str(pipeline["train_manifest"]),
            "--valid", str(pipeline["valid_manifest"]),
            "--features", str(pipeline["features"]),
            "--out", str(tmp_path / "run"),
        ])
        assert code == 64
        assert "batch_size" in capsys.readouterr().err

    def test_missing_feature_directory_is_runtime_error(
        self, pipeline, tmp_path, capsys
    ):
        config = tmp_path / "c.cfg"
        config.write_text(TRAIN_CONFIG)
        code = main([
            "train", "--config", str(config),
            "--train", str(pipeline["train_manifest"]),
            "--valid", str(pipeline["valid_manifest"]),
            "--features", str(tmp_path / "no-features"),
            "--out", str(tmp_path / "run"),
        ])
        assert code == 1
        assert "missing feature file" in capsys.readouterr().err


class TestConfigParsing:
    def test_round_trip_of_values(self, tmp_path):
        config = tmp_path / "c.cfg"
        config.write_text(
            "objective = mse_plus_k_lcc\nk = 2\nbatch_size = 8\n"
            "max_steps = 100\neval_every = 50\nseed = 9\n"
            "learning_rate = 0.01\ninclude_mean_listener = false\n"
        )
        cfg = parse_train_config(config)
        assert cfg.objective == "mse_plus_k_lcc"
        assert cfg.k == 2.0
        assert cfg.batch_size == 8
        assert cfg.include_mean_listener is False

    def test_env_seed_override(self, tmp_path, monkeypatch):
        config = tmp_path / "c.cfg"
        config.write_text("seed = 1\n")
        monkeypatch.setenv("MOSKIT_SEED", "777")
        assert parse_train_config(config).seed == 777

    def test_env_seed_must_be_integer(self, tmp_path, monkeypatch):
        config = tmp_path / "c.cfg"
        config.write_text("seed = 1\n")
        monkeypatch.setenv("MOSKIT_SEED", "lucky")
        from moskit.cli import _UsageError

        with pytest.raises(_UsageError, match="MOSKIT_SEED"):
            parse_train_config(config)

    def test_bad_line_rejected(self, tmp_path):
        from moskit.cli import _UsageError

        config = tmp_path / "c.cfg"
        config.write_text("objective mse\n")
        with pytest.raises(_UsageError, match="key=value"):
            parse_train_config(config)


class TestEvaluate:
    def test_both_levels_in_order(self, pipeline, tmp_path, capsys):
        predictions = tmp_path / "pred.csv"
        code = main([
            "evaluate", "--ckpt", str(pipeline["ckpt"]),
            "--manifest", str(pipeline["valid_manifest"]),
            "--features", str(pipeline["features"]),
            "--split", "valid", "--utterance", "--system",
            "--predictions", str(predictions),
        ])
        out = capsys.readouterr().out
        assert code == 0
        lines = [l for l in out.splitlines() if "level:" in l]
        assert lines[0].startswith("utterance level:")
        assert lines[1].startswith("system level:")
        rows = predictions.read_text().splitlines()
        assert rows[0] == "utt_id,system_id,predicted_mos"
        assert len(rows) == 4
        assert rows[1].split(",")[0] == "u1"
        scores = [float(r.split(",")[2]) for r in rows[1:]]
        assert all(1.0 <= s <= 5.0 for s in scores)

    def test_default_is_both_levels(self, pipeline, tmp_path, capsys):
        code = main([
            "evaluate", "--ckpt", str(pipeline["ckpt"]),
            "--manifest", str(pipeline["valid_manifest"]),
            "--features", str(pipeline["features"]),
            "--split", "valid",
            "--predictions", str(tmp_path / "p.csv"),
        ])
        out = capsys.readouterr().out
        assert code == 0
        assert "utterance level:" in out and "system level:" in out

    def test_single_system_fails_at_system_level(self, pipeline, tmp_path, capsys):
        split = load_manifest(pipeline["valid_manifest"], "valid")
        lone = DatasetSplit.from_samples("test", [split.samples[0]])
        manifest = tmp_path / "single.csv"
        save_manifest(lone, manifest)
        code = main([
            "evaluate", "--ckpt", str(pipeline["ckpt"]),
            "--manifest", str(manifest),
            "--features", str(pipeline["features"]),
            "--system", "--predictions", str(tmp_path / "p.csv"),
        ])
        assert code == 1
        assert "2 systems" in capsys.readouterr().err

    def test_feature_dim_mismatch_is_runtime_error(self, pipeline, tmp_path, capsys):
        magspec_dir = tmp_path / "mag"
        code = main(["extract", "--manifest", str(pipeline["valid_manifest"]),
                     "--recipe", "magspec", "--out", str(magspec_dir),
                     "--split", "valid"])
        assert code == 0
        code = main([
            "evaluate", "--ckpt", str(pipeline["ckpt"]),
            "--manifest", str(pipeline["valid_manifest"]),
            "--features", str(magspec_dir),
            "--split", "valid", "--predictions", str(tmp_path / "p.csv"),
        ])
        assert code == 1
        assert "dim" in capsys.readouterr().err


class TestAnalyze:
    def write_predictions(self, path, values):
        rows = ["utt_id,system_id,predicted_mos"]
        rows += [f"{u},{SYSTEMS[u]},{v}" for u, v in values.items()]
        path.write_text("\n".join(rows) + "\n")
        return path

    def test_deviation_correlation_output(self, pipeline, tmp_path, capsys):
        pred_a = self.write_predictions(
            tmp_path / "a.csv", {"u1": 3.1, "u3": 3.2, "u5": 4.1}
        )
        pred_b = self.write_predictions(
            tmp_path / "b.csv", {"u1": 3.3, "u3": 3.4, "u5": 4.4}
        )
        out = tmp_path / "dev.csv"
        code = main([
            "analyze", "deviation", "--pred-a", str(pred_a),
            "--pred-b", str(pred_b),
            "--manifest", str(pipeline["valid_manifest"]),
            "--split", "valid", "--out", str(out),
        ])
        captured = capsys.readouterr()
        assert code == 0
        match = re.search(r"deviation correlation: (-?\d+\.\d+)", captured.out)
        assert match
        assert -1.0 <= float(match.group(1)) <= 1.0
        assert out.read_text().splitlines()[0] == "utt_id,deviation_a,deviation_b"

    def test_agreement_export(self, pipeline, tmp_path, capsys):
        out = tmp_path / "agreement.csv"
        code = main([
            "analyze", "agreement-export",
            "--train", str(pipeline["train_manifest"]),
            "--valid", str(pipeline["valid_manifest"]),
            "--features", str(pipeline["features"]),
            "--out", str(out),
        ])
        assert code == 0
        lines = out.read_text().splitlines()
        # unanimous samples: u1 (3,3), u3 (4,4), u5 (5,5)
        assert len(lines) == 2 + 3
        assert len(lines[1].split(",")) == 3 + 80
        assert "wrote 3" in capsys.readouterr().out

    def test_learning_curve(self, pipeline, tmp_path):
        out = tmp_path / "curve.csv"
        code = main(["analyze", "learning-curve", "--log", str(pipeline["log"]),
                     "--out", str(out)])
        assert code == 0
        lines = out.read_text().splitlines()
        assert lines[0] == "step,valid_utt_mse"
        assert len(lines) == 3  # evals at steps 5 and 10


class TestUsage:
    def test_no_command(self, capsys):
        assert main([]) == 64

    def test_missing_required_flag(self, capsys):
        assert main(["evaluate"]) == 64

    def test_unknown_command(self, capsys):
        assert main(["transmogrify"]) == 64
