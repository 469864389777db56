"""Shared fixtures: a synthetic rated-speech corpus with learnable scores.

The toy corpus gives each utterance a latent quality g in [1.2, 4.8]; its
feature frames are noise centered on g - 3, so a linear readout of the
frame mean recovers g. Eight simulated listeners rate round(g + offset)
with fixed per-listener offsets, and systems are contiguous quality bands,
so utterance- and system-level rankings are both learnable.
"""

from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from moskit.dataset import DatasetSplit, RatedSample
from moskit.model import ModelConfig
from moskit.training import InMemoryFeatureSource, TrainConfig, run_training

LISTENER_OFFSETS = np.linspace(-0.75, 0.75, 8)
TOY_DIM = 8
TOY_SYSTEMS = 5


def make_toy_data(n_utts=50, dim=TOY_DIM, seed=0, frames=(120, 160)):
    """Build (train, valid, feature_source, quality) with an 80/20 split."""
    rng = np.random.default_rng(seed)
    quality = np.sort(rng.uniform(1.2, 4.8, n_utts))
    per_system = n_utts // TOY_SYSTEMS
    samples = []
    matrices = {}
    for i, g in enumerate(quality):
        utt_id = f"utt{i:03d}"
        ratings = tuple(
            (f"L{j:02d}", int(np.clip(np.rint(g + off), 1, 5)))
            for j, off in enumerate(LISTENER_OFFSETS)
        )
        samples.append(
            RatedSample(utt_id, f"sys{i // per_system}", f"wav/{utt_id}.wav", ratings)
        )
        n_frames = int(rng.integers(frames[0], frames[1] + 1))
        matrices[utt_id] = (
            rng.normal(0.0, 0.25, (dim, n_frames)) + (g - 3.0)
        ).astype(np.float32)
    train_samples = [s for i, s in enumerate(samples) if i % 5 != 4]
    valid_samples = [s for i, s in enumerate(samples) if i % 5 == 4]
    train = DatasetSplit.from_samples("train", train_samples)
    valid = DatasetSplit.from_samples("valid", valid_samples)
    return train, valid, InMemoryFeatureSource(matrices), quality


def toy_model_config(num_listeners=8) -> ModelConfig:
    """Downsized architecture so toy training stays fast on one CPU core."""
    return ModelConfig(
        input_dim=TOY_DIM,
        num_listeners=num_listeners,
        proj_dim=64,
        conv_channels=32,
        conv_blocks=3,
        listener_dim=16,
        decoder_hidden=64,
    )


@pytest.fixture(scope="session")
def toy_data():
    return make_toy_data()


@pytest.fixture(scope="session")
def toy_trained(toy_data, tmp_path_factory):
    """A briefly trained toy model: (records, train, valid, source)."""
    train, valid, source, _ = toy_data
    cfg = TrainConfig(
        objective="neg_lcc",
        batch_size=15,
        max_steps=400,
        eval_every=100,
        seed=7,
        learning_rate=1e-3,
    )
    out_dir = tmp_path_factory.mktemp("toy_train")
    records = run_training(
        cfg, train, valid, source, out_dir, model_cfg=toy_model_config()
    )
    return records, train, valid, source


def make_sine(freq_hz: float, seconds: float = 1.0, sample_rate: int = 16000):
    t = np.arange(int(seconds * sample_rate)) / sample_rate
    return 0.5 * np.sin(2.0 * np.pi * freq_hz * t)


def make_sawtooth(freq_hz: float, seconds: float = 1.0, sample_rate: int = 16000):
    t = np.arange(int(seconds * sample_rate)) / sample_rate
    phase = t * freq_hz
    return 0.6 * (2.0 * (phase - np.floor(phase + 0.5)))


def write_wav(path, waveform, sample_rate: int = 16000):
    import scipy.io.wavfile

    pcm = np.clip(np.asarray(waveform), -1.0, 1.0)
    scipy.io.wavfile.write(str(path), sample_rate, (pcm * 32767.0).astype(np.int16))
    return Path(path)
