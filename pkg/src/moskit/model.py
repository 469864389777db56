"""Listener-dependent MOS predictor: decoder(encoder(x), listener).

The encoder projects input frames and runs a small stack of 1-d convolution
blocks over time; the decoder scores each frame from the concatenation of
its encoding with a listener embedding, and the utterance score is the mean
over valid frames. Row 0 of the listener table is the virtual mean listener
trained on per-sample mean scores, which is the only row used at inference
so unseen listeners never need an embedding.
"""

from __future__ import annotations

import pickle
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping

import numpy as np
import torch
from torch import nn

from .errors import FormatError, ModeError, ShapeError
from .features import FeatureMatrix

CHECKPOINT_FORMAT = "moskit-checkpoint"
CHECKPOINT_VERSION = 1
_PICKLE_PROTOCOL = 4

MOS_MIN, MOS_MAX = 1.0, 5.0


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int
    num_listeners: int
    proj_dim: int = 256
    conv_channels: int = 64
    conv_blocks: int = 3
    kernel_size: int = 3
    listener_dim: int = 64
    decoder_hidden: int = 128
    has_mean_listener: bool = True
    # start predictions at the MOS midpoint so clamped inference is not
    # degenerate under correlation-only training
    output_bias_init: float = 3.0

    def __post_init__(self):
        if self.input_dim < 1 or self.num_listeners < 1:
            raise ShapeError("input_dim and num_listeners must be >= 1")
        if self.conv_blocks < 0:
            raise ShapeError("conv_blocks must be >= 0")
        if self.kernel_size % 2 != 1:
            raise ShapeError("kernel_size must be odd to keep frame counts")


class _ConvBlock(nn.Module):
    """Conv over time + per-frame channel LayerNorm + ReLU."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int):
        super().__init__()
        self.conv = nn.Conv1d(
            in_channels, out_channels, kernel_size, padding=kernel_size // 2
        )
        self.norm = nn.LayerNorm(out_channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:  # (B, T, C_in)
        x = self.conv(x.transpose(1, 2)).transpose(1, 2)
        return torch.relu(self.norm(x))


class ListenerDependentNet(nn.Module):
    """f(x, l) with one scalar per (utterance, listener) pair."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.proj = nn.Linear(cfg.input_dim, cfg.proj_dim)
        blocks = []
        channels = cfg.proj_dim
        for _ in range(cfg.conv_blocks):
            blocks.append(_ConvBlock(channels, cfg.conv_channels, cfg.kernel_size))
            channels = cfg.conv_channels
        self.blocks = nn.ModuleList(blocks)
        self.listener_table = nn.Embedding(cfg.num_listeners + 1, cfg.listener_dim)
        self.decoder = nn.Sequential(
            nn.Linear(channels + cfg.listener_dim, cfg.decoder_hidden),
            nn.ReLU(),
            nn.Linear(cfg.decoder_hidden, 1),
        )
        with torch.no_grad():
            self.decoder[-1].bias.fill_(cfg.output_bias_init)

    @property
    def num_table_rows(self) -> int:
        return self.cfg.num_listeners + 1

    def forward(
        self,
        features: torch.Tensor,
        listener_index: torch.Tensor,
        mask: torch.Tensor | None = None,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Score a batch.

        features: (B, T, D); listener_index: (B,) long; mask: (B, T) with 1 on
        valid frames (None = all valid). Returns (utterance scores (B,),
        frame scores (B, T)). Padded frames are zeroed between blocks so a
        padded batch scores valid frames exactly like an unpadded forward.
        """
        if features.ndim != 3 or features.shape[-1] != self.cfg.input_dim:
            raise ShapeError(
                f"expected features (B, T, {self.cfg.input_dim}), "
                f"got {tuple(features.shape)}"
            )
        if listener_index.min() < 0 or listener_index.max() >= self.num_table_rows:
            raise IndexError(
                f"listener index out of range [0, {self.num_table_rows})"
            )
        if mask is None:
            mask = features.new_ones(features.shape[:2])
        mask = mask.to(features.dtype)
        mask3 = mask.unsqueeze(-1)

        h = self.proj(features) * mask3
        for block in self.blocks:
            h = block(h) * mask3
        emb = self.listener_table(listener_index)  # (B, E)
        emb = emb.unsqueeze(1).expand(-1, h.shape[1], -1)
        frame_scores = self.decoder(torch.cat([h, emb], dim=-1)).squeeze(-1)
        valid = mask.sum(dim=1).clamp(min=1.0)
        utt_scores = (frame_scores * mask).sum(dim=1) / valid
        return utt_scores, frame_scores


def _as_frames_tensor(x, model: ListenerDependentNet) -> torch.Tensor:
    if isinstance(x, FeatureMatrix):
        data = x.data
    else:
        data = np.asarray(x, dtype=np.float32)
    if data.ndim != 2:
        raise ShapeError(f"expected a (D, T) matrix, got shape {data.shape}")
    if data.shape[0] != model.cfg.input_dim:
        raise ShapeError(
            f"feature dim {data.shape[0]} != model input dim {model.cfg.input_dim}"
        )
    return torch.from_numpy(np.ascontiguousarray(data.T, dtype=np.float32))[None]


def forward_ld(model: ListenerDependentNet, x, listener_index: int) -> tuple[float, np.ndarray]:
    """Inference score of one utterance for one listener index.

    Returns (utterance score, per-frame scores).
    """
    features = _as_frames_tensor(x, model)
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            utt, frames = model(
                features, torch.tensor([listener_index], dtype=torch.long)
            )
    finally:
        model.train(was_training)
    return float(utt[0]), frames[0].numpy()


def predict_mean_listener(model: ListenerDependentNet, x) -> float:
    """Mean-listener score clamped to the MOS range [1, 5]."""
    if not model.cfg.has_mean_listener:
        raise ModeError(
            "model was trained without mean-listener entries; "
            "mean-listener inference is unavailable"
        )
    score, _ = forward_ld(model, x, 0)
    return float(min(MOS_MAX, max(MOS_MIN, score)))


def save_checkpoint(
    path: str | Path,
    model: ListenerDependentNet,
    listener_registry: Mapping[str, int],
    step: int = 0,
    extra: dict | None = None,
) -> None:
    """Serialize parameters (as numpy), model config, and the listener map."""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "model_config": asdict(model.cfg),
        "listener_registry": dict(sorted(listener_registry.items())),
        "step": int(step),
        "extra": extra or {},
        "state": {
            name: tensor.detach().cpu().numpy()
            for name, tensor in model.state_dict().items()
        },
    }
    Path(path).write_bytes(pickle.dumps(payload, protocol=_PICKLE_PROTOCOL))


def load_checkpoint(path: str | Path) -> tuple[ListenerDependentNet, dict[str, int], dict]:
    """Rebuild a model from a checkpoint; returns (model, registry, meta)."""
    path = Path(path)
    try:
        payload = pickle.loads(path.read_bytes())
    except Exception as exc:
        raise FormatError(f"{path}: not a readable checkpoint ({exc})") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise FormatError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version")
    cfg = ModelConfig(**payload["model_config"])
    model = ListenerDependentNet(cfg)
    state = {
        name: torch.from_numpy(np.asarray(arr))
        for name, arr in payload["state"].items()
    }
    model.load_state_dict(state)
    model.eval()
    meta = {"step": payload.get("step", 0), "extra": payload.get("extra", {})}
    return model, dict(payload["listener_registry"]), meta
