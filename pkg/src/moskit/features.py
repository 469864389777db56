"""Input representations: spectral features, external embeddings, and fusion.

Five recipes are supported: ``magspec`` (257-bin linear magnitude), ``melspec``
(80-band log mel), ``wav2vec`` (externally extracted 512-d embeddings read
from .feat files), and the time-aligned concatenations ``wav2vec+f0`` and
``wav2vec+melspec``. Auxiliary features are stretched to the embedding's
frame count with per-channel linear interpolation before stacking.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.io.wavfile

from .dataset import RatedSample
from .errors import (
    AlignmentError,
    ConfigError,
    DependencyError,
    DimensionError,
    FormatError,
    ValidationError,
)

SOURCE_TAGS = ("magspec", "melspec", "f0", "embedding", "fused")
RECIPES = ("magspec", "melspec", "wav2vec", "wav2vec+f0", "wav2vec+melspec")
EMBEDDING_RECIPES = ("wav2vec", "wav2vec+f0", "wav2vec+melspec")

FEAT_MAGIC = b"FEAT"
FEAT_VERSION = 1
_FEAT_HEADER = struct.Struct("<4sIIIf")  # magic, version, dim, frames, frame_rate


@dataclass(frozen=True)
class FeatureMatrix:
    """A (channels x frames) float32 matrix with frame-rate metadata."""

    data: np.ndarray
    frame_rate: float
    source_tag: str

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 2 or data.shape[0] < 1 or data.shape[1] < 1:
            raise ValidationError(f"feature matrix must be 2-D, got shape {data.shape}")
        if not np.isfinite(data).all():
            raise ValidationError("feature matrix contains non-finite entries")
        if self.source_tag not in SOURCE_TAGS:
            raise ValidationError(f"unknown source tag {self.source_tag!r}")
        if self.source_tag in ("magspec", "f0") and (data < 0).any():
            raise ValidationError(f"{self.source_tag} entries must be non-negative")
        if self.frame_rate <= 0:
            raise ValidationError("frame_rate must be positive")
        object.__setattr__(self, "data", data)

    @property
    def dim(self) -> int:
        return self.data.shape[0]

    @property
    def n_frames(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class StftConfig:
    fft_size: int = 512
    hop: int = 128
    window: str = "hann"
    sample_rate: int = 16000

    def __post_init__(self):
        n = self.fft_size
        if n <= 0 or (n & (n - 1)) != 0:
            raise ConfigError(f"fft_size must be a power of two, got {n}")
        if not 0 < self.hop <= n:
            raise ConfigError(f"hop must satisfy 0 < hop <= fft_size, got {self.hop}")
        if self.window != "hann":
            raise ConfigError(f"unsupported window {self.window!r}")
        if self.sample_rate <= 0:
            raise ConfigError(f"sample_rate must be positive, got {self.sample_rate}")


@dataclass(frozen=True)
class FeatureConfig:
    """Everything build_features needs to realize a recipe."""

    stft: StftConfig = field(default_factory=StftConfig)
    n_mels: int = 80
    embedding_dir: Path | None = None
    embedding_dim: int = 512
    f0_min: float = 60.0
    f0_max: float = 400.0


def frame_centered(waveform: np.ndarray, size: int, hop: int) -> np.ndarray:
    """Slice a center-padded signal into (1 + len//hop) frames of ``size``."""
    waveform = np.asarray(waveform, dtype=np.float64).reshape(-1)
    if waveform.size == 0:
        raise ValidationError("empty waveform")
    pad = size // 2
    padded = np.pad(waveform, (pad, pad))
    n_frames = 1 + waveform.size // hop
    starts = hop * np.arange(n_frames)
    idx = starts[:, None] + np.arange(size)[None, :]
    return padded[idx]


def hann_window(size: int) -> np.ndarray:
    # periodic form, the standard choice for STFT analysis
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(size) / size)


def _stft_mag64(waveform: np.ndarray, cfg: StftConfig) -> np.ndarray:
    frames = frame_centered(waveform, cfg.fft_size, cfg.hop)
    spectrum = np.fft.rfft(frames * hann_window(cfg.fft_size), axis=1)
    return np.abs(spectrum).T  # (fft_size//2 + 1, n_frames)


def stft_magnitude(waveform: np.ndarray, cfg: StftConfig | None = None) -> FeatureMatrix:
    """Linear-frequency magnitude spectrogram, (fft_size/2 + 1) x frames."""
    cfg = cfg or StftConfig()
    mag = _stft_mag64(waveform, cfg)
    return FeatureMatrix(mag, frame_rate=cfg.sample_rate / cfg.hop, source_tag="magspec")


def hz_to_mel(hz):
    return 2595.0 * np.log10(1.0 + np.asarray(hz, dtype=np.float64) / 700.0)


def mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(
    n_mels: int,
    fft_size: int,
    sample_rate: int,
    fmin: float = 0.0,
    fmax: float | None = None,
) -> np.ndarray:
    """Triangular mel filterbank, (n_mels x fft_size//2+1), peak weight 1."""
    if n_mels < 1:
        raise ConfigError(f"n_mels must be >= 1, got {n_mels}")
    if n_mels > fft_size // 2:
        raise ConfigError(
            f"n_mels={n_mels} exceeds the {fft_size // 2} usable frequency bins"
        )
    fmax = sample_rate / 2 if fmax is None else fmax
    mel_points = np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2)
    hz_points = mel_to_hz(mel_points)
    bin_freqs = np.arange(fft_size // 2 + 1) * (sample_rate / fft_size)

    fb = np.zeros((n_mels, bin_freqs.size))
    for m in range(n_mels):
        left, center, right = hz_points[m], hz_points[m + 1], hz_points[m + 2]
        rising = (bin_freqs - left) / (center - left)
        falling = (right - bin_freqs) / (right - center)
        fb[m] = np.maximum(0.0, np.minimum(rising, falling))
    return fb


def mel_center_frequencies(
    n_mels: int, sample_rate: int, fmin: float = 0.0, fmax: float | None = None
) -> np.ndarray:
    fmax = sample_rate / 2 if fmax is None else fmax
    mel_points = np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2)
    return mel_to_hz(mel_points[1:-1])


MEL_LOG_FLOOR = 1e-10


def mel_spectrogram(
    waveform: np.ndarray, cfg: StftConfig | None = None, n_mels: int = 80
) -> FeatureMatrix:
    """Log mel spectrogram: log(filterbank @ power_spectrogram + 1e-10)."""
    cfg = cfg or StftConfig()
    power = _stft_mag64(waveform, cfg) ** 2
    fb = mel_filterbank(n_mels, cfg.fft_size, cfg.sample_rate)
    mel = np.log(fb @ power + MEL_LOG_FLOOR)
    return FeatureMatrix(mel, frame_rate=cfg.sample_rate / cfg.hop, source_tag="melspec")


def time_align_linear(src: FeatureMatrix, target_frames: int) -> FeatureMatrix:
    """Stretch/compress to ``target_frames`` by per-channel linear interpolation.

    Source index i in [0, m-1] maps to target index j via p = j*(m-1)/(n-1);
    endpoints are preserved exactly and values never leave the per-channel
    min/max range. Degenerate sizes (m = 1 or n = 1) replicate.
    """
    n = int(target_frames)
    if n < 1:
        raise ValidationError(f"target_frames must be >= 1, got {target_frames}")
    m = src.n_frames
    if n == m:
        aligned = src.data.copy()
    elif m == 1:
        aligned = np.repeat(src.data, n, axis=1)
    elif n == 1:
        aligned = src.data[:, :1].copy()
    else:
        positions = np.arange(n, dtype=np.float64) * (m - 1) / (n - 1)
        grid = np.arange(m, dtype=np.float64)
        aligned = np.stack(
            [np.interp(positions, grid, channel) for channel in
             src.data.astype(np.float64)]
        )
    return FeatureMatrix(
        aligned, frame_rate=src.frame_rate * n / m, source_tag=src.source_tag
    )


def concatenate(base: FeatureMatrix, extra: FeatureMatrix) -> FeatureMatrix:
    """Stack channels of two frame-aligned matrices (base rows first)."""
    if base.n_frames != extra.n_frames:
        raise AlignmentError(
            f"frame counts differ: base has {base.n_frames}, extra has "
            f"{extra.n_frames}; align the extra feature first"
        )
    data = np.vstack([base.data, extra.data])
    return FeatureMatrix(data, frame_rate=base.frame_rate, source_tag="fused")


def write_feature_file(
    path: str | Path, data: np.ndarray, frame_rate: float
) -> None:
    """Write a (dim x frames) matrix as a little-endian .feat file."""
    data = np.asarray(data, dtype=np.float32)
    if data.ndim != 2 or data.shape[0] < 1 or data.shape[1] < 1:
        raise ValidationError(f"feature payload must be 2-D, got shape {data.shape}")
    dim, frames = data.shape
    header = _FEAT_HEADER.pack(FEAT_MAGIC, FEAT_VERSION, dim, frames, frame_rate)
    with Path(path).open("wb") as fh:
        fh.write(header)
        # frame-major payload: all channels of frame 0, then frame 1, ...
        fh.write(np.ascontiguousarray(data.T, dtype="<f4").tobytes())


def read_feature_file(path: str | Path) -> tuple[np.ndarray, float]:
    """Read a .feat file; returns ((dim x frames) float32 matrix, frame_rate)."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _FEAT_HEADER.size:
        raise FormatError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, version, dim, frames, frame_rate = _FEAT_HEADER.unpack_from(raw)
    if magic != FEAT_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != FEAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if frames == 0 or dim == 0:
        raise FormatError(f"{path}: empty matrix ({dim} x {frames})")
    payload = raw[_FEAT_HEADER.size:]
    expected = dim * frames * 4
    if len(payload) != expected:
        raise FormatError(
            f"{path}: payload holds {len(payload)} bytes, header implies {expected}"
        )
    data = np.frombuffer(payload, dtype="<f4").reshape(frames, dim).T
    if not np.isfinite(data).all():
        raise FormatError(f"{path}: non-finite entries in payload")
    return np.ascontiguousarray(data), float(frame_rate)


def load_embedding(path: str | Path, expected_dim: int | None = 512) -> FeatureMatrix:
    """Load an externally extracted embedding and check its dimensionality."""
    data, frame_rate = read_feature_file(path)
    if expected_dim is not None and data.shape[0] != expected_dim:
        raise DimensionError(
            f"{path}: embedding dim {data.shape[0]} != configured {expected_dim}"
        )
    return FeatureMatrix(data, frame_rate=frame_rate, source_tag="embedding")


def read_wav(path: str | Path, expected_sample_rate: int | None = None) -> tuple[np.ndarray, int]:
    """Read a mono PCM wav into float64 in [-1, 1]; returns (waveform, sample_rate)."""
    sample_rate, data = scipy.io.wavfile.read(str(path))
    if data.ndim != 1:
        raise ValidationError(f"{path}: expected mono audio, got shape {data.shape}")
    if data.dtype == np.int16:
        waveform = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        waveform = data.astype(np.float64) / 2147483648.0
    elif data.dtype in (np.float32, np.float64):
        waveform = data.astype(np.float64)
    else:
        raise ValidationError(f"{path}: unsupported sample format {data.dtype}")
    if expected_sample_rate is not None and sample_rate != expected_sample_rate:
        raise ValidationError(
            f"{path}: sample rate {sample_rate} != configured {expected_sample_rate}"
        )
    return waveform, sample_rate


def embedding_path(cfg: FeatureConfig, utt_id: str) -> Path:
    if cfg.embedding_dir is None:
        raise ConfigError("embedding_dir is required for wav2vec recipes")
    return Path(cfg.embedding_dir) / f"{utt_id}.feat"


def build_features(
    sample: RatedSample, recipe: str, cfg: FeatureConfig | None = None
) -> FeatureMatrix:
    """Produce the configured representation for one utterance.

    Fused recipes align the auxiliary feature to the embedding's frame count
    before concatenation, so the embedding's time axis always wins.
    """
    from .pitch import extract_f0  # local import to keep module load cheap

    cfg = cfg or FeatureConfig()
    if recipe not in RECIPES:
        raise ConfigError(f"unknown recipe {recipe!r}, expected one of {RECIPES}")

    if recipe in EMBEDDING_RECIPES:
        path = embedding_path(cfg, sample.utt_id)
        if not path.is_file():
            raise DependencyError(f"missing embedding file: {path}")
        embedding = load_embedding(path, cfg.embedding_dim)
        if recipe == "wav2vec":
            return embedding
        waveform, _ = read_wav(sample.wav_path, cfg.stft.sample_rate)
        if recipe == "wav2vec+f0":
            aux = extract_f0(
                waveform,
                cfg.stft.sample_rate,
                hop=cfg.stft.hop,
                f0_min=cfg.f0_min,
                f0_max=cfg.f0_max,
            )
        else:
            aux = mel_spectrogram(waveform, cfg.stft, cfg.n_mels)
        aligned = time_align_linear(aux, embedding.n_frames)
        return concatenate(embedding, aligned)

    waveform, _ = read_wav(sample.wav_path, cfg.stft.sample_rate)
    if recipe == "magspec":
        return stft_magnitude(waveform, cfg.stft)
    return mel_spectrogram(waveform, cfg.stft, cfg.n_mels)
