"""Fundamental frequency tracking via normalized autocorrelation.

The estimator is deliberately self-contained: frames are center-padded to
mirror the spectral framing (same frame count at the same hop), each frame's
biased autocorrelation is normalized by its lag-0 energy, and a frame is
voiced when the strongest in-range peak clears a correlation threshold.
Any estimator with the same contract (1 x frames, Hz, 0 = unvoiced) can be
swapped in by feature-building callers.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, ValidationError
from .features import FeatureMatrix, frame_centered

DEFAULT_WINDOW = 1024
VOICING_THRESHOLD = 0.45
SILENCE_RMS = 1e-5


def _parabolic_refine(rho: np.ndarray, lag: int) -> float:
    """Sub-sample peak position from the three points around ``lag``."""
    if lag <= 0 or lag >= rho.size - 1:
        return float(lag)
    left, center, right = rho[lag - 1], rho[lag], rho[lag + 1]
    denom = left - 2.0 * center + right
    if denom >= 0.0 or abs(denom) < 1e-12:
        return float(lag)
    return float(lag) + 0.5 * (left - right) / denom


def extract_f0(
    waveform: np.ndarray,
    sample_rate: int,
    hop: int = 128,
    f0_min: float = 60.0,
    f0_max: float = 400.0,
    window_size: int = DEFAULT_WINDOW,
    voicing_threshold: float = VOICING_THRESHOLD,
    silence_rms: float = SILENCE_RMS,
) -> FeatureMatrix:
    """Per-frame F0 in Hz (0 for unvoiced), 1 x (1 + len//hop) frames."""
    if sample_rate <= 0:
        raise ValidationError(f"sample_rate must be positive, got {sample_rate}")
    if not 0 < f0_min < f0_max < sample_rate / 2:
        raise ConfigError(
            f"need 0 < f0_min < f0_max < Nyquist, got [{f0_min}, {f0_max}]"
        )
    lag_min = max(2, int(sample_rate / f0_max))
    lag_max = int(np.ceil(sample_rate / f0_min))
    if lag_max > window_size - 2:
        raise ConfigError(
            f"window of {window_size} samples cannot resolve F0 down to {f0_min} Hz"
        )
    if lag_max <= lag_min:
        raise ConfigError(
            f"F0 range [{f0_min}, {f0_max}] collapses at sample rate {sample_rate}"
        )

    frames = frame_centered(waveform, window_size, hop)
    frames = frames - frames.mean(axis=1, keepdims=True)
    rms = np.sqrt((frames**2).mean(axis=1))

    # biased autocorrelation per frame via FFT; tapering keeps rho < 1 at long lags
    nfft = 1 << int(np.ceil(np.log2(2 * window_size)))
    spectrum = np.fft.rfft(frames, n=nfft, axis=1)
    acf = np.fft.irfft(spectrum.real**2 + spectrum.imag**2, n=nfft, axis=1)
    acf = acf[:, :window_size]
    energy = acf[:, 0]

    f0 = np.zeros(frames.shape[0], dtype=np.float64)
    for i in range(frames.shape[0]):
        if rms[i] < silence_rms or energy[i] <= 0.0:
            continue
        rho = acf[i] / energy[i]
        search = rho[lag_min : lag_max + 1]
        peak = int(np.argmax(search)) + lag_min
        if rho[peak] < voicing_threshold:
            continue
        lag = _parabolic_refine(rho, peak)
        if lag > 0:
            f0[i] = sample_rate / lag

    return FeatureMatrix(
        f0[None, :], frame_rate=sample_rate / hop, source_tag="f0"
    )
