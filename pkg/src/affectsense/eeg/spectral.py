"""Short-time Fourier transform and electrode-frequency distribution maps."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .signals import EegWindow

DEFAULT_WINDOW = 100
DEFAULT_HOP = 50


@dataclass(frozen=True)
class Spectrogram:
    freqs: np.ndarray
    frame_times: np.ndarray
    magnitudes: np.ndarray  # frames x bins


@dataclass(frozen=True)
class EfdMap:
    values: np.ndarray  # channels x bins


def hann(n: int) -> np.ndarray:
    """Periodic Hann window, ``0.5 - 0.5 cos(2 pi k / n)``."""
    k = np.arange(n)
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * k / n)


def _frames(x: np.ndarray, window_len: int, hop: int) -> np.ndarray:
    n = x.shape[-1]
    if window_len < 1 or hop < 1:
        raise ValueError("window_len and hop must be >= 1")
    if window_len > n:
        raise ValueError(f"window length {window_len} exceeds series length {n}")
    count = (n - window_len) // hop + 1
    idx = np.arange(window_len)[None, :] + hop * np.arange(count)[:, None]
    return x[..., idx]


def stft(channel, window_len: int = DEFAULT_WINDOW, hop: int = DEFAULT_HOP, fs: float = 200.0) -> Spectrogram:
    """Magnitude STFT of one channel with a Hann window.

    Bins run 0..window_len//2; ``freqs[k] = k * fs / window_len`` and each
    frame time is the frame centre relative to the first sample.
    """
    x = np.asarray(channel, dtype=float)
    if x.ndim != 1:
        raise ValueError("stft takes a single channel")
    frames = _frames(x, window_len, hop)
    mags = np.abs(np.fft.rfft(frames * hann(window_len), axis=-1))
    freqs = np.arange(window_len // 2 + 1) * fs / window_len
    times = (np.arange(frames.shape[0]) * hop + window_len / 2.0) / fs
    return Spectrogram(freqs, times, mags)


def efdm(window: EegWindow, window_len: int = DEFAULT_WINDOW, hop: int = DEFAULT_HOP) -> EfdMap:
    frames = _frames(window.data, window_len, hop)  # channels x frames x window_len
    mags = np.abs(np.fft.rfft(frames * hann(window_len), axis=-1))
    return EfdMap(mags.mean(axis=1))
