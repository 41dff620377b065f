"""EEG windows, zero-phase band-pass filtering and artifact rejection."""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Iterator

import numpy as np
from scipy import signal

DEFAULT_FS = 200.0
FILTER_ORDER = 4
ARTIFACT_LIMIT = 100.0
WINDOW_SECONDS = 1.0
HOP_SECONDS = 0.5


@dataclass(frozen=True)
class EegWindow:
    """Channels x samples block; ``data[c]`` is channel ``c``."""

    start_time: float
    sample_rate: float
    data: np.ndarray

    def __post_init__(self):
        data = np.atleast_2d(np.asarray(self.data, dtype=float))
        if not self.sample_rate > 0:
            raise ValueError("sample_rate must be > 0")
        if data.ndim != 2:
            raise ValueError("data must be channels x samples")
        if np.isnan(data).any():
            raise ValueError("EEG data contains NaN")
        object.__setattr__(self, "data", data)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def n_samples(self) -> int:
        return self.data.shape[1]

    @property
    def duration(self) -> float:
        return self.n_samples / self.sample_rate


def bandpass_filter(window: EegWindow, low: float, high: float, order: int = FILTER_ORDER) -> EegWindow:
    """Butterworth band-pass run forward and backward (zero phase) per channel."""
    nyquist = window.sample_rate / 2.0
    if not 0 < low < high < nyquist:
        raise ValueError(f"band edges must satisfy 0 < low < high < {nyquist:g} Hz, got {low}-{high}")
    sos = _design(order, float(low), float(high), float(window.sample_rate))
    return EegWindow(window.start_time, window.sample_rate, signal.sosfiltfilt(sos, window.data, axis=1))


@lru_cache(maxsize=64)
def _design(order: int, low: float, high: float, fs: float) -> np.ndarray:
    return signal.butter(order, [low, high], btype="bandpass", fs=fs, output="sos")


def is_artifact(window: EegWindow, limit: float = ARTIFACT_LIMIT) -> bool:
    """True when any sample exceeds the amplitude limit."""
    return bool(np.any(np.abs(window.data) > limit))


def sliding_windows(
    stream: EegWindow, window_s: float = WINDOW_SECONDS, hop_s: float = HOP_SECONDS
) -> Iterator[EegWindow]:
    size = int(round(window_s * stream.sample_rate))
    hop = int(round(hop_s * stream.sample_rate))
    for start in range(0, stream.n_samples - size + 1, hop):
        yield EegWindow(
            stream.start_time + start / stream.sample_rate,
            stream.sample_rate,
            stream.data[:, start : start + size],
        )
