"""Band power and differential-entropy features.

Layout of a feature vector for ``C`` channels: for each channel, for each
band in ``BANDS`` order, the pair ``(power, de)``. Index of the value is
``(c * len(BANDS) + b) * 2 + {0: power, 1: de}``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .signals import EegWindow, bandpass_filter

BANDS: dict[str, tuple[float, float]] = {
    "delta": (1.0, 4.0),
    "theta": (4.0, 8.0),
    "alpha": (8.0, 14.0),
    "beta": (14.0, 31.0),
    "gamma": (31.0, 50.0),
}
POWER_FLOOR = 1e-12
_TWO_PI_E = 2.0 * np.pi * np.e


def layout_string(channels: int) -> str:
    return f"ch{channels}:{','.join(BANDS)}:power,de"


@dataclass(frozen=True)
class FeatureVector:
    values: np.ndarray
    layout: str
    floored: bool = False

    def power(self, channel: int, band: str) -> float:
        return float(self.values[_index(channel, band)])

    def de(self, channel: int, band: str) -> float:
        return float(self.values[_index(channel, band) + 1])


def _index(channel: int, band: str) -> int:
    return (channel * len(BANDS) + list(BANDS).index(band)) * 2


def differential_entropy(power):
    """DE of a Gaussian with variance ``power``: 0.5 ln(2 pi e power)."""
    return 0.5 * np.log(_TWO_PI_E * np.asarray(power, dtype=float))


def band_features(window: EegWindow) -> FeatureVector:
    if window.n_samples < window.sample_rate:
        raise ValueError("band features need at least 1 s of samples")
    powers = np.empty((window.channels, len(BANDS)))
    for b, (lo, hi) in enumerate(BANDS.values()):
        powers[:, b] = np.var(bandpass_filter(window, lo, hi).data, axis=1)
    floored = bool(np.any(powers < POWER_FLOOR))
    powers = np.maximum(powers, POWER_FLOOR)
    values = np.stack([powers, differential_entropy(powers)], axis=-1).ravel()
    return FeatureVector(values, layout_string(window.channels), floored)
