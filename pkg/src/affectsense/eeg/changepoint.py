"""Exact penalised mean-shift segmentation (PELT)."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .. import kernels

MAD_SCALE = 0.6745


@dataclass(frozen=True)
class ChangePointSet:
    indices: tuple[int, ...]
    penalty: float


def auto_penalty(x: np.ndarray) -> float:
    """2 sigma^2 ln(n), sigma from the MAD of first differences.

    Noise-free series give sigma = 0; the penalty is then floored at a tiny
    positive value scaled to the series energy so splits still cost
    something.
    """
    n = len(x)
    diffs = np.diff(x)
    mad = float(np.median(np.abs(diffs - np.median(diffs))))
    sigma = mad / (math.sqrt(2.0) * MAD_SCALE)
    beta = 2.0 * sigma**2 * math.log(n)
    floor = 1e-9 * max(1.0, float(np.sum((x - x.mean()) ** 2)))
    return max(beta, floor)


def detect_change_points(series: Sequence[float], penalty: float | str = "auto") -> ChangePointSet:
    """Minimise sum of within-segment squared deviations + penalty per change.

    Returned indices are the first sample of each new segment.
    """
    x = np.ascontiguousarray(series, dtype=float)
    if x.ndim != 1 or x.size < 2:
        raise ValueError("change-point detection needs a series of length >= 2")
    if not np.all(np.isfinite(x)):
        raise ValueError("series contains non-finite values")
    beta = auto_penalty(x) if penalty == "auto" else float(penalty)
    if not beta >= 0:
        raise ValueError("penalty must be >= 0")
    last = kernels.pelt_sse(x, beta)
    cps = []
    t = x.size
    while t > 0:
        s = int(last[t])
        if s > 0:
            cps.append(s)
        t = s
    return ChangePointSet(tuple(reversed(cps)), beta)


def segment_means(series: Sequence[float], cps: ChangePointSet) -> list[float]:
    x = np.asarray(series, dtype=float)
    bounds = [0, *cps.indices, len(x)]
    return [float(x[a:b].mean()) for a, b in zip(bounds[:-1], bounds[1:])]
