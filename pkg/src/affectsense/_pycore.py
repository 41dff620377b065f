"""Pure-Python/numpy versions of the kernels in ``_core.pyx``.

Signatures and results match the compiled module; used when the extension
is not built or ``AFFECTSENSE_PURE_PYTHON`` is set.
"""
import numpy as np


def pelt_sse(x, beta):
    x = np.ascontiguousarray(x, dtype=float)
    n = x.shape[0]
    s1 = np.concatenate(([0.0], np.cumsum(x)))
    s2 = np.concatenate(([0.0], np.cumsum(x * x)))
    f = np.empty(n + 1)
    f[0] = -beta
    last = np.zeros(n + 1, dtype=np.int64)
    cand = np.array([0], dtype=np.int64)
    for t in range(1, n + 1):
        d = s1[t] - s1[cand]
        cost = np.maximum(0.0, (s2[t] - s2[cand]) - d * d / (t - cand))
        val = f[cand] + cost
        k = int(np.argmin(val))
        best = val[k] + beta
        f[t] = best
        last[t] = cand[k]
        tol = 1e-10 * (1.0 + abs(best))
        cand = np.append(cand[val <= best + tol], t)
    return last


def range_loglik(particles, anchors, dists, sigmas):
    diff = particles[:, None, :] - anchors[None, :, :]
    r = (np.sqrt(np.sum(diff * diff, axis=2)) - dists) / sigmas
    return -0.5 * np.sum(r * r, axis=1)


def systematic_resample(weights, u0):
    n = weights.shape[0]
    positions = (np.arange(n) + u0) / n
    cum = np.cumsum(weights)
    cum[-1] = max(cum[-1], 1.0)
    return np.searchsorted(cum, positions, side="right").astype(np.int64)
