"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat N]
"""
import argparse
import timeit

import numpy as np

from affectsense import _pycore

try:
    from affectsense import _core
except ImportError:
    _core = None


def cases(rng):
    n = 2000
    x = np.ascontiguousarray(np.repeat(rng.normal(0, 3, 10), n // 10) + rng.normal(0, 1, n))
    parts = np.ascontiguousarray(rng.uniform(0, 10, (5000, 3)))
    anchors = np.ascontiguousarray(rng.uniform(0, 10, (8, 3)))
    d, s = rng.uniform(0, 12, 8), np.full(8, 0.05)
    w = rng.exponential(size=5000)
    w = np.ascontiguousarray(w / w.sum())
    return {
        "pelt_sse (n=2000)": lambda m: m.pelt_sse(x, 20.0),
        "range_loglik (5000 x 8)": lambda m: m.range_loglik(parts, anchors, d, s),
        "systematic_resample (5000)": lambda m: m.systematic_resample(w, 1e-5),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    backends = {"python": _pycore}
    if _core is not None:
        backends["cython"] = _core
    else:
        print("compiled extension not available; timing python only")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<30}" + "".join(f"{b:>14}" for b in backends) + ("   speedup" if len(backends) > 1 else ""))
    for name, fn in cases(rng).items():
        times = {}
        for b, mod in backends.items():
            fn(mod)  # warm up
            times[b] = min(timeit.repeat(lambda: fn(mod), number=1, repeat=args.repeat))
        row = f"{name:<30}" + "".join(f"{t * 1e3:>12.3f}ms" for t in times.values())
        if len(times) > 1:
            row += f"  {times['python'] / times['cython']:>7.1f}x"
        print(row)


if __name__ == "__main__":
    main()
