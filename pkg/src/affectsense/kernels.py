"""Kernel backend selection.

The compiled ``_core`` extension is used when importable; otherwise, or
when the environment variable ``AFFECTSENSE_PURE_PYTHON`` is set to a
non-empty value other than ``0``, the numpy fallback in ``_pycore`` is used.
"""
import os

from . import _pycore

_force_pure = os.environ.get("AFFECTSENSE_PURE_PYTHON", "") not in ("", "0")

if _force_pure:
    _impl = _pycore
    BACKEND = "python"
else:
    try:
        from . import _core as _impl

        BACKEND = "cython"
    except ImportError:
        _impl = _pycore
        BACKEND = "python"

pelt_sse = _impl.pelt_sse
range_loglik = _impl.range_loglik
systematic_resample = _impl.systematic_resample

__all__ = ["BACKEND", "pelt_sse", "range_loglik", "systematic_resample"]
