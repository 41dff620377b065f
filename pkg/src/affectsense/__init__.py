"""Indoor user-sentiment mapping.

Localizes a user from UWB ranges, classifies emotional state from EEG,
time-aligns both streams, and aggregates the result on a cube grid of the
room for heatmaps and session reports.
"""
from .kernels import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
