"""EEG processing: filtering, spectral maps, band features, change points and classification."""
from .changepoint import ChangePointSet, detect_change_points
from .classifier import (
    CLASSES,
    EmotionSample,
    Evaluation,
    LinearModel,
    classify_window,
    evaluate_classifier,
    train_classifier,
)
from .features import BANDS, FeatureVector, band_features, differential_entropy
from .signals import EegWindow, bandpass_filter, is_artifact, sliding_windows
from .spectral import EfdMap, Spectrogram, efdm, stft

__all__ = [
    "BANDS",
    "CLASSES",
    "ChangePointSet",
    "EegWindow",
    "EfdMap",
    "EmotionSample",
    "Evaluation",
    "FeatureVector",
    "LinearModel",
    "Spectrogram",
    "band_features",
    "bandpass_filter",
    "classify_window",
    "detect_change_points",
    "differential_entropy",
    "efdm",
    "evaluate_classifier",
    "is_artifact",
    "sliding_windows",
    "stft",
    "train_classifier",
]
