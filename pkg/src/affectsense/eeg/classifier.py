"""Three-class linear emotion classifier (multinomial logistic regression).

Classes are ordered ``(negative, neutral, positive)`` with label values
``(-1, 0, 1)``. Features are z-scored with statistics stored in the model.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .features import FeatureVector, band_features, layout_string
from .signals import EegWindow

log = logging.getLogger(__name__)

CLASSES = ("negative", "neutral", "positive")
LABEL_VALUES = (-1, 0, 1)
VALENCE_WEIGHTS = np.array([-1.0, 0.0, 1.0])
LEARNING_RATE = 0.1
MAX_ITER = 5000
GRAD_TOL = 1e-6


class LayoutMismatch(ValueError):
    pass


@dataclass(frozen=True)
class EmotionSample:
    timestamp: float
    probs: tuple[float, float, float]
    valence: float

    @classmethod
    def from_probs(cls, timestamp: float, probs) -> "EmotionSample":
        p = np.asarray(probs, dtype=float)
        p = p / p.sum()
        return cls(timestamp, (float(p[0]), float(p[1]), float(p[2])), float(VALENCE_WEIGHTS @ p))

    @property
    def state(self) -> str:
        return CLASSES[int(np.argmax(self.probs))]


@dataclass(frozen=True)
class LinearModel:
    weights: np.ndarray  # 3 x features
    biases: np.ndarray  # 3
    mean: np.ndarray
    scale: np.ndarray
    feature_layout: str = ""

    @property
    def n_features(self) -> int:
        return self.weights.shape[1]

    def to_json(self) -> str:
        return json.dumps(
            {
                "classes": list(CLASSES),
                "feature_layout": self.feature_layout,
                "weights": self.weights.tolist(),
                "biases": self.biases.tolist(),
                "mean": self.mean.tolist(),
                "scale": self.scale.tolist(),
            },
            indent=1,
        )

    @classmethod
    def from_json(cls, text: str) -> "LinearModel":
        doc = json.loads(text)
        w = np.array(doc["weights"], dtype=float)
        b = np.array(doc["biases"], dtype=float)
        if w.ndim != 2 or w.shape[0] != 3 or b.shape != (3,):
            raise ValueError("model must have 3 classes")
        model = cls(w, b, np.array(doc["mean"], dtype=float), np.array(doc["scale"], dtype=float), doc.get("feature_layout", ""))
        if not all(np.all(np.isfinite(a)) for a in (model.weights, model.biases, model.mean, model.scale)):
            raise ValueError("model parameters must be finite")
        return model

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "LinearModel":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def labels_to_index(labels) -> np.ndarray:
    lab = np.asarray(labels)
    idx = np.full(lab.shape, -1, dtype=np.int64)
    for k, v in enumerate(LABEL_VALUES):
        idx[lab == v] = k
    if np.any(idx < 0):
        raise ValueError("labels must be in {-1, 0, 1}")
    return idx


def loss_and_grad(weights: np.ndarray, biases: np.ndarray, x: np.ndarray, y: np.ndarray, l2: float):
    """Mean cross-entropy + ``l2 * |W|^2 / 2`` and its gradient.

    ``x`` is already standardised; ``y`` holds class indices.
    """
    n = x.shape[0]
    logits = x @ weights.T + biases
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    loss = float(np.mean(logsum - z[np.arange(n), y])) + 0.5 * l2 * float(np.sum(weights**2))
    p = np.exp(z - logsum[:, None])
    p[np.arange(n), y] -= 1.0
    p /= n
    return loss, p.T @ x + l2 * weights, p.sum(axis=0)


def _as_matrix(features) -> np.ndarray:
    rows = [f.values if isinstance(f, FeatureVector) else f for f in features]
    x = np.asarray(rows, dtype=float)
    if x.ndim != 2:
        raise ValueError("features must share one length")
    if np.isnan(x).any():
        raise ValueError("features contain NaN")
    return x


def train_classifier(
    features,
    labels,
    l2: float = 1e-3,
    *,
    learning_rate: float = LEARNING_RATE,
    max_iter: int = MAX_ITER,
    grad_tol: float = GRAD_TOL,
    feature_layout: str | None = None,
    callback: Callable[[int, float], None] | None = None,
) -> LinearModel:
    """Full-batch gradient descent from zero parameters.

    A step that would raise the loss is retried at half the learning rate,
    and the smaller rate is kept for later steps.
    """
    x = _as_matrix(features)
    y = labels_to_index(labels)
    if len(y) != len(x):
        raise ValueError("one label per feature vector required")
    missing = [CLASSES[k] for k in range(3) if not np.any(y == k)]
    if missing:
        raise ValueError(f"class missing from training set: {', '.join(missing)}")
    if feature_layout is None:
        first = features[0]
        feature_layout = first.layout if isinstance(first, FeatureVector) else ""

    mean = x.mean(axis=0)
    scale = x.std(axis=0)
    scale[scale == 0] = 1.0
    xs = (x - mean) / scale

    w = np.zeros((3, x.shape[1]))
    b = np.zeros(3)
    lr = learning_rate
    loss, gw, gb = loss_and_grad(w, b, xs, y, l2)
    if callback:
        callback(0, loss)
    for it in range(1, max_iter + 1):
        if max(np.abs(gw).max(), np.abs(gb).max()) < grad_tol:
            break
        while True:
            w_new, b_new = w - lr * gw, b - lr * gb
            loss_new, gw_new, gb_new = loss_and_grad(w_new, b_new, xs, y, l2)
            if loss_new <= loss or lr < 1e-12:
                break
            lr *= 0.5
        if loss_new > loss:
            break
        w, b, loss, gw, gb = w_new, b_new, loss_new, gw_new, gb_new
        if callback:
            callback(it, loss)
    log.debug("training stopped at loss %.6g (lr %.3g)", loss, lr)
    return LinearModel(w, b, mean, scale, feature_layout)


def predict_proba(model: LinearModel, features) -> np.ndarray:
    x = _as_matrix(features)
    if x.shape[1] != model.n_features:
        raise LayoutMismatch(f"model expects {model.n_features} features, got {x.shape[1]}")
    return softmax(((x - model.mean) / model.scale) @ model.weights.T + model.biases)


@dataclass(frozen=True)
class Evaluation:
    accuracy: float
    confusion: np.ndarray  # rows true, columns predicted


def evaluate_classifier(model: LinearModel, features, labels) -> Evaluation:
    y = labels_to_index(labels)
    if len(y) == 0:
        raise ValueError("empty test set")
    pred = predict_proba(model, features).argmax(axis=1)
    confusion = np.zeros((3, 3), dtype=np.int64)
    np.add.at(confusion, (y, pred), 1)
    return Evaluation(float(np.trace(confusion)) / len(y), confusion)


def classify_window(model: LinearModel, window: EegWindow) -> EmotionSample:
    fv = band_features(window)
    expected = layout_string(window.channels)
    if model.feature_layout and model.feature_layout != expected:
        raise LayoutMismatch(f"model layout {model.feature_layout!r} does not match window layout {expected!r}")
    probs = predict_proba(model, [fv.values])[0]
    return EmotionSample.from_probs(window.start_time + window.duration / 2.0, probs)


def write_training_csv(path: str | Path, features: Sequence[FeatureVector], labels: Sequence[int]) -> None:
    n = len(features[0].values)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["label", *(f"f{i}" for i in range(n))])
        for fv, lab in zip(features, labels):
            w.writerow([int(lab), *(repr(float(v)) for v in fv.values)])


def read_training_csv(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "label":
            raise ValueError(f"{path}: first column must be 'label'")
        rows = [r for r in reader if r]
    if not rows:
        raise ValueError(f"{path}: no training rows")
    labels = np.array([int(r[0]) for r in rows])
    x = np.array([[float(v) for v in r[1:]] for r in rows])
    return x, labels
