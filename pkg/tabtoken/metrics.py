"""
Evaluation metrics
Accuracy for classification, RMSE for regression
"""

import math
from typing import Sequence

import numpy as np
from sklearn.metrics import accuracy_score, mean_squared_error

from .errors import InvalidArgument


def _as_predicted_classes(predictions) -> np.ndarray:
    predictions = np.asarray(predictions)
    if predictions.ndim == 2:
        return predictions.argmax(axis=1)
    return predictions.astype(np.int64)


def metric_accuracy(predictions, labels: Sequence[int]) -> float:
    """Fraction correct; 2-D predictions are logits and reduced by argmax"""
    predicted = _as_predicted_classes(predictions)
    labels = np.asarray(labels)
    if predicted.size == 0 or predicted.shape[0] != labels.shape[0]:
        raise InvalidArgument(f"accuracy needs equal non-empty inputs, got {predicted.shape[0]} and {labels.shape[0]}")
    return float(accuracy_score(labels, predicted))


def metric_rmse(predictions, targets: Sequence[float]) -> float:
    predictions = np.asarray(predictions, dtype=np.float64).reshape(-1)
    targets = np.asarray(targets, dtype=np.float64).reshape(-1)
    if predictions.size == 0 or predictions.shape != targets.shape:
        raise InvalidArgument(f"rmse needs equal non-empty inputs, got {predictions.shape} and {targets.shape}")
    return math.sqrt(mean_squared_error(targets, predictions))
