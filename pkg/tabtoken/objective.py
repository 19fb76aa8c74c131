"""
Token objectives
Instance-token combination, batch class centers, contrastive token
regularization variants and the combined training objective
"""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence, Union

import numpy as np

from .data import TaskKind
from .errors import InvalidArgument
from .numerics import (
    Tensor,
    cross_entropy,
    matmul,
    mean_squared_error,
    reduce_mean,
    reduce_sum,
    scale,
    sorted_mean,
    squared_distance,
    take,
)

logger = logging.getLogger(__name__)


class CombineMode(str, Enum):
    AVERAGE = "average"
    CONCAT = "concat"


class CtrVariant(str, Enum):
    """How instance tokens are pulled toward / pushed from class centers"""
    VANILLA = "vanilla"
    HARDEST = "hardest"
    ALL_HARD = "all_hard"
    VANILLA_PLUS_HARD = "vanilla_plus_hard"


def combine_average(tokens: Tensor) -> Tensor:
    """Mean over the feature axis (-2); bitwise invariant to the order of feature rows"""
    if tokens.ndim < 2 or tokens.shape[-2] == 0:
        raise InvalidArgument("cannot average an empty token set")
    return sorted_mean(tokens, axis=-2)


def combine_concat(tokens: Tensor) -> Tensor:
    """Feature rows laid end to end in schema order"""
    if tokens.ndim < 2 or tokens.shape[-2] == 0:
        raise InvalidArgument("cannot concatenate an empty token set")
    d, k = tokens.shape[-2:]
    return tokens.reshape(tokens.shape[:-2] + (d * k,))


def combine(tokens: Tensor, mode: Union[CombineMode, str]) -> Tensor:
    return combine_average(tokens) if CombineMode(mode) is CombineMode.AVERAGE else combine_concat(tokens)


@dataclass
class ClassCenters:
    """Batch mean of the instance tokens of every class present in the batch"""
    classes: np.ndarray
    centers: Tensor
    counts: np.ndarray

    def position(self, labels: np.ndarray) -> np.ndarray:
        return np.searchsorted(self.classes, labels)

    def center_of(self, label: int) -> np.ndarray:
        return self.centers.data[int(np.searchsorted(self.classes, label))]


def class_centers(tokens: Tensor, labels: Sequence[int]) -> ClassCenters:
    labels = np.asarray(labels, dtype=np.int64)
    if tokens.ndim != 2 or tokens.shape[0] == 0 or tokens.shape[0] != labels.shape[0]:
        raise InvalidArgument(f"class_centers needs a non-empty (N, k) batch with N labels, got {tokens.shape}")
    classes, position, counts = np.unique(labels, return_inverse=True, return_counts=True)
    membership = np.zeros((classes.size, labels.size))
    membership[position, np.arange(labels.size)] = 1.0 / counts[position]
    return ClassCenters(classes=classes, centers=matmul(Tensor(membership), tokens), counts=counts)


def _center_distances(tokens: Tensor, centers: Tensor) -> Tensor:
    n, k = tokens.shape
    diff = tokens.reshape(n, 1, k) - centers.reshape(1, centers.shape[0], k)
    return reduce_sum(diff * diff, axis=-1)


def ctr_loss(tokens: Tensor, labels: Sequence[int], variant: Union[CtrVariant, str] = CtrVariant.VANILLA) -> Tensor:
    """
    Contrastive token regularization over one batch of instance tokens (N, k).

    vanilla pulls each token to its class center; hardest pushes it from the
    nearest other center; all_hard from every other center; vanilla_plus_hard
    pulls and pushes. Centers are live functions of the tokens, so gradients
    flow through them as well.
    """
    variant = CtrVariant(variant)
    labels = np.asarray(labels, dtype=np.int64)
    centers = class_centers(tokens, labels)
    own = centers.position(labels)
    if variant is CtrVariant.VANILLA:
        return reduce_mean(squared_distance(tokens, take(centers.centers, own, axis=0)))

    n_present = centers.classes.size
    if n_present < 2:
        raise InvalidArgument(f"CTR variant {variant.value} needs at least two classes in the batch")
    distances = _center_distances(tokens, centers.centers)
    others = np.ones((labels.size, n_present))
    others[np.arange(labels.size), own] = 0.0
    if variant is CtrVariant.HARDEST:
        masked = np.where(others > 0, distances.data, np.inf)
        nearest = np.zeros_like(others)
        nearest[np.arange(labels.size), masked.argmin(axis=1)] = 1.0
        return reduce_mean(reduce_sum(distances * nearest, axis=1))
    push = scale(reduce_sum(distances * others, axis=1), 1.0 / (n_present - 1))
    if variant is CtrVariant.ALL_HARD:
        return reduce_mean(push)
    pull = reduce_sum(distances * (1.0 - others), axis=1)
    return reduce_mean(pull - push)


def pseudo_labels_regression(targets: Sequence[float], median: Optional[float] = None) -> np.ndarray:
    """1 for targets strictly above the median, 2 otherwise"""
    targets = np.asarray(targets, dtype=np.float64)
    if median is None:
        if targets.size < 2:
            raise InvalidArgument("pseudo-labels need at least two targets")
        median = float(np.median(targets))
    return np.where(targets > median, 1, 2).astype(np.int64)


def task_loss(predictions: Tensor, labels: np.ndarray, task: Union[TaskKind, str]) -> Tensor:
    if TaskKind(task).is_classification:
        return cross_entropy(predictions, labels)
    return mean_squared_error(predictions, labels)


def training_objective(predictions: Tensor, labels: np.ndarray, tokens: Tensor, beta: float,
                       variant: Union[CtrVariant, str] = CtrVariant.VANILLA,
                       task: Union[TaskKind, str] = TaskKind.MULTICLASS,
                       ctr_labels: Optional[np.ndarray] = None) -> Tensor:
    """
    Task loss plus beta times CTR.

    tokens are instance tokens (N, k) or raw token matrices (N, d, k), which are
    averaged first. Regression uses median pseudo-classes for CTR unless
    ctr_labels is given. beta == 0 returns the bare task loss.
    """
    if beta < 0:
        raise InvalidArgument(f"beta must be non-negative, got {beta}")
    loss = task_loss(predictions, labels, task)
    if beta == 0:
        return loss
    if tokens.ndim == 3:
        tokens = combine_average(tokens)
    if ctr_labels is None:
        ctr_labels = labels if TaskKind(task).is_classification else pseudo_labels_regression(labels)
    return loss + scale(ctr_loss(tokens, ctr_labels, variant), beta)
