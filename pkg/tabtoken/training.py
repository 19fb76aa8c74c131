"""
Mini-batch training loop
Minimises task loss + beta * CTR with AdamW, records per-epoch history and keeps
the best validation snapshot
"""

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .checkpoint import EpochRecord
from .data import DatasetTable, PreprocessStats
from .errors import InvalidArgument, NumericError
from .metrics import metric_accuracy, metric_rmse
from .models import TabularModel
from .numerics import AdamW, Tensor, no_grad
from .objective import CtrVariant, combine_average, pseudo_labels_regression, task_loss, training_objective
from .schemas import ObjectiveConfig, StageConfig
from .tokenizer import BaseTokenizer

logger = logging.getLogger(__name__)


@dataclass
class TrainResult:
    history: List[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    best_metric: Optional[float] = None


def make_batches(n: int, batch_size: int, rng: Optional[np.random.Generator]) -> List[np.ndarray]:
    """Shuffled index batches; a trailing single row joins the previous batch"""
    order = rng.permutation(n) if rng is not None else np.arange(n)
    batches = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(batches) > 1 and batches[-1].size == 1:
        batches[-2] = np.concatenate([batches[-2], batches[-1]])
        batches.pop()
    return batches


def predict_outputs(tokenizer: BaseTokenizer, model: TabularModel, values: np.ndarray,
                    batch_size: int = 1024) -> np.ndarray:
    """Eval-mode model outputs (N, C) for classification or (N,) for regression"""
    was_training = model.training
    model.eval()
    outputs = []
    with no_grad():
        for batch in make_batches(values.shape[0], batch_size, None):
            outputs.append(model(tokenizer.tokenize_batch(values[batch])).data)
    model.train(was_training)
    stacked = np.concatenate(outputs, axis=0)
    return stacked if model.n_outputs > 1 else stacked.reshape(-1)


def evaluate_metric(tokenizer: BaseTokenizer, model: TabularModel, table: DatasetTable,
                    batch_size: int = 1024, stats: Optional[PreprocessStats] = None) -> float:
    """Accuracy for classification; RMSE (de-standardised when stats are given) for regression"""
    outputs = predict_outputs(tokenizer, model, table.values, batch_size)
    if table.task.is_classification:
        return metric_accuracy(outputs, table.labels)
    if stats is not None:
        return metric_rmse(stats.destandardize_targets(outputs), stats.destandardize_targets(table.labels))
    return metric_rmse(outputs, table.labels)


class Trainer:
    """
    One training stage over a fixed tokenizer + model pair.

    `trainable` restricts which parameters the optimizer sees during `fit`; everything else is
    left untouched. With a validation table the parameters of the best epoch
    (epoch 0 being the initialisation) are restored at the end.
    """

    def __init__(self, tokenizer: BaseTokenizer, model: TabularModel, stage: StageConfig,
                 objective: ObjectiveConfig, seed=None, trainable: Optional[Sequence[Tensor]] = None):
        self.tokenizer = tokenizer
        self.model = model
        self.stage = stage
        self.objective = objective
        self.rng = np.random.default_rng(seed)
        self.all_params = [p for p in tokenizer.parameters() + model.parameters() if p.data.size > 0]
        chosen = list(trainable) if trainable is not None else self.all_params
        self._chosen_ids = {id(p) for p in chosen}
        self.optimizer = AdamW(chosen, lr=stage.learning_rate, weight_decay=stage.weight_decay)

    def _ctr_labels(self, table: DatasetTable) -> Optional[np.ndarray]:
        if table.task.is_classification:
            return table.labels
        return pseudo_labels_regression(table.labels, median=float(np.median(table.labels)))

    def _batch_objective(self, table: DatasetTable, batch: np.ndarray, ctr_labels: np.ndarray) -> Tensor:
        tokens = self.tokenizer.tokenize_batch(table.values[batch])
        predictions = self.model(tokens)
        labels = table.labels[batch]
        if not table.task.is_classification:
            predictions = predictions.reshape(-1)
        beta = self.objective.beta
        variant = CtrVariant(self.objective.variant)
        if beta > 0 and variant is not CtrVariant.VANILLA and np.unique(ctr_labels[batch]).size < 2:
            logger.debug(f"Batch of {batch.size} rows has a single class; {variant.value} CTR skipped")
            return task_loss(predictions, labels, table.task)
        return training_objective(predictions, labels, combine_average(tokens), beta, variant,
                                  table.task, ctr_labels=ctr_labels[batch])

    def objective_value(self, table: DatasetTable) -> float:
        """Eval-mode objective averaged over fixed-order batches"""
        ctr_labels = self._ctr_labels(table)
        was_training = self.model.training
        self.model.eval()
        total = 0.0
        with no_grad():
            for batch in make_batches(table.n_rows, self.stage.batch_size, None):
                total += self._batch_objective(table, batch, ctr_labels).item() * batch.size
        self.model.train(was_training)
        return total / table.n_rows

    def _snapshot(self) -> List[np.ndarray]:
        return [p.data.copy() for p in self.all_params] + [b.copy() for _, b in self.model.named_buffers()]

    def _restore(self, snapshot: List[np.ndarray]) -> None:
        targets = [p.data for p in self.all_params] + [b for _, b in self.model.named_buffers()]
        for target, value in zip(targets, snapshot):
            target[...] = value

    def _is_better(self, metric: float, best: Optional[float], classification: bool) -> bool:
        if best is None:
            return True
        return metric > best if classification else metric < best

    def fit(self, train: DatasetTable, validation: Optional[DatasetTable] = None,
            val_stats: Optional[PreprocessStats] = None) -> TrainResult:
        saved = [(p, p.requires_grad) for p in self.all_params]
        for p in self.all_params:
            p.requires_grad = id(p) in self._chosen_ids
        try:
            return self._fit(train, validation, val_stats)
        finally:
            for p, flag in saved:
                p.requires_grad = flag

    def _fit(self, train: DatasetTable, validation: Optional[DatasetTable],
             val_stats: Optional[PreprocessStats]) -> TrainResult:
        if train.n_rows < 1:
            raise InvalidArgument("cannot train on an empty table")
        result = TrainResult()
        ctr_labels = self._ctr_labels(train)
        classification = train.task.is_classification

        def record(epoch: int) -> None:
            objective = self.objective_value(train)
            metric = None
            if validation is not None:
                metric = evaluate_metric(self.tokenizer, self.model, validation, self.stage.batch_size, val_stats)
                if self._is_better(metric, result.best_metric, classification):
                    result.best_metric, result.best_epoch = metric, epoch
                    best[0] = self._snapshot()
            result.history.append(EpochRecord(epoch=epoch, objective=objective, val_metric=metric))
            logger.info(f"epoch {epoch}/{self.stage.epochs} objective={objective:.6f}"
                        + (f" val={metric:.6f}" if metric is not None else ""))

        best = [None]
        record(0)
        for epoch in range(1, self.stage.epochs + 1):
            self.model.train()
            for batch in make_batches(train.n_rows, self.stage.batch_size, self.rng):
                loss = self._batch_objective(train, batch, ctr_labels)
                if not math.isfinite(loss.item()):
                    raise NumericError(f"non-finite objective {loss.item()} at epoch {epoch}")
                if not loss.requires_grad:
                    continue
                loss.backward()
                for p in self.optimizer.params:
                    if p.grad is None:
                        p.grad = np.zeros_like(p.data)
                self.optimizer.step()
                for p in self.all_params:
                    p.zero_grad()
            record(epoch)
        self.model.eval()
        if validation is not None and best[0] is not None and result.best_epoch != self.stage.epochs:
            logger.info(f"Restoring parameters from epoch {result.best_epoch} (val={result.best_metric:.6f})")
            self._restore(best[0])
        return result
