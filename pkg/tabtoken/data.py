"""
Tabular dataset model and ingestion
Schema-tagged tables, CSV load/write, train-statistics preprocessing and noise injection
"""

import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field, model_validator

from .errors import DataError, InvalidArgument

logger = logging.getLogger(__name__)

MISSING_CATEGORY = "__missing__"
STD_FLOOR = 1e-12
# integer-valued label columns with at most this many distinct values are classes
MAX_AUTO_CLASSES = 32


class FeatureKind(str, Enum):
    """Cell type of a feature column"""
    NUMERICAL = "num"
    CATEGORICAL = "cat"


class TaskKind(str, Enum):
    """Prediction task of a table"""
    BINARY = "binary"
    MULTICLASS = "multiclass"
    REGRESSION = "regression"

    @property
    def is_classification(self) -> bool:
        return self is not TaskKind.REGRESSION


class FeatureSpec(BaseModel):
    """One column of a table"""
    name: str = Field(..., description="Column name as it appears in the CSV header")
    kind: FeatureKind = Field(..., description="num or cat")
    categories: List[str] = Field(default_factory=list, description="Ordered category labels (cat only)")

    @model_validator(mode="after")
    def check_categories(self) -> "FeatureSpec":
        if self.kind is FeatureKind.NUMERICAL and self.categories:
            raise ValueError(f"numerical feature {self.name} cannot carry categories")
        if self.kind is FeatureKind.CATEGORICAL:
            if not self.categories:
                raise ValueError(f"categorical feature {self.name} needs at least one category")
            if len(set(self.categories)) != len(self.categories):
                raise ValueError(f"categorical feature {self.name} has duplicate categories")
        return self

    @property
    def cardinality(self) -> int:
        return len(self.categories) if self.kind is FeatureKind.CATEGORICAL else 1

    @property
    def is_numerical(self) -> bool:
        return self.kind is FeatureKind.NUMERICAL


def schema_signature(schema: Sequence[FeatureSpec]) -> List[Tuple[str, str, Tuple[str, ...]]]:
    return [(f.name, f.kind.value, tuple(f.categories)) for f in schema]


@dataclass(frozen=True)
class DatasetTable:
    """
    Rows of a schema-tagged table.

    values holds one fp64 column per feature: the raw number for numerical cells
    (NaN when missing) and the category index for categorical cells. labels are
    class indices for classification and fp64 targets for regression.
    """
    schema: List[FeatureSpec]
    values: np.ndarray
    labels: np.ndarray
    task: TaskKind
    class_labels: List[str] = field(default_factory=list)
    row_ids: Optional[np.ndarray] = None
    label_name: str = "label"

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.ndim == 1 and not self.schema:
            values = values.reshape(-1, 0)
        n = values.shape[0]
        if values.ndim != 2 or values.shape[1] != len(self.schema):
            raise DataError(f"values shape {values.shape} does not match {len(self.schema)} schema features")
        if n < 1:
            raise DataError("a table needs at least one row")
        label_dtype = np.int64 if self.task.is_classification else np.float64
        labels = np.array(self.labels, dtype=label_dtype).reshape(-1)
        if labels.shape[0] != n:
            raise DataError(f"{labels.shape[0]} labels for {n} rows")
        if self.task.is_classification:
            n_classes = len(self.class_labels)
            if n_classes < 1 or labels.min() < 0 or labels.max() >= n_classes:
                raise DataError(f"class labels out of range for {n_classes} classes")
            if self.task is TaskKind.BINARY and n_classes != 2:
                raise DataError(f"binary task with {n_classes} classes")
        for j, spec in enumerate(self.schema):
            if spec.is_numerical:
                continue
            column = values[:, j]
            if np.isnan(column).any() or (column < 0).any() or (column >= spec.cardinality).any() \
                    or not np.array_equal(column, np.floor(column)):
                raise DataError(f"categorical feature {spec.name} has indices outside [0, {spec.cardinality})")
        row_ids = np.arange(n, dtype=np.int64) if self.row_ids is None else np.array(self.row_ids, dtype=np.int64)
        if row_ids.shape != (n,):
            raise DataError("row_ids must hold one id per row")
        for name, array in (("values", values), ("labels", labels), ("row_ids", row_ids)):
            array.flags.writeable = False
            object.__setattr__(self, name, array)
        object.__setattr__(self, "schema", list(self.schema))
        object.__setattr__(self, "class_labels", list(self.class_labels))

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    @property
    def n_features(self) -> int:
        return len(self.schema)

    @property
    def n_classes(self) -> int:
        return len(self.class_labels)

    @property
    def n_outputs(self) -> int:
        return self.n_classes if self.task.is_classification else 1

    @property
    def feature_names(self) -> List[str]:
        return [f.name for f in self.schema]

    def select_rows(self, indices: Sequence[int]) -> "DatasetTable":
        indices = np.asarray(indices, dtype=np.int64)
        return DatasetTable(self.schema, self.values[indices], self.labels[indices], self.task,
                            self.class_labels, self.row_ids[indices], self.label_name)

    def select_features(self, indices: Sequence[int]) -> "DatasetTable":
        indices = [int(i) for i in indices]
        schema = [self.schema[i] for i in indices]
        return DatasetTable(schema, self.values[:, indices], self.labels, self.task,
                            self.class_labels, self.row_ids, self.label_name)

    def replace(self, **changes) -> "DatasetTable":
        fields_ = dict(schema=self.schema, values=self.values, labels=self.labels, task=self.task,
                       class_labels=self.class_labels, row_ids=self.row_ids, label_name=self.label_name)
        fields_.update(changes)
        return DatasetTable(**fields_)


# --- CSV ingestion -----------------------------------------------------------

SchemaHint = Mapping[str, Union[FeatureKind, str, Mapping]]


def load_schema_sidecar(path: Union[str, Path]) -> Dict[str, FeatureSpec]:
    """Read a JSON sidecar of the form {column: {"kind": "num"|"cat", "categories": [...]}}"""
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise DataError(f"schema sidecar not found: {path}")
    except json.JSONDecodeError as e:
        raise DataError(f"invalid JSON in schema sidecar {path}: {e}")
    if not isinstance(raw, dict):
        raise DataError(f"schema sidecar {path} must be a JSON object")
    hints = {}
    for name, entry in raw.items():
        try:
            hints[name] = FeatureSpec(name=name, **entry)
        except (TypeError, ValueError) as e:
            raise DataError(f"bad sidecar entry for column {name}: {e}")
    return hints


def write_schema_sidecar(schema: Sequence[FeatureSpec], path: Union[str, Path]) -> None:
    doc = {}
    for spec in schema:
        entry = {"kind": spec.kind.value}
        if spec.categories:
            entry["categories"] = list(spec.categories)
        doc[spec.name] = entry
    Path(path).write_text(json.dumps(doc, indent=2), encoding="utf-8")


def _parse_numbers(cells: pd.Series) -> Optional[np.ndarray]:
    """fp64 column with NaN for empty cells, or None when some cell is not a number"""
    present = cells != ""
    parsed = pd.to_numeric(cells.where(present, None), errors="coerce").to_numpy(dtype=np.float64)
    if np.isnan(parsed[present.to_numpy()]).any():
        return None
    return parsed


def _hint_kind(hint) -> Tuple[Optional[FeatureKind], List[str]]:
    if hint is None:
        return None, []
    if isinstance(hint, FeatureSpec):
        return hint.kind, list(hint.categories)
    if isinstance(hint, Mapping):
        return FeatureKind(hint["kind"]), list(hint.get("categories", []))
    return FeatureKind(hint), []


def _categorical_column(name: str, cells: pd.Series, categories: List[str]) -> Tuple[FeatureSpec, np.ndarray]:
    labels = cells.where(cells != "", MISSING_CATEGORY)
    order = list(categories)
    known = set(order)
    for label in labels.unique():
        if label not in known:
            order.append(label)
            known.add(label)
    if categories and len(order) > len(categories):
        extra = order[len(categories):]
        logger.warning(f"Column {name}: {len(extra)} categories missing from the sidecar were appended: {extra}")
    lookup = {label: i for i, label in enumerate(order)}
    indices = labels.map(lookup).to_numpy(dtype=np.float64)
    return FeatureSpec(name=name, kind=FeatureKind.CATEGORICAL, categories=order), indices


def _class_order(labels: Sequence[str]) -> List[str]:
    distinct = sorted(set(labels))
    try:
        return sorted(distinct, key=float)
    except ValueError:
        return distinct


def _detect_task(cells: pd.Series) -> TaskKind:
    numbers = _parse_numbers(cells)
    if numbers is None:
        n_classes = cells.nunique()
    else:
        n_classes = len(np.unique(numbers))
        if not np.array_equal(numbers, np.round(numbers)) or n_classes > MAX_AUTO_CLASSES:
            return TaskKind.REGRESSION
    return TaskKind.BINARY if n_classes == 2 else TaskKind.MULTICLASS


def load_csv(path: Union[str, Path], label_column: str = "label", schema_hint: Optional[SchemaHint] = None,
             task: Optional[Union[TaskKind, str]] = None) -> DatasetTable:
    """
    Read a UTF-8 comma-separated file with a header row into a DatasetTable.

    A column is numerical when every non-empty cell parses as a number and no hint
    says otherwise; other columns are categorical with categories in order of first
    appearance. Empty cells are missing; a missing categorical cell becomes its own
    category.
    """
    path = Path(path)
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, na_filter=False)
    except FileNotFoundError:
        raise DataError(f"data file not found: {path}")
    except pd.errors.EmptyDataError:
        raise DataError(f"data file is empty: {path}")
    except pd.errors.ParserError as e:
        raise DataError(f"ragged rows in {path}: {e}")
    except UnicodeDecodeError as e:
        raise DataError(f"{path} is not UTF-8: {e}")

    if frame.empty:
        raise DataError(f"{path} has a header but no data rows")
    if frame.isna().any().any():
        raise DataError(f"ragged rows in {path}: some rows have fewer fields than the header")
    if label_column not in frame.columns:
        raise DataError(f"label column '{label_column}' not found in {path}")

    hints = dict(schema_hint or {})
    schema: List[FeatureSpec] = []
    columns: List[np.ndarray] = []
    for name in frame.columns:
        if name == label_column:
            continue
        cells = frame[name]
        kind, categories = _hint_kind(hints.get(name))
        numbers = _parse_numbers(cells) if kind is not FeatureKind.CATEGORICAL else None
        if kind is FeatureKind.NUMERICAL and numbers is None:
            raise DataError(f"column {name} is hinted numerical but holds non-numeric cells")
        if numbers is not None:
            schema.append(FeatureSpec(name=name, kind=FeatureKind.NUMERICAL))
            columns.append(numbers)
        else:
            spec, indices = _categorical_column(name, cells, categories)
            schema.append(spec)
            columns.append(indices)

    raw_labels = frame[label_column]
    if (raw_labels == "").any():
        raise DataError(f"label column '{label_column}' has empty cells in {path}")
    task = TaskKind(task) if task is not None else _detect_task(raw_labels)
    if task.is_classification:
        class_labels = _class_order(raw_labels.tolist())
        lookup = {label: i for i, label in enumerate(class_labels)}
        labels = raw_labels.map(lookup).to_numpy(dtype=np.int64)
        if task is TaskKind.BINARY and len(class_labels) != 2:
            raise DataError(f"binary task requested but {path} has {len(class_labels)} classes")
    else:
        numbers = _parse_numbers(raw_labels)
        if numbers is None:
            raise DataError(f"regression labels in {path} are not numeric")
        class_labels, labels = [], numbers

    values = np.column_stack(columns) if columns else np.zeros((len(frame), 0))
    table = DatasetTable(schema, values, labels, task, class_labels, label_name=label_column)
    logger.info(f"Loaded {path}: {table.n_rows} rows, {table.n_features} features, task={task.value}")
    return table


def write_csv(table: DatasetTable, path: Union[str, Path]) -> None:
    """Write a table back to CSV; fp64 cells keep 17 significant digits"""
    columns: Dict[str, List[str]] = {}
    for j, spec in enumerate(table.schema):
        column = table.values[:, j]
        if spec.is_numerical:
            columns[spec.name] = ["" if np.isnan(v) else f"{v:.17g}" for v in column]
        else:
            labels = [spec.categories[int(v)] for v in column]
            columns[spec.name] = ["" if label == MISSING_CATEGORY else label for label in labels]
    if table.task.is_classification:
        columns[table.label_name] = [table.class_labels[int(y)] for y in table.labels]
    else:
        columns[table.label_name] = [f"{y:.17g}" for y in table.labels]
    pd.DataFrame(columns).to_csv(path, index=False)
    logger.debug(f"Wrote {table.n_rows} rows to {path}")


# --- preprocessing -----------------------------------------------------------

class PreprocessStats(BaseModel):
    """Train-set statistics applied to every table of one run"""
    feature_names: List[str] = Field(..., description="Schema order the statistics refer to")
    means: List[Optional[float]] = Field(..., description="Train mean per numerical feature (None for categorical)")
    stds: List[Optional[float]] = Field(..., description="Train population std, 1.0 when degenerate")
    degenerate: List[str] = Field(default_factory=list, description="Numerical features with zero train variance")
    target_mean: Optional[float] = Field(None, description="Regression target mean")
    target_std: Optional[float] = Field(None, description="Regression target population std")

    def apply(self, table: DatasetTable) -> DatasetTable:
        if table.feature_names != self.feature_names:
            raise DataError("table schema does not match the preprocessing statistics")
        values = np.array(table.values, dtype=np.float64)
        for j, (mean, std) in enumerate(zip(self.means, self.stds)):
            if mean is None:
                continue
            column = values[:, j]
            column[np.isnan(column)] = mean
            values[:, j] = (column - mean) / std
        labels = table.labels
        if self.target_mean is not None:
            labels = (labels - self.target_mean) / self.target_std
        return table.replace(values=values, labels=labels)

    def destandardize_targets(self, targets: np.ndarray) -> np.ndarray:
        targets = np.asarray(targets, dtype=np.float64)
        if self.target_mean is None:
            return targets
        return targets * self.target_std + self.target_mean


def _robust_std(column: np.ndarray) -> Tuple[float, bool]:
    std = float(np.std(column))
    if std < STD_FLOOR:
        return 1.0, True
    return std, False


def fit_preprocess(train: DatasetTable) -> PreprocessStats:
    means: List[Optional[float]] = []
    stds: List[Optional[float]] = []
    degenerate = []
    for j, spec in enumerate(train.schema):
        if not spec.is_numerical:
            means.append(None)
            stds.append(None)
            continue
        column = train.values[:, j]
        present = column[~np.isnan(column)]
        if present.size == 0:
            raise DataError(f"numerical feature {spec.name} is missing in every training row")
        mean = float(present.mean())
        filled = np.where(np.isnan(column), mean, column)
        std, flat = _robust_std(filled - mean)
        if flat:
            degenerate.append(spec.name)
        means.append(mean)
        stds.append(std)
    target_mean = target_std = None
    if not train.task.is_classification:
        target_mean = float(train.labels.mean())
        target_std, _ = _robust_std(train.labels - target_mean)
    if degenerate:
        logger.warning(f"Zero-variance numerical features (scaled by 1): {degenerate}")
    return PreprocessStats(feature_names=train.feature_names, means=means, stds=stds,
                           degenerate=degenerate, target_mean=target_mean, target_std=target_std)


def preprocess(train: DatasetTable, others: Sequence[DatasetTable] = ()) -> Tuple[DatasetTable, List[DatasetTable], PreprocessStats]:
    """
    Fill numerical gaps with the train mean and standardise with train statistics.

    The statistics come from `train` alone and are applied unchanged to `others`.
    Categorical cells pass through. Regression targets are standardised the same way.
    A column whose train std is below 1e-12 becomes 0 on train and is divided by 1
    instead of its std, so unseen rows keep their raw offset from the train mean.
    """
    signature = schema_signature(train.schema)
    for other in others:
        if schema_signature(other.schema) != signature:
            raise DataError("all tables passed to preprocess must share one schema")
    stats = fit_preprocess(train)
    return stats.apply(train), [stats.apply(t) for t in others], stats


def add_gaussian_noise(table: DatasetTable, ratio: float = 0.1, seed: Optional[int] = None,
                       skip_categorical: bool = False) -> DatasetTable:
    """Add N(0, (ratio * column std)^2) noise to every numerical cell"""
    if ratio < 0:
        raise InvalidArgument(f"noise ratio must be non-negative, got {ratio}")
    categorical = [f.name for f in table.schema if not f.is_numerical]
    if categorical and not skip_categorical:
        raise InvalidArgument(f"cannot add Gaussian noise to categorical features {categorical}")
    if ratio == 0:
        return table
    rng = np.random.default_rng(seed)
    values = np.array(table.values, dtype=np.float64)
    for j, spec in enumerate(table.schema):
        if not spec.is_numerical:
            continue
        column = values[:, j]
        scale = ratio * float(np.nanstd(column))
        values[:, j] = column + rng.normal(0.0, 1.0, size=column.shape) * scale
    return table.replace(values=values)
