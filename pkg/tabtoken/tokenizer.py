"""
Feature tokenizer
Maps each instance to a d x k token matrix: a scaled vector per numerical
feature and a looked-up row per categorical feature
"""

import hashlib
import json
import logging
import math
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from .data import DatasetTable, FeatureSpec, schema_signature
from .errors import DataError, InvalidArgument
from .numerics import Tensor, concat, matmul, take

logger = logging.getLogger(__name__)


def schema_fingerprint(schema: Sequence[FeatureSpec], k: int) -> str:
    payload = json.dumps({"k": k, "schema": schema_signature(schema)}, sort_keys=True)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class TokenLayout:
    """Where each feature's token rows sit in the pooled row matrix (schema order)"""

    def __init__(self, schema: Sequence[FeatureSpec]):
        self.schema = list(schema)
        sizes = [f.cardinality for f in self.schema]
        self.offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.int64) if sizes else np.zeros(0, np.int64)
        self.n_rows = int(sum(sizes))
        self.numerical = [j for j, f in enumerate(self.schema) if f.is_numerical]
        self.categorical = [j for j, f in enumerate(self.schema) if not f.is_numerical]
        # position of each schema feature inside [numerical..., categorical...]
        self.restore = np.argsort(np.array(self.numerical + self.categorical, dtype=np.int64), kind="stable")

    def row(self, feature: int, category: Optional[int] = None) -> int:
        spec = self.schema[feature]
        if spec.is_numerical:
            return int(self.offsets[feature])
        if category is None or not 0 <= category < spec.cardinality:
            raise DataError(f"category {category} out of range for feature {spec.name}")
        return int(self.offsets[feature] + category)

    def feature_rows(self, feature: int) -> range:
        start = int(self.offsets[feature])
        return range(start, start + self.schema[feature].cardinality)

    def row_labels(self) -> List[Tuple[str, str]]:
        labels = []
        for spec in self.schema:
            if spec.is_numerical:
                labels.append((spec.name, ""))
            else:
                labels.extend((spec.name, c) for c in spec.categories)
        return labels


class BaseTokenizer:
    """Shared batch tokenization over a pooled (rows x k) token matrix"""

    schema: List[FeatureSpec]
    k: int
    layout: TokenLayout

    def row_matrix(self) -> Tensor:
        raise NotImplementedError

    def parameters(self) -> List[Tensor]:
        raise NotImplementedError

    @property
    def d(self) -> int:
        return len(self.schema)

    @property
    def fingerprint(self) -> str:
        return schema_fingerprint(self.schema, self.k)

    def pooled_rows(self) -> np.ndarray:
        """Every token row in schema order: one per numerical feature, K_j per categorical feature"""
        return self.row_matrix().data.copy()

    def _check_values(self, values: np.ndarray) -> None:
        if values.ndim != 2 or values.shape[1] != self.d:
            raise DataError(f"expected rows with {self.d} features, got shape {values.shape}")
        for j in self.layout.numerical:
            if np.isnan(values[:, j]).any():
                raise DataError(f"missing value in numerical feature {self.schema[j].name}; preprocess first")
        for j in self.layout.categorical:
            column = values[:, j]
            if np.isnan(column).any() or (column < 0).any() or (column >= self.schema[j].cardinality).any():
                raise DataError(f"category index out of range for feature {self.schema[j].name}")

    def tokenize_batch(self, batch: Union[DatasetTable, np.ndarray]) -> Tensor:
        """(N, d, k) tokens; gradients reach only the token rows the batch uses"""
        if isinstance(batch, DatasetTable):
            if schema_signature(batch.schema) != schema_signature(self.schema):
                raise DataError("table schema does not match the tokenizer schema")
            values = batch.values
        else:
            values = np.asarray(batch, dtype=np.float64)
        self._check_values(values)
        n = values.shape[0]
        rows = self.row_matrix()
        parts = []
        if self.layout.numerical:
            num_rows = self.layout.offsets[self.layout.numerical]
            scale = values[:, self.layout.numerical].reshape(n, -1, 1)
            parts.append(Tensor(scale) * take(rows, num_rows, axis=0))
        if self.layout.categorical:
            cat_cols = self.layout.categorical
            index = self.layout.offsets[cat_cols][None, :] + values[:, cat_cols].astype(np.int64)
            parts.append(take(rows, index, axis=0))
        if not parts:
            raise DataError("cannot tokenize a table without features")
        tokens = parts[0] if len(parts) == 1 else concat(parts, axis=1)
        if self.layout.numerical and self.layout.categorical:
            tokens = take(tokens, self.layout.restore, axis=1)
        return tokens

    def tokenize_instance(self, row: Sequence[float]) -> Tensor:
        return self.tokenize_batch(np.asarray(row, dtype=np.float64).reshape(1, -1))[0]


class FeatureTokenizer(BaseTokenizer):
    """
    Learnable token rows for one schema.

    All rows live in a single (rows x k) parameter; freeze flags are per row and
    are honoured by backward passes and by the optimizer.
    """

    def __init__(self, schema: Sequence[FeatureSpec], k: int, tokens: np.ndarray,
                 frozen: Optional[np.ndarray] = None):
        if k < 1:
            raise InvalidArgument(f"token size k must be at least 1, got {k}")
        self.schema = list(schema)
        self.k = int(k)
        self.layout = TokenLayout(self.schema)
        tokens = np.array(tokens, dtype=np.float64)
        if tokens.shape != (self.layout.n_rows, self.k):
            raise DataError(f"token matrix shape {tokens.shape} != ({self.layout.n_rows}, {self.k})")
        self.tokens = Tensor(tokens, requires_grad=True, name="tokens")
        flags = np.zeros(self.layout.n_rows, dtype=bool) if frozen is None else np.array(frozen, dtype=bool)
        if flags.shape != (self.layout.n_rows,):
            raise DataError("one freeze flag per token row is required")
        self.tokens.frozen_rows = flags

    @classmethod
    def init(cls, schema: Sequence[FeatureSpec], k: int, seed=None) -> "FeatureTokenizer":
        """Kaiming-uniform rows in [-sqrt(6/k), sqrt(6/k)], nothing frozen, no bias"""
        if k < 1:
            raise InvalidArgument(f"token size k must be at least 1, got {k}")
        rng = np.random.default_rng(seed)
        n_rows = TokenLayout(schema).n_rows
        return cls(schema, k, kaiming_uniform(rng, (n_rows, k), fan_in=k))

    def row_matrix(self) -> Tensor:
        return self.tokens

    def parameters(self) -> List[Tensor]:
        return [self.tokens]

    @property
    def frozen(self) -> np.ndarray:
        return self.tokens.frozen_rows.copy()

    def set_row(self, row: int, vector: np.ndarray, frozen: bool = False) -> None:
        self.tokens.data[row] = np.asarray(vector, dtype=np.float64)
        self.tokens.frozen_rows[row] = frozen

    def freeze_all(self) -> None:
        self.tokens.frozen_rows[:] = True

    def feature_tokens(self, feature: int) -> np.ndarray:
        return self.tokens.data[list(self.layout.feature_rows(feature))].copy()


class ReweightedTokenizer(BaseTokenizer):
    """
    Downstream tokenizer built from a token library.

    The library stacks the frozen pre-trained rows with n new learnable rows; the
    downstream rows are W @ library, with W and the new rows trained.
    """

    def __init__(self, schema: Sequence[FeatureSpec], k: int, library: np.ndarray,
                 weights: np.ndarray, new_tokens: np.ndarray):
        self.schema = list(schema)
        self.k = int(k)
        self.layout = TokenLayout(self.schema)
        self.library = np.array(library, dtype=np.float64)
        if self.library.ndim != 2 or self.library.shape[1] != self.k:
            raise DataError(f"library rows must have length {self.k}")
        new_tokens = np.array(new_tokens, dtype=np.float64).reshape(-1, self.k)
        width = self.library.shape[0] + new_tokens.shape[0]
        weights = np.array(weights, dtype=np.float64)
        if weights.shape != (self.layout.n_rows, width):
            raise DataError(f"re-weighting matrix shape {weights.shape} != ({self.layout.n_rows}, {width})")
        self.weights = Tensor(weights, requires_grad=True, name="reweight")
        self.new_tokens = Tensor(new_tokens, requires_grad=True, name="new_tokens")

    @classmethod
    def init(cls, schema: Sequence[FeatureSpec], k: int, library: np.ndarray, n_new: int,
             seed=None) -> "ReweightedTokenizer":
        if n_new < 0:
            raise InvalidArgument(f"n_new must be non-negative, got {n_new}")
        rng = np.random.default_rng(seed)
        n_rows = TokenLayout(schema).n_rows
        width = np.asarray(library).shape[0] + n_new
        if width == 0:
            raise InvalidArgument("an empty token library cannot be re-weighted")
        new_tokens = kaiming_uniform(rng, (n_new, k), fan_in=k)
        return cls(schema, k, library, np.full((n_rows, width), 1.0 / width), new_tokens)

    @property
    def n_new(self) -> int:
        return self.new_tokens.shape[0]

    def library_tensor(self) -> Tensor:
        if self.n_new == 0:
            return Tensor(self.library)
        return concat([Tensor(self.library), self.new_tokens], axis=0)

    def row_matrix(self) -> Tensor:
        return matmul(self.weights, self.library_tensor())

    def parameters(self) -> List[Tensor]:
        return [self.weights] + ([self.new_tokens] if self.n_new else [])

    def materialize(self) -> FeatureTokenizer:
        """Plain tokenizer holding the current W @ library rows"""
        return FeatureTokenizer(self.schema, self.k, self.row_matrix().data)
