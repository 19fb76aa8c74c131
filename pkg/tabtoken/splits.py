"""
Transfer splits and few-shot sampling
Instance partitions, overlapping feature sets, split manifests and N-shot subsets
"""

import hashlib
import logging
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field, model_validator

from .data import DatasetTable
from .errors import DataError, InvalidArgument

logger = logging.getLogger(__name__)

TEST_FRACTION = 0.2
VALIDATION_FRACTION = 0.2
PRETRAIN_FRACTION = 0.8


class OverlapLevel(str, Enum):
    """Named overlap ratios between downstream and pre-training feature sets"""
    LOW = "low"
    MEDIUM = "medium"
    HIGH = "high"

    @property
    def ratio(self) -> float:
        return {"low": 0.33, "medium": 0.5, "high": 0.6}[self.value]


# (d, d_t, s) per dataset and level, as published for the transfer benchmarks
DATASET_PRESETS: Dict[str, Dict[str, Tuple[int, int, int]]] = {
    "eye": {"low": (16, 15, 5), "medium": (17, 17, 8), "high": (19, 18, 11)},
    "jannis": {"low": (34, 34, 14), "medium": (36, 36, 18), "high": (38, 38, 22)},
    "colon": {"medium": (13, 12, 7)},
    "clave": {"medium": (11, 10, 5)},
    "cardio": {"medium": (7, 7, 3)},
    "htru": {"medium": (6, 5, 3)},
    "breast": {"medium": (20, 19, 10)},
    "elevators": {"medium": (12, 12, 6)},
    "super": {"medium": (54, 54, 27)},
    "volume": {"medium": (35, 35, 17)},
}


class OverlapMap(BaseModel):
    """Pairs (downstream_index, pretrain_index) of features shared by both schemas"""
    pairs: List[Tuple[int, int]] = Field(default_factory=list, description="(downstream, pretrain) index pairs")
    d: int = Field(..., ge=0, description="Pre-training feature count")
    d_t: int = Field(..., ge=0, description="Downstream feature count")

    @model_validator(mode="after")
    def check_pairs(self) -> "OverlapMap":
        downstream = [p[0] for p in self.pairs]
        upstream = [p[1] for p in self.pairs]
        if len(set(downstream)) != len(downstream) or len(set(upstream)) != len(upstream):
            raise ValueError("overlap indices must be unique on both sides")
        if any(not 0 <= j < self.d_t for j in downstream) or any(not 0 <= j < self.d for j in upstream):
            raise ValueError("overlap index out of range")
        return self

    @property
    def s(self) -> int:
        return len(self.pairs)

    @property
    def ratio(self) -> float:
        return self.s / self.d_t if self.d_t else 0.0

    def pretrain_index(self, downstream_index: int) -> Optional[int]:
        for down, pre in self.pairs:
            if down == downstream_index:
                return pre
        return None

    @property
    def unseen(self) -> List[int]:
        shared = {p[0] for p in self.pairs}
        return [j for j in range(self.d_t) if j not in shared]

    @classmethod
    def from_names(cls, pretrain_names: Sequence[str], downstream_names: Sequence[str]) -> "OverlapMap":
        position = {name: i for i, name in enumerate(pretrain_names)}
        pairs = [(j, position[name]) for j, name in enumerate(downstream_names) if name in position]
        return cls(pairs=pairs, d=len(pretrain_names), d_t=len(downstream_names))


class SplitManifest(BaseModel):
    """Everything needed to rebuild a TransferSplit bit-exactly from the full table"""
    seed: Optional[int] = Field(None, description="Seed the split was drawn with")
    columns: List[str] = Field(..., description="Feature names of the full table")
    pretrain_features: List[int]
    downstream_features: List[int]
    test_rows: List[int]
    validation_rows: List[int]
    pretrain_rows: List[int]
    pool_rows: List[int]
    pretrain_fraction: float = Field(1.0, description="Share of the pre-training partition kept in pretrain_rows")

    @model_validator(mode="after")
    def check_partition(self) -> "SplitManifest":
        parts = [self.test_rows, self.validation_rows, self.pretrain_rows, self.pool_rows]
        flat = [i for part in parts for i in part]
        if len(set(flat)) != len(flat):
            raise ValueError("instance partitions overlap")
        return self

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(self.model_dump_json(indent=2), encoding="utf-8")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "SplitManifest":
        path = Path(path)
        try:
            return cls.model_validate_json(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise DataError(f"split manifest not found: {path}")
        except ValueError as e:
            raise DataError(f"invalid split manifest {path}: {e}")


@dataclass(frozen=True)
class TransferSplit:
    pretrain: DatasetTable
    validation: DatasetTable
    downstream_pool: DatasetTable
    test: DatasetTable
    overlap_map: OverlapMap
    manifest: SplitManifest


def feature_counts(n_features: int, level: Union[OverlapLevel, str], dataset: Optional[str] = None) -> Tuple[int, int, int]:
    """(d, d_t, s) for a named overlap level: the published preset when one exists, else derived from the ratio"""
    level = OverlapLevel(level)
    preset = DATASET_PRESETS.get((dataset or "").lower(), {}).get(level.value)
    if preset is not None:
        if preset[0] + preset[1] - preset[2] > n_features:
            raise DataError(f"preset {dataset}/{level.value} needs {preset[0] + preset[1] - preset[2]} features, "
                            f"table has {n_features}")
        return preset
    r = level.ratio
    d_t = int(math.floor(n_features / (2.0 - r)))
    s = int(math.ceil(r * d_t))
    d = n_features - d_t + s
    if d_t < 1 or s > d_t:
        raise DataError(f"cannot derive a {level.value} overlap split from {n_features} features")
    return d, d_t, s


def _instance_partition(n: int, rng: np.random.Generator) -> Tuple[List[int], ...]:
    order = rng.permutation(n)
    n_test = int(round(TEST_FRACTION * n))
    rest = n - n_test
    n_val = int(round(VALIDATION_FRACTION * rest))
    n_train = rest - n_val
    n_pre = int(round(PRETRAIN_FRACTION * n_train))
    cuts = np.cumsum([n_test, n_val, n_pre])
    parts = np.split(order, cuts)
    if any(len(p) == 0 for p in parts):
        raise DataError(f"{n} rows are too few for a test/validation/pretrain/pool partition")
    return tuple(sorted(int(i) for i in p) for p in parts)


def make_transfer_split(full: DatasetTable, overlap_level: Union[OverlapLevel, str, Tuple[int, int, int]] = "medium",
                        seed: Optional[int] = None, dataset: Optional[str] = None,
                        pretrain_features: Optional[Sequence[int]] = None,
                        downstream_features: Optional[Sequence[int]] = None,
                        pretrain_fraction: float = 1.0) -> TransferSplit:
    """
    Split rows into test / validation / pretrain / downstream pool and choose the
    two feature sets.

    Features come from a seeded permutation: pre-training takes the first d, the
    downstream task takes d_t consecutive features starting at d - s, so the two
    sets share exactly s features. Explicit index lists bypass the permutation.
    With pretrain_fraction < 1 a seeded subsample of the pre-training rows is kept.
    """
    if not 0.0 < pretrain_fraction <= 1.0:
        raise InvalidArgument(f"pretrain_fraction must be in (0, 1], got {pretrain_fraction}")
    rng = np.random.default_rng(seed)
    n_total = full.n_features
    if pretrain_features is not None or downstream_features is not None:
        if pretrain_features is None or downstream_features is None:
            raise InvalidArgument("explicit feature lists need both pretrain and downstream indices")
        pre = [int(j) for j in pretrain_features]
        down = [int(j) for j in downstream_features]
        for j in pre + down:
            if not 0 <= j < n_total:
                raise InvalidArgument(f"feature index {j} outside [0, {n_total})")
        if len(set(pre)) != len(pre) or len(set(down)) != len(down):
            raise InvalidArgument("explicit feature lists contain duplicates")
        # consume the feature draw so row partitions match the permuted layout
        rng.permutation(n_total)
    else:
        if isinstance(overlap_level, (tuple, list)):
            d, d_t, s = (int(v) for v in overlap_level)
        else:
            d, d_t, s = feature_counts(n_total, overlap_level, dataset)
        if s > min(d, d_t) or s < 0 or d < 1 or d_t < 1:
            raise InvalidArgument(f"overlap s={s} is invalid for d={d}, d_t={d_t}")
        if d + d_t - s > n_total:
            raise DataError(f"d={d}, d_t={d_t}, s={s} needs {d + d_t - s} features, table has {n_total}")
        perm = [int(j) for j in rng.permutation(n_total)]
        pre = perm[:d]
        down = perm[d - s:d - s + d_t]

    test_rows, val_rows, pre_rows, pool_rows = _instance_partition(full.n_rows, rng)
    if pretrain_fraction < 1.0:
        keep = max(1, int(round(pretrain_fraction * len(pre_rows))))
        pre_rows = sorted(int(i) for i in rng.choice(pre_rows, size=keep, replace=False))
    manifest = SplitManifest(seed=seed, columns=full.feature_names, pretrain_features=pre,
                             downstream_features=down, test_rows=test_rows, validation_rows=val_rows,
                             pretrain_rows=pre_rows, pool_rows=pool_rows, pretrain_fraction=pretrain_fraction)
    split = apply_manifest(full, manifest)
    logger.info(f"Transfer split: d={len(pre)}, d_t={len(down)}, s={split.overlap_map.s}, "
                f"rows test/val/pretrain/pool={len(test_rows)}/{len(val_rows)}/{len(pre_rows)}/{len(pool_rows)}")
    return split


def apply_manifest(full: DatasetTable, manifest: SplitManifest) -> TransferSplit:
    if manifest.columns != full.feature_names:
        raise DataError("split manifest columns do not match the table")
    n = full.n_rows
    for rows in (manifest.test_rows, manifest.validation_rows, manifest.pretrain_rows, manifest.pool_rows):
        if any(not 0 <= i < n for i in rows):
            raise DataError(f"split manifest references rows outside [0, {n})")
    upstream = full.select_features(manifest.pretrain_features)
    downstream = full.select_features(manifest.downstream_features)
    overlap = OverlapMap.from_names(upstream.feature_names, downstream.feature_names)
    return TransferSplit(
        pretrain=upstream.select_rows(manifest.pretrain_rows),
        validation=upstream.select_rows(manifest.validation_rows),
        downstream_pool=downstream.select_rows(manifest.pool_rows),
        test=downstream.select_rows(manifest.test_rows),
        overlap_map=overlap,
        manifest=manifest,
    )


def sample_few_shot(pool: DatasetTable, shots: int, seed=None) -> DatasetTable:
    """
    N-shot subset of a pool.

    Classification draws `shots` rows per class without replacement, classes in
    label order; regression draws `shots` rows in total.
    """
    if shots < 1:
        raise InvalidArgument(f"shots must be positive, got {shots}")
    rng = np.random.default_rng(seed)
    if not pool.task.is_classification:
        if pool.n_rows < shots:
            raise DataError(f"pool has {pool.n_rows} rows, {shots} requested")
        chosen = rng.choice(pool.n_rows, size=shots, replace=False)
        return pool.select_rows(np.sort(chosen))
    chosen = []
    for c, label in enumerate(pool.class_labels):
        members = np.flatnonzero(pool.labels == c)
        if members.size < shots:
            raise DataError(f"class {label} has {members.size} rows in the pool, {shots} needed")
        chosen.append(np.sort(rng.choice(members, size=shots, replace=False)))
    return pool.select_rows(np.concatenate(chosen))


def subset_hash(table: DatasetTable) -> str:
    """Short digest of the original row ids of a table"""
    return hashlib.sha256(np.ascontiguousarray(table.row_ids, dtype="<i8").tobytes()).hexdigest()[:16]
