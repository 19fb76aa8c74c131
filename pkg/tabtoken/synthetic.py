"""
Synthetic four-class categorical dataset
Two informative features, two noisy copies of them, two pure-noise features
"""

import logging
from typing import List, Optional, Tuple

import numpy as np

from .data import DatasetTable, FeatureKind, FeatureSpec, TaskKind
from .errors import InvalidArgument

logger = logging.getLogger(__name__)

COPY_PROBABILITY = 0.8
LABEL_PROBABILITY = 0.8

SYNTHETIC_CATEGORIES = {
    "x1": ["A", "B", "C", "D"],
    "x2": ["E", "F", "G", "H"],
    "x3": ["A'", "B'", "C'", "D'"],
    "x4": ["E'", "F'", "G'", "H'"],
    "x5": ["I", "J", "K", "L"],
    "x6": ["M", "N", "O", "P"],
}
# semantically identical tokens: (feature, category) of a source and its copy
SYNTHETIC_PAIRS: List[Tuple[str, str, str, str]] = [
    ("x1", src, "x3", src + "'") for src in SYNTHETIC_CATEGORIES["x1"]
] + [
    ("x2", src, "x4", src + "'") for src in SYNTHETIC_CATEGORIES["x2"]
]
SYNTHETIC_NOISE_FEATURES = ["x5", "x6"]
SYNTHETIC_INFORMATIVE_FEATURES = ["x1", "x2", "x3", "x4"]


def quadrant_label(x1: np.ndarray, x2: np.ndarray) -> np.ndarray:
    """Class index (0..3 for labels 1..4) implied by the (x1, x2) quadrant"""
    high1 = np.asarray(x1) >= 2  # C or D
    high2 = np.asarray(x2) >= 2  # G or H
    return np.select(
        [high1 & ~high2, ~high1 & high2, ~high1 & ~high2],
        [0, 1, 2],
        default=3,
    ).astype(np.int64)


def _copy_or_resample(source: np.ndarray, rng: np.random.Generator, p: float) -> np.ndarray:
    keep = rng.random(source.shape[0]) < p
    resampled = rng.integers(0, 4, size=source.shape[0])
    return np.where(keep, source, resampled)


def gen_synthetic_fourclass(n: int, seed: Optional[int] = None) -> DatasetTable:
    """
    Draw n rows of the four-class synthetic task.

    x1 and x2 are uniform over four choices. x3 repeats x1 (and x4 repeats x2) with
    probability 0.8 and is uniform otherwise. x5 and x6 are uniform noise. The label
    follows the (x1, x2) quadrant rule with probability 0.8 and is uniform otherwise.
    """
    if n < 1:
        raise InvalidArgument(f"n must be at least 1, got {n}")
    rng = np.random.default_rng(seed)
    x1 = rng.integers(0, 4, size=n)
    x2 = rng.integers(0, 4, size=n)
    x3 = _copy_or_resample(x1, rng, COPY_PROBABILITY)
    x4 = _copy_or_resample(x2, rng, COPY_PROBABILITY)
    x5 = rng.integers(0, 4, size=n)
    x6 = rng.integers(0, 4, size=n)
    labels = _copy_or_resample(quadrant_label(x1, x2), rng, LABEL_PROBABILITY)

    schema = [FeatureSpec(name=name, kind=FeatureKind.CATEGORICAL, categories=cats)
              for name, cats in SYNTHETIC_CATEGORIES.items()]
    values = np.column_stack([x1, x2, x3, x4, x5, x6]).astype(np.float64)
    logger.debug(f"Generated {n} synthetic four-class rows")
    return DatasetTable(schema, values, labels, TaskKind.MULTICLASS, ["1", "2", "3", "4"])
