"""
Few-shot evaluation protocol
Subset x seed fan-out, aggregated metric reports, pipeline comparison,
token-geometry diagnostics and token export
"""

import itertools
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from functools import partial
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field

from .checkpoint import Checkpoint
from .data import DatasetTable, PreprocessStats, add_gaussian_noise, preprocess
from .errors import DataError
from .metrics import metric_accuracy, metric_rmse
from .schemas import ExperimentPlan, PipelineKind, RunConfig, SeedStream, derive_seed
from .splits import OverlapMap, SplitManifest, TransferSplit, apply_manifest, sample_few_shot, subset_hash
from .tokenizer import FeatureTokenizer, ReweightedTokenizer
from .transfer import finetune, predict, pretrain, train_from_scratch

logger = logging.getLogger(__name__)

Pairing = Tuple[str, str, str, str]


class RunRecord(BaseModel):
    """Outcome of one (few-shot subset, training seed) run"""
    subset_id: int
    seed_index: int
    seed: int
    subset_hash: str
    metric: float
    wall_time: float


class MetricsReport(BaseModel):
    plan: ExperimentPlan
    config: Dict[str, Any] = Field(default_factory=dict, description="Merged run configuration echo")
    master_seed: int
    metric_kind: str = Field(..., description="accuracy (higher is better) or rmse (lower is better)")
    records: List[RunRecord]
    mean: float
    std: float
    runtime: float

    def recomputed(self) -> Tuple[float, float]:
        return aggregate([r.metric for r in self.records])

    def save(self, path: Union[str, Path]) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.model_dump_json(indent=2), encoding="utf-8")
        logger.info(f"Report written to {path}")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "MetricsReport":
        path = Path(path)
        try:
            return cls.model_validate_json(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise DataError(f"report not found: {path}")
        except ValueError as e:
            raise DataError(f"invalid report {path}: {e}")


def aggregate(values: Sequence[float]) -> Tuple[float, float]:
    """Mean and population std over values in ascending order"""
    ordered = np.sort(np.asarray(values, dtype=np.float64))
    if ordered.size == 0:
        raise DataError("nothing to aggregate")
    return float(ordered.mean()), float(ordered.std())


def _evaluate(chk: Checkpoint, test: DatasetTable, stats: PreprocessStats) -> float:
    outputs = predict(chk, test)
    if test.task.is_classification:
        return metric_accuracy(outputs, test.labels)
    return metric_rmse(stats.destandardize_targets(outputs), stats.destandardize_targets(test.labels))


def pretrain_for_pipeline(split: TransferSplit, config: RunConfig, pipeline: PipelineKind) -> Optional[Checkpoint]:
    """Pre-trained checkpoint a pipeline starts from; vanilla-pretrain trains with beta = 0"""
    if pipeline is PipelineKind.SCRATCH:
        return None
    train, (validation,), stats = preprocess(split.pretrain, [split.validation])
    objective = config.objective
    if pipeline is PipelineKind.VANILLA_PRETRAIN:
        objective = objective.model_copy(update={"beta": 0.0})
    return pretrain(train, validation, config, seed=derive_seed(config.seeds.master, SeedStream.PRETRAIN),
                    objective=objective, stats=stats)


def _single_run(job: Tuple[int, int], subsets: Dict[int, Tuple[DatasetTable, DatasetTable, PreprocessStats, str]],
                chk: Optional[Checkpoint], overlap: OverlapMap, config: RunConfig,
                pipeline: PipelineKind) -> RunRecord:
    subset_id, seed_index = job
    fewshot, test, stats, digest = subsets[subset_id]
    seed = derive_seed(config.seeds.master, SeedStream.TRAIN, subset_id, seed_index)
    started = time.perf_counter()
    if pipeline is PipelineKind.SCRATCH:
        trained = train_from_scratch(fewshot, config, seed=seed, stats=stats)
    else:
        trained = finetune(chk, fewshot, overlap, config, seed=seed, stats=stats)
    metric = _evaluate(trained, test, stats)
    elapsed = time.perf_counter() - started
    logger.info(f"run subset={subset_id} seed={seed_index} metric={metric:.6f} ({elapsed:.2f}s)")
    return RunRecord(subset_id=subset_id, seed_index=seed_index, seed=seed, subset_hash=digest,
                     metric=metric, wall_time=elapsed)


def run_protocol(split: TransferSplit, plan: ExperimentPlan, config: RunConfig,
                 checkpoint: Optional[Checkpoint] = None, jobs: int = 1) -> MetricsReport:
    """
    Evaluate a pipeline over n_subsets few-shot draws x n_seeds training seeds.

    Pre:
        - split holds a downstream pool with at least plan.shots rows per class.
    Post:
        - one record per (subset, seed), ordered by (subset, seed); mean and std
          are computed from the sorted per-run metrics, so the report does not
          depend on the number of workers.
    """
    started = time.perf_counter()
    config = config.model_copy(update={
        "objective": config.objective.model_copy(
            update={"beta": plan.beta, "variant": plan.variant, "combine_mode": plan.combine_mode}),
        "model": config.model.model_copy(update={"kind": plan.model_kind}),
        "finetune": config.finetune.model_copy(update={"model_kind": plan.downstream_model_kind}),
    })
    chk = checkpoint
    if chk is None:
        chk = pretrain_for_pipeline(split, config, plan.pipeline)

    subsets = {}
    for subset_id in range(plan.n_subsets):
        raw = sample_few_shot(split.downstream_pool, plan.shots,
                              seed=derive_seed(config.seeds.master, SeedStream.DATA, subset_id))
        fewshot, (test,), stats = preprocess(raw, [split.test])
        subsets[subset_id] = (fewshot, test, stats, subset_hash(raw))

    work = list(itertools.product(range(plan.n_subsets), range(plan.n_seeds)))
    run = partial(_single_run, subsets=subsets, chk=chk, overlap=split.overlap_map, config=config,
                  pipeline=plan.pipeline)
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as executor:
            records = list(executor.map(run, work))
    else:
        records = [run(job) for job in work]
    records.sort(key=lambda r: (r.subset_id, r.seed_index))

    mean, std = aggregate([r.metric for r in records])
    metric_kind = "accuracy" if split.test.task.is_classification else "rmse"
    logger.info(f"{plan.pipeline.value}: {metric_kind} {mean:.4f} +- {std:.4f} over {len(records)} runs")
    return MetricsReport(plan=plan, config=config.model_dump(mode="json"), master_seed=config.seeds.master,
                         metric_kind=metric_kind, records=records, mean=mean, std=std,
                         runtime=time.perf_counter() - started)


def make_noise_split(full: DatasetTable, ratio: float = 0.1, seed: Optional[int] = None) -> TransferSplit:
    """
    Same-feature-space shift: the training rows are halved, the first half gets
    Gaussian noise (ratio x column std) and is used for pre-training, the second
    half is the clean few-shot pool.
    """
    rng = np.random.default_rng(seed)
    order = rng.permutation(full.n_rows)
    n_test = int(round(0.2 * full.n_rows))
    n_val = int(round(0.2 * (full.n_rows - n_test)))
    training = order[n_test + n_val:]
    half = training.size // 2
    parts = [order[:n_test], order[n_test:n_test + n_val], training[:half], training[half:]]
    if any(p.size == 0 for p in parts):
        raise DataError(f"{full.n_rows} rows are too few for a noise split")
    test_rows, val_rows, pre_rows, pool_rows = (sorted(int(i) for i in p) for p in parts)
    all_features = list(range(full.n_features))
    manifest = SplitManifest(seed=seed, columns=full.feature_names, pretrain_features=all_features,
                             downstream_features=all_features, test_rows=test_rows, validation_rows=val_rows,
                             pretrain_rows=pre_rows, pool_rows=pool_rows)
    split = apply_manifest(full, manifest)
    noisy = add_gaussian_noise(split.pretrain, ratio, seed=derive_seed(seed or 0, SeedStream.NOISE),
                               skip_categorical=True)
    return TransferSplit(pretrain=noisy, validation=split.validation, downstream_pool=split.downstream_pool,
                         test=split.test, overlap_map=split.overlap_map, manifest=manifest)


def run_noise_protocol(full: DatasetTable, plan: ExperimentPlan, config: RunConfig, jobs: int = 1) -> MetricsReport:
    split = make_noise_split(full, config.protocol.noise_ratio,
                             seed=derive_seed(config.seeds.master, SeedStream.SPLIT))
    return run_protocol(split, plan, config, jobs=jobs)


class ComparisonSummary(BaseModel):
    """Paired difference between two reports over identical (subset, seed) runs"""
    n_pairs: int
    mean_difference: float
    wins: int
    losses: int
    metric_kind: str


def compare_reports(first: MetricsReport, second: MetricsReport) -> ComparisonSummary:
    if first.metric_kind != second.metric_kind:
        raise DataError("reports use different metrics")
    keyed = {(r.subset_hash, r.seed_index): r.metric for r in second.records}
    diffs = [r.metric - keyed[(r.subset_hash, r.seed_index)] for r in first.records
             if (r.subset_hash, r.seed_index) in keyed]
    if not diffs:
        raise DataError("reports share no few-shot subsets")
    sign = 1.0 if first.metric_kind == "accuracy" else -1.0
    wins = sum(1 for d in diffs if sign * d > 0)
    losses = sum(1 for d in diffs if sign * d < 0)
    return ComparisonSummary(n_pairs=len(diffs), mean_difference=aggregate(diffs)[0], wins=wins, losses=losses,
                             metric_kind=first.metric_kind)


# --- token geometry ------------------------------------------------------

class ClassScatter(BaseModel):
    label: str
    count: int
    center: List[float]
    scatter: float = Field(..., description="Mean distance of instance tokens to their class center")


class GeometryReport(BaseModel):
    paired_distance: Optional[float] = None
    baseline_distance: Optional[float] = None
    paired_ratio: Optional[float] = None
    noise_ratio: Optional[float] = None
    degenerate: List[str] = Field(default_factory=list, description="Ratios reported as 1 because of a zero denominator")
    classes: List[ClassScatter] = Field(default_factory=list)


def _guarded_ratio(numerator: float, denominator: float, name: str, flags: List[str]) -> float:
    if denominator == 0.0:
        flags.append(name)
        return 1.0
    return numerator / denominator


def _mean_pairwise(rows: np.ndarray) -> float:
    if rows.shape[0] < 2:
        return 0.0
    i, j = np.triu_indices(rows.shape[0], k=1)
    return float(np.linalg.norm(rows[i] - rows[j], axis=1).mean())


def _plain_tokenizer(chk: Checkpoint) -> FeatureTokenizer:
    tokenizer = chk.restore_tokenizer()
    return tokenizer.materialize() if isinstance(tokenizer, ReweightedTokenizer) else tokenizer


def token_geometry_report(chk: Checkpoint, pairing: Optional[Sequence[Pairing]] = None,
                          noise_features: Optional[Sequence[str]] = None,
                          table: Optional[DatasetTable] = None) -> GeometryReport:
    """
    Distances between declared semantic token pairs against cross-feature pairs,
    the spread of noise-feature tokens relative to informative ones, and per-class
    scatter of averaged instance tokens on `table`.
    """
    tokenizer = _plain_tokenizer(chk)
    rows = tokenizer.pooled_rows()
    names = [f.name for f in tokenizer.schema]
    report = GeometryReport()

    def locate(feature: str, category: str) -> int:
        if feature not in names:
            raise DataError(f"unknown feature {feature} in pairing")
        j = names.index(feature)
        spec = tokenizer.schema[j]
        if spec.is_numerical:
            return tokenizer.layout.row(j)
        if category not in spec.categories:
            raise DataError(f"unknown category {category} of feature {feature} in pairing")
        return tokenizer.layout.row(j, spec.categories.index(category))

    noise = set(noise_features or [])
    unknown = noise - set(names)
    if unknown:
        raise DataError(f"unknown noise features {sorted(unknown)}")
    informative = [j for j, name in enumerate(names) if name not in noise]
    informative_rows = [r for j in informative for r in tokenizer.layout.feature_rows(j)]
    owner = {r: j for j in range(len(names)) for r in tokenizer.layout.feature_rows(j)}

    if pairing:
        pairs = [(locate(fa, ca), locate(fb, cb)) for fa, ca, fb, cb in pairing]
        declared = {frozenset(p) for p in pairs}
        report.paired_distance = float(np.mean([np.linalg.norm(rows[a] - rows[b]) for a, b in pairs]))
        baseline = [np.linalg.norm(rows[a] - rows[b])
                    for a, b in itertools.combinations(informative_rows, 2)
                    if owner[a] != owner[b] and frozenset((a, b)) not in declared]
        report.baseline_distance = float(np.mean(baseline)) if baseline else 0.0
        report.paired_ratio = _guarded_ratio(report.paired_distance, report.baseline_distance,
                                             "paired_ratio", report.degenerate)

    if noise:
        noise_rows = [r for j, name in enumerate(names) if name in noise for r in tokenizer.layout.feature_rows(j)]
        report.noise_ratio = _guarded_ratio(_mean_pairwise(rows[noise_rows]), _mean_pairwise(rows[informative_rows]),
                                            "noise_ratio", report.degenerate)

    if table is not None:
        instance = tokenizer.tokenize_batch(table).data.mean(axis=1)
        labels = table.labels if table.task.is_classification else (table.labels > np.median(table.labels))
        for c in np.unique(labels):
            members = instance[labels == c]
            center = members.mean(axis=0)
            label = table.class_labels[int(c)] if table.task.is_classification else ("high" if c else "low")
            report.classes.append(ClassScatter(label=label, count=int(members.shape[0]), center=center.tolist(),
                                               scatter=float(np.linalg.norm(members - center, axis=1).mean())))
    return report


def export_tokens(chk: Checkpoint, path: Union[str, Path]) -> int:
    """Write every token row as feature_name, category_label, t0..t{k-1}; returns the row count"""
    tokenizer = _plain_tokenizer(chk)
    rows = tokenizer.pooled_rows()
    labels = tokenizer.layout.row_labels()
    frame = pd.DataFrame({
        "feature_name": [name for name, _ in labels],
        "category_label": [category for _, category in labels],
    })
    for t in range(tokenizer.k):
        frame[f"t{t}"] = [f"{v:.17g}" for v in rows[:, t]]
    frame.to_csv(path, index=False)
    logger.info(f"Exported {len(frame)} token rows to {path}")
    return len(frame)


def read_token_export(path: Union[str, Path]) -> Tuple[List[Tuple[str, str]], np.ndarray]:
    frame = pd.read_csv(path, dtype=str, keep_default_na=False, na_filter=False)
    coordinates = [c for c in frame.columns if c.startswith("t") and c[1:].isdigit()]
    labels = list(zip(frame["feature_name"], frame["category_label"]))
    return labels, frame[coordinates].astype(np.float64).to_numpy()
