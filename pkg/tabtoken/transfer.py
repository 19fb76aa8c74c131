"""
Token-reuse transfer pipeline
Pre-training, frozen-overlap downstream tokenizers, fine-tuning, the re-weighted
token library variant and the from-scratch baseline
"""

import logging
from typing import Dict, List, Optional

import numpy as np

from .checkpoint import Checkpoint
from .data import DatasetTable, FeatureSpec, PreprocessStats, schema_signature
from .errors import DataError, InvalidArgument
from .models import TabularModel, build_model
from .numerics import Tensor
from .schemas import (
    ModelKind,
    ObjectiveConfig,
    RunConfig,
    SeedStream,
    StageConfig,
    TuningMode,
    derive_seed,
)
from .splits import OverlapMap
from .tokenizer import BaseTokenizer, FeatureTokenizer, ReweightedTokenizer, TokenLayout
from .training import Trainer, predict_outputs

logger = logging.getLogger(__name__)


def _stage_record(stage_name: str, stage: StageConfig, objective: ObjectiveConfig, **extra) -> Dict:
    record = {"stage": stage_name, **stage.model_dump(mode="json"), **objective.model_dump(mode="json")}
    record.update(extra)
    return record


def _seeds(seed: int, stream: SeedStream) -> Dict[str, int]:
    return {
        "seed": int(seed),
        "tokenizer": derive_seed(seed, stream, 0),
        "model": derive_seed(seed, stream, 1),
        "train": derive_seed(seed, stream, 2),
    }


def pretrain(train: DatasetTable, validation: Optional[DatasetTable], config: RunConfig, seed: Optional[int] = None,
             objective: Optional[ObjectiveConfig] = None, stats: Optional[PreprocessStats] = None) -> Checkpoint:
    """
    Pre-train tokenizer h0 and top layer g0 on preprocessed tables.

    Each epoch ends with a validation pass; the returned checkpoint holds the
    parameters of the best validation epoch.
    """
    if validation is not None and schema_signature(validation.schema) != schema_signature(train.schema):
        raise DataError("validation schema does not match the training schema")
    objective = objective or config.objective
    seeds = _seeds(config.seeds.master if seed is None else seed, SeedStream.PRETRAIN)
    tokenizer = FeatureTokenizer.init(train.schema, config.tokenizer.k, seeds["tokenizer"])
    model = build_model(config.model.kind, config.model.section(), config.tokenizer.k, train.n_features,
                        train.n_outputs, objective.combine_mode, seeds["model"])
    logger.info(f"Pre-training {config.model.kind.value} on {train.n_rows} rows, d={train.n_features}, "
                f"beta={objective.beta}, variant={objective.variant.value}")
    trainer = Trainer(tokenizer, model, config.pretrain, objective, seeds["train"])
    result = trainer.fit(train, validation, val_stats=stats)
    return Checkpoint.build(tokenizer, model, train,
                            train_config=_stage_record("pretrain", config.pretrain, objective,
                                                       best_epoch=result.best_epoch),
                            rng_seeds=seeds, preprocess=stats, history=result.history)


def _check_overlap(chk: Checkpoint, downstream_schema: List[FeatureSpec], overlap: OverlapMap) -> None:
    upstream = chk.feature_schema
    if overlap.d != len(upstream) or overlap.d_t != len(downstream_schema):
        raise DataError(f"overlap map is for d={overlap.d}, d_t={overlap.d_t}; "
                        f"schemas have {len(upstream)} and {len(downstream_schema)} features")
    for down, pre in overlap.pairs:
        if downstream_schema[down].kind != upstream[pre].kind:
            raise DataError(f"overlap pair {downstream_schema[down].name} <-> {upstream[pre].name} mixes "
                            f"{downstream_schema[down].kind.value} and {upstream[pre].kind.value} features")


def _pretrained_tokenizer(chk: Checkpoint) -> FeatureTokenizer:
    tokenizer = chk.restore_tokenizer()
    return tokenizer.materialize() if isinstance(tokenizer, ReweightedTokenizer) else tokenizer


def build_finetune_tokenizer(chk: Checkpoint, downstream_schema: List[FeatureSpec], overlap: OverlapMap) -> FeatureTokenizer:
    """
    Downstream tokenizer that reuses pre-trained tokens.

    Overlapping features receive the pre-trained rows verbatim and frozen; categorical
    rows are matched by category label. Every other row starts at the mean of all
    pooled pre-trained rows and stays trainable.
    """
    _check_overlap(chk, downstream_schema, overlap)
    upstream = _pretrained_tokenizer(chk)
    pooled = upstream.pooled_rows()
    mean_row = pooled.mean(axis=0)
    tokenizer = FeatureTokenizer(downstream_schema, upstream.k,
                                 np.tile(mean_row, (TokenLayout(downstream_schema).n_rows, 1)))
    for down, pre in overlap.pairs:
        spec = downstream_schema[down]
        if spec.is_numerical:
            tokenizer.set_row(tokenizer.layout.row(down), pooled[upstream.layout.row(pre)], frozen=True)
            continue
        upstream_categories = {label: i for i, label in enumerate(upstream.schema[pre].categories)}
        unknown = []
        for c, label in enumerate(spec.categories):
            if label in upstream_categories:
                source = upstream.layout.row(pre, upstream_categories[label])
                tokenizer.set_row(tokenizer.layout.row(down, c), pooled[source], frozen=True)
            else:
                unknown.append(label)
        if unknown:
            logger.warning(f"Feature {spec.name}: categories {unknown} unseen in pre-training start at the mean token")
    logger.info(f"Fine-tune tokenizer: {overlap.s} of {overlap.d_t} features reused, "
                f"{int(tokenizer.frozen.sum())} of {tokenizer.layout.n_rows} rows frozen")
    return tokenizer


def _network_blocks(model: TabularModel, mode: TuningMode) -> List[Tensor]:
    net = model.network
    if mode is TuningMode.FULL:
        return model.parameters()
    if mode is TuningMode.FIX_TOP_LAYER:
        return []
    head = model.head_parameters()
    if mode is TuningMode.LAST_LAYER:
        if model.kind is ModelKind.TRANSFORMER:
            return net.layers[-1].parameters() + head
        if model.kind is ModelKind.RESNET:
            return net.blocks[-1].parameters() + net.head_norm.parameters() + head
        if model.kind is ModelKind.MLP:
            return net.blocks[-1].parameters() + head
        return head
    if model.kind is not ModelKind.TRANSFORMER:
        raise InvalidArgument(f"tuning mode {mode.value} applies to the transformer only")
    if mode is TuningMode.ATTENTION:
        return [p for layer in net.layers for p in layer.attention.parameters()] + head
    return [p for layer in net.layers
            for p in layer.ffn.linear_first.parameters() + layer.ffn.linear_second.parameters()] + head


def trainable_parameters(tokenizer: BaseTokenizer, model: TabularModel, mode: TuningMode) -> List[Tensor]:
    return tokenizer.parameters() + _network_blocks(model, TuningMode(mode))


def _downstream_model(chk: Optional[Checkpoint], config: RunConfig, table: DatasetTable, seed: int) -> TabularModel:
    kind = ModelKind(config.finetune.model_kind) if config.finetune.model_kind is not None else None
    if chk is None:
        kind = kind or config.model.kind
        return build_model(kind, config.model.section(kind), config.tokenizer.k, table.n_features,
                           table.n_outputs, config.objective.combine_mode, seed)
    doc = chk.model
    if kind is not None and kind is not doc.kind:
        logger.info(f"Downstream {kind.value} top layer starts fresh (pre-trained with {doc.kind.value})")
        return build_model(kind, config.model.section(kind), doc.k, table.n_features, table.n_outputs,
                           doc.combine_mode, seed)
    pretrained = chk.restore_model()
    model = build_model(doc.kind, chk.model_section(), doc.k, table.n_features, table.n_outputs,
                        doc.combine_mode, seed)
    if config.finetune.warm_start:
        skipped = model.load_state_dict(pretrained.state_dict(), strict=False)
        if skipped:
            logger.warning(f"Warm start re-initialised {len(skipped)} tensors with mismatched shapes: {skipped}")
    return model


def finetune(chk: Checkpoint, fewshot: DatasetTable, overlap: OverlapMap, config: RunConfig,
             seed: Optional[int] = None, stats: Optional[PreprocessStats] = None) -> Checkpoint:
    """
    Fine-tune on a few-shot table with frozen overlapping tokens.

    No validation data is used; training runs for the configured epochs (full batch
    when the few-shot set fits in one batch).
    """
    if fewshot.n_features != overlap.d_t or any(down >= fewshot.n_features for down, _ in overlap.pairs):
        raise DataError("overlap map references features absent from the few-shot table")
    seeds = _seeds(config.seeds.master if seed is None else seed, SeedStream.TRAIN)
    tokenizer = build_finetune_tokenizer(chk, fewshot.schema, overlap)
    model = _downstream_model(chk, config, fewshot, seeds["model"])
    trainable = trainable_parameters(tokenizer, model, config.finetune.tuning_mode)
    Trainer(tokenizer, model, config.finetune, config.objective, seeds["train"], trainable).fit(fewshot)
    return Checkpoint.build(tokenizer, model, fewshot,
                            train_config=_stage_record("finetune", config.finetune, config.objective),
                            rng_seeds=seeds, preprocess=stats, overlap=overlap)


def reweight_finetune(chk: Checkpoint, fewshot: DatasetTable, n_new: int, config: RunConfig,
                      seed: Optional[int] = None, stats: Optional[PreprocessStats] = None) -> Checkpoint:
    """Fine-tune a W @ (pre-trained rows ++ new rows) tokenizer; the pre-trained rows stay fixed"""
    if n_new < 0:
        raise InvalidArgument(f"n_new must be non-negative, got {n_new}")
    seeds = _seeds(config.seeds.master if seed is None else seed, SeedStream.TRAIN)
    library = _pretrained_tokenizer(chk).pooled_rows()
    tokenizer = ReweightedTokenizer.init(fewshot.schema, chk.tokenizer.k, library, n_new, seeds["tokenizer"])
    model = _downstream_model(chk, config, fewshot, seeds["model"])
    trainable = trainable_parameters(tokenizer, model, config.finetune.tuning_mode)
    Trainer(tokenizer, model, config.finetune, config.objective, seeds["train"], trainable).fit(fewshot)
    return Checkpoint.build(tokenizer, model, fewshot,
                            train_config=_stage_record("reweight_finetune", config.finetune, config.objective,
                                                       n_new=n_new),
                            rng_seeds=seeds, preprocess=stats)


def train_from_scratch(fewshot: DatasetTable, config: RunConfig, seed: Optional[int] = None,
                       stats: Optional[PreprocessStats] = None) -> Checkpoint:
    """Fresh tokenizer and top layer trained with the fine-tuning settings"""
    seeds = _seeds(config.seeds.master if seed is None else seed, SeedStream.TRAIN)
    tokenizer = FeatureTokenizer.init(fewshot.schema, config.tokenizer.k, seeds["tokenizer"])
    model = _downstream_model(None, config, fewshot, seeds["model"])
    Trainer(tokenizer, model, config.finetune, config.objective, seeds["train"]).fit(fewshot)
    return Checkpoint.build(tokenizer, model, fewshot,
                            train_config=_stage_record("scratch", config.finetune, config.objective),
                            rng_seeds=seeds, preprocess=stats)


def predict(chk: Checkpoint, table: DatasetTable, batch_size: int = 1024) -> np.ndarray:
    if schema_signature(table.schema) != schema_signature(chk.feature_schema):
        raise DataError("table schema does not match the checkpoint schema")
    return predict_outputs(chk.restore_tokenizer(), chk.restore_model(), table.values, batch_size)
