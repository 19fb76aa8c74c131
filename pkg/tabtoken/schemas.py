"""
Run configuration models
Typed, validated settings for every stage of a tabtoken run
"""

from enum import Enum, IntEnum
from typing import List, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .data import TaskKind
from .objective import CombineMode, CtrVariant
from .splits import OverlapLevel


class ModelKind(str, Enum):
    """Top-layer architectures"""
    MLP = "mlp"
    RESNET = "resnet"
    TRANSFORMER = "transformer"
    LINEAR = "linear"


class TuningMode(str, Enum):
    """Which top-layer parameters fine-tuning updates"""
    FULL = "full"
    LAST_LAYER = "last_layer"
    ATTENTION = "attention"
    LINEAR = "linear"
    FIX_TOP_LAYER = "fix_top_layer"


class PipelineKind(str, Enum):
    TABTOKEN = "tabtoken"
    SCRATCH = "scratch"
    VANILLA_PRETRAIN = "vanilla-pretrain"


class SeedStream(IntEnum):
    """Independent random streams derived from one master seed"""
    SPLIT = 0
    PRETRAIN = 1
    DATA = 2
    TRAIN = 3
    NOISE = 4


def derive_seed(master: int, stream: SeedStream, *index: int) -> int:
    return int(np.random.SeedSequence([int(master), int(stream), *[int(i) for i in index]]).generate_state(1)[0])


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid", protected_namespaces=())


class MlpConfig(StrictModel):
    layer_count: int = Field(3, ge=1, description="Number of Dropout(ReLU(Linear)) blocks")
    hidden_size: int = Field(168, ge=1, description="Width of every hidden block")
    dropout: float = Field(0.2, ge=0.0, lt=1.0)


class ResNetConfig(StrictModel):
    layer_count: int = Field(3, ge=1, description="Number of residual blocks")
    layer_size: int = Field(168, ge=1)
    hidden_factor: float = Field(2.9, gt=0.0)
    hidden_dropout: float = Field(0.5, ge=0.0, lt=1.0)
    residual_dropout: float = Field(0.0, ge=0.0, lt=1.0)


class TransformerConfig(StrictModel):
    layer_count: int = Field(3, ge=1)
    head_count: int = Field(8, ge=1)
    ffn_factor: float = Field(4.0 / 3.0, gt=0.0, description="ReGLU hidden width as a multiple of k")
    attention_dropout: float = Field(0.08, ge=0.0, lt=1.0)
    ffn_dropout: float = Field(0.3, ge=0.0, lt=1.0)
    residual_dropout: float = Field(0.1, ge=0.0, lt=1.0)


class ModelConfig(StrictModel):
    kind: ModelKind = Field(ModelKind.TRANSFORMER, description="Top-layer architecture")
    mlp: MlpConfig = Field(default_factory=MlpConfig)
    resnet: ResNetConfig = Field(default_factory=ResNetConfig)
    transformer: TransformerConfig = Field(default_factory=TransformerConfig)

    def section(self, kind: Optional[ModelKind] = None) -> StrictModel:
        kind = ModelKind(kind or self.kind)
        return getattr(self, kind.value) if kind is not ModelKind.LINEAR else None


class DataConfig(StrictModel):
    path: Optional[str] = Field(None, description="CSV file with a header row")
    label_column: str = "label"
    task: Optional[TaskKind] = Field(None, description="Force a task kind instead of detecting it")
    schema_path: Optional[str] = Field(None, description="JSON schema sidecar")
    dataset: Optional[str] = Field(None, description="Named preset for overlap feature counts")


class TokenizerConfig(StrictModel):
    k: int = Field(64, ge=1, description="Feature token size")


class ObjectiveConfig(StrictModel):
    beta: float = Field(1.0, ge=0.0, description="Weight of the token regularizer")
    variant: CtrVariant = CtrVariant.VANILLA
    combine_mode: CombineMode = CombineMode.AVERAGE


class StageConfig(StrictModel):
    learning_rate: float = Field(..., ge=0.0)
    weight_decay: float = Field(2e-4, ge=0.0)
    epochs: int = Field(..., ge=0)
    batch_size: int = Field(1024, ge=1)


class PretrainConfig(StageConfig):
    learning_rate: float = Field(1e-3, ge=0.0)
    epochs: int = Field(200, ge=0)
    fraction: float = Field(1.0, gt=0.0, le=1.0, description="Share of the pre-training rows actually used")


class FinetuneConfig(StageConfig):
    learning_rate: float = Field(5e-4, ge=0.0)
    epochs: int = Field(10, ge=0)
    tuning_mode: TuningMode = TuningMode.FULL
    warm_start: bool = Field(True, description="Initialise the downstream top layer from the pre-trained one")
    model_kind: Optional[ModelKind] = Field(None, description="Downstream top layer; the pre-trained kind when unset")


class ReweightConfig(StrictModel):
    n_new: int = Field(4, ge=0, description="Learnable rows appended to the token library")


class SplitConfig(StrictModel):
    overlap_level: OverlapLevel = OverlapLevel.MEDIUM
    d: Optional[int] = Field(None, ge=1)
    d_t: Optional[int] = Field(None, ge=1)
    s: Optional[int] = Field(None, ge=0)
    pretrain_features: Optional[List[int]] = None
    downstream_features: Optional[List[int]] = None

    @model_validator(mode="after")
    def check_explicit(self) -> "SplitConfig":
        counts = [self.d, self.d_t, self.s]
        if any(c is not None for c in counts) and any(c is None for c in counts):
            raise ValueError("d, d_t and s must be given together")
        if (self.pretrain_features is None) != (self.downstream_features is None):
            raise ValueError("pretrain_features and downstream_features must be given together")
        return self

    def level_or_counts(self):
        if self.d is not None:
            return (self.d, self.d_t, self.s)
        return self.overlap_level


class ProtocolConfig(StrictModel):
    shots: int = Field(5, ge=1)
    n_subsets: int = Field(30, ge=1)
    n_seeds: int = Field(10, ge=1)
    pipeline: PipelineKind = PipelineKind.TABTOKEN
    jobs: int = Field(1, ge=1)
    noise_ratio: float = Field(0.1, ge=0.0)


class SeedConfig(StrictModel):
    master: int = Field(0, ge=0)


class PathsConfig(StrictModel):
    output_dir: str = "runs"
    checkpoint: Optional[str] = None
    manifest: Optional[str] = None


class RunConfig(StrictModel):
    """Every knob of a run; unknown keys are rejected at every level"""
    data: DataConfig = Field(default_factory=DataConfig)
    tokenizer: TokenizerConfig = Field(default_factory=TokenizerConfig)
    objective: ObjectiveConfig = Field(default_factory=ObjectiveConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    pretrain: PretrainConfig = Field(default_factory=PretrainConfig)
    finetune: FinetuneConfig = Field(default_factory=FinetuneConfig)
    reweight: ReweightConfig = Field(default_factory=ReweightConfig)
    split: SplitConfig = Field(default_factory=SplitConfig)
    protocol: ProtocolConfig = Field(default_factory=ProtocolConfig)
    seeds: SeedConfig = Field(default_factory=SeedConfig)
    paths: PathsConfig = Field(default_factory=PathsConfig)

    @model_validator(mode="after")
    def check_heads(self) -> "RunConfig":
        kinds = {self.model.kind, self.finetune.model_kind}
        if ModelKind.TRANSFORMER in kinds and self.tokenizer.k % self.model.transformer.head_count:
            raise ValueError(f"token size {self.tokenizer.k} is not divisible by "
                             f"head_count {self.model.transformer.head_count}")
        return self


class ExperimentPlan(StrictModel):
    """One protocol run: few-shot subsets x training seeds for one pipeline"""
    shots: int = Field(5, ge=1)
    n_subsets: int = Field(30, ge=1)
    n_seeds: int = Field(10, ge=1)
    overlap_level: Optional[OverlapLevel] = OverlapLevel.MEDIUM
    beta: float = Field(1.0, ge=0.0)
    variant: CtrVariant = CtrVariant.VANILLA
    combine_mode: CombineMode = CombineMode.AVERAGE
    model_kind: ModelKind = ModelKind.TRANSFORMER
    downstream_model_kind: Optional[ModelKind] = None
    pipeline: PipelineKind = PipelineKind.TABTOKEN

    @classmethod
    def from_config(cls, config: RunConfig) -> "ExperimentPlan":
        return cls(
            shots=config.protocol.shots,
            n_subsets=config.protocol.n_subsets,
            n_seeds=config.protocol.n_seeds,
            overlap_level=None if config.split.d is not None else config.split.overlap_level,
            beta=config.objective.beta,
            variant=config.objective.variant,
            combine_mode=config.objective.combine_mode,
            model_kind=config.model.kind,
            downstream_model_kind=config.finetune.model_kind,
            pipeline=config.protocol.pipeline,
        )
