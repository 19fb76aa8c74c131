"""
Checkpoint serialization
Versioned JSON documents holding tokenizer, top-layer parameters and run metadata;
fp64 payloads are stored as hex floats so round trips are bit-exact
"""

import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import numpy as np
from pydantic import BaseModel, Field

from .data import DatasetTable, FeatureSpec, PreprocessStats, TaskKind
from .errors import DataError
from .models import TabularModel, build_model
from .objective import CombineMode
from .schemas import MlpConfig, ModelKind, ResNetConfig, TransformerConfig
from .splits import OverlapMap
from .tokenizer import BaseTokenizer, FeatureTokenizer, ReweightedTokenizer

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1

_SECTION_TYPES = {
    ModelKind.MLP: MlpConfig,
    ModelKind.RESNET: ResNetConfig,
    ModelKind.TRANSFORMER: TransformerConfig,
}


class HexArray(BaseModel):
    """fp64 array as shape plus float.hex() of each element in row-major order"""
    shape: List[int]
    hex: List[str]

    @classmethod
    def encode(cls, array: np.ndarray) -> "HexArray":
        array = np.asarray(array, dtype=np.float64)
        return cls(shape=list(array.shape), hex=[float(v).hex() for v in array.reshape(-1)])

    def decode(self) -> np.ndarray:
        values = np.array([float.fromhex(h) for h in self.hex], dtype=np.float64)
        return values.reshape(self.shape)


class TokenizerDoc(BaseModel):
    kind: str = Field("plain", description="plain or reweighted")
    k: int
    fingerprint: str
    tokens: HexArray = Field(..., description="Pooled token rows in schema order")
    frozen: List[bool]
    library: Optional[HexArray] = None
    weights: Optional[HexArray] = None
    new_tokens: Optional[HexArray] = None


class ModelDoc(BaseModel):
    kind: ModelKind
    combine_mode: CombineMode
    config: Optional[Dict[str, Any]] = None
    k: int
    d: int
    n_outputs: int
    params: Dict[str, HexArray]


class EpochRecord(BaseModel):
    epoch: int
    objective: float
    val_metric: Optional[float] = None


class Checkpoint(BaseModel):
    """Everything needed to rebuild a trained tokenizer and top-layer model"""
    version: int = CHECKPOINT_VERSION
    schema_: List[FeatureSpec] = Field(..., alias="schema")
    task: TaskKind
    class_labels: List[str] = Field(default_factory=list)
    label_name: str = "label"
    tokenizer: TokenizerDoc
    model: ModelDoc
    train_config: Dict[str, Any] = Field(default_factory=dict)
    rng_seeds: Dict[str, int] = Field(default_factory=dict)
    preprocess: Optional[PreprocessStats] = None
    history: List[EpochRecord] = Field(default_factory=list)
    overlap: Optional[OverlapMap] = None

    model_config = {"populate_by_name": True}

    @property
    def feature_schema(self) -> List[FeatureSpec]:
        return self.schema_

    @classmethod
    def build(cls, tokenizer: BaseTokenizer, model: TabularModel, table: DatasetTable,
              train_config: Optional[Dict[str, Any]] = None, rng_seeds: Optional[Dict[str, int]] = None,
              preprocess: Optional[PreprocessStats] = None, history: Optional[List[EpochRecord]] = None,
              overlap: Optional[OverlapMap] = None) -> "Checkpoint":
        return cls(
            schema=tokenizer.schema,
            task=table.task,
            class_labels=table.class_labels,
            label_name=table.label_name,
            tokenizer=encode_tokenizer(tokenizer),
            model=encode_model(model),
            train_config=train_config or {},
            rng_seeds=rng_seeds or {},
            preprocess=preprocess,
            history=history or [],
            overlap=overlap,
        )

    def restore_tokenizer(self) -> BaseTokenizer:
        doc = self.tokenizer
        if doc.kind == "reweighted":
            return ReweightedTokenizer(self.schema_, doc.k, doc.library.decode(), doc.weights.decode(),
                                       doc.new_tokens.decode())
        return FeatureTokenizer(self.schema_, doc.k, doc.tokens.decode(), np.array(doc.frozen, dtype=bool))

    def model_section(self):
        """Architecture config of the stored top layer (None for the linear head)"""
        doc = self.model
        return _SECTION_TYPES[doc.kind](**doc.config) if doc.kind in _SECTION_TYPES else None

    def restore_model(self) -> TabularModel:
        doc = self.model
        model = build_model(doc.kind, self.model_section(), doc.k, doc.d, doc.n_outputs, doc.combine_mode)
        model.load_state_dict({name: arr.decode() for name, arr in doc.params.items()})
        return model.eval()

    def save(self, path: Union[str, Path]) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.model_dump_json(by_alias=True, indent=1), encoding="utf-8")
        logger.info(f"Checkpoint written to {path}")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Checkpoint":
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except FileNotFoundError:
            raise DataError(f"checkpoint not found: {path}")
        try:
            chk = cls.model_validate_json(text)
        except ValueError as e:
            raise DataError(f"invalid checkpoint {path}: {e}")
        if chk.version != CHECKPOINT_VERSION:
            raise DataError(f"checkpoint {path} has version {chk.version}, expected {CHECKPOINT_VERSION}")
        return chk


def encode_tokenizer(tokenizer: BaseTokenizer) -> TokenizerDoc:
    if isinstance(tokenizer, ReweightedTokenizer):
        rows = tokenizer.pooled_rows()
        return TokenizerDoc(kind="reweighted", k=tokenizer.k, fingerprint=tokenizer.fingerprint,
                            tokens=HexArray.encode(rows), frozen=[False] * rows.shape[0],
                            library=HexArray.encode(tokenizer.library),
                            weights=HexArray.encode(tokenizer.weights.data),
                            new_tokens=HexArray.encode(tokenizer.new_tokens.data))
    return TokenizerDoc(kind="plain", k=tokenizer.k, fingerprint=tokenizer.fingerprint,
                        tokens=HexArray.encode(tokenizer.tokens.data),
                        frozen=[bool(f) for f in tokenizer.frozen])


def encode_model(model: TabularModel) -> ModelDoc:
    return ModelDoc(kind=model.kind, combine_mode=model.combine_mode, config=model.config or None,
                    k=model.k, d=model.d, n_outputs=model.n_outputs,
                    params={name: HexArray.encode(value) for name, value in model.state_dict().items()})
