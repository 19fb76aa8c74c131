"""
tabtoken
Feature-token tabular learning with contrastive token regularization and
token-reusing few-shot transfer
"""

from .checkpoint import Checkpoint
from .data import DatasetTable, FeatureKind, FeatureSpec, TaskKind, load_csv, preprocess
from .errors import ContractViolation, DataError, InvalidArgument, NumericError, TabTokenError
from .experiment import MetricsReport, export_tokens, run_protocol, token_geometry_report
from .schemas import ExperimentPlan, RunConfig
from .splits import OverlapMap, TransferSplit, make_transfer_split, sample_few_shot
from .synthetic import gen_synthetic_fourclass
from .tokenizer import FeatureTokenizer, ReweightedTokenizer
from .transfer import finetune, predict, pretrain, reweight_finetune, train_from_scratch

__version__ = "0.1.0"

__all__ = [
    "Checkpoint",
    "ContractViolation",
    "DataError",
    "DatasetTable",
    "ExperimentPlan",
    "FeatureKind",
    "FeatureSpec",
    "FeatureTokenizer",
    "InvalidArgument",
    "MetricsReport",
    "NumericError",
    "OverlapMap",
    "ReweightedTokenizer",
    "RunConfig",
    "TabTokenError",
    "TaskKind",
    "TransferSplit",
    "export_tokens",
    "finetune",
    "gen_synthetic_fourclass",
    "load_csv",
    "make_transfer_split",
    "predict",
    "preprocess",
    "pretrain",
    "reweight_finetune",
    "run_protocol",
    "sample_few_shot",
    "token_geometry_report",
    "train_from_scratch",
]
