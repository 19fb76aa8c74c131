import numpy as np
import pytest

from tabtoken.data import DatasetTable, FeatureKind, FeatureSpec, TaskKind
from tabtoken.numerics import finite_difference_grad, max_relative_error
from tabtoken.schemas import RunConfig


def num(name):
    return FeatureSpec(name=name, kind=FeatureKind.NUMERICAL)


def cat(name, categories):
    return FeatureSpec(name=name, kind=FeatureKind.CATEGORICAL, categories=list(categories))


def override(config, **sections):
    """Copy of a RunConfig with some section fields replaced, re-validated"""
    doc = config.model_dump(mode="json")
    for name, values in sections.items():
        doc[name].update(values)
    return RunConfig.model_validate(doc)


@pytest.fixture
def make_table():
    """Factory for random tables: n_num numerical columns then n_cat categorical columns"""

    def factory(n_rows=60, n_num=2, n_cat=1, n_classes=2, seed=0, task=None, cardinality=3):
        rng = np.random.default_rng(seed)
        schema = [num(f"n{j}") for j in range(n_num)]
        schema += [cat(f"c{j}", [f"v{i}" for i in range(cardinality)]) for j in range(n_cat)]
        columns = [rng.normal(size=n_rows) for _ in range(n_num)]
        columns += [rng.integers(0, cardinality, size=n_rows).astype(float) for _ in range(n_cat)]
        values = np.column_stack(columns) if columns else np.zeros((n_rows, 0))
        if task is TaskKind.REGRESSION:
            labels = values[:, 0] * 2.0 + rng.normal(scale=0.1, size=n_rows) if n_num else rng.normal(size=n_rows)
            return DatasetTable(schema, values, labels, TaskKind.REGRESSION)
        labels = np.arange(n_rows) % n_classes
        rng.shuffle(labels)
        kind = task or (TaskKind.BINARY if n_classes == 2 else TaskKind.MULTICLASS)
        return DatasetTable(schema, values, labels, kind, [str(c) for c in range(n_classes)])

    return factory


@pytest.fixture
def tiny_config():
    """Small, fast run configuration with dropout switched off"""
    return RunConfig.model_validate({
        "tokenizer": {"k": 4},
        "objective": {"beta": 1.0},
        "model": {
            "kind": "transformer",
            "transformer": {"layer_count": 1, "head_count": 2, "attention_dropout": 0.0,
                            "ffn_dropout": 0.0, "residual_dropout": 0.0},
            "mlp": {"layer_count": 2, "hidden_size": 8, "dropout": 0.0},
            "resnet": {"layer_count": 1, "layer_size": 8, "hidden_factor": 2.0, "hidden_dropout": 0.0},
        },
        "pretrain": {"epochs": 3, "batch_size": 32, "learning_rate": 0.01},
        "finetune": {"epochs": 2, "batch_size": 32, "learning_rate": 0.01},
        "protocol": {"shots": 3, "n_subsets": 2, "n_seeds": 2},
        "seeds": {"master": 11},
    })


@pytest.fixture
def grad_check():
    """Assert analytic gradients of a scalar builder match central differences"""

    def check(build, tensors, tolerance=1e-4):
        for t in tensors:
            t.zero_grad()
        build().backward()
        for t in tensors:
            analytic = t.grad.copy()
            numeric = finite_difference_grad(build, t, h=1e-5)
            error = max_relative_error(analytic, numeric, floor=1e-4)
            assert error < tolerance, f"{t.name or t.shape}: relative error {error}"

    return check
