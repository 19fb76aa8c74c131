import numpy as np
import pytest

from tabtoken.checkpoint import Checkpoint
from tabtoken.data import DatasetTable, TaskKind, preprocess
from tabtoken.errors import DataError, InvalidArgument
from tabtoken.experiment import (
    MetricsReport,
    aggregate,
    compare_reports,
    export_tokens,
    make_noise_split,
    read_token_export,
    run_protocol,
    token_geometry_report,
)
from tabtoken.metrics import metric_accuracy, metric_rmse
from tabtoken.models import build_model
from tabtoken.schemas import ExperimentPlan, PipelineKind
from tabtoken.splits import make_transfer_split
from tabtoken.synthetic import SYNTHETIC_NOISE_FEATURES, SYNTHETIC_PAIRS, gen_synthetic_fourclass
from tabtoken.tokenizer import FeatureTokenizer, TokenLayout
from tabtoken.transfer import pretrain

from conftest import num, override


def _checkpoint(schema, rows, k):
    tokenizer = FeatureTokenizer(schema, k, np.asarray(rows, dtype=float))
    model = build_model("linear", None, k, len(schema), 2, seed=0)
    table = DatasetTable(schema, np.zeros((2, len(schema))), [0, 1], TaskKind.BINARY, ["0", "1"])
    return Checkpoint.build(tokenizer, model, table)


def _pretrain_tables(split):
    train, (validation,), _ = preprocess(split.pretrain, [split.validation])
    return train, validation


@pytest.fixture(scope="module")
def synthetic_split():
    full = gen_synthetic_fourclass(600, seed=2)
    return make_transfer_split(full, seed=0, pretrain_features=[0, 1, 4, 5], downstream_features=[0, 1, 2, 3])


# --- metrics -----------------------------------------------------------------

def test_metric_examples():
    assert metric_accuracy([1, 1, 0, 0], [1, 0, 0, 1]) == 0.5
    assert metric_accuracy(np.array([[0.1, 0.9], [2.0, -1.0]]), [1, 0]) == 1.0
    assert metric_rmse([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert metric_rmse([0.0, 0.0], [3.0, 4.0]) == pytest.approx(3.535534, abs=1e-6)


def test_metrics_reject_empty_or_mismatched_input():
    with pytest.raises(InvalidArgument):
        metric_accuracy([], [])
    with pytest.raises(InvalidArgument):
        metric_rmse([1.0], [1.0, 2.0])


def test_aggregate_is_order_independent():
    values = [0.3, 0.1, 0.7, 0.5]
    assert aggregate(values) == aggregate(values[::-1])
    mean, std = aggregate(values)
    assert mean == pytest.approx(0.4)
    assert std == pytest.approx(np.std(values))
    with pytest.raises(DataError):
        aggregate([])


# --- protocol ----------------------------------------------------------------

def test_protocol_emits_one_record_per_subset_and_seed(synthetic_split, tiny_config, tmp_path):
    plan = ExperimentPlan.from_config(tiny_config)
    report = run_protocol(synthetic_split, plan, tiny_config)
    assert [(r.subset_id, r.seed_index) for r in report.records] == [(0, 0), (0, 1), (1, 0), (1, 1)]
    assert report.metric_kind == "accuracy"
    mean, std = report.recomputed()
    assert abs(mean - report.mean) <= 1e-12
    assert abs(std - report.std) <= 1e-12
    assert report.master_seed == 11
    assert report.config["seeds"]["master"] == 11

    report.save(tmp_path / "report.json")
    loaded = MetricsReport.load(tmp_path / "report.json")
    assert [r.metric for r in loaded.records] == [r.metric for r in report.records]


def test_protocol_is_reproducible(synthetic_split, tiny_config):
    config = override(tiny_config, finetune={"epochs": 0}, protocol={"n_subsets": 1, "n_seeds": 1})
    plan = ExperimentPlan.from_config(config)
    first = run_protocol(synthetic_split, plan, config)
    second = run_protocol(synthetic_split, plan, config)
    assert [r.metric for r in first.records] == [r.metric for r in second.records]
    assert first.records[0].subset_hash == second.records[0].subset_hash


def test_protocol_does_not_depend_on_worker_count(synthetic_split, tiny_config):
    plan = ExperimentPlan.from_config(tiny_config)
    chk = pretrain(*_pretrain_tables(synthetic_split), tiny_config, seed=0)
    serial = run_protocol(synthetic_split, plan, tiny_config, checkpoint=chk, jobs=1)
    parallel = run_protocol(synthetic_split, plan, tiny_config, checkpoint=chk, jobs=3)
    assert [r.metric for r in serial.records] == [r.metric for r in parallel.records]
    assert (serial.mean, serial.std) == (parallel.mean, parallel.std)


def test_pipelines_share_few_shot_subsets(synthetic_split, tiny_config):
    tabtoken = run_protocol(synthetic_split, ExperimentPlan.from_config(tiny_config), tiny_config)
    scratch_config = override(tiny_config, protocol={"pipeline": "scratch"})
    scratch = run_protocol(synthetic_split, ExperimentPlan.from_config(scratch_config), scratch_config)
    assert [r.subset_hash for r in tabtoken.records] == [r.subset_hash for r in scratch.records]
    summary = compare_reports(tabtoken, scratch)
    assert summary.n_pairs == 4
    assert summary.wins + summary.losses <= 4


def test_vanilla_pretrain_pipeline_runs(synthetic_split, tiny_config):
    config = override(tiny_config, protocol={"pipeline": "vanilla-pretrain", "n_subsets": 1, "n_seeds": 1})
    report = run_protocol(synthetic_split, ExperimentPlan.from_config(config), config)
    assert report.plan.pipeline is PipelineKind.VANILLA_PRETRAIN
    assert len(report.records) == 1


def test_compare_reports_rejects_mixed_metrics(synthetic_split, tiny_config):
    config = override(tiny_config, finetune={"epochs": 0}, protocol={"n_subsets": 1, "n_seeds": 1})
    report = run_protocol(synthetic_split, ExperimentPlan.from_config(config), config)
    other = report.model_copy(update={"metric_kind": "rmse"})
    with pytest.raises(DataError):
        compare_reports(report, other)


@pytest.mark.slow
def test_full_protocol_grid_has_300_records(synthetic_split, tiny_config):
    config = override(tiny_config, finetune={"epochs": 1}, protocol={"n_subsets": 30, "n_seeds": 10})
    report = run_protocol(synthetic_split, ExperimentPlan.from_config(config), config, jobs=4)
    assert len(report.records) == 300
    mean, std = report.recomputed()
    assert abs(mean - report.mean) <= 1e-12 and abs(std - report.std) <= 1e-12


# --- noise shift -------------------------------------------------------------

def test_noise_split_perturbs_only_the_pretraining_half(make_table):
    full = make_table(n_rows=200, n_num=2, n_cat=1, seed=6)
    split = make_noise_split(full, ratio=0.1, seed=3)
    m = split.manifest
    rows = m.test_rows + m.validation_rows + m.pretrain_rows + m.pool_rows
    assert sorted(rows) == list(range(200))
    assert abs(len(m.pretrain_rows) - len(m.pool_rows)) <= 1
    clean = full.select_rows(m.pretrain_rows)
    assert not np.array_equal(split.pretrain.values[:, :2], clean.values[:, :2])
    np.testing.assert_array_equal(split.pretrain.values[:, 2], clean.values[:, 2])
    np.testing.assert_array_equal(split.downstream_pool.values, full.select_rows(m.pool_rows).values)
    assert split.overlap_map.s == 3


# --- geometry ----------------------------------------------------------------

def test_equal_paired_tokens_have_zero_paired_distance():
    schema = [num("a"), num("b"), num("c")]
    chk = _checkpoint(schema, [[1.0, 1.0], [1.0, 1.0], [4.0, 5.0]], k=2)
    report = token_geometry_report(chk, pairing=[("a", "", "b", "")])
    assert report.paired_distance == 0.0
    assert report.baseline_distance == pytest.approx(5.0)
    assert report.paired_ratio == 0.0
    assert report.degenerate == []


def test_identical_tokens_hit_the_zero_denominator_guard():
    schema = [num("a"), num("b"), num("c"), num("d")]
    chk = _checkpoint(schema, np.ones((4, 2)), k=2)
    report = token_geometry_report(chk, pairing=[("a", "", "b", "")], noise_features=["d"])
    assert report.paired_distance == 0.0
    assert report.paired_ratio == 1.0
    assert report.noise_ratio == 1.0
    assert sorted(report.degenerate) == ["noise_ratio", "paired_ratio"]


def test_geometry_rejects_unknown_names():
    table = gen_synthetic_fourclass(10, seed=0)
    layout = TokenLayout(table.schema)
    chk = _checkpoint(table.schema, np.zeros((layout.n_rows, 2)), k=2)
    with pytest.raises(DataError):
        token_geometry_report(chk, pairing=[("x1", "Z", "x3", "A'")])
    with pytest.raises(DataError):
        token_geometry_report(chk, pairing=[("x9", "A", "x3", "A'")])
    with pytest.raises(DataError):
        token_geometry_report(chk, noise_features=["x9"])


def test_class_scatter_on_a_table():
    table = gen_synthetic_fourclass(200, seed=1)
    chk = _checkpoint(table.schema, np.random.default_rng(0).normal(size=(24, 2)), k=2)
    report = token_geometry_report(chk, table=table)
    assert [c.label for c in report.classes] == ["1", "2", "3", "4"]
    assert sum(c.count for c in report.classes) == 200
    assert all(c.scatter >= 0.0 for c in report.classes)


# --- export ------------------------------------------------------------------

def test_synthetic_export_has_24_rows(tmp_path):
    table = gen_synthetic_fourclass(10, seed=0)
    rows = np.random.default_rng(1).normal(size=(24, 2))
    chk = _checkpoint(table.schema, rows, k=2)
    path = tmp_path / "tokens.csv"
    assert export_tokens(chk, path) == 24
    labels, values = read_token_export(path)
    assert values.shape == (24, 2)
    assert labels[0] == ("x1", "A")
    assert labels[8] == ("x3", "A'")
    assert values.tobytes() == rows.tobytes()
    assert path.read_text().splitlines()[0] == "feature_name,category_label,t0,t1"


def test_numerical_export_leaves_category_empty(tmp_path):
    rows = np.random.default_rng(2).normal(size=(3, 4)) / 7.0
    chk = _checkpoint([num("a"), num("b"), num("c")], rows, k=4)
    path = tmp_path / "tokens.csv"
    assert export_tokens(chk, path) == 3
    labels, values = read_token_export(path)
    assert labels == [("a", ""), ("b", ""), ("c", "")]
    assert values.tobytes() == rows.tobytes()


# --- synthetic acceptance ----------------------------------------------------

@pytest.mark.slow
def test_ctr_tokens_cluster_semantic_pairs_and_noise(tiny_config):
    config = override(tiny_config, tokenizer={"k": 2}, model={"kind": "linear"},
                      objective={"beta": 1.0},
                      pretrain={"epochs": 40, "batch_size": 128, "learning_rate": 0.01})
    paired, baseline, noise_below_one = [], [], 0
    for seed in range(5):
        table = gen_synthetic_fourclass(2000, seed=100 + seed)
        chk = pretrain(table, None, config, seed=seed)
        report = token_geometry_report(chk, pairing=SYNTHETIC_PAIRS, noise_features=SYNTHETIC_NOISE_FEATURES)
        paired.append(report.paired_distance)
        baseline.append(report.baseline_distance)
        noise_below_one += report.noise_ratio < 1.0
    assert np.mean(paired) < np.mean(baseline)
    assert noise_below_one >= 4


@pytest.mark.slow
def test_reused_tokens_beat_scratch_training_on_synthetic_transfer(tiny_config):
    config = override(
        tiny_config,
        tokenizer={"k": 8},
        model={"transformer": {"layer_count": 1, "head_count": 2, "attention_dropout": 0.0,
                               "ffn_dropout": 0.0, "residual_dropout": 0.0}},
        pretrain={"epochs": 100, "batch_size": 256, "learning_rate": 0.001},
        finetune={"epochs": 10},
        protocol={"shots": 5, "n_subsets": 20, "n_seeds": 5},
    )
    full = gen_synthetic_fourclass(3000, seed=7)
    split = make_transfer_split(full, seed=1, pretrain_features=[0, 1, 4, 5], downstream_features=[0, 1, 2, 3])
    assert split.overlap_map.s == 2
    tabtoken = run_protocol(split, ExperimentPlan.from_config(config), config, jobs=4)
    scratch_config = override(config, protocol={"pipeline": "scratch"})
    scratch = run_protocol(split, ExperimentPlan.from_config(scratch_config), scratch_config, jobs=4)
    assert [r.subset_hash for r in tabtoken.records] == [r.subset_hash for r in scratch.records]
    assert tabtoken.mean >= scratch.mean
    assert tabtoken.mean > 0.30 and scratch.mean > 0.30
