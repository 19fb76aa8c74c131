"""
tabtoken command line
Subcommands for data generation, splitting, pre-training, fine-tuning, the few-shot
protocol and token diagnostics; every command writes its artifact to a file
"""

import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import click
from dotenv import load_dotenv

from .checkpoint import Checkpoint
from .config import ConfigurationError, load_run_config
from .data import DatasetTable, load_csv, load_schema_sidecar, preprocess, write_csv
from .errors import DataError, TabTokenError
from .experiment import (
    export_tokens,
    run_noise_protocol,
    run_protocol,
    token_geometry_report,
)
from .metrics import metric_accuracy, metric_rmse
from .schemas import ExperimentPlan, RunConfig, SeedStream, derive_seed
from .splits import SplitManifest, TransferSplit, apply_manifest, make_transfer_split, sample_few_shot
from .synthetic import SYNTHETIC_NOISE_FEATURES, SYNTHETIC_PAIRS, gen_synthetic_fourclass
from .transfer import finetune, predict, pretrain, reweight_finetune

logger = logging.getLogger(__name__)

LOG_FORMAT = "[%(asctime)s] %(levelname)s {%(name)s.%(funcName)s:%(lineno)d} - %(message)s"


def _config(ctx: click.Context) -> RunConfig:
    """Merged run config, loaded once per invocation from the innermost --config"""
    obj = ctx.ensure_object(dict)
    if "config" not in obj:
        obj["config"] = load_run_config(obj.get("config_path"), environment=obj.get("environment"),
                                        overrides=obj.get("overrides"))
    return obj["config"]


def _use_config_file(ctx: click.Context, param: click.Parameter, value: Optional[str]) -> Optional[str]:
    if value is not None:
        obj = ctx.ensure_object(dict)
        obj["config_path"] = value
        obj.pop("config", None)
    return value


config_option = click.option("--config", type=click.Path(), default=None, expose_value=False,
                             callback=_use_config_file,
                             help="Run config file (JSON or YAML); overrides the group --config")


def _load_table(config: RunConfig, data: Optional[str], hints: Optional[Dict[str, Any]] = None) -> DatasetTable:
    path = data or config.data.path
    if path is None:
        raise ConfigurationError("no data file given (--data or data.path)", keys=["data.path"])
    if hints is None and config.data.schema_path:
        hints = load_schema_sidecar(config.data.schema_path)
    return load_csv(path, label_column=config.data.label_column, schema_hint=hints, task=config.data.task)


def _resolve_split(config: RunConfig, data: Optional[str], manifest: Optional[str]) -> TransferSplit:
    full = _load_table(config, data)
    manifest = manifest or config.paths.manifest
    if manifest is not None:
        return apply_manifest(full, SplitManifest.load(manifest))
    return make_transfer_split(full, config.split.level_or_counts(),
                               seed=derive_seed(config.seeds.master, SeedStream.SPLIT),
                               dataset=config.data.dataset,
                               pretrain_features=config.split.pretrain_features,
                               downstream_features=config.split.downstream_features,
                               pretrain_fraction=config.pretrain.fraction)


def _output(config: RunConfig, out: Optional[str], default_name: str) -> Path:
    path = Path(out) if out else Path(config.paths.output_dir) / default_name
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _checkpoint_path(config: RunConfig, checkpoint: Optional[str]) -> str:
    path = checkpoint or config.paths.checkpoint
    if path is None:
        raise ConfigurationError("no checkpoint given (--checkpoint or paths.checkpoint)", keys=["paths.checkpoint"])
    return path


def _emit(payload: Dict[str, Any]) -> None:
    click.echo(json.dumps(payload, sort_keys=True))


@click.group()
@click.option("--config", "config_path", type=click.Path(), default=None, help="Run config file (JSON or YAML)")
@click.option("--env", "environment", default=None, help="Config environment [default: $TABTOKEN_ENV or published]")
@click.option("--seed", type=int, default=None, help="Override seeds.master")
@click.option("--quiet", is_flag=True, default=False, help="Suppress progress lines")
@click.option(
    "--log-level",
    type=click.Choice(["DEBUG", "INFO", "WARN", "ERROR"], case_sensitive=False),
    default="INFO",
    show_default=True,
    help="Log level to use",
)
@click.pass_context
def cli(ctx: click.Context, config_path: Optional[str], environment: Optional[str], seed: Optional[int],
        quiet: bool, log_level: str) -> None:
    """Feature-token tabular learning with token-reusing few-shot transfer"""
    level = logging.WARNING if quiet else getattr(logging, log_level.upper())
    logging.basicConfig(level=level, format=LOG_FORMAT, stream=sys.stderr, force=True)
    ctx.ensure_object(dict).update(
        config_path=config_path,
        environment=environment,
        overrides={"seeds": {"master": seed}} if seed is not None else None,
    )


@cli.command("gen-synthetic")
@config_option
@click.option("--n", "n_rows", type=int, default=10000, show_default=True, help="Number of rows")
@click.option("--seed", type=int, default=None, help="Generator seed [default: seeds.master]")
@click.option("--out", type=click.Path(), required=True, help="Output CSV")
@click.pass_context
def gen_synthetic(ctx: click.Context, n_rows: int, seed: Optional[int], out: str) -> None:
    """Write the four-class synthetic dataset (x1..x6 + label)"""
    seed = _config(ctx).seeds.master if seed is None else seed
    table = gen_synthetic_fourclass(n_rows, seed=seed)
    write_csv(table, out)
    _emit({"out": out, "rows": table.n_rows, "features": table.n_features})


@cli.command("split")
@config_option
@click.option("--data", type=click.Path(), default=None, help="Full CSV [default: data.path]")
@click.option("--out", type=click.Path(), default=None, help="Manifest JSON [default: <output_dir>/split.json]")
@click.pass_context
def split_command(ctx: click.Context, data: Optional[str], out: Optional[str]) -> None:
    """Draw the transfer split and write its manifest"""
    config = _config(ctx)
    split = _resolve_split(config, data, None)
    path = _output(config, out, "split.json")
    split.manifest.save(path)
    _emit({"out": str(path), "d": split.overlap_map.d, "d_t": split.overlap_map.d_t, "s": split.overlap_map.s})


@cli.command("pretrain")
@config_option
@click.option("--data", type=click.Path(), default=None, help="Full CSV [default: data.path]")
@click.option("--manifest", type=click.Path(), default=None, help="Split manifest [default: paths.manifest]")
@click.option("--out", type=click.Path(), default=None, help="Checkpoint [default: <output_dir>/pretrain.json]")
@click.pass_context
def pretrain_command(ctx: click.Context, data: Optional[str], manifest: Optional[str], out: Optional[str]) -> None:
    """Pre-train tokenizer and top layer on the pre-training part of the split"""
    config = _config(ctx)
    split = _resolve_split(config, data, manifest)
    train, (validation,), stats = preprocess(split.pretrain, [split.validation])
    chk = pretrain(train, validation, config, seed=derive_seed(config.seeds.master, SeedStream.PRETRAIN),
                   stats=stats)
    chk.overlap = split.overlap_map
    path = _output(config, out, "pretrain.json")
    chk.save(path)
    final = chk.history[-1]
    _emit({"out": str(path), "epochs": final.epoch, "final_objective": final.objective})


def _fewshot_run(ctx: click.Context, data: Optional[str], manifest: Optional[str], checkpoint: Optional[str],
                 subset: int, out: Optional[str], default_name: str, reweight: bool) -> None:
    config = _config(ctx)
    split = _resolve_split(config, data, manifest)
    chk = Checkpoint.load(_checkpoint_path(config, checkpoint))
    raw = sample_few_shot(split.downstream_pool, config.protocol.shots,
                          seed=derive_seed(config.seeds.master, SeedStream.DATA, subset))
    fewshot, (test,), stats = preprocess(raw, [split.test])
    seed = derive_seed(config.seeds.master, SeedStream.TRAIN, subset, 0)
    if reweight:
        trained = reweight_finetune(chk, fewshot, config.reweight.n_new, config, seed=seed, stats=stats)
    else:
        trained = finetune(chk, fewshot, split.overlap_map, config, seed=seed, stats=stats)
    path = _output(config, out, default_name)
    trained.save(path)
    outputs = predict(trained, test)
    if test.task.is_classification:
        metric = {"accuracy": metric_accuracy(outputs, test.labels)}
    else:
        metric = {"rmse": metric_rmse(stats.destandardize_targets(outputs), stats.destandardize_targets(test.labels))}
    _emit({"out": str(path), "shots": config.protocol.shots, "subset": subset, **metric})


@cli.command("finetune")
@config_option
@click.option("--data", type=click.Path(), default=None, help="Full CSV [default: data.path]")
@click.option("--manifest", type=click.Path(), default=None, help="Split manifest [default: paths.manifest]")
@click.option("--checkpoint", type=click.Path(), default=None, help="Pre-trained checkpoint [default: paths.checkpoint]")
@click.option("--subset", type=int, default=0, show_default=True, help="Few-shot subset index")
@click.option("--out", type=click.Path(), default=None, help="Checkpoint [default: <output_dir>/finetune.json]")
@click.pass_context
def finetune_command(ctx: click.Context, data, manifest, checkpoint, subset: int, out) -> None:
    """Fine-tune on one few-shot subset with frozen overlapping tokens and report test metric"""
    _fewshot_run(ctx, data, manifest, checkpoint, subset, out, "finetune.json", reweight=False)


@cli.command("reweight-finetune")
@config_option
@click.option("--data", type=click.Path(), default=None, help="Full CSV [default: data.path]")
@click.option("--manifest", type=click.Path(), default=None, help="Split manifest [default: paths.manifest]")
@click.option("--checkpoint", type=click.Path(), default=None, help="Pre-trained checkpoint [default: paths.checkpoint]")
@click.option("--subset", type=int, default=0, show_default=True, help="Few-shot subset index")
@click.option("--out", type=click.Path(), default=None, help="Checkpoint [default: <output_dir>/reweight.json]")
@click.pass_context
def reweight_finetune_command(ctx: click.Context, data, manifest, checkpoint, subset: int, out) -> None:
    """Fine-tune with a re-weighted token library (no feature correspondence needed)"""
    _fewshot_run(ctx, data, manifest, checkpoint, subset, out, "reweight.json", reweight=True)


@cli.command("run-protocol")
@config_option
@click.option("--data", type=click.Path(), default=None, help="Full CSV [default: data.path]")
@click.option("--manifest", type=click.Path(), default=None, help="Split manifest [default: paths.manifest]")
@click.option("--checkpoint", type=click.Path(), default=None, help="Reuse a pre-trained checkpoint")
@click.option("--jobs", type=int, default=None, help="Parallel runs [default: protocol.jobs]")
@click.option("--noise", is_flag=True, default=False, help="Gaussian-noise shift protocol instead of feature overlap")
@click.option("--out", type=click.Path(), default=None, help="Report [default: <output_dir>/report.json]")
@click.pass_context
def run_protocol_command(ctx: click.Context, data, manifest, checkpoint, jobs: Optional[int], noise: bool, out) -> None:
    """Few-shot subsets x training seeds for the configured pipeline"""
    config = _config(ctx)
    jobs = jobs or config.protocol.jobs
    plan = ExperimentPlan.from_config(config)
    if noise:
        report = run_noise_protocol(_load_table(config, data), plan, config, jobs=jobs)
    else:
        split = _resolve_split(config, data, manifest)
        chk = Checkpoint.load(checkpoint) if checkpoint else None
        report = run_protocol(split, plan, config, checkpoint=chk, jobs=jobs)
    path = _output(config, out, "report.json")
    report.save(path)
    _emit({"out": str(path), "runs": len(report.records), "metric": report.metric_kind,
           "mean": report.mean, "std": report.std})


@cli.command("export-tokens")
@config_option
@click.option("--checkpoint", type=click.Path(), default=None, help="Checkpoint [default: paths.checkpoint]")
@click.option("--out", type=click.Path(), default=None, help="CSV [default: <output_dir>/tokens.csv]")
@click.pass_context
def export_tokens_command(ctx: click.Context, checkpoint: Optional[str], out: Optional[str]) -> None:
    """Write every token row as CSV (feature_name, category_label, t0..)"""
    config = _config(ctx)
    path = _output(config, out, "tokens.csv")
    rows = export_tokens(Checkpoint.load(_checkpoint_path(config, checkpoint)), path)
    _emit({"out": str(path), "rows": rows})


def _parse_pairs(pairs: Sequence[str]) -> List[tuple]:
    parsed = []
    for entry in pairs:
        parts = entry.split(":")
        if len(parts) != 4:
            raise click.BadParameter(f"expected featureA:catA:featureB:catB, got {entry}", param_hint="--pair")
        parsed.append(tuple(parts))
    return parsed


@cli.command("token-report")
@config_option
@click.option("--checkpoint", type=click.Path(), default=None, help="Checkpoint [default: paths.checkpoint]")
@click.option("--pair", "pairs", multiple=True, help="Semantic pair featureA:catA:featureB:catB (repeatable)")
@click.option("--noise-feature", "noise_features", multiple=True, help="Feature declared as noise (repeatable)")
@click.option("--synthetic", is_flag=True, default=False, help="Use the synthetic dataset's pairs and noise features")
@click.option("--data", type=click.Path(), default=None, help="CSV for per-class instance-token scatter")
@click.option("--out", type=click.Path(), default=None, help="JSON report [default: standard output]")
@click.pass_context
def token_report_command(ctx: click.Context, checkpoint, pairs, noise_features, synthetic: bool, data, out) -> None:
    """Token geometry diagnostics: paired distances, noise clustering, class scatter"""
    config = _config(ctx)
    chk = Checkpoint.load(_checkpoint_path(config, checkpoint))
    pairing = _parse_pairs(pairs)
    noise = list(noise_features)
    if synthetic:
        pairing = pairing + list(SYNTHETIC_PAIRS)
        noise = noise + SYNTHETIC_NOISE_FEATURES
    table = None
    if data is not None:
        table = _load_table(config, data, hints={f.name: f for f in chk.feature_schema})
        missing = [f.name for f in chk.feature_schema if f.name not in table.feature_names]
        if missing:
            raise DataError(f"{data} lacks checkpoint features {missing}")
        table = table.select_features([table.feature_names.index(f.name) for f in chk.feature_schema])
        if chk.preprocess is not None:
            table = chk.preprocess.apply(table)
    report = token_geometry_report(chk, pairing or None, noise or None, table)
    payload = report.model_dump_json(indent=2)
    if out:
        Path(out).write_text(payload, encoding="utf-8")
        _emit({"out": out})
    else:
        click.echo(payload)


@cli.command("show-config")
@config_option
@click.pass_context
def show_config(ctx: click.Context) -> None:
    """Print the merged, validated configuration"""
    click.echo(_config(ctx).model_dump_json(indent=2))


def _fail(kind: str, exit_code: int, message: str) -> int:
    click.echo(json.dumps({"error": kind, "exit_code": exit_code, "message": message}), err=True)
    return exit_code


def main(argv: Optional[Sequence[str]] = None) -> int:
    load_dotenv()
    try:
        cli.main(args=list(argv) if argv is not None else None, prog_name="tabtoken", standalone_mode=False)
    except click.exceptions.Exit as e:
        return e.exit_code
    except click.exceptions.Abort:
        return _fail("aborted", 4, "aborted")
    except click.ClickException as e:
        return _fail("usage", 2, e.format_message())
    except TabTokenError as e:
        logger.debug("command failed", exc_info=True)
        return _fail(e.kind, e.exit_code, str(e))
    except OSError as e:
        return _fail("data", 3, str(e))
    except Exception as e:
        logger.error(f"Unexpected failure: {e}", exc_info=True)
        return _fail("runtime", 4, str(e))
    return 0
