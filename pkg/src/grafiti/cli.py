"""Command-line interface: ``generate``, ``stats``, ``train``, ``evaluate``, ``benchmark``.

Every option can also be given in a flat TOML file passed with ``--config``
(keys are the option names, with ``-`` or ``_``); flags on the command
line win.  Each command writes its fully resolved settings to
``config.toml`` in its output directory.

Exit codes: 0 success, 2 usage error, 1 runtime failure.
"""

from __future__ import annotations

import csv
import functools
import json
import sys
from dataclasses import asdict, fields
from pathlib import Path

import click
import numpy as np
import tomli_w

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import benchmark as B
from . import model as M
from . import training as TR
from .data import DataError, SyntheticSpec, generate, load_dataset, read_csv, save_dataset, sparsify_asts, stats
from .graph import GraphError
from .numerics import DivergenceError
from .plotting import plot_loss_curves, plot_scaling
from .schemas import METRICS_SCHEMA, METRICS_SCHEMA_VERSION, REPORT_SCHEMA, validate

SPEC = SyntheticSpec()
TRAIN = TR.TrainConfig()
MODEL = M.ModelConfig(channel_count=1)
RUNTIME_ERRORS = (DataError, GraphError, M.CheckpointMismatch, DivergenceError, OSError, json.JSONDecodeError)


class IntChoice(click.ParamType):
    """Integer restricted to a fixed set (accepts ints from config files)."""

    name = "integer"

    def __init__(self, choices):
        self.choices = tuple(choices)

    def get_metavar(self, param, ctx=None):
        return "[" + "|".join(map(str, self.choices)) + "]"

    def convert(self, value, param, ctx):
        try:
            v = int(value)
        except (TypeError, ValueError):
            self.fail(f"{value!r} is not an integer", param, ctx)
        if v not in self.choices or (isinstance(value, float) and value != v):
            self.fail(f"{value!r} is not one of {', '.join(map(str, self.choices))}", param, ctx)
        return v


def progress(msg: str) -> None:
    click.echo(msg, err=True)


# ---------------------------------------------------------------------------
# Config file handling
# ---------------------------------------------------------------------------


def _load_config(ctx: click.Context, param, value):
    if value is None:
        return None
    try:
        with open(value, "rb") as fh:
            data = tomllib.load(fh)
    except OSError as exc:
        raise click.BadParameter(f"cannot read {value}: {exc.strerror}", ctx, param) from None
    except tomllib.TOMLDecodeError as exc:
        raise click.BadParameter(f"{value} is not valid TOML: {exc}", ctx, param) from None
    known = {p.name for p in ctx.command.params if p.name != "config"}
    flat = {}
    for key, val in data.items():
        name = key.replace("-", "_")
        if isinstance(val, dict):
            raise click.BadParameter(f"{value}: nested table [{key}] not allowed, the config is flat", ctx, param)
        if name not in known:
            raise click.BadParameter(f"{value}: unknown key {key!r} for '{ctx.command.name}'", ctx, param)
        flat[name] = val
    ctx.default_map = {**(ctx.default_map or {}), **flat}
    return value


config_option = click.option(
    "--config",
    type=click.Path(dir_okay=False),
    callback=_load_config,
    is_eager=True,
    expose_value=False,
    help="Flat TOML file with option values; command-line flags override it.",
)


def _toml_value(v):
    if isinstance(v, Path):
        return str(v)
    if isinstance(v, tuple):
        return [_toml_value(x) for x in v]
    return v


def write_resolved_config(ctx: click.Context, out: Path, extra: dict | None = None) -> Path:
    resolved = {k: _toml_value(v) for k, v in sorted(ctx.params.items()) if v is not None}
    resolved.update(extra or {})
    path = Path(out) / "config.toml"
    path.write_text(f"# resolved settings of 'grafiti {ctx.command.name}'\n" + tomli_w.dumps(resolved))
    return path


def runtime_errors(fn):
    """Turn expected failures into a one-line message and exit status 1."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except RUNTIME_ERRORS as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(1)

    return wrapper


def write_json(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(doc, indent=2) + "\n")


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
def main():
    """Graph-based forecasting of irregularly sampled multivariate time series."""


# ---------------------------------------------------------------------------
# generate / stats
# ---------------------------------------------------------------------------


@main.command("generate")
@config_option
@click.option("--out", type=click.Path(file_okay=False), required=True, help="Dataset directory to write.")
@click.option("--instances", type=click.IntRange(min=1), default=SPEC.instances, show_default=True)
@click.option("--channels", type=click.IntRange(min=1), default=SPEC.channels, show_default=True)
@click.option("--sparsity", type=click.FloatRange(0.0, 1.0, max_open=True), default=SPEC.sparsity, show_default=True,
              help="Fraction of missing (event, channel) cells.")
@click.option("--noise-std", type=click.FloatRange(min=0.0), default=SPEC.noise_std, show_default=True)
@click.option("--observe-until", type=click.FloatRange(min=0.0, min_open=True), default=SPEC.observe_until, show_default=True)
@click.option("--forecast-steps", type=click.IntRange(min=1), default=SPEC.forecast_steps, show_default=True)
@click.option("--min-events", type=click.IntRange(min=1), default=SPEC.min_events, show_default=True)
@click.option("--max-events", type=click.IntRange(min=1), default=SPEC.max_events, show_default=True)
@click.option("--components", type=click.IntRange(min=1), default=SPEC.components, show_default=True,
              help="Latent sinusoids shared by the channels of an instance.")
@click.option("--amplitude-min", type=float, default=SPEC.amplitude_range[0], show_default=True)
@click.option("--amplitude-max", type=float, default=SPEC.amplitude_range[1], show_default=True)
@click.option("--period-min", type=click.FloatRange(min=0.0, min_open=True), default=SPEC.period_range[0], show_default=True)
@click.option("--period-max", type=click.FloatRange(min=0.0, min_open=True), default=SPEC.period_range[1], show_default=True)
@click.option("--asts-retrieve", type=click.FloatRange(0.0, 1.0), default=None,
              help="Make the series asynchronous (one channel per event), then restore this fraction of removed cells.")
@click.option("--seed", type=int, default=SPEC.seed, show_default=True)
@click.pass_context
@runtime_errors
def generate_cmd(ctx, out, asts_retrieve, amplitude_min, amplitude_max, period_min, period_max, **kw):
    """Write a synthetic dataset (data.csv + data.json)."""
    try:
        spec = SyntheticSpec(
            amplitude_range=(amplitude_min, amplitude_max), period_range=(period_min, period_max), **kw
        )
    except ValueError as exc:
        raise click.UsageError(str(exc), ctx) from None
    ds = generate(spec)
    if asts_retrieve is not None:
        ds = sparsify_asts(ds, asts_retrieve, seed=spec.seed)
    out = save_dataset(out, ds)
    write_resolved_config(ctx, out)
    st = stats(ds)
    progress(f"wrote {len(ds)} instances to {out} ({st.sparsity:.2f}% missing)")


@main.command("stats")
@config_option
@click.argument("data", type=click.Path(exists=True))
@click.option("--json", "as_json", is_flag=True, help="Print JSON instead of text.")
@runtime_errors
def stats_cmd(data, as_json):
    """Dataset statistics: samples, channels, lengths, sparsity."""
    path = Path(data)
    csv_path = path / "data.csv" if path.is_dir() else path
    side = csv_path.with_suffix(".json")
    channels = json.loads(side.read_text()).get("channel_count") if side.exists() else None
    _, series, C = read_csv(csv_path, channels)
    st = stats(series, C).to_dict()
    if as_json:
        click.echo(json.dumps(st, indent=2))
    else:
        for k, v in st.items():
            click.echo(f"{k:18s} {v:.2f}" if isinstance(v, float) else f"{k:18s} {v}")


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def _train_config(kw) -> TR.TrainConfig:
    names = {f.name for f in fields(TR.TrainConfig)}
    return TR.TrainConfig(**{k: kw[k] for k in names})


@main.command("train")
@config_option
@click.option("--data", type=click.Path(exists=True), default=None,
              help="Dataset directory or CSV; without it a synthetic dataset is generated.")
@click.option("--out", type=click.Path(file_okay=False), required=True, help="Run directory to write.")
@click.option("--instances", type=click.IntRange(min=1), default=None,
              help="Use only the first N instances (or generate N).")
@click.option("--no-search", is_flag=True, help="Train --layers/--heads/--hidden instead of sampling configurations.")
@click.option("--layers", type=IntChoice(M.LAYER_CHOICES), default=MODEL.layers, show_default=True)
@click.option("--heads", type=IntChoice(M.HEAD_CHOICES), default=MODEL.heads, show_default=True)
@click.option("--hidden", type=IntChoice(M.HIDDEN_CHOICES), default=MODEL.hidden, show_default=True)
@click.option("--ablation", type=click.Choice(["none", "no-target-edges"]), default="none", show_default=True,
              help="no-target-edges: graph without query nodes, answers read from channel and time encodings.")
@click.option("--lr", type=click.FloatRange(min=0.0, min_open=True), default=TRAIN.lr, show_default=True)
@click.option("--lr-halving-patience", type=click.IntRange(min=1), default=TRAIN.lr_halving_patience, show_default=True)
@click.option("--max-epochs", type=click.IntRange(min=1), default=TRAIN.max_epochs, show_default=True)
@click.option("--early-stop-patience", type=click.IntRange(min=1), default=TRAIN.early_stop_patience, show_default=True)
@click.option("--batch-size", type=click.IntRange(min=1), default=TRAIN.batch_size, show_default=True)
@click.option("--folds", type=click.IntRange(min=1), default=TRAIN.folds, show_default=True)
@click.option("--fold", type=click.IntRange(min=0), multiple=True, help="Run only these fold indices.")
@click.option("--validation-fraction", type=click.FloatRange(0, 1, min_open=True, max_open=True), default=TRAIN.validation_fraction, show_default=True)
@click.option("--test-fraction", type=click.FloatRange(0, 1, min_open=True, max_open=True), default=TRAIN.test_fraction, show_default=True)
@click.option("--search-samples", type=click.IntRange(min=1), default=TRAIN.search_samples, show_default=True)
@click.option("--validate-on", type=click.Choice(TR.VALIDATE_ON), default=TRAIN.validate_on, show_default=True,
              help="'train' monitors the training data itself (overfitting checks).")
@click.option("--seed", type=int, default=TRAIN.seed, show_default=True)
@click.option("--resume", is_flag=True, help="Continue from the training state saved in the run directory.")
@click.pass_context
@runtime_errors
def train_cmd(ctx, data, out, instances, no_search, layers, heads, hidden, ablation, fold, resume, **kw):
    """Cross-validated training; writes checkpoints, report.json and loss curves."""
    try:
        cfg = _train_config(kw)
    except ValueError as exc:
        raise click.UsageError(str(exc), ctx) from None
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    if data is None:
        ds = generate(SyntheticSpec(instances=instances or SPEC.instances, seed=cfg.seed))
        data_dir = save_dataset(out / "data", ds)
    else:
        ds = load_dataset(data)
        data_dir = Path(data)
        if instances is not None:
            ds = ds.subset(range(min(instances, len(ds))))
    if bad := [k for k in fold if k >= cfg.folds]:
        raise click.UsageError(f"--fold {bad[0]} out of range for {cfg.folds} folds", ctx)
    try:
        plan = TR.make_splits(len(ds), cfg)
    except ValueError as exc:
        raise click.UsageError(str(exc), ctx) from None

    state_dir = out / "state"
    state_dir.mkdir(exist_ok=True)
    if not resume:
        for f in state_dir.glob("*.state.json"):
            f.unlink()
    write_resolved_config(ctx, out, {"data": str(data_dir)})

    abl = ablation == "no-target-edges"
    model_cfg = None
    if no_search:
        model_cfg = M.ModelConfig(ds.channel_count, layers, heads, hidden, abl)
    fold_ids = sorted(set(fold)) or list(range(cfg.folds))
    progress(f"{len(ds)} instances, {len(fold_ids)} fold(s), {'fixed config' if no_search else 'random search'}")
    report, results = TR.cross_validate(
        ds, cfg, model_cfg, ablation=abl, folds=fold_ids, state_dir=state_dir, progress=progress
    )

    curve = []
    for k, res in zip(fold_ids, results):
        part = plan[k]
        M.save_checkpoint(
            out / f"fold{k}.ckpt.json",
            res.config,
            res.params,
            seed=cfg.seed,
            extra={
                "fold": k,
                "label": res.config.label,
                "data": str(Path(data_dir).resolve()),
                "instances": len(ds),
                "normalizer": res.normalizer.to_dict(),
                "split": {"train": list(part.train), "validation": list(part.validation), "test": list(part.test)},
            },
        )
        curve += [{"fold": k, **asdict(r)} for r in res.history]
    doc = report.to_dict()
    validate(doc, REPORT_SCHEMA)
    write_json(out / "report.json", doc)
    with (out / "loss_curve.csv").open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["fold", "epoch", "train_mse", "val_mse", "lr", "seconds"], lineterminator="\n")
        w.writeheader()
        w.writerows(curve)
    plot_loss_curves(curve, out / "loss_curve.png")
    progress(
        f"{report.label}: test MSE {report.test_mse_mean:.5f} +- {report.test_mse_std:.5f} "
        f"(train MSE {np.mean([f['train_mse'] for f in report.folds]):.3g})"
    )


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------


def _checkpoints(paths) -> list[Path]:
    found = []
    for p in map(Path, paths):
        if p.is_dir():
            found += sorted(p.glob("fold*.ckpt.json"))
        else:
            found.append(p)
    if not found:
        raise DataError(f"no checkpoints found in {', '.join(map(str, paths))}")
    return found


@main.command("evaluate")
@config_option
@click.option("--checkpoint", "checkpoints", type=click.Path(exists=True), multiple=True, required=True,
              help="Checkpoint file or run directory (all fold checkpoints inside); repeatable.")
@click.option("--data", type=click.Path(exists=True), default=None, help="Dataset; defaults to the one recorded in the checkpoint.")
@click.option("--split", type=click.Choice(["train", "validation", "test", "all"]), default="test", show_default=True)
@click.option("--batch-size", type=click.IntRange(min=1), default=TRAIN.batch_size, show_default=True)
@click.option("--out", type=click.Path(file_okay=False), default=None, help="Directory for metrics.json (stdout always gets it).")
@click.pass_context
@runtime_errors
def evaluate_cmd(ctx, checkpoints, data, split, batch_size, out):
    """Mean +- std MSE over fold checkpoints on one split."""
    rows, labels, cache = [], set(), {}
    for path in _checkpoints(checkpoints):
        cfg, params, meta = M.load_checkpoint(path)
        source = data or meta.get("data")
        if source is None:
            raise click.UsageError(f"{path} records no dataset; pass --data", ctx)
        if source not in cache:
            cache[source] = load_dataset(source)
        ds = cache[source]
        if ds.channel_count != cfg.channel_count:
            raise M.CheckpointMismatch(
                f"{path}: model expects {cfg.channel_count} channels, dataset {source} has {ds.channel_count}"
            )
        if split == "all":
            ids = range(len(ds))
        elif "split" in meta:
            ids = meta["split"][split]
        else:
            raise click.UsageError(f"{path} records no split; use --split all", ctx)
        if ids and max(ids) >= len(ds):
            raise DataError(f"{path}: split refers to instance {max(ids)} but the dataset has {len(ds)}")
        norm = TR.Normalizer.from_dict(meta["normalizer"]) if "normalizer" in meta else TR.Normalizer.identity(cfg.channel_count)
        insts = [ds[i] for i in ids]
        train_ids = meta.get("split", {}).get("train") or range(len(ds))
        means = TR.channel_means([ds[i] for i in train_ids], ds.channel_count)
        rows.append({
            "fold": meta.get("fold"),
            "checkpoint": str(path),
            "instances": len(insts),
            "mse": TR.evaluate(params, cfg, norm, insts, batch_size),
            "carry_forward_mse": TR.baseline_mse(TR.carry_forward_predictor, insts, means),
            "channel_mean_mse": TR.baseline_mse(TR.mean_predictor, insts, means),
        })
        labels.add(cfg.label)
    mean, std = TR.fold_summary([r["mse"] for r in rows])
    doc = {
        "schema_version": METRICS_SCHEMA_VERSION,
        "label": " + ".join(sorted(labels)),
        "split": split,
        "folds": rows,
        "mse_mean": mean,
        "mse_std": std,
        "baselines": {
            name: dict(zip(("mean", "std"), TR.fold_summary([r[f"{name}_mse"] for r in rows])))
            for name in ("carry_forward", "channel_mean")
        },
    }
    validate(doc, METRICS_SCHEMA)
    if out:
        Path(out).mkdir(parents=True, exist_ok=True)
        write_json(Path(out) / "metrics.json", doc)
        write_resolved_config(ctx, Path(out))
    click.echo(json.dumps(doc, indent=2))


# ---------------------------------------------------------------------------
# benchmark
# ---------------------------------------------------------------------------


@main.command("benchmark")
@config_option
@click.option("--out", type=click.Path(file_okay=False), required=True)
@click.option("--events", type=click.IntRange(min=1), multiple=True, default=(50, 100, 200, 400, 800), show_default=True,
              help="Events per instance; one sweep point each (repeatable).")
@click.option("--batch-size", type=click.IntRange(min=1), default=64, show_default=True)
@click.option("--channels", type=click.IntRange(min=1), default=SPEC.channels, show_default=True)
@click.option("--sparsity", type=click.FloatRange(0.0, 1.0, max_open=True), default=SPEC.sparsity, show_default=True)
@click.option("--layers", type=IntChoice(M.LAYER_CHOICES), default=MODEL.layers, show_default=True)
@click.option("--heads", type=IntChoice(M.HEAD_CHOICES), default=MODEL.heads, show_default=True)
@click.option("--hidden", type=IntChoice(M.HIDDEN_CHOICES), default=MODEL.hidden, show_default=True)
@click.option("--repeats", type=click.IntRange(min=1), default=5, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.pass_context
@runtime_errors
def benchmark_cmd(ctx, out, events, batch_size, channels, sparsity, layers, heads, hidden, repeats, seed):
    """Wall time of forward and forward+backward against edge count."""
    if len(set(events)) < 2:
        raise click.UsageError("need at least two distinct --events values", ctx)
    try:
        SyntheticSpec(channels=channels, sparsity=sparsity)
    except ValueError as exc:
        raise click.UsageError(str(exc), ctx) from None
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    write_resolved_config(ctx, out)
    cfg = M.ModelConfig(channels, layers, heads, hidden)
    rows = B.run_benchmark(
        sorted(set(events)), cfg, batch_size=batch_size, sparsity=sparsity, repeats=repeats, seed=seed, progress=progress
    )
    with (out / "scaling.csv").open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=B.SCALING_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    plot_scaling(rows, out / "scaling.png")
    edges = [r["edges"] for r in rows]
    ratios = {k: B.doubling_ratio(edges, [r[k] for r in rows]) for k in ("forward_s", "forward_backward_s", "layer_s")}
    write_json(out / "benchmark.json", {"rows": rows, "doubling_ratio": ratios})
    progress("time factor per doubling of |E|: " + ", ".join(f"{k} {v:.2f}" for k, v in ratios.items()))


if __name__ == "__main__":
    main()
