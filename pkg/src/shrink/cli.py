"""``shrink`` command line.

Every subcommand reads and writes plain files, so a run can be rebuilt one
step at a time. Exit status: 0 on success, 1 for invalid input, 2 when a
stage fails on valid input.
"""

from __future__ import annotations

import sys
from pathlib import Path

import click

from . import checkpoint
from .calibration import build_calibration_set
from .data import make_synthetic_corpus, read_corpus
from .errors import (
    AdapterError,
    CalibrationError,
    CheckpointError,
    ConfigError,
    PlanError,
    ProtectedBlockError,
    DegenerateModelError,
    QuantizationError,
    ShrinkError,
    TokenError,
)
from .evaluate import build_report_table, evaluate, export_reports, load_reports
from .finetune import AdapterConfig, PretrainConfig, finetune as run_finetune, pretrain as run_pretrain, write_log
from .model import LINEAR_NAMES, ModelConfig, init_model
from .pruning import Criterion, ImportanceReport, Strategy, execute_plan, make_plan, rank_blocks
from .quantize import QuantConfig, calibrate_and_quantize, export_results

EXIT_OK, EXIT_INVALID, EXIT_STAGE = 0, 1, 2

_INVALID = (
    ConfigError,
    CheckpointError,
    PlanError,
    ProtectedBlockError,
    DegenerateModelError,
    CalibrationError,
    TokenError,
    AdapterError,
    QuantizationError,
)

_existing = click.Path(exists=True, dir_okay=False, path_type=Path)
_output = click.Path(dir_okay=False, path_type=Path)


def _calibration(path: Path, n: int, max_len: int, seed: int):
    return build_calibration_set(read_corpus(path), n, max_len, seed, source=str(path))


@click.group()
@click.version_option(package_name="artifact")
def cli():
    """Compress a small transformer: score, prune, fine-tune, quantize, evaluate."""


@cli.command("make-corpus")
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False, path_type=Path))
@click.option("--seed", default=0, show_default=True)
@click.option("--n-train", default=4000, show_default=True, type=click.IntRange(1))
@click.option("--n-heldout", default=200, show_default=True, type=click.IntRange(1))
@click.option("--n-calibration", default=200, show_default=True, type=click.IntRange(1))
@click.option("--n-prompts", default=32, show_default=True, type=click.IntRange(1))
def make_corpus(out_dir, seed, n_train, n_heldout, n_calibration, n_prompts):
    """Write the synthetic question/answer corpus (train, heldout, calibration, prompts)."""
    corpus = make_synthetic_corpus(seed, n_train, n_heldout, n_calibration, n_prompts)
    for name, path in corpus.write(out_dir).items():
        click.echo(f"{name}: {path}")


@cli.command()
@click.option("--corpus", "corpus_path", required=True, type=_existing)
@click.option("--out", required=True, type=_output)
@click.option("--steps", default=400, show_default=True, type=click.IntRange(0))
@click.option("--batch-size", default=32, show_default=True, type=click.IntRange(1))
@click.option("--lr", default=3e-3, show_default=True)
@click.option("--layer-drop", default=0.2, show_default=True, type=click.FloatRange(0, 1, max_open=True))
@click.option("--d-model", default=64, show_default=True)
@click.option("--n-layers", default=8, show_default=True)
@click.option("--n-heads", default=4, show_default=True)
@click.option("--d-ff", default=256, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--log", "log_path", type=_output)
def pretrain(corpus_path, out, steps, batch_size, lr, layer_drop, d_model, n_layers, n_heads, d_ff, seed, log_path):
    """Train a fresh model on a corpus with full-parameter next-token loss."""
    try:
        config = ModelConfig(d_model=d_model, n_layers=n_layers, n_heads=n_heads, d_ff=d_ff)
    except ValueError as e:
        raise ConfigError(str(e)) from e
    cfg = PretrainConfig(steps=steps, batch_size=batch_size, lr=lr, layer_drop=layer_drop, seed=seed)
    res = run_pretrain(init_model(config, seed), read_corpus(corpus_path), cfg)
    checkpoint.save(res.model, out)
    if log_path:
        write_log(res.log, log_path)
    if res.log:
        click.echo(f"final loss {res.log[-1].loss:.4f}")


@cli.command()
@click.option("--model", "model_path", required=True, type=_existing)
@click.option("--calibration", "cal_path", type=_existing, help="Required for ablation and io_cosine.")
@click.option("--criterion", type=click.Choice([c.value for c in Criterion]), default="ablation", show_default=True)
@click.option("--n-samples", default=32, show_default=True, type=click.IntRange(1))
@click.option("--max-len", default=128, show_default=True, type=click.IntRange(1))
@click.option("--max-new", default=32, show_default=True, type=click.IntRange(1))
@click.option("--seed", default=0, show_default=True)
@click.option("--out", type=_output, help="Write the importance report as JSON.")
def score(model_path, cal_path, criterion, n_samples, max_len, max_new, seed, out):
    """Score every prunable block and print a per-block importance chart."""
    model = checkpoint.load(model_path)
    cal = _calibration(cal_path, n_samples, max_len, seed) if cal_path else None
    report = rank_blocks(model, criterion, cal, seed=seed, max_new=max_new)
    _print_report(report)
    if out:
        report.export(out)


def _print_report(report: ImportanceReport) -> None:
    label = "similarity" if report.similarity_semantics else "score"
    click.echo(f"criterion={report.criterion.value}  protected={sorted(report.protected)}")
    values = list(report.scores.values())
    lo, hi = min(values), max(values)
    for b in sorted(report.scores):
        v = report.scores[b]
        width = 1 + int(39 * (v - lo) / (hi - lo)) if hi > lo else 40
        click.echo(f"block {b:3d}  {label} {v: .6f}  {'#' * width}")
    click.echo(f"prune order: {report.ranking()}")


@cli.command()
@click.option("--model", "model_path", required=True, type=_existing)
@click.option("--k", required=True, type=click.IntRange(0))
@click.option("--out", required=True, type=_output)
@click.option("--report", "report_path", type=_existing, help="Reuse a saved importance report.")
@click.option("--calibration", "cal_path", type=_existing)
@click.option("--criterion", type=click.Choice([c.value for c in Criterion]), default="ablation", show_default=True)
@click.option("--strategy", type=click.Choice([s.value for s in Strategy]), default="one_shot", show_default=True)
@click.option("--n-samples", default=32, show_default=True, type=click.IntRange(1))
@click.option("--max-len", default=128, show_default=True, type=click.IntRange(1))
@click.option("--max-new", default=32, show_default=True, type=click.IntRange(1))
@click.option("--seed", default=0, show_default=True)
def prune(model_path, k, out, report_path, cal_path, criterion, strategy, n_samples, max_len, max_new, seed):
    """Remove the k least important blocks."""
    model = checkpoint.load(model_path)
    cal = _calibration(cal_path, n_samples, max_len, seed) if cal_path else None
    if report_path:
        report = ImportanceReport.load(report_path)
    else:
        report = rank_blocks(model, criterion, cal, seed=seed, max_new=max_new)
    plan = make_plan(report, k, strategy, model=model, cal=cal, max_new=max_new)
    pruned = execute_plan(model, plan)
    checkpoint.save(pruned, out)
    click.echo(f"removed blocks {list(plan.blocks)}; {pruned.config.n_layers} blocks remain")


@cli.command()
@click.option("--model", "model_path", required=True, type=_existing)
@click.option("--corpus", "corpus_path", required=True, type=_existing)
@click.option("--out", required=True, type=_output)
@click.option("--rank", default=16, show_default=True, type=click.IntRange(1))
@click.option("--alpha", default=8.0, show_default=True)
@click.option("--targets", default=",".join(LINEAR_NAMES), show_default=True)
@click.option("--lr", default=3e-3, show_default=True)
@click.option("--steps", default=200, show_default=True, type=click.IntRange(0))
@click.option("--batch-size", default=16, show_default=True, type=click.IntRange(1))
@click.option("--seed", default=0, show_default=True)
@click.option("--log", "log_path", type=_output)
def finetune(model_path, corpus_path, out, rank, alpha, targets, lr, steps, batch_size, seed, log_path):
    """Recovery fine-tuning with low-rank adapters, merged into the saved weights."""
    try:
        cfg = AdapterConfig(rank, alpha, tuple(t for t in targets.split(",") if t), lr, steps, batch_size, seed)
    except ValueError as e:
        raise ConfigError(str(e)) from e
    res = run_finetune(checkpoint.load(model_path), read_corpus(corpus_path), cfg)
    checkpoint.save(res.model, out)
    if log_path:
        write_log(res.log, log_path)
    if res.log:
        click.echo(f"final loss {res.log[-1].loss:.4f}")


@cli.command()
@click.option("--model", "model_path", required=True, type=_existing)
@click.option("--out", required=True, type=_output)
@click.option("--method", type=click.Choice(["awq", "rtn"]), default="awq", show_default=True)
@click.option("--bits", type=click.Choice(["3", "4", "8"]), default="4", show_default=True)
@click.option("--group-size", default=64, show_default=True, type=click.IntRange(1))
@click.option("--alpha-grid", default=20, show_default=True, type=click.IntRange(2))
@click.option("--calibration", "cal_path", type=_existing, help="Required for AWQ.")
@click.option("--n-samples", default=32, show_default=True, type=click.IntRange(1))
@click.option("--max-len", default=128, show_default=True, type=click.IntRange(1))
@click.option("--max-calib-tokens", default=2048, show_default=True, type=click.IntRange(1))
@click.option("--seed", default=0, show_default=True)
@click.option("--report", "report_path", type=_output, help="Write per-layer alpha search results.")
def quantize(model_path, out, method, bits, group_size, alpha_grid, cal_path, n_samples, max_len, max_calib_tokens, seed, report_path):
    """Group-wise weight quantization (RTN or activation-aware)."""
    if method == "awq" and cal_path is None:
        raise click.UsageError("--calibration is required for --method awq")
    cfg = QuantConfig(int(bits), group_size, alpha_grid, method, max_calib_tokens, seed)
    model = checkpoint.load(model_path)
    cal = _calibration(cal_path, n_samples, max_len, seed) if cal_path else None
    qmodel, results = calibrate_and_quantize(model, cal, cfg)
    size = checkpoint.save(qmodel, out)
    click.echo(f"wrote {out} ({size} bytes)")
    for r in results:
        click.echo(f"{r.layer:16s} alpha={r.best_alpha:.4f} loss={r.best_loss:.6g} rtn={r.rtn_loss:.6g}")
    if report_path:
        export_results(results, report_path)


@cli.command("eval")
@click.option("--model", "model_path", required=True, type=_existing)
@click.option("--reference", "ref_path", required=True, type=_existing)
@click.option("--heldout", "heldout_path", required=True, type=_existing)
@click.option("--prompts", "prompts_path", required=True, type=_existing)
@click.option("--model-id", default=None, help="Row name; defaults to the file stem.")
@click.option("--max-new", default=32, show_default=True, type=click.IntRange(1))
@click.option("--out", type=_output, help="Write the report as JSON lines.")
def eval_cmd(model_path, ref_path, heldout_path, prompts_path, model_id, max_new, out):
    """Perplexity, similarity to the reference, size and latency of one model."""
    report = evaluate(
        model_id or model_path.stem,
        checkpoint.load(model_path),
        checkpoint.load(ref_path),
        read_corpus(heldout_path),
        read_corpus(prompts_path),
        max_new=max_new,
    )
    click.echo(build_report_table([report])[0])
    if out:
        export_reports([report], out)


@cli.command()
@click.argument("paths", nargs=-1, required=True, type=_existing)
def table(paths):
    """Merge report files into one comparison table."""
    reports = [r for p in paths for r in load_reports(p)]
    click.echo(build_report_table(reports)[0])


@cli.command()
@click.argument("config_path", type=_existing)
@click.option("--mode", type=click.Choice(["run", "ladder", "sweep"]), default="run", show_default=True,
              help="run: enabled stages only; ladder: all six configurations; sweep: prune-only over sweep_k.")
def pipeline(config_path, mode):
    """Run an experiment from a YAML config."""
    from .pipeline import load_config, run_ladder, run_pipeline, run_sweep

    cfg = load_config(config_path)
    runner = {"run": run_pipeline, "ladder": run_ladder, "sweep": run_sweep}[mode]
    result = runner(cfg)
    click.echo(result.table)
    click.echo(f"run directory: {result.run_dir}")


def main(argv=None) -> int:
    """Entry point; returns the process exit status instead of raising."""
    try:
        cli.main(args=argv, prog_name="shrink", standalone_mode=False)
    except click.exceptions.Exit as e:
        return e.exit_code
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return EXIT_INVALID
    except click.ClickException as e:
        e.show()
        return EXIT_INVALID
    except _INVALID as e:
        click.echo(f"error: {e}", err=True)
        return EXIT_INVALID
    except (ShrinkError, RuntimeError, ValueError) as e:
        click.echo(f"error: {e}", err=True)
        return EXIT_STAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
