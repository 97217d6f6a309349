"""Declarative prune -> fine-tune -> quantize runs with per-stage evaluation.

A run is fully determined by its :class:`PipelineConfig`. Every stage writes
its artifacts into the run directory as soon as it finishes, so a failing
stage leaves the earlier outputs in place for inspection.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Literal, Optional, Sequence

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from . import checkpoint
from .calibration import CalibrationSet, build_calibration_set
from .data import make_synthetic_corpus, read_corpus
from .errors import ConfigError, ShrinkError, StageError
from .evaluate import EvalReport, build_report_table, evaluate, export_reports
from .finetune import AdapterConfig, PretrainConfig, finetune, pretrain, write_log
from .model import LINEAR_NAMES, ModelCheckpoint, ModelConfig, init_model
from .pruning import (
    DEFAULT_MAX_NEW,
    HiddenStateEmbedding,
    ImportanceReport,
    PruningPlan,
    continuations,
    embed_all,
    execute_plan,
    make_plan,
    rank_blocks,
)
from .quantize import QuantConfig, calibrate_and_quantize, export_results
from . import tokenizer

OUTPUT_ROOT_ENV = "SHRINK_OUTPUT_ROOT"
log = logging.getLogger("shrink.pipeline")


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class PretrainSection(_Section):
    steps: int = Field(400, ge=0)
    batch_size: int = Field(32, ge=1)
    lr: float = Field(3e-3, gt=0)
    warmup: int = Field(50, ge=0)
    weight_decay: float = Field(0.01, ge=0)
    layer_drop: float = Field(0.2, ge=0, lt=1)


class ModelSection(_Section):
    checkpoint: Optional[str] = None
    vocab_size: int = tokenizer.VOCAB_SIZE
    d_model: int = 64
    n_layers: int = 8
    n_heads: int = 4
    d_ff: int = 256
    max_seq_len: int = 128
    pretrain: Optional[PretrainSection] = PretrainSection()

    def architecture(self) -> ModelConfig:
        return ModelConfig(self.vocab_size, self.d_model, self.n_layers, self.n_heads, self.d_ff, self.max_seq_len)


class CorpusSection(_Section):
    """Corpus files; when ``train`` is unset a synthetic corpus is generated from the global seed."""

    train: Optional[str] = None
    calibration: Optional[str] = None
    heldout: Optional[str] = None
    prompts: Optional[str] = None
    n_train: int = Field(4000, ge=1)
    n_heldout: int = Field(200, ge=1)
    n_calibration: int = Field(200, ge=1)
    n_prompts: int = Field(32, ge=1)


class CalibrationSection(_Section):
    n_samples: int = Field(32, ge=1)
    max_len: int = Field(128, ge=1)


class PruneSection(_Section):
    criterion: Literal["ablation", "magnitude", "io_cosine"] = "ablation"
    k: int = Field(2, ge=0)
    strategy: Literal["one_shot", "recompute"] = "one_shot"
    protected: Optional[list[int]] = None
    max_new: int = Field(DEFAULT_MAX_NEW, ge=1)


class SftSection(_Section):
    rank: int = Field(16, ge=1)
    alpha: float = Field(8.0, gt=0)
    targets: list[str] = list(LINEAR_NAMES)
    lr: float = Field(3e-3, gt=0)
    steps: int = Field(200, ge=0)
    batch_size: int = Field(16, ge=1)


class QuantSection(_Section):
    method: Literal["awq", "rtn"] = "awq"
    bit_width: Literal[3, 4, 8] = 4
    group_size: int = Field(64, ge=1)
    alpha_grid: int = Field(20, ge=2)
    max_calib_tokens: int = Field(2048, ge=1)


class EvalSection(_Section):
    max_new: int = Field(DEFAULT_MAX_NEW, ge=1)
    latency_tokens: int = Field(16, ge=1)
    latency_repeats: int = Field(3, ge=3)


class PipelineConfig(_Section):
    seed: int = 0
    output_dir: str = "runs/default"
    model: ModelSection = ModelSection()
    corpus: CorpusSection = CorpusSection()
    calibration: CalibrationSection = CalibrationSection()
    prune: Optional[PruneSection] = PruneSection()
    sft: Optional[SftSection] = SftSection()
    quant: Optional[QuantSection] = QuantSection()
    eval: EvalSection = EvalSection()
    sweep_k: list[int] = [0, 1, 2, 3]

    def adapter_config(self) -> AdapterConfig:
        s = self.sft or SftSection()
        return AdapterConfig(s.rank, s.alpha, tuple(s.targets), s.lr, s.steps, s.batch_size, self.seed)

    def quant_config(self) -> QuantConfig:
        q = self.quant or QuantSection()
        return QuantConfig(q.bit_width, q.group_size, q.alpha_grid, q.method, q.max_calib_tokens, self.seed)

    def pretrain_config(self) -> PretrainConfig:
        p = self.model.pretrain or PretrainSection()
        return PretrainConfig(p.steps, p.batch_size, p.lr, p.warmup, p.weight_decay, p.layer_drop, self.seed)

    def run_dir(self) -> Path:
        out = Path(self.output_dir)
        root = os.environ.get(OUTPUT_ROOT_ENV)
        if root and not out.is_absolute():
            out = Path(root) / out
        return out


def load_config(path) -> PipelineConfig:
    """Read a YAML config; unknown keys and bad values raise :class:`ConfigError`."""
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    except yaml.YAMLError as e:
        raise ConfigError(f"malformed YAML in {path}: {e}") from e
    return parse_config(raw or {})


def parse_config(raw: dict) -> PipelineConfig:
    try:
        cfg = PipelineConfig.model_validate(raw)
        arch = cfg.model.architecture()
        if cfg.prune is not None and cfg.model.checkpoint is None:
            n_protected = 3 if cfg.prune.protected is None else len(set(cfg.prune.protected))
            limit = arch.n_layers - n_protected
            for k in [cfg.prune.k, *cfg.sweep_k]:
                if k > limit:
                    raise ConfigError(f"k={k} exceeds the {limit} prunable blocks of a {arch.n_layers}-block model")
        if cfg.sft is not None:
            cfg.adapter_config()
    except (ValidationError, ValueError, ShrinkError) as e:
        raise ConfigError(str(e)) from e
    return cfg


def dump_config(cfg: PipelineConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.model_dump(mode="json"), sort_keys=False))


@dataclass
class Corpora:
    train: list[str]
    calibration: list[str]
    heldout: list[str]
    prompts: list[str]


def _stage(name: str):
    """Run a stage body, tagging any failure with the stage name."""

    def wrap(fn: Callable):
        def inner(*a, **kw):
            log.info("stage %s: start", name)
            try:
                out = fn(*a, **kw)
            except StageError:
                raise
            except Exception as e:  # noqa: BLE001 - every failure is re-raised with its stage tag
                log.error("stage %s failed: %s", name, e)
                raise StageError(name, e) from e
            log.info("stage %s: done", name)
            return out

        return inner

    return wrap


def load_corpora(cfg: PipelineConfig, run_dir: Optional[Path] = None) -> Corpora:
    if cfg.model.checkpoint is not None and not Path(cfg.model.checkpoint).is_file():
        raise ConfigError(f"model checkpoint not found: {cfg.model.checkpoint}")
    c = cfg.corpus
    if c.train is None:
        syn = make_synthetic_corpus(cfg.seed, c.n_train, c.n_heldout, c.n_calibration, c.n_prompts)
        if run_dir is not None:
            syn.write(run_dir / "corpus")
        return Corpora(list(syn.train), list(syn.calibration), list(syn.heldout), list(syn.prompts))
    missing = [k for k in ("calibration", "heldout", "prompts") if getattr(c, k) is None]
    if missing:
        raise ConfigError(f"corpus.train is set but {', '.join(missing)} is not")
    for p in (c.train, c.calibration, c.heldout, c.prompts):
        if not Path(p).is_file():
            raise ConfigError(f"corpus file not found: {p}")
    return Corpora(read_corpus(c.train), read_corpus(c.calibration), read_corpus(c.heldout), read_corpus(c.prompts))


@_stage("model")
def prepare_model(cfg: PipelineConfig, corpora: Corpora, run_dir: Optional[Path] = None) -> ModelCheckpoint:
    if cfg.model.checkpoint is not None:
        return checkpoint.load(cfg.model.checkpoint)
    model = init_model(cfg.model.architecture(), cfg.seed)
    if cfg.model.pretrain is not None and cfg.model.pretrain.steps > 0:
        res = pretrain(model, corpora.train, cfg.pretrain_config())
        model = res.model
        if run_dir is not None:
            write_log(res.log, run_dir / "pretrain_log.csv")
    if run_dir is not None:
        checkpoint.save(model, run_dir / "original.shrk")
    return model


def calibration_set(cfg: PipelineConfig, corpora: Corpora) -> CalibrationSet:
    return build_calibration_set(
        corpora.calibration, cfg.calibration.n_samples, cfg.calibration.max_len, cfg.seed, source="calibration"
    )


@_stage("score")
def score(model: ModelCheckpoint, prune: PruneSection, cal: CalibrationSet) -> ImportanceReport:
    return rank_blocks(model, prune.criterion, cal, seed=cal.seed, max_new=prune.max_new, protected=prune.protected)


@_stage("prune")
def prune_model(model, report: ImportanceReport, prune: PruneSection, cal: CalibrationSet):
    plan = make_plan(report, prune.k, prune.strategy, model=model, cal=cal, max_new=prune.max_new)
    return execute_plan(model, plan), plan


@_stage("sft")
def sft_model(model: ModelCheckpoint, corpora: Corpora, cfg: PipelineConfig):
    return finetune(model, corpora.train, cfg.adapter_config())


@_stage("quantize")
def quantize_stage(model: ModelCheckpoint, cal: CalibrationSet, cfg: PipelineConfig):
    return calibrate_and_quantize(model, cal, cfg.quant_config())


class Evaluator:
    """Evaluates models against one fixed reference, embedding its generations once."""

    def __init__(self, reference: ModelCheckpoint, corpora: Corpora, section: EvalSection):
        self.reference = reference
        self.corpora = corpora
        self.section = section
        self.g = HiddenStateEmbedding(reference)
        toks = [tokenizer.encode(p) for p in corpora.prompts]
        self.reference_embeddings = embed_all(self.g, continuations(reference, toks, section.max_new))

    @_stage("eval")
    def __call__(self, model_id: str, model: ModelCheckpoint) -> EvalReport:
        s = self.section
        return evaluate(
            model_id, model, self.reference, self.corpora.heldout, self.corpora.prompts, self.g,
            s.max_new, s.latency_tokens, s.latency_repeats, self.reference_embeddings,
        )


@dataclass
class RunResult:
    run_dir: Path
    reports: list[EvalReport]
    checkpoints: dict[str, Path] = field(default_factory=dict)
    plan: Optional[PruningPlan] = None
    table: str = ""


def _open_run(cfg: PipelineConfig) -> Path:
    run_dir = cfg.run_dir()
    run_dir.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, run_dir / "config.yaml")
    return run_dir


class _RunLog:
    """Attach a file handler for the duration of a run."""

    def __init__(self, run_dir: Path):
        self.handler = logging.FileHandler(run_dir / "pipeline.log", mode="w")
        self.handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))

    def __enter__(self):
        log.addHandler(self.handler)
        log.setLevel(logging.INFO)
        return self

    def __exit__(self, *exc):
        log.removeHandler(self.handler)
        self.handler.close()


def _finish(result: RunResult) -> RunResult:
    table, records = build_report_table(result.reports)
    result.table = table
    export_reports(result.reports, result.run_dir / "reports.jsonl")
    (result.run_dir / "table.txt").write_text(table + "\n")
    return result


def run_pipeline(cfg: PipelineConfig) -> RunResult:
    """Run the enabled stages in the fixed order prune -> sft -> quantize.

    The input model is always evaluated ("original"); each enabled stage
    adds one checkpoint and one report named after the stages applied so far.
    """
    run_dir = _open_run(cfg)
    with _RunLog(run_dir):
        corpora = load_corpora(cfg, run_dir)
        original = prepare_model(cfg, corpora, run_dir)
        cal = calibration_set(cfg, corpora)
        ev = Evaluator(original, corpora, cfg.eval)
        result = RunResult(run_dir, [])
        try:
            result.reports.append(ev("original", original))
            model, applied = original, []
            if cfg.prune is not None:
                report = score(original, cfg.prune, cal)
                report.export(run_dir / "importance.json")
                model, result.plan = prune_model(original, report, cfg.prune, cal)
                (run_dir / "plan.json").write_text(json.dumps(result.plan.to_dict(), indent=1))
                applied.append("prune")
                _save(result, "pruned", model)
                result.reports.append(ev("+".join(applied), model))
            if cfg.sft is not None:
                res = sft_model(model, corpora, cfg)
                write_log(res.log, run_dir / "sft_log.csv")
                model = res.model
                applied.append("sft")
                _save(result, "finetuned", model)
                result.reports.append(ev("+".join(applied), model))
            if cfg.quant is not None:
                model, awq = quantize_stage(model, cal, cfg)
                export_results(awq, run_dir / "awq.json")
                applied.append("quant")
                _save(result, "quantized", model)
                result.reports.append(ev("+".join(applied), model))
        finally:
            _finish(result)
    return result


def _save(result: RunResult, name: str, model: ModelCheckpoint) -> None:
    path = result.run_dir / f"{name}.shrk"
    checkpoint.save(model, path)
    result.checkpoints[name] = path


def run_ladder(cfg: PipelineConfig) -> RunResult:
    """All six comparison configurations from one pruned-block set and seed.

    Pruning, fine-tuning and quantization settings come from ``cfg``; the
    prune/sft/quant sections are filled with defaults when disabled.
    """
    prune = cfg.prune or PruneSection()
    cfg = cfg.model_copy(update={"prune": prune, "sft": cfg.sft or SftSection(), "quant": cfg.quant or QuantSection()})
    run_dir = _open_run(cfg)
    with _RunLog(run_dir):
        corpora = load_corpora(cfg, run_dir)
        original = prepare_model(cfg, corpora, run_dir)
        cal = calibration_set(cfg, corpora)
        ev = Evaluator(original, corpora, cfg.eval)
        result = RunResult(run_dir, [])
        try:
            result.reports.append(ev("original", original))
            report = score(original, prune, cal)
            report.export(run_dir / "importance.json")
            pruned, result.plan = prune_model(original, report, prune, cal)
            (run_dir / "plan.json").write_text(json.dumps(result.plan.to_dict(), indent=1))
            _save(result, "pruned", pruned)
            result.reports.append(ev("prune", pruned))
            res = sft_model(pruned, corpora, cfg)
            write_log(res.log, run_dir / "sft_log.csv")
            tuned = res.model
            _save(result, "finetuned", tuned)
            result.reports.append(ev("prune+sft", tuned))
            for rid, base in (("quant", original), ("prune+quant", pruned), ("prune+sft+quant", tuned)):
                q, awq = quantize_stage(base, cal, cfg)
                tag = rid.replace("+", "_")
                export_results(awq, run_dir / f"awq_{tag}.json")
                _save(result, tag, q)
                result.reports.append(ev(rid, q))
        finally:
            _finish(result)
    return result


def run_sweep(cfg: PipelineConfig, ks: Optional[Sequence[int]] = None) -> RunResult:
    """Prune-only depth sweep: one ranking, one model per ``k``."""
    prune = cfg.prune or PruneSection()
    ks = list(cfg.sweep_k if ks is None else ks)
    run_dir = _open_run(cfg)
    with _RunLog(run_dir):
        corpora = load_corpora(cfg, run_dir)
        original = prepare_model(cfg, corpora, run_dir)
        cal = calibration_set(cfg, corpora)
        ev = Evaluator(original, corpora, cfg.eval)
        result = RunResult(run_dir, [])
        try:
            report = score(original, prune, cal)
            report.export(run_dir / "importance.json")
            for k in ks:
                pruned, _ = prune_model(original, report, prune.model_copy(update={"k": k}), cal)
                result.reports.append(ev(f"k={k}", pruned))
        finally:
            _finish(result)
    return result
