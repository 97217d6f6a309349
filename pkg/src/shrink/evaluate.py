"""Deterministic proxy metrics and the comparison-ladder table.

The performance proxy is ``similarity_score``: generations of a compressed
model are embedded next to the reference model's generations and the mean
cosine is mapped from [-1, 1] onto [0, 100]. Held-out perplexity, parameter
count, serialized size and a peak-memory estimate replace the remaining
columns of a GPU evaluation.
"""

from __future__ import annotations

import json
import math
import statistics
import threading
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

import torch

from . import tokenizer
from .checkpoint import serialized_size
from .data import encode_lines, pad_batch
from .errors import EvaluationError, ExclusiveModeError
from .finetune import next_token_loss
from .model import ModelCheckpoint, generate
from .numeric import QuantizedTensor
from .pruning import DEFAULT_MAX_NEW, EmbeddingFunction, HiddenStateEmbedding, continuations, embed_all
from .numeric import cosine_similarity

LADDER_ROWS = ("original", "prune", "prune+sft", "quant", "prune+quant", "prune+sft+quant")
LADDER_LABELS = {
    "original": "Original",
    "prune": "Pruning Only",
    "prune+sft": "Pruning and SFT",
    "quant": "Quantization Only",
    "prune+quant": "Prune + Quant",
    "prune+sft+quant": "Prune + SFT + Quant",
}
PROXY_NOTE = (
    "performance = similarity_score: mean cosine of embedded greedy generations vs the original "
    "model, mapped to [0, 100]; replaces an LLM judge. size = serialized checkpoint bytes."
)
GAP = "MISSING"


@dataclass
class EvalReport:
    model_id: str
    perplexity: float
    similarity_score: float
    params: int
    bit_width: int
    serialized_bytes: int
    peak_bytes_estimate: int
    latency_ms_per_token: float
    latency_spread_ms: float = 0.0
    latency_runs: int = 0
    n_blocks: int = 0

    DETERMINISTIC = (
        "model_id", "perplexity", "similarity_score", "params", "bit_width",
        "serialized_bytes", "peak_bytes_estimate", "n_blocks",
    )

    def deterministic_fields(self) -> dict:
        return {k: getattr(self, k) for k in self.DETERMINISTIC}

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@torch.no_grad()
def perplexity(model: ModelCheckpoint, heldout: Sequence[str], batch_size: int = 32) -> float:
    """exp(mean next-token cross-entropy) over every target token of the held-out lines."""
    if not heldout:
        raise EvaluationError("held-out set is empty")
    seqs = encode_lines(heldout, model.config.max_seq_len + 1)
    total, count = 0.0, 0
    for i in range(0, len(seqs), batch_size):
        batch = pad_batch(seqs[i : i + batch_size])
        n = int((batch[:, 1:] != tokenizer.PAD).sum())
        loss = float(next_token_loss(model, batch).double())
        total += loss * n
        count += n
    return math.exp(total / count)


def to_percent(cos: float) -> float:
    return (cos + 1.0) / 2.0 * 100.0


def similarity_score(
    model: ModelCheckpoint,
    reference: ModelCheckpoint,
    prompts: Sequence[str],
    g: Optional[EmbeddingFunction] = None,
    max_new: int = DEFAULT_MAX_NEW,
    reference_embeddings: Optional[list] = None,
) -> float:
    if not prompts:
        raise EvaluationError("no evaluation prompts")
    g = g or HiddenStateEmbedding(reference)
    toks = [tokenizer.encode(p) for p in prompts]
    if reference_embeddings is None:
        reference_embeddings = embed_all(g, continuations(reference, toks, max_new))
    ours = embed_all(g, continuations(model, toks, max_new))
    sims = [cosine_similarity(a, b) for a, b in zip(ours, reference_embeddings)]
    return to_percent(math.fsum(sims) / len(sims))


@dataclass
class LatencyStats:
    median_ms: float
    spread_ms: float
    samples_ms: list[float] = field(default_factory=list)


_EXCLUSIVE = threading.Lock()


def measure_latency(model: ModelCheckpoint, prompt: Sequence[int], n_tokens: int = 16, repeats: int = 3) -> LatencyStats:
    """Wall-clock ms per generated token; median and max-min spread over repeats.

    Only one measurement may run at a time in this process.
    """
    if repeats < 3:
        raise EvaluationError("latency needs at least 3 repeats")
    if not _EXCLUSIVE.acquire(blocking=False):
        raise ExclusiveModeError("another latency measurement is running")
    try:
        generate(model, prompt, 1, stop_at_eos=False)  # warm-up
        samples = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            generate(model, prompt, n_tokens, stop_at_eos=False)
            samples.append((time.perf_counter() - t0) * 1000.0 / n_tokens)
    finally:
        _EXCLUSIVE.release()
    return LatencyStats(statistics.median(samples), max(samples) - min(samples), samples)


def bit_width_of(model: ModelCheckpoint) -> int:
    bits = {w.bit_width for _, w in model.linear_layers() if isinstance(w, QuantizedTensor)}
    if not bits:
        return 32
    return max(bits)


def peak_bytes_estimate(model: ModelCheckpoint) -> int:
    """Weight bytes plus a bound on one full-length forward pass's activations."""
    weights = 0
    for _, t in model.named_tensors():
        if isinstance(t, QuantizedTensor):
            weights += (t.numel() * t.bit_width + 7) // 8 + t.group_scales.numel() * 4
            if t.channel_scale is not None:
                weights += t.channel_scale.numel() * 4
        else:
            weights += t.numel() * t.element_size()
    cfg = model.config
    seq = cfg.max_seq_len
    act = 4 * seq * (4 * cfg.d_model + cfg.d_ff + cfg.n_heads * seq + cfg.vocab_size)
    return weights + act


def evaluate(
    model_id: str,
    model: ModelCheckpoint,
    reference: ModelCheckpoint,
    heldout: Sequence[str],
    prompts: Sequence[str],
    g: Optional[EmbeddingFunction] = None,
    max_new: int = DEFAULT_MAX_NEW,
    latency_tokens: int = 16,
    latency_repeats: int = 3,
    reference_embeddings: Optional[list] = None,
) -> EvalReport:
    ppl = perplexity(model, heldout)
    sim = similarity_score(model, reference, prompts, g, max_new, reference_embeddings)
    lat = measure_latency(model, tokenizer.encode(prompts[0]), latency_tokens, latency_repeats)
    return EvalReport(
        model_id=model_id,
        perplexity=ppl,
        similarity_score=sim,
        params=model.n_params(),
        bit_width=bit_width_of(model),
        serialized_bytes=serialized_size(model),
        peak_bytes_estimate=peak_bytes_estimate(model),
        latency_ms_per_token=lat.median_ms,
        latency_spread_ms=lat.spread_ms,
        latency_runs=len(lat.samples_ms),
        n_blocks=model.config.n_layers,
    )


_COLUMNS = (
    ("Method", 20),
    ("Params", 9),
    ("Blocks", 6),
    ("Bits", 4),
    ("Score", 8),
    ("PPL", 9),
    ("ms/token", 9),
    ("Bytes", 10),
)


def build_report_table(reports: Sequence[EvalReport]) -> tuple[str, list[dict]]:
    """Aligned text table plus machine-readable records.

    When any ladder configuration is present, every ladder row is emitted in
    the fixed order, with an explicit gap marker for configurations that did
    not run. Reports with other ids follow in input order.
    """
    header = "  ".join(name.rjust(w) if i else name.ljust(w) for i, (name, w) in enumerate(_COLUMNS))
    lines = [header, "-" * len(header)]
    records: list[dict] = []
    by_id = {r.model_id: r for r in reports}
    ordered: list[tuple[str, Optional[EvalReport]]] = []
    if any(r.model_id in LADDER_ROWS for r in reports):
        ordered += [(rid, by_id.get(rid)) for rid in LADDER_ROWS]
    ordered += [(r.model_id, r) for r in reports if r.model_id not in LADDER_ROWS]
    for rid, r in ordered:
        label = LADDER_LABELS.get(rid, rid)
        if r is None:
            cells = [label] + [GAP] * (len(_COLUMNS) - 1)
            records.append({"model_id": rid, "missing": True})
        else:
            cells = [
                label,
                str(r.params),
                str(r.n_blocks),
                str(r.bit_width),
                f"{r.similarity_score:.2f}",
                f"{r.perplexity:.3f}",
                f"{r.latency_ms_per_token:.2f}",
                str(r.serialized_bytes),
            ]
            records.append(r.to_dict())
        lines.append("  ".join(c.rjust(w) if i else c.ljust(w) for i, (c, (_, w)) in enumerate(zip(cells, _COLUMNS))))
    return "\n".join(lines), records


def export_reports(reports: Sequence[EvalReport], path) -> None:
    """JSON-lines export: one header record, then one record per report."""
    _, records = build_report_table(reports)
    with open(Path(path), "w") as fh:
        fh.write(json.dumps({"note": PROXY_NOTE}) + "\n")
        for rec in records:
            fh.write(json.dumps(rec) + "\n")


def load_reports(path) -> list[EvalReport]:
    out = []
    for line in Path(path).read_text().splitlines():
        rec = json.loads(line)
        if "note" in rec or rec.get("missing"):
            continue
        out.append(EvalReport.from_dict(rec))
    return out
