"""Block importance scoring and depth-pruning plans.

Three criteria are supported:

* ``ablation``: drop one block, greedily generate continuations for every
  calibration prompt with the full and the ablated model, embed both with a
  fixed embedding function and average the cosine similarities. A high
  average means the block can go.
* ``magnitude``: sum of absolute parameter values; small means the block can go.
* ``io_cosine``: mean cosine between the residual stream entering and leaving
  the block over all calibration tokens; high means the block can go.

Block indices are the model's ``block_ids`` (original positions), so scores
stay meaningful after earlier removals.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional, Protocol, Sequence

import torch

from .calibration import CalibrationSet
from .errors import CalibrationError, PlanError, ProtectedBlockError
from .model import ModelCheckpoint, default_protected, forward, generate_batch, remove_blocks
from .numeric import QuantizedTensor, cosine_similarity, dequantize

DEFAULT_MAX_NEW = 32


class Criterion(str, enum.Enum):
    ABLATION_SIMILARITY = "ablation"
    WEIGHT_MAGNITUDE = "magnitude"
    IO_COSINE = "io_cosine"

    @property
    def similarity_semantics(self) -> bool:
        return self is not Criterion.WEIGHT_MAGNITUDE


class Strategy(str, enum.Enum):
    ONE_SHOT = "one_shot"
    RECOMPUTE = "recompute"


class EmbeddingFunction(Protocol):
    def __call__(self, tokens: Sequence[int]) -> torch.Tensor: ...


class HiddenStateEmbedding:
    """Mean-pooled final residual stream of a fixed reference model.

    The reference is the original (unpruned) model, so every candidate's
    generations are compared in one embedding space.
    """

    def __init__(self, reference: ModelCheckpoint):
        self.reference = reference

    def __call__(self, tokens: Sequence[int]) -> torch.Tensor:
        return self.embed_batch([tokens])[0]

    @torch.no_grad()
    def embed_batch(self, seqs: Sequence[Sequence[int]]) -> list[torch.Tensor]:
        window = self.reference.config.max_seq_len
        out: list[Optional[torch.Tensor]] = [None] * len(seqs)
        by_len: dict[int, list[int]] = {}
        for i, s in enumerate(seqs):
            if len(s) == 0:
                raise ValueError("cannot embed an empty sequence")
            by_len.setdefault(min(len(s), window), []).append(i)
        for length, idxs in by_len.items():
            batch = torch.tensor([list(seqs[i])[-length:] for i in idxs], dtype=torch.long)
            _, hidden = forward(self.reference, batch, capture=True)
            pooled = hidden[-1].double().mean(dim=1)
            for row, i in enumerate(idxs):
                out[i] = pooled[row]
        return out  # type: ignore[return-value]


def embed_all(g: EmbeddingFunction, seqs: Sequence[Sequence[int]]) -> list[torch.Tensor]:
    batch = getattr(g, "embed_batch", None)
    if batch is not None:
        return batch(seqs)
    return [g(s) for s in seqs]


def continuations(model: ModelCheckpoint, prompts: Sequence[Sequence[int]], max_new: int) -> list[list[int]]:
    """Fixed-length greedy continuations (EOS does not stop generation)."""
    full = generate_batch(model, prompts, max_new, stop_at_eos=False)
    return [seq[len(p):] for seq, p in zip(full, prompts)]


def mean_similarity(a: Sequence[torch.Tensor], b: Sequence[torch.Tensor]) -> float:
    sims = [cosine_similarity(x, y) for x, y in zip(a, b)]
    return math.fsum(sims) / len(sims)


def ablation_similarity(
    reference: ModelCheckpoint,
    candidate: ModelCheckpoint,
    cal: CalibrationSet,
    g: EmbeddingFunction,
    max_new: int = DEFAULT_MAX_NEW,
    reference_embeddings: Optional[list[torch.Tensor]] = None,
) -> float:
    """Average cosine similarity of embedded generations, candidate vs reference."""
    if len(cal) == 0:
        raise CalibrationError("calibration set is empty")
    prompts = [list(s) for s in cal.samples]
    if reference_embeddings is None:
        reference_embeddings = embed_all(g, continuations(reference, prompts, max_new))
    cand = embed_all(g, continuations(candidate, prompts, max_new))
    return mean_similarity(cand, reference_embeddings)


def _check_scorable(model: ModelCheckpoint, block_id: int, protected: Optional[Iterable[int]]) -> frozenset[int]:
    guard = default_protected(model) if protected is None else frozenset(protected)
    if block_id in guard:
        raise ProtectedBlockError(f"block {block_id} is protected")
    model.block_position(block_id)
    return guard


def score_block_ablation(
    model: ModelCheckpoint,
    block_id: int,
    cal: CalibrationSet,
    g: Optional[EmbeddingFunction] = None,
    max_new: int = DEFAULT_MAX_NEW,
    protected: Optional[Iterable[int]] = None,
    reference_embeddings: Optional[list[torch.Tensor]] = None,
) -> float:
    guard = _check_scorable(model, block_id, protected)
    g = g or HiddenStateEmbedding(model)
    pruned = remove_blocks(model, [block_id], protected=guard)
    return ablation_similarity(model, pruned, cal, g, max_new, reference_embeddings)


def score_block_magnitude(model: ModelCheckpoint, block_id: int) -> float:
    blk = model.blocks[model.block_position(block_id)]
    values: list[float] = []
    for _, t in blk.tensors():
        if isinstance(t, QuantizedTensor):
            t = dequantize(t)
        values.extend(t.detach().double().abs().reshape(-1).tolist())
    return math.fsum(values)


@torch.no_grad()
def score_block_io_cosine(
    model: ModelCheckpoint, block_id: int, cal: CalibrationSet, protected: Optional[Iterable[int]] = None
) -> float:
    _check_scorable(model, block_id, protected)
    if len(cal) == 0:
        raise CalibrationError("calibration set is empty")
    pos = model.block_position(block_id)
    sims: list[float] = []
    for sample in cal.samples:
        _, hidden = forward(model, list(sample), capture=True)
        h_in, h_out = hidden[pos].double(), hidden[pos + 1].double()
        for a, b in zip(h_in, h_out):
            sims.append(cosine_similarity(a, b))
    return math.fsum(sims) / len(sims)


@dataclass
class ImportanceReport:
    criterion: Criterion
    scores: dict[int, float]
    protected: frozenset[int]
    seed: int = 0
    similarity_semantics: bool = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        self.criterion = Criterion(self.criterion)
        if self.similarity_semantics is None:
            self.similarity_semantics = self.criterion.similarity_semantics
        self.protected = frozenset(self.protected)
        if set(self.scores) & self.protected:
            raise PlanError("protected blocks must not carry scores")

    def importance(self, block_id: int) -> float:
        """Score oriented so that higher means more important."""
        s = self.scores[block_id]
        return -s if self.similarity_semantics else s

    def ranking(self) -> list[int]:
        """Block ids from least to most important; ties go to the lower id."""
        return sorted(self.scores, key=lambda b: (self.importance(b), b))

    def to_dict(self) -> dict:
        return {
            "criterion": self.criterion.value,
            "similarity_semantics": self.similarity_semantics,
            "seed": self.seed,
            "protected": sorted(self.protected),
            "scores": [{"block": b, "score": s} for b, s in sorted(self.scores.items())],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ImportanceReport":
        return cls(
            Criterion(d["criterion"]),
            {int(r["block"]): float(r["score"]) for r in d["scores"]},
            frozenset(d["protected"]),
            d.get("seed", 0),
            d["similarity_semantics"],
        )

    def export(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path) -> "ImportanceReport":
        return cls.from_dict(json.loads(Path(path).read_text()))


def rank_blocks(
    model: ModelCheckpoint,
    criterion: Criterion | str,
    cal: Optional[CalibrationSet] = None,
    g: Optional[EmbeddingFunction] = None,
    seed: Optional[int] = None,
    max_new: int = DEFAULT_MAX_NEW,
    protected: Optional[Iterable[int]] = None,
) -> ImportanceReport:
    """Score every non-protected block under one criterion."""
    criterion = Criterion(criterion)
    guard = default_protected(model) if protected is None else frozenset(protected)
    candidates = [b for b in model.block_ids if b not in guard]
    if not candidates:
        raise PlanError("model has no prunable blocks")
    if seed is None:
        seed = cal.seed if cal is not None else 0
    scores: dict[int, float] = {}
    if criterion is Criterion.WEIGHT_MAGNITUDE:
        for b in candidates:
            scores[b] = score_block_magnitude(model, b)
    elif criterion is Criterion.IO_COSINE:
        if cal is None:
            raise CalibrationError("io_cosine scoring needs a calibration set")
        for b in candidates:
            scores[b] = score_block_io_cosine(model, b, cal, protected=guard)
    else:
        if cal is None:
            raise CalibrationError("ablation scoring needs a calibration set")
        g = g or HiddenStateEmbedding(model)
        prompts = [list(s) for s in cal.samples]
        ref = embed_all(g, continuations(model, prompts, max_new))
        for b in candidates:
            scores[b] = score_block_ablation(model, b, cal, g, max_new, guard, reference_embeddings=ref)
    return ImportanceReport(criterion, scores, guard, seed)


@dataclass(frozen=True)
class PruningPlan:
    blocks: tuple[int, ...]
    strategy: Strategy
    criterion: Criterion
    reports: tuple[ImportanceReport, ...] = ()

    def __post_init__(self):
        if len(set(self.blocks)) != len(self.blocks):
            raise PlanError("duplicate blocks in plan")
        for r in self.reports:
            if set(self.blocks) & r.protected:
                raise PlanError("plan includes protected blocks")

    def to_dict(self) -> dict:
        return {
            "blocks": list(self.blocks),
            "strategy": self.strategy.value,
            "criterion": self.criterion.value,
            "reports": [r.to_dict() for r in self.reports],
        }


def make_plan(
    report: ImportanceReport,
    k: int,
    strategy: Strategy | str = Strategy.ONE_SHOT,
    *,
    model: Optional[ModelCheckpoint] = None,
    cal: Optional[CalibrationSet] = None,
    g: Optional[EmbeddingFunction] = None,
    max_new: int = DEFAULT_MAX_NEW,
) -> PruningPlan:
    """Choose ``k`` blocks to remove.

    ``one_shot`` takes the ``k`` least important blocks of ``report``.
    ``recompute`` removes the least important block, re-scores the remaining
    ones on the pruned model and repeats; it needs ``model`` and ``cal`` and
    only supports the ablation criterion. The embedding function stays tied
    to the original model throughout.
    """
    strategy = Strategy(strategy)
    if k < 0:
        raise PlanError("k must be >= 0")
    if k > len(report.scores):
        raise PlanError(f"k={k} exceeds the {len(report.scores)} prunable blocks")
    if strategy is Strategy.ONE_SHOT:
        return PruningPlan(tuple(report.ranking()[:k]), strategy, report.criterion, (report,))
    if report.criterion is not Criterion.ABLATION_SIMILARITY:
        raise PlanError("the recompute strategy is only defined for the ablation criterion")
    if model is None or cal is None:
        raise PlanError("the recompute strategy needs the model and calibration set")
    g = g or HiddenStateEmbedding(model)
    prompts = [list(s) for s in cal.samples]
    original_ref = embed_all(g, continuations(model, prompts, max_new))
    chosen: list[int] = []
    reports = [report]
    current = model
    for step in range(k):
        if step > 0:
            scores = {}
            for b in current.block_ids:
                if b in report.protected:
                    continue
                trial = remove_blocks(current, [b], protected=report.protected)
                scores[b] = ablation_similarity(model, trial, cal, g, max_new, original_ref)
            reports.append(ImportanceReport(report.criterion, scores, report.protected, report.seed))
        victim = reports[-1].ranking()[0]
        chosen.append(victim)
        current = remove_blocks(current, [victim], protected=report.protected)
    return PruningPlan(tuple(chosen), strategy, report.criterion, tuple(reports))


def execute_plan(model: ModelCheckpoint, plan: PruningPlan) -> ModelCheckpoint:
    protected = plan.reports[0].protected if plan.reports else None
    return remove_blocks(model, plan.blocks, protected=protected)
