"""Low-rank adapter recovery fine-tuning, plus plain pretraining of the toy model.

Adapters are trained with torch autograd over a frozen float backbone and
merged back into plain matrices afterwards, so the quantizer only ever sees
ordinary weights.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import torch
import torch.nn.functional as F

from . import tokenizer
from .data import encode_lines, pad_batch
from .errors import AdapterError, DivergedError, ShrinkError
from .model import LINEAR_NAMES, ModelCheckpoint, default_protected, forward, remove_blocks
from .numeric import QuantizedTensor


@dataclass(frozen=True)
class AdapterConfig:
    rank: int = 16
    alpha: float = 8.0
    targets: tuple[str, ...] = LINEAR_NAMES
    lr: float = 3e-3
    steps: int = 200
    batch_size: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.rank < 1:
            raise AdapterError("adapter rank must be >= 1")
        if self.alpha <= 0:
            raise AdapterError("adapter alpha must be > 0")
        if self.steps < 0 or self.batch_size < 1:
            raise AdapterError("steps must be >= 0 and batch_size >= 1")
        unknown = set(self.targets) - set(LINEAR_NAMES) - {"lm_head"}
        if unknown:
            raise AdapterError(f"unknown adapter targets: {sorted(unknown)}")

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank


# (rank, alpha) used for recovery after pruning, and for the initial task SFT
RECOVERY_PRESET = {"rank": 16, "alpha": 8.0}
INITIAL_SFT_PRESET = {"rank": 8, "alpha": 32.0}


@dataclass
class LowRankAdapter:
    A: torch.Tensor  # (rank, in_dim)
    B: torch.Tensor  # (out_dim, rank)
    scaling: float

    def __call__(self, x: torch.Tensor) -> torch.Tensor:
        return ((x @ self.A.to(x.dtype).T) @ self.B.to(x.dtype).T) * self.scaling

    def delta(self) -> torch.Tensor:
        return (self.B @ self.A) * self.scaling

    def parameters(self) -> list[torch.Tensor]:
        return [self.A, self.B]


@dataclass
class AdaptedModel:
    base: ModelCheckpoint
    adapters: dict[str, LowRankAdapter]

    def forward(self, tokens, **kw):
        return forward(self.base, tokens, adapters=self.adapters, **kw)

    def parameters(self) -> list[torch.Tensor]:
        return [p for name in sorted(self.adapters) for p in self.adapters[name].parameters()]

    def merge(self) -> ModelCheckpoint:
        weights = dict(self.base.linear_layers())
        updates = {}
        for name, ad in self.adapters.items():
            w = weights[name]
            updates[name] = (w + ad.delta().to(w.dtype)).detach().clone()
        return self.base.with_tensors(updates)


def _target_names(model: ModelCheckpoint, targets: Sequence[str]) -> list[str]:
    names = []
    for name, _ in model.linear_layers():
        short = name.rsplit(".", 1)[-1] if name.startswith("blocks.") else name
        if short in targets:
            names.append(name)
    return names


def attach_adapters(model: ModelCheckpoint, cfg: AdapterConfig) -> AdaptedModel:
    """Attach zero-initialized (B = 0) adapters to the configured layers."""
    weights = dict(model.linear_layers())
    g = torch.Generator().manual_seed(cfg.seed)
    adapters = {}
    for name in _target_names(model, cfg.targets):
        w = weights[name]
        if isinstance(w, QuantizedTensor):
            raise AdapterError(f"{name} is quantized; adapters require a float backbone (prune -> SFT -> quantize)")
        out_dim, in_dim = w.shape
        bound = 1.0 / math.sqrt(in_dim)
        A = ((torch.rand(cfg.rank, in_dim, generator=g) * 2 - 1) * bound).to(w.dtype)
        B = torch.zeros(out_dim, cfg.rank, dtype=w.dtype)
        adapters[name] = LowRankAdapter(A.requires_grad_(), B.requires_grad_(), cfg.scaling)
    return AdaptedModel(model, adapters)


def next_token_loss(model: ModelCheckpoint, batch: torch.Tensor, adapters=None) -> torch.Tensor:
    """Mean next-token cross-entropy over non-pad targets of a padded batch."""
    if batch.dim() == 1:
        batch = batch[None, :]
    inputs, targets = batch[:, :-1], batch[:, 1:]
    logits = forward(model, inputs, adapters=adapters)
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), targets.reshape(-1), ignore_index=tokenizer.PAD)


@dataclass
class LogEntry:
    step: int
    loss: float
    lr: float


class AdapterTrainer:
    """Holds the optimizer state for one adapted model.

    The update rule is Adam without first-moment momentum (beta1 = 0).
    """

    def __init__(self, adapted: AdaptedModel, lr: float):
        self.adapted = adapted
        self.lr = lr
        self.step_count = 0
        self.optimizer = torch.optim.Adam(adapted.parameters(), lr=lr, betas=(0.0, 0.999), eps=1e-8)

    def train_step(self, batch) -> float:
        batch = torch.as_tensor(batch, dtype=torch.long) if not isinstance(batch, torch.Tensor) else batch
        if batch.numel() == 0:
            raise ShrinkError("empty batch")
        self.optimizer.zero_grad(set_to_none=True)
        loss = next_token_loss(self.adapted.base, batch, self.adapted.adapters)
        value = float(loss.detach())
        if not math.isfinite(value):
            raise DivergedError(self.step_count, value, f"lr={self.lr}, batch shape={tuple(batch.shape)}")
        loss.backward()
        self.optimizer.step()
        self.step_count += 1
        return value


def _batches(seqs: list[list[int]], batch_size: int, steps: int, seed: int):
    g = torch.Generator().manual_seed(seed)
    order: list[int] = []
    for _ in range(steps):
        if len(order) < batch_size:
            order.extend(torch.randperm(len(seqs), generator=g).tolist())
        take, order = order[:batch_size], order[batch_size:]
        yield pad_batch([seqs[i] for i in take])


@dataclass
class FinetuneResult:
    model: ModelCheckpoint
    log: list[LogEntry] = field(default_factory=list)


def finetune(model: ModelCheckpoint, corpus: Sequence[str], cfg: AdapterConfig) -> FinetuneResult:
    """Train adapters for ``cfg.steps`` steps and return the merged model."""
    if not corpus:
        raise ShrinkError("fine-tuning corpus is empty")
    if cfg.steps == 0:
        return FinetuneResult(model, [])
    seqs = encode_lines(corpus, model.config.max_seq_len)
    adapted = attach_adapters(model, cfg)
    trainer = AdapterTrainer(adapted, cfg.lr)
    log = []
    for step, batch in enumerate(_batches(seqs, cfg.batch_size, cfg.steps, cfg.seed)):
        loss = trainer.train_step(batch)
        log.append(LogEntry(step, loss, cfg.lr))
    return FinetuneResult(adapted.merge(), log)


@dataclass(frozen=True)
class PretrainConfig:
    steps: int = 1000
    batch_size: int = 32
    lr: float = 3e-3
    warmup: int = 50
    weight_decay: float = 0.01
    layer_drop: float = 0.0
    seed: int = 0


def pretrain(model: ModelCheckpoint, corpus: Sequence[str], cfg: PretrainConfig) -> FinetuneResult:
    """Full-parameter next-token training (AdamW, warmup + cosine decay).

    With ``layer_drop > 0`` every unprotected block is skipped independently
    with that probability at each step, which spreads computation across
    depth so that later block removal degrades the model gradually.
    """
    if not corpus:
        raise ShrinkError("pretraining corpus is empty")
    params = {n: t.detach().clone().requires_grad_() for n, t in model.named_tensors()}
    live = model.with_tensors(params)
    opt = torch.optim.AdamW(list(params.values()), lr=cfg.lr, weight_decay=cfg.weight_decay)
    seqs = encode_lines(corpus, model.config.max_seq_len)
    protected = default_protected(model)
    droppable = [b for b in model.block_ids if b not in protected]
    drop_rng = torch.Generator().manual_seed(cfg.seed + 1)
    log = []
    for step, batch in enumerate(_batches(seqs, cfg.batch_size, cfg.steps, cfg.seed)):
        net = live
        if cfg.layer_drop > 0:
            mask = torch.rand(len(droppable), generator=drop_rng) < cfg.layer_drop
            skip = [b for b, m in zip(droppable, mask.tolist()) if m]
            if skip:
                net = remove_blocks(live, skip)
        if step < cfg.warmup:
            lr = cfg.lr * (step + 1) / cfg.warmup
        else:
            frac = (step - cfg.warmup) / max(1, cfg.steps - cfg.warmup)
            lr = cfg.lr * (0.1 + 0.9 * 0.5 * (1 + math.cos(math.pi * frac)))
        for group in opt.param_groups:
            group["lr"] = lr
        opt.zero_grad(set_to_none=True)
        loss = next_token_loss(net, batch)
        value = float(loss.detach())
        if not math.isfinite(value):
            raise DivergedError(step, value, f"lr={lr}")
        loss.backward()
        torch.nn.utils.clip_grad_norm_(list(params.values()), 1.0)
        opt.step()
        log.append(LogEntry(step, value, lr))
    final = model.with_tensors({n: t.detach().clone() for n, t in params.items()})
    return FinetuneResult(final, log)


def write_log(log: Sequence[LogEntry], path) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss", "lr"])
        for e in log:
            w.writerow([e.step, repr(e.loss), repr(e.lr)])


def read_log(path) -> list[LogEntry]:
    with open(Path(path), newline="") as fh:
        return [LogEntry(int(r["step"]), float(r["loss"]), float(r["lr"])) for r in csv.DictReader(fh)]
