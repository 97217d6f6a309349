"""Minimal pre-norm decoder-only transformer over immutable checkpoints.

A checkpoint is a frozen dataclass of tensors; every operation that changes
structure returns a new checkpoint. Linear weights may be float tensors or
:class:`~shrink.numeric.QuantizedTensor`; :func:`linear` dispatches.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Iterator, Mapping, Optional, Sequence, Union

import torch
import torch.nn.functional as F

from . import tokenizer
from .errors import DegenerateModelError, ProtectedBlockError, ShapeError, TokenError
from .numeric import QuantizedTensor, dequantize, quantized_matmul, rms_norm

Weight = Union[torch.Tensor, QuantizedTensor]
Recorder = Callable[[str, torch.Tensor], None]

LINEAR_NAMES = ("q", "k", "v", "o", "up", "down")
NORM_NAMES = ("attn_norm", "mlp_norm")
ROPE_BASE = 10000.0


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = tokenizer.VOCAB_SIZE
    d_model: int = 64
    n_layers: int = 8
    n_heads: int = 4
    d_ff: int = 256
    max_seq_len: int = 128

    def __post_init__(self):
        for name in ("vocab_size", "d_model", "n_layers", "n_heads", "d_ff", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if (self.d_model // self.n_heads) % 2:
            raise ValueError("head dimension must be even for rotary embeddings")
        if self.n_layers < 3:
            raise ValueError("n_layers must be >= 3")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("vocab_size", "d_model", "n_layers", "n_heads", "d_ff", "max_seq_len")}


@dataclass(frozen=True)
class TransformerBlock:
    attn_norm: torch.Tensor
    q: Weight
    k: Weight
    v: Weight
    o: Weight
    mlp_norm: torch.Tensor
    up: Weight
    down: Weight

    def linears(self) -> Iterator[tuple[str, Weight]]:
        for name in LINEAR_NAMES:
            yield name, getattr(self, name)

    def tensors(self) -> Iterator[tuple[str, Weight]]:
        for name in ("attn_norm", "q", "k", "v", "o", "mlp_norm", "up", "down"):
            yield name, getattr(self, name)

    def n_params(self) -> int:
        return sum(_numel(t) for _, t in self.tensors())


@dataclass(frozen=True)
class ModelCheckpoint:
    config: ModelConfig
    token_embedding: torch.Tensor
    blocks: tuple[TransformerBlock, ...]
    lm_head: Weight
    block_ids: tuple[int, ...] = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(self.blocks))
        ids = tuple(int(i) for i in self.block_ids) or tuple(range(len(self.blocks)))
        object.__setattr__(self, "block_ids", ids)
        cfg = self.config
        if len(self.blocks) != cfg.n_layers:
            raise ShapeError(f"config says {cfg.n_layers} layers but {len(self.blocks)} blocks given")
        if len(ids) != len(self.blocks):
            raise ShapeError("block_ids length must match number of blocks")
        if any(b <= a for a, b in zip(ids, ids[1:])):
            raise ShapeError("block_ids must be strictly increasing")
        d, f, v = cfg.d_model, cfg.d_ff, cfg.vocab_size
        _expect(self.token_embedding, (v, d), "token_embedding")
        _expect(self.lm_head, (v, d), "lm_head")
        for i, blk in enumerate(self.blocks):
            for name in ("q", "k", "v", "o"):
                _expect(getattr(blk, name), (d, d), f"blocks.{i}.{name}")
            _expect(blk.up, (f, d), f"blocks.{i}.up")
            _expect(blk.down, (d, f), f"blocks.{i}.down")
            _expect(blk.attn_norm, (d,), f"blocks.{i}.attn_norm")
            _expect(blk.mlp_norm, (d,), f"blocks.{i}.mlp_norm")

    @property
    def is_quantized(self) -> bool:
        return any(isinstance(w, QuantizedTensor) for _, w in self.linear_layers())

    def linear_layers(self) -> Iterator[tuple[str, Weight]]:
        """All matmul weights in execution order, named ``blocks.{pos}.{proj}`` and ``lm_head``."""
        for i, blk in enumerate(self.blocks):
            for name, w in blk.linears():
                yield f"blocks.{i}.{name}", w
        yield "lm_head", self.lm_head

    def named_tensors(self) -> Iterator[tuple[str, Weight]]:
        yield "token_embedding", self.token_embedding
        for i, blk in enumerate(self.blocks):
            for name, t in blk.tensors():
                yield f"blocks.{i}.{name}", t
        yield "lm_head", self.lm_head

    def n_params(self) -> int:
        return sum(_numel(t) for _, t in self.named_tensors())

    def block_position(self, block_id: int) -> int:
        try:
            return self.block_ids.index(block_id)
        except ValueError:
            raise KeyError(f"block id {block_id} not present (surviving ids: {list(self.block_ids)})") from None

    def with_tensors(self, updates: Mapping[str, Weight]) -> "ModelCheckpoint":
        """Copy with some named tensors replaced (names as in :meth:`named_tensors`)."""
        emb = updates.get("token_embedding", self.token_embedding)
        head = updates.get("lm_head", self.lm_head)
        blocks = []
        for i, blk in enumerate(self.blocks):
            prefix = f"blocks.{i}."
            changes = {k[len(prefix):]: v for k, v in updates.items() if k.startswith(prefix)}
            blocks.append(replace(blk, **changes) if changes else blk)
        return ModelCheckpoint(self.config, emb, tuple(blocks), head, self.block_ids)

    def to_dtype(self, dtype: torch.dtype) -> "ModelCheckpoint":
        """Cast every float tensor; quantized layers are left as they are."""
        return self.with_tensors(
            {n: t.to(dtype) for n, t in self.named_tensors() if isinstance(t, torch.Tensor)}
        )

    def dequantized(self) -> "ModelCheckpoint":
        """Float twin: every quantized layer replaced by its dequantized matrix."""
        return self.with_tensors(
            {n: dequantize(w) for n, w in self.linear_layers() if isinstance(w, QuantizedTensor)}
        )


def _numel(t: Weight) -> int:
    return t.numel()


def _expect(t: Weight, shape: tuple, name: str) -> None:
    if tuple(t.shape) != tuple(shape):
        raise ShapeError(f"{name}: expected shape {tuple(shape)}, got {tuple(t.shape)}")


def init_model(config: ModelConfig, seed: int = 0) -> ModelCheckpoint:
    """Random initialization (std 0.02, residual projections scaled by depth)."""
    g = torch.Generator().manual_seed(seed)
    d, f = config.d_model, config.d_ff
    std = 0.02
    resid_std = std / math.sqrt(2 * config.n_layers)

    def normal(shape, s):
        return torch.randn(shape, generator=g) * s

    emb = normal((config.vocab_size, d), std)
    blocks = []
    for _ in range(config.n_layers):
        blocks.append(
            TransformerBlock(
                attn_norm=torch.ones(d),
                q=normal((d, d), std),
                k=normal((d, d), std),
                v=normal((d, d), std),
                o=normal((d, d), resid_std),
                mlp_norm=torch.ones(d),
                up=normal((f, d), std),
                down=normal((d, f), resid_std),
            )
        )
    head = normal((config.vocab_size, d), std)
    return ModelCheckpoint(config, emb, tuple(blocks), head)


def linear(x: torch.Tensor, w: Weight) -> torch.Tensor:
    if isinstance(w, QuantizedTensor):
        return quantized_matmul(x, w)
    return x @ w.to(x.dtype).T


def _rope_tables(seq_len: int, head_dim: int, dtype: torch.dtype):
    half = head_dim // 2
    inv_freq = 1.0 / (ROPE_BASE ** (torch.arange(half, dtype=torch.float64) / half))
    angles = torch.arange(seq_len, dtype=torch.float64)[:, None] * inv_freq[None, :]
    return angles.cos().to(dtype), angles.sin().to(dtype)


def _apply_rope(x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
    half = x.shape[-1] // 2
    x1, x2 = x[..., :half], x[..., half:]
    return torch.cat([x1 * cos - x2 * sin, x1 * sin + x2 * cos], dim=-1)


def _as_batch(model: ModelCheckpoint, tokens) -> tuple[torch.Tensor, bool]:
    t = torch.as_tensor(tokens, dtype=torch.long)
    single = t.dim() == 1
    if single:
        t = t[None, :]
    if t.dim() != 2:
        raise TokenError("tokens must be a sequence or a 2-D batch")
    if t.shape[1] == 0:
        raise TokenError("empty token sequence")
    if t.shape[1] > model.config.max_seq_len:
        raise TokenError(f"sequence length {t.shape[1]} exceeds max_seq_len {model.config.max_seq_len}")
    if int(t.min()) < 0 or int(t.max()) >= model.config.vocab_size:
        raise TokenError(f"token id outside [0, {model.config.vocab_size})")
    return t, single


def forward(
    model: ModelCheckpoint,
    tokens,
    capture: bool = False,
    adapters: Optional[Mapping[str, Callable[[torch.Tensor], torch.Tensor]]] = None,
    recorder: Optional[Recorder] = None,
    dtype: Optional[torch.dtype] = None,
):
    """Run the model on a token sequence (or a ``(batch, seq)`` tensor).

    Returns logits of shape ``(seq, vocab)`` (or ``(batch, seq, vocab)``).
    With ``capture=True`` also returns the residual stream before every block
    and after the last one: ``hidden[i]`` enters block position ``i`` and
    ``hidden[i + 1]`` leaves it.

    ``adapters`` maps linear-layer names to callables whose output is added to
    that layer's output. ``recorder(name, x)`` sees the input of every linear
    layer.
    """
    batch, single = _as_batch(model, tokens)
    cfg = model.config
    if dtype is None:
        dtype = model.token_embedding.dtype if model.token_embedding.dtype == torch.float64 else torch.float32
    h = model.token_embedding[batch].to(dtype)
    bsz, seq = batch.shape
    nh, hd = cfg.n_heads, cfg.head_dim
    cos, sin = _rope_tables(seq, hd, dtype)
    mask = torch.ones(seq, seq, dtype=torch.bool).triu(1)
    hidden = [h] if capture else None

    def lin(name: str, x: torch.Tensor, w: Weight) -> torch.Tensor:
        if recorder is not None:
            recorder(name, x)
        y = linear(x, w)
        if adapters is not None and name in adapters:
            y = y + adapters[name](x)
        return y

    for i, blk in enumerate(model.blocks):
        p = f"blocks.{i}."
        a = rms_norm(h, blk.attn_norm)
        q = lin(p + "q", a, blk.q).view(bsz, seq, nh, hd).transpose(1, 2)
        k = lin(p + "k", a, blk.k).view(bsz, seq, nh, hd).transpose(1, 2)
        v = lin(p + "v", a, blk.v).view(bsz, seq, nh, hd).transpose(1, 2)
        q = _apply_rope(q, cos, sin)
        k = _apply_rope(k, cos, sin)
        att = (q @ k.transpose(-1, -2)) / math.sqrt(hd)
        att = att.masked_fill(mask, float("-inf")).softmax(dim=-1)
        ctx = (att @ v).transpose(1, 2).reshape(bsz, seq, cfg.d_model)
        h = h + lin(p + "o", ctx, blk.o)
        m = rms_norm(h, blk.mlp_norm)
        h = h + lin(p + "down", F.gelu(lin(p + "up", m, blk.up)), blk.down)
        if capture:
            hidden.append(h)

    logits = lin("lm_head", h, model.lm_head)
    if single:
        logits = logits[0]
        if capture:
            hidden = [x[0] for x in hidden]
    return (logits, hidden) if capture else logits


@torch.no_grad()
def generate(
    model: ModelCheckpoint,
    prompt: Sequence[int],
    max_new: int,
    stop_at_eos: bool = True,
    eos_id: int = tokenizer.EOS,
) -> list[int]:
    """Greedy decoding. Returns prompt + generated tokens.

    When the running sequence outgrows ``max_seq_len`` only the most recent
    window is fed to the model.
    """
    out = generate_batch(model, [prompt], max_new, stop_at_eos=stop_at_eos, eos_id=eos_id)
    return out[0]


@torch.no_grad()
def generate_batch(
    model: ModelCheckpoint,
    prompts: Sequence[Sequence[int]],
    max_new: int,
    stop_at_eos: bool = True,
    eos_id: int = tokenizer.EOS,
) -> list[list[int]]:
    """Greedy decoding for many prompts; equal-length prompts share a batch."""
    if max_new < 0:
        raise ValueError("max_new must be >= 0")
    results: list[Optional[list[int]]] = [None] * len(prompts)
    by_len: dict[int, list[int]] = {}
    for idx, p in enumerate(prompts):
        if len(p) == 0:
            raise TokenError("prompt must be non-empty")
        by_len.setdefault(len(p), []).append(idx)
    window = model.config.max_seq_len
    for length in sorted(by_len):
        idxs = by_len[length]
        seqs = torch.tensor([list(prompts[i]) for i in idxs], dtype=torch.long)
        done = torch.zeros(len(idxs), dtype=torch.bool)
        for _ in range(max_new):
            logits = forward(model, seqs[:, -window:])
            nxt = logits[:, -1, :].argmax(dim=-1)
            seqs = torch.cat([seqs, nxt[:, None]], dim=1)
            if stop_at_eos:
                done |= nxt == eos_id
                if bool(done.all()):
                    break
        for row, i in enumerate(idxs):
            toks = seqs[row].tolist()
            if stop_at_eos:
                gen = toks[length:]
                if eos_id in gen:
                    toks = toks[: length + gen.index(eos_id) + 1]
            results[i] = toks
    return results  # type: ignore[return-value]


def default_protected(model: ModelCheckpoint) -> frozenset[int]:
    """First two and last surviving blocks, as block ids."""
    ids = model.block_ids
    return frozenset({ids[0], ids[1], ids[-1]})


def remove_blocks(
    model: ModelCheckpoint,
    block_ids: Iterable[int],
    protected: Optional[Iterable[int]] = None,
) -> ModelCheckpoint:
    """Return a copy without the given blocks (identified by original block id)."""
    drop = set(int(b) for b in block_ids)
    if not drop:
        return model
    missing = drop - set(model.block_ids)
    if missing:
        raise KeyError(f"block ids {sorted(missing)} not present in model")
    guard = default_protected(model) if protected is None else frozenset(protected)
    hit = drop & guard
    if hit:
        raise ProtectedBlockError(f"blocks {sorted(hit)} are protected from pruning")
    keep = [(bid, blk) for bid, blk in zip(model.block_ids, model.blocks) if bid not in drop]
    if len(keep) < 3:
        raise DegenerateModelError(f"only {len(keep)} blocks would remain; at least three are required")
    cfg = replace(model.config, n_layers=len(keep))
    return ModelCheckpoint(
        cfg,
        model.token_embedding,
        tuple(b for _, b in keep),
        model.lm_head,
        tuple(bid for bid, _ in keep),
    )
