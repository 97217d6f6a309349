"""Calibration-set sampling and per-channel activation statistics."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
import torch

from . import tokenizer
from .errors import CalibrationError
from .model import ModelCheckpoint, forward

DEFAULT_SAMPLES = 32
DEFAULT_MAX_LEN = 128


@dataclass(frozen=True)
class CalibrationSet:
    samples: tuple[tuple[int, ...], ...]
    seed: int
    source: str = ""

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(tuple(int(t) for t in s) for s in self.samples))
        if not self.samples:
            raise CalibrationError("calibration set is empty")
        if any(len(s) == 0 for s in self.samples):
            raise CalibrationError("calibration sequences must be non-empty")

    def __len__(self) -> int:
        return len(self.samples)


def build_calibration_set(
    corpus: Sequence[str],
    n: int = DEFAULT_SAMPLES,
    max_len: int = DEFAULT_MAX_LEN,
    seed: int = 0,
    replace: bool = False,
    source: str = "",
) -> CalibrationSet:
    """Draw ``n`` lines uniformly (seeded) and tokenize them with a leading BOS."""
    if not corpus:
        raise CalibrationError("corpus is empty")
    if n < 1:
        raise CalibrationError("n must be >= 1")
    if n > len(corpus) and not replace:
        raise CalibrationError(f"cannot draw {n} samples without replacement from {len(corpus)} lines")
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(corpus), size=n, replace=replace)
    samples = [tokenizer.encode(corpus[i], bos=True)[:max_len] for i in idx]
    return CalibrationSet(tuple(tuple(s) for s in samples), seed, source)


@dataclass
class StatsAccumulator:
    """Sum of absolute activations and token count per layer.

    ``merge`` is commutative and associative, so per-sample partial results
    can be combined in any order.
    """

    abs_sums: dict[str, torch.Tensor] = field(default_factory=dict)
    tokens: dict[str, int] = field(default_factory=dict)
    samples: int = 0

    def add(self, name: str, x: torch.Tensor) -> None:
        flat = x.detach().reshape(-1, x.shape[-1]).double()
        s = flat.abs().sum(dim=0)
        if name in self.abs_sums:
            self.abs_sums[name] = self.abs_sums[name] + s
            self.tokens[name] += flat.shape[0]
        else:
            self.abs_sums[name] = s
            self.tokens[name] = flat.shape[0]

    def merge(self, other: "StatsAccumulator") -> "StatsAccumulator":
        out = StatsAccumulator(dict(self.abs_sums), dict(self.tokens), self.samples + other.samples)
        for name, s in other.abs_sums.items():
            if name in out.abs_sums:
                out.abs_sums[name] = out.abs_sums[name] + s
                out.tokens[name] += other.tokens[name]
            else:
                out.abs_sums[name] = s
                out.tokens[name] = other.tokens[name]
        return out

    def finalize(self) -> "ActivationStats":
        means = {n: (s / self.tokens[n]).to(torch.float32) for n, s in self.abs_sums.items()}
        return ActivationStats(means, self.samples)


@dataclass(frozen=True)
class ActivationStats:
    """Per-input-channel mean |activation| for every linear layer."""

    channel_means: Mapping[str, torch.Tensor]
    sample_count: int

    def floored(self) -> "ActivationStats":
        """Replace dead (zero) channels by 1e-4 x the smallest positive entry of that layer."""
        out = {}
        for name, v in self.channel_means.items():
            pos = v[v > 0]
            if pos.numel() == v.numel():
                out[name] = v
                continue
            floor = float(pos.min()) * 1e-4 if pos.numel() else 1.0
            out[name] = torch.where(v > 0, v, torch.full_like(v, floor))
        return ActivationStats(out, self.sample_count)

    def to_dict(self) -> dict:
        return {
            "sample_count": self.sample_count,
            "layers": {n: [float(x) for x in v] for n, v in self.channel_means.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ActivationStats":
        return cls({n: torch.tensor(v, dtype=torch.float32) for n, v in d["layers"].items()}, d["sample_count"])


def _check_float(model: ModelCheckpoint) -> None:
    if model.is_quantized:
        raise CalibrationError("activation statistics must be collected on the float model")


@torch.no_grad()
def collect_activation_stats(model: ModelCheckpoint, cal: CalibrationSet) -> ActivationStats:
    _check_float(model)
    if len(cal) == 0:
        raise CalibrationError("calibration set is empty")
    total = StatsAccumulator()
    for sample in cal.samples:
        part = StatsAccumulator(samples=1)
        forward(model, list(sample), recorder=part.add)
        total = total.merge(part)
    return total.finalize()


@torch.no_grad()
def collect_layer_inputs(
    model: ModelCheckpoint, cal: CalibrationSet, max_tokens: int = 2048, seed: int = 0
) -> dict[str, torch.Tensor]:
    """Stack every linear layer's input rows over the calibration set.

    When more than ``max_tokens`` rows are recorded, a seeded subset of
    ``max_tokens`` rows (same token positions for every layer) is kept.
    """
    _check_float(model)
    rows: dict[str, list[torch.Tensor]] = {}

    def record(name, x):
        rows.setdefault(name, []).append(x.detach().reshape(-1, x.shape[-1]).clone())

    for sample in cal.samples:
        forward(model, list(sample), recorder=record)
    out = {n: torch.cat(parts) for n, parts in rows.items()}
    n_tok = next(iter(out.values())).shape[0]
    if n_tok > max_tokens:
        keep = torch.from_numpy(np.sort(np.random.default_rng(seed).choice(n_tok, max_tokens, replace=False)))
        out = {n: x[keep] for n, x in out.items()}
    return out


def export_stats(stats: ActivationStats, path) -> None:
    Path(path).write_text(json.dumps(stats.to_dict()))


def load_stats(path) -> ActivationStats:
    return ActivationStats.from_dict(json.loads(Path(path).read_text()))
