"""Corpus files and the bundled synthetic question/answer corpus.

Corpora are newline-delimited UTF-8 text, one example per line. The
synthetic generator draws a small fact table (condition -> attributes) from a
seed and renders it through a handful of conversation templates, so a toy
model has something concrete to learn, forget under pruning and relearn.
"""

from __future__ import annotations

import random
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import torch

from . import tokenizer
from .errors import CalibrationError


def read_corpus(path) -> list[str]:
    text = Path(path).read_text(encoding="utf-8")
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise CalibrationError(f"corpus {path} is empty")
    return lines


def write_corpus(path, lines: Iterable[str]) -> None:
    Path(path).write_text("".join(f"{ln}\n" for ln in lines), encoding="utf-8")


def encode_lines(lines: Sequence[str], max_len: int) -> list[list[int]]:
    """BOS + line + EOS, truncated to ``max_len`` tokens."""
    return [tokenizer.encode(ln, bos=True, eos=True)[:max_len] for ln in lines]


def pad_batch(seqs: Sequence[Sequence[int]]) -> torch.Tensor:
    width = max(len(s) for s in seqs)
    out = torch.full((len(seqs), width), tokenizer.PAD, dtype=torch.long)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = torch.as_tensor(list(s), dtype=torch.long)
    return out


CONDITIONS = (
    "rosacea",
    "actinic keratosis",
    "basal cell carcinoma",
    "dermatitis",
    "melanoma",
    "psoriasis",
    "lichen planus",
    "seborrheic keratosis",
)

ATTRIBUTES = {
    "color": ("red", "pink", "brown", "black", "white", "purple", "yellow", "grey"),
    "site": ("face", "scalp", "hands", "back", "legs", "chest", "arms", "neck"),
    "texture": ("scaly", "smooth", "waxy", "rough", "flat", "raised", "crusted", "shiny"),
    "treatment": ("cream", "laser", "surgery", "pills", "light therapy", "freezing", "gel", "rest"),
}

QUESTIONS = {
    "color": ("What color is {c}?", "Which color does {c} have?"),
    "site": ("Where does {c} appear?", "Where is {c} usually found?"),
    "texture": ("How does {c} feel?", "What is the texture of {c}?"),
    "treatment": ("How is {c} treated?", "What is the treatment for {c}?"),
}

ANSWERS = {
    "color": "{C} is usually {v}.",
    "site": "{C} appears on the {v}.",
    "texture": "{C} feels {v}.",
    "treatment": "{C} is treated with {v}.",
}


@dataclass(frozen=True)
class SyntheticCorpus:
    train: list[str]
    heldout: list[str]
    calibration: list[str]
    prompts: list[str]
    facts: dict

    def write(self, directory) -> dict[str, Path]:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        paths = {}
        for name in ("train", "heldout", "calibration", "prompts"):
            paths[name] = d / f"{name}.txt"
            write_corpus(paths[name], getattr(self, name))
        return paths


def question(cond: str, attr: str, variant: int) -> str:
    return f"Human: {QUESTIONS[attr][variant].format(c=cond)} Response:"


def answer(cond: str, attr: str, value: str) -> str:
    return " " + ANSWERS[attr].format(C=cond[0].upper() + cond[1:], v=value)


def make_synthetic_corpus(
    seed: int = 0,
    n_train: int = 4000,
    n_heldout: int = 200,
    n_calibration: int = 200,
    n_prompts: int = 32,
) -> SyntheticCorpus:
    rng = random.Random(seed)
    facts = {}
    for attr, pool in ATTRIBUTES.items():
        values = list(pool)
        rng.shuffle(values)
        for cond, val in zip(CONDITIONS, values):
            facts.setdefault(cond, {})[attr] = val
    pairs = [(c, a, v) for c in CONDITIONS for a in ATTRIBUTES for v in range(2)]

    def qa(c, a, v):
        return question(c, a, v) + answer(c, a, facts[c][a])

    def sample_lines(n):
        return [qa(*rng.choice(pairs)) for _ in range(n)]

    train = sample_lines(n_train)
    heldout = sample_lines(n_heldout)
    calibration = [question(*rng.choice(pairs)) for _ in range(n_calibration)]
    order = pairs[:]
    rng.shuffle(order)
    prompts = [question(*p) for p in order[:n_prompts]]
    return SyntheticCorpus(train, heldout, calibration, prompts, facts)
