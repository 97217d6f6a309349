"""Byte-level tokenizer: ids 0..255 are raw UTF-8 bytes, then three specials."""

from __future__ import annotations

from .errors import TokenError

BOS = 256
EOS = 257
PAD = 258
VOCAB_SIZE = 259


def encode(text: str, bos: bool = True, eos: bool = False) -> list[int]:
    ids = list(text.encode("utf-8"))
    if bos:
        ids.insert(0, BOS)
    if eos:
        ids.append(EOS)
    return ids


def decode(ids) -> str:
    """Bytes back to text; EOS renders as ``<eos>``, BOS and PAD are dropped."""
    out = bytearray()
    for i in ids:
        i = int(i)
        if not 0 <= i < VOCAB_SIZE:
            raise TokenError(f"token id {i} outside the vocabulary")
        if i == EOS:
            out.extend(b"<eos>")
        elif i < 256:
            out.append(i)
    return out.decode("utf-8", errors="replace")
