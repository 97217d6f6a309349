"""Versioned little-endian binary checkpoint format.

Layout::

    header     magic "SHRK" | u16 version | u16 reserved
               u32 x 6 config (vocab, d_model, n_layers, n_heads, d_ff, max_seq_len)
               u32 n_blocks | u32 block_id * n_blocks
               u32 n_tensors
    directory  per tensor: u16 name_len | name (utf-8) | u8 dtype tag | u8 ndim
               | u32 dim * ndim | u32 group_size | u8 has_channel_scale
               | u64 offset | u64 nbytes
    payloads   concatenated; offsets are relative to the start of this section
    trailer    u32 CRC32 of every preceding byte

Float payloads are raw f32/f16 values. Quantized payloads are packed codes,
then f32 group scales (rows x n_groups), then the f32 channel scale when
present.
"""

from __future__ import annotations

import io
import struct
import zlib
from pathlib import Path
from typing import Union

import numpy as np
import torch

from .errors import ChecksumError, CheckpointFormatError, TruncatedCheckpointError
from .model import ModelCheckpoint, ModelConfig, TransformerBlock
from .numeric import QuantizedTensor, n_groups, pack_codes, packed_nbytes, unpack_codes

MAGIC = b"SHRK"
VERSION = 1

F32, F16, Q3, Q4, Q8 = 0, 1, 3, 4, 8
_FLOAT_TAGS = {torch.float32: F32, torch.float16: F16}
_TAG_DTYPE = {F32: "<f4", F16: "<f2"}
_BLOCK_FIELDS = ("attn_norm", "q", "k", "v", "o", "mlp_norm", "up", "down")


def _float_payload(t: torch.Tensor) -> tuple[int, bytes]:
    if t.dtype not in _FLOAT_TAGS:
        t = t.to(torch.float32)
    tag = _FLOAT_TAGS[t.dtype]
    return tag, t.detach().contiguous().numpy().astype(_TAG_DTYPE[tag]).tobytes()


def _quant_payload(q: QuantizedTensor) -> bytes:
    parts = [pack_codes(q.codes, q.bit_width), q.group_scales.numpy().astype("<f4").tobytes()]
    if q.channel_scale is not None:
        parts.append(q.channel_scale.numpy().astype("<f4").tobytes())
    return b"".join(parts)


def dumps(model: ModelCheckpoint) -> bytes:
    cfg = model.config
    head = io.BytesIO()
    head.write(MAGIC)
    head.write(struct.pack("<HH", VERSION, 0))
    head.write(struct.pack("<6I", cfg.vocab_size, cfg.d_model, cfg.n_layers, cfg.n_heads, cfg.d_ff, cfg.max_seq_len))
    head.write(struct.pack("<I", len(model.block_ids)))
    head.write(struct.pack(f"<{len(model.block_ids)}I", *model.block_ids))
    tensors = list(model.named_tensors())
    head.write(struct.pack("<I", len(tensors)))

    payload = io.BytesIO()
    for name, t in tensors:
        offset = payload.tell()
        if isinstance(t, QuantizedTensor):
            tag, dims, gs, has_cs = t.bit_width, t.shape, t.group_size, t.channel_scale is not None
            blob = _quant_payload(t)
        else:
            tag, blob = _float_payload(t)
            dims, gs, has_cs = tuple(t.shape), 0, False
        payload.write(blob)
        raw = name.encode("utf-8")
        head.write(struct.pack("<H", len(raw)))
        head.write(raw)
        head.write(struct.pack("<BB", tag, len(dims)))
        head.write(struct.pack(f"<{len(dims)}I", *dims))
        head.write(struct.pack("<IBQQ", gs, int(has_cs), offset, len(blob)))
    body = head.getvalue() + payload.getvalue()
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def save(model: ModelCheckpoint, path: Union[str, Path]) -> int:
    """Write ``model`` to ``path``; returns the number of bytes written."""
    data = dumps(model)
    Path(path).write_bytes(data)
    return len(data)


def serialized_size(model: ModelCheckpoint) -> int:
    return len(dumps(model))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedCheckpointError("checkpoint ends unexpectedly")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _parse_directory(data: bytes):
    r = _Reader(data)
    r.take(8)
    cfg_vals = r.unpack("<6I")
    (nb,) = r.unpack("<I")
    block_ids = r.unpack(f"<{nb}I")
    (nt,) = r.unpack("<I")
    entries = []
    for _ in range(nt):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8", errors="replace")
        tag, ndim = r.unpack("<BB")
        dims = r.unpack(f"<{ndim}I")
        gs, has_cs, offset, nbytes = r.unpack("<IBQQ")
        entries.append((name, tag, dims, gs, bool(has_cs), offset, nbytes))
    return cfg_vals, block_ids, entries, r.pos


def loads(data: bytes) -> ModelCheckpoint:
    if len(data) < 8:
        raise TruncatedCheckpointError("file too short to be a checkpoint")
    if data[:4] != MAGIC:
        raise CheckpointFormatError(f"bad magic {data[:4]!r}")
    (version,) = struct.unpack("<H", data[4:6])
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    try:
        cfg_vals, block_ids, entries, base = _parse_directory(data)
    except TruncatedCheckpointError:
        parsed = False
    else:
        parsed = True
        end = base + max((e[5] + e[6] for e in entries), default=0)
        if len(data) < end + 4:
            raise TruncatedCheckpointError(f"checkpoint is {len(data)} bytes, directory requires {end + 4}")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        if not parsed:
            raise TruncatedCheckpointError("checkpoint ends inside its directory")
        raise ChecksumError("CRC32 mismatch; checkpoint is corrupt")
    if not parsed or len(data) != end + 4:
        raise CheckpointFormatError("directory does not match file length")
    cfg = ModelConfig(*cfg_vals)

    tensors = {}
    for name, tag, dims, gs, has_cs, offset, nbytes in entries:
        start = base + offset
        blob = body[start : start + nbytes]
        if tag in _TAG_DTYPE:
            arr = np.frombuffer(blob, dtype=_TAG_DTYPE[tag])
            tensors[name] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="))).reshape(dims)
        elif tag in (Q3, Q4, Q8):
            rows, cols = dims
            ncode = packed_nbytes(tag, rows * cols)
            nscale = rows * n_groups(cols, gs) * 4
            expected = ncode + nscale + (cols * 4 if has_cs else 0)
            if nbytes != expected:
                raise CheckpointFormatError(f"{name}: payload is {nbytes} bytes, expected {expected}")
            codes = unpack_codes(blob[:ncode], tag, rows, cols)
            scales = np.frombuffer(blob[ncode : ncode + nscale], dtype="<f4").astype(np.float32)
            cs = None
            if has_cs:
                cs = torch.from_numpy(np.frombuffer(blob[ncode + nscale :], dtype="<f4").astype(np.float32).copy())
            tensors[name] = QuantizedTensor(
                codes, torch.from_numpy(scales.copy()).reshape(rows, -1), tag, gs, cs
            )
        else:
            raise CheckpointFormatError(f"{name}: unknown dtype tag {tag}")

    try:
        blocks = tuple(
            TransformerBlock(**{f: tensors[f"blocks.{i}.{f}"] for f in _BLOCK_FIELDS}) for i in range(cfg.n_layers)
        )
        return ModelCheckpoint(cfg, tensors["token_embedding"], blocks, tensors["lm_head"], tuple(block_ids))
    except KeyError as exc:
        raise CheckpointFormatError(f"missing tensor {exc}") from None


def load(path: Union[str, Path]) -> ModelCheckpoint:
    return loads(Path(path).read_bytes())
