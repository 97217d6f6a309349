"""Dense and group-quantized linear algebra primitives.

Matrices are plain 2-D ``torch.Tensor`` objects. Weights are stored
output-major: row ``i`` holds the weights of output channel ``i`` and a
linear layer computes ``y = x @ W.T``. Quantization groups run along each
row (the input dimension), so a per-input-channel scale ``s`` multiplies
columns.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import torch

from .errors import InvalidQuantizedTensor, NonFiniteError, ShapeError, UndefinedSimilarityError

SUPPORTED_BITS = (3, 4, 8)
DEFAULT_GROUP_SIZE = 64
RMS_EPS = 1e-5


def as_matrix(data, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    t = torch.as_tensor(data, dtype=dtype)
    if t.dim() != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {tuple(t.shape)}")
    check_finite(t)
    return t.contiguous()


def check_finite(t: torch.Tensor, what: str = "tensor") -> torch.Tensor:
    if t.is_floating_point() and not bool(torch.isfinite(t).all()):
        raise NonFiniteError(f"{what} contains NaN or Inf")
    return t


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.dim() != 2 or b.dim() != 2:
        raise ShapeError("matmul expects 2-D operands")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {tuple(a.shape)} by {tuple(b.shape)}")
    return check_finite(a @ b, "matmul output")


def softmax(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    z = x - x.amax(dim=dim, keepdim=True)
    e = torch.exp(z)
    return e / e.sum(dim=dim, keepdim=True)


def rms_norm(x: torch.Tensor, weight: torch.Tensor, eps: float = RMS_EPS) -> torch.Tensor:
    w = weight.to(x.dtype)
    return x * torch.rsqrt(x.pow(2).mean(dim=-1, keepdim=True) + eps) * w


def cosine_similarity(u, v) -> float:
    """Cosine of the angle between two vectors, computed in float64.

    Raises UndefinedSimilarityError when either vector has zero norm rather
    than inventing a value.
    """
    a = torch.as_tensor(u, dtype=torch.float64).reshape(-1)
    b = torch.as_tensor(v, dtype=torch.float64).reshape(-1)
    if a.numel() != b.numel():
        raise ShapeError(f"length mismatch: {a.numel()} vs {b.numel()}")
    na = float(torch.linalg.vector_norm(a))
    nb = float(torch.linalg.vector_norm(b))
    if na == 0.0 or nb == 0.0:
        raise UndefinedSimilarityError("cosine similarity of a zero-norm vector is undefined")
    c = float(a @ b) / (na * nb)
    return max(-1.0, min(1.0, c))


def round_half_away(x: torch.Tensor) -> torch.Tensor:
    return torch.sign(x) * torch.floor(torch.abs(x) + 0.5)


def code_range(bits: int) -> tuple[int, int]:
    half = 1 << (bits - 1)
    return -half, half - 1


def n_groups(cols: int, group_size: int) -> int:
    return math.ceil(cols / group_size)


@dataclass(frozen=True, eq=False)
class QuantizedTensor:
    """Symmetric group-quantized weight matrix.

    ``codes`` holds one signed integer per element (int8, unpacked in memory;
    packing happens at serialization). ``group_scales`` has shape
    ``(rows, ceil(cols / group_size))``. ``channel_scale`` is the optional
    per-input-channel activation-aware scale; the stored codes quantize
    ``W * channel_scale`` and dequantization divides it back out.
    """

    codes: torch.Tensor
    group_scales: torch.Tensor
    bit_width: int
    group_size: int = DEFAULT_GROUP_SIZE
    channel_scale: Optional[torch.Tensor] = None
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if self.bit_width not in SUPPORTED_BITS:
            raise InvalidQuantizedTensor(f"bit width must be one of {SUPPORTED_BITS}, got {self.bit_width}")
        if self.group_size < 1:
            raise InvalidQuantizedTensor("group_size must be >= 1")
        if self.codes.dim() != 2:
            raise InvalidQuantizedTensor("codes must be 2-D")
        if self.codes.is_floating_point() and not torch.equal(self.codes, torch.round(self.codes)):
            raise InvalidQuantizedTensor("codes must be integers")
        lo, hi = code_range(self.bit_width)
        if self.codes.numel() and (int(self.codes.min()) < lo or int(self.codes.max()) > hi):
            raise InvalidQuantizedTensor(f"codes outside [{lo}, {hi}] for {self.bit_width}-bit")
        codes = self.codes.to(torch.int8)
        rows, cols = codes.shape
        scales = self.group_scales.to(torch.float32)
        if tuple(scales.shape) != (rows, n_groups(cols, self.group_size)):
            raise InvalidQuantizedTensor(
                f"expected group_scales of shape {(rows, n_groups(cols, self.group_size))}, got {tuple(scales.shape)}"
            )
        if not bool(torch.isfinite(scales).all()) or bool((scales < 0).any()):
            raise InvalidQuantizedTensor("group scales must be finite and >= 0")
        object.__setattr__(self, "codes", codes.contiguous())
        object.__setattr__(self, "group_scales", scales.contiguous())
        if self.channel_scale is not None:
            cs = self.channel_scale.to(torch.float32).reshape(-1)
            if cs.numel() != cols:
                raise InvalidQuantizedTensor(f"channel_scale length {cs.numel()} != cols {cols}")
            if not bool(torch.isfinite(cs).all()) or bool((cs <= 0).any()):
                raise InvalidQuantizedTensor("channel_scale entries must be finite and > 0")
            object.__setattr__(self, "channel_scale", cs.contiguous())

    @property
    def rows(self) -> int:
        return self.codes.shape[0]

    @property
    def cols(self) -> int:
        return self.codes.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)

    def numel(self) -> int:
        return self.rows * self.cols

    def element_scales(self) -> torch.Tensor:
        """Group scale broadcast to every element, shape (rows, cols)."""
        return self.group_scales.repeat_interleave(self.group_size, dim=1)[:, : self.cols]

    def scaled_weight(self) -> torch.Tensor:
        """codes * group scale, i.e. the quantized version of ``W * channel_scale``."""
        if "scaled" not in self._cache:
            self._cache["scaled"] = self.codes.to(torch.float32) * self.element_scales()
        return self._cache["scaled"]


def dequantize(q: QuantizedTensor) -> torch.Tensor:
    w = q.scaled_weight()
    if q.channel_scale is not None:
        w = w / q.channel_scale
    return w


def quantized_matmul(x: torch.Tensor, q: QuantizedTensor) -> torch.Tensor:
    """``x @ dequantize(q).T`` with the channel scale folded into ``x``.

    Accepts any leading batch dimensions on ``x``.
    """
    if x.shape[-1] != q.cols:
        raise ShapeError(f"input width {x.shape[-1]} does not match weight cols {q.cols}")
    w = q.scaled_weight().to(x.dtype)
    if q.channel_scale is not None:
        x = x / q.channel_scale.to(x.dtype)
    return x @ w.T


def pack_codes(codes: torch.Tensor, bits: int) -> bytes:
    """Row-major byte packing: two 4-bit codes per byte (low nibble first),
    3- and 8-bit codes one per byte."""
    flat = codes.reshape(-1).to(torch.int16)
    if bits == 4:
        nib = (flat & 0xF).to(torch.uint8)
        if nib.numel() % 2:
            nib = torch.cat([nib, torch.zeros(1, dtype=torch.uint8)])
        pairs = nib.reshape(-1, 2)
        packed = pairs[:, 0] | (pairs[:, 1] << 4)
        return packed.numpy().tobytes()
    return flat.to(torch.int8).numpy().tobytes()


def unpack_codes(buf: bytes, bits: int, rows: int, cols: int) -> torch.Tensor:
    n = rows * cols
    raw = torch.frombuffer(bytearray(buf), dtype=torch.uint8)
    if bits == 4:
        lo = (raw & 0xF).to(torch.int16)
        hi = (raw >> 4).to(torch.int16)
        vals = torch.stack([lo, hi], dim=1).reshape(-1)[:n]
        vals = torch.where(vals >= 8, vals - 16, vals)
        return vals.to(torch.int8).reshape(rows, cols)
    return raw.view(torch.int8)[:n].clone().reshape(rows, cols)


def packed_nbytes(bits: int, count: int) -> int:
    return (count + 1) // 2 if bits == 4 else count
