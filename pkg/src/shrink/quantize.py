"""Round-to-nearest group quantization and activation-aware scale search.

RTN uses a symmetric absmax scale per group, ``delta = max|w| / 2**(N-1)``,
rounds half away from zero and clamps codes to ``[-2**(N-1), 2**(N-1) - 1]``.

AWQ scales input channel ``j`` of a weight by ``s_j = s_X[j] ** alpha``,
quantizes ``W * s`` with RTN and folds ``1 / s`` into the input at matmul
time. ``alpha`` is chosen from a uniform grid on [0, 1] by minimizing the
Frobenius norm of the output error on calibration inputs.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence, Union

import numpy as np
import torch

from .calibration import ActivationStats, CalibrationSet, collect_activation_stats, collect_layer_inputs
from .errors import QuantizationError
from .model import ModelCheckpoint
from .numeric import DEFAULT_GROUP_SIZE, SUPPORTED_BITS, QuantizedTensor, code_range, n_groups, round_half_away

RTN = "rtn"
AWQ = "awq"
# losses this close (relative) to the minimum count as ties and go to the lowest alpha
TIE_RTOL = 1e-6


@dataclass(frozen=True)
class QuantConfig:
    bit_width: int = 4
    group_size: int = DEFAULT_GROUP_SIZE
    alpha_grid: int = 20
    method: str = AWQ
    max_calib_tokens: int = 2048
    seed: int = 0

    def __post_init__(self):
        if self.bit_width not in SUPPORTED_BITS:
            raise QuantizationError(f"bit_width must be one of {SUPPORTED_BITS}")
        if self.group_size < 1:
            raise QuantizationError("group_size must be >= 1")
        if self.method not in (RTN, AWQ):
            raise QuantizationError(f"unknown method {self.method!r}")
        if self.method == AWQ and self.alpha_grid < 2:
            raise QuantizationError("AWQ needs at least two grid points")

    def alphas(self) -> list[float]:
        return [float(a) for a in np.linspace(0.0, 1.0, self.alpha_grid)]


def quantize_rtn(
    w: torch.Tensor,
    bit_width: int = 4,
    group_size: int = DEFAULT_GROUP_SIZE,
    channel_scale: Optional[torch.Tensor] = None,
) -> QuantizedTensor:
    """Group-wise symmetric RTN of ``w`` (or of ``w * channel_scale`` when given)."""
    w = torch.as_tensor(w, dtype=torch.float32)
    if w.dim() != 2:
        raise QuantizationError("expected a 2-D weight matrix")
    if not bool(torch.isfinite(w).all()):
        raise QuantizationError("weights must be finite")
    if channel_scale is not None:
        channel_scale = torch.as_tensor(channel_scale, dtype=torch.float32).reshape(-1)
        if bool((channel_scale <= 0).any()):
            raise QuantizationError("channel scale entries must be > 0")
        w = w * channel_scale
    rows, cols = w.shape
    ng = n_groups(cols, group_size)
    padded = torch.zeros(rows, ng * group_size, dtype=torch.float32)
    padded[:, :cols] = w
    groups = padded.view(rows, ng, group_size)
    scales = groups.abs().amax(dim=-1) / float(1 << (bit_width - 1))
    safe = torch.where(scales > 0, scales, torch.ones_like(scales))
    lo, hi = code_range(bit_width)
    codes = round_half_away(groups.double() / safe.double()[..., None]).clamp(lo, hi)
    codes = codes.view(rows, -1)[:, :cols].to(torch.int8)
    return QuantizedTensor(codes, scales, bit_width, group_size, channel_scale)


def _cfg_bits(cfg: Union[QuantConfig, None]) -> tuple[int, int]:
    cfg = cfg or QuantConfig()
    return cfg.bit_width, cfg.group_size


def awq_loss(w: torch.Tensor, x_cal: torch.Tensor, s: torch.Tensor, cfg: Optional[QuantConfig] = None) -> float:
    """``|| Q(W diag(s)) (diag(s)^-1 X) - W X ||_F`` in the row-vector layout.

    ``x_cal`` is ``(tokens, in_features)``; products are accumulated in
    float64 so the value reflects quantization error, not matmul rounding.
    """
    bits, gs = _cfg_bits(cfg)
    s = torch.as_tensor(s, dtype=torch.float32).reshape(-1)
    if bool((s <= 0).any()) or not bool(torch.isfinite(s).all()):
        raise QuantizationError("scale vector must be finite and > 0")
    q = quantize_rtn(w, bits, gs, channel_scale=s)
    x = torch.as_tensor(x_cal).double()
    ref = x @ torch.as_tensor(w).double().T
    approx = (x / s.double()) @ q.scaled_weight().double().T
    return float(torch.linalg.matrix_norm(approx - ref))


@dataclass
class AwqSearchResult:
    layer: str
    best_alpha: float
    loss_curve: dict[float, float]
    rtn_loss: float

    @property
    def best_loss(self) -> float:
        return self.loss_curve[self.best_alpha]

    def to_dict(self) -> dict:
        return {
            "layer": self.layer,
            "best_alpha": self.best_alpha,
            "rtn_loss": self.rtn_loss,
            "best_loss": self.best_loss,
            "loss_curve": [[a, l] for a, l in self.loss_curve.items()],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AwqSearchResult":
        return cls(d["layer"], d["best_alpha"], {a: l for a, l in d["loss_curve"]}, d["rtn_loss"])


def channel_scale_for(stats_vec: torch.Tensor, alpha: float) -> torch.Tensor:
    return torch.as_tensor(stats_vec, dtype=torch.float64).pow(alpha).to(torch.float32)


def awq_search(
    w: torch.Tensor,
    s_x: torch.Tensor,
    x_cal: torch.Tensor,
    cfg: Optional[QuantConfig] = None,
    layer: str = "",
) -> AwqSearchResult:
    """Grid search over ``alpha``; ties go to the smallest alpha.

    Losses within ``TIE_RTOL`` of the minimum are treated as ties, so a flat
    curve with float-rounding wobble still resolves to ``alpha = 0``. The
    chosen loss never exceeds the loss at ``alpha = 0``.
    """
    cfg = cfg or QuantConfig()
    if s_x is None:
        raise QuantizationError(f"no activation statistics for layer {layer!r}")
    s_x = torch.as_tensor(s_x, dtype=torch.float32).reshape(-1)
    if s_x.numel() != w.shape[1]:
        raise QuantizationError(f"{layer}: stats length {s_x.numel()} != in_features {w.shape[1]}")
    if bool((s_x <= 0).any()):
        raise QuantizationError(f"{layer}: activation statistics must be strictly positive")
    curve = {alpha: awq_loss(w, x_cal, channel_scale_for(s_x, alpha), cfg) for alpha in cfg.alphas()}
    floor = min(curve.values())
    best_alpha = next(a for a, loss in curve.items() if loss <= floor * (1 + TIE_RTOL))
    return AwqSearchResult(layer, best_alpha, curve, curve[0.0])


def quantize_model(
    model: ModelCheckpoint,
    cfg: QuantConfig,
    stats: Optional[ActivationStats] = None,
    layer_inputs: Optional[Mapping[str, torch.Tensor]] = None,
) -> tuple[ModelCheckpoint, list[AwqSearchResult]]:
    """Quantize every block projection and the LM head.

    The token embedding and normalization vectors are kept in 16-bit float.
    With ``method='awq'`` both ``stats`` and ``layer_inputs`` must cover every
    linear layer.
    """
    if model.is_quantized:
        raise QuantizationError("model is already quantized")
    updates: dict = {}
    results: list[AwqSearchResult] = []
    for name, w in model.linear_layers():
        if cfg.method == RTN:
            updates[name] = quantize_rtn(w, cfg.bit_width, cfg.group_size)
            continue
        if stats is None or layer_inputs is None:
            raise QuantizationError("AWQ requires activation statistics and calibration inputs")
        if name not in stats.channel_means or name not in layer_inputs:
            raise QuantizationError(f"no calibration data recorded for layer {name!r}")
        s_x = stats.floored().channel_means[name]
        res = awq_search(w, s_x, layer_inputs[name], cfg, layer=name)
        results.append(res)
        updates[name] = quantize_rtn(w, cfg.bit_width, cfg.group_size, channel_scale_for(s_x, res.best_alpha))
    updates["token_embedding"] = model.token_embedding.to(torch.float16)
    for i, blk in enumerate(model.blocks):
        updates[f"blocks.{i}.attn_norm"] = blk.attn_norm.to(torch.float16)
        updates[f"blocks.{i}.mlp_norm"] = blk.mlp_norm.to(torch.float16)
    return model.with_tensors(updates), results


def calibrate_and_quantize(
    model: ModelCheckpoint, cal: CalibrationSet, cfg: QuantConfig
) -> tuple[ModelCheckpoint, list[AwqSearchResult]]:
    """Collect statistics and capped calibration inputs, then quantize."""
    if cfg.method == RTN:
        return quantize_model(model, cfg)
    stats = collect_activation_stats(model, cal)
    inputs = collect_layer_inputs(model, cal, max_tokens=cfg.max_calib_tokens, seed=cfg.seed)
    return quantize_model(model, cfg, stats, inputs)


def export_results(results: Sequence[AwqSearchResult], path) -> None:
    Path(path).write_text(json.dumps([r.to_dict() for r in results], indent=1))


def load_results(path) -> list[AwqSearchResult]:
    return [AwqSearchResult.from_dict(d) for d in json.loads(Path(path).read_text())]
