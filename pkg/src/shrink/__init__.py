"""Depth pruning, low-rank recovery fine-tuning and group quantization for small decoder-only transformers."""

from .checkpoint import load, save
from .errors import ShrinkError
from .model import ModelCheckpoint, ModelConfig, forward, generate, init_model
from .numeric import QuantizedTensor, dequantize, quantized_matmul

__all__ = [
    "ModelCheckpoint",
    "ModelConfig",
    "QuantizedTensor",
    "ShrinkError",
    "dequantize",
    "forward",
    "generate",
    "init_model",
    "load",
    "quantized_matmul",
    "save",
]
__version__ = "0.1.0"
