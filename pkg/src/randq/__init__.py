"""randq: quantization-aware training with norm-decayed noise scales,
compared against STE and learnable-scale baselines on a toy seq2seq task."""

from .autodiff import Tensor, backward
from .qat import QatConfig, qat_linear
from .quant import QuantSpec, compute_scale, dequantize, fake_quant, quantize

__all__ = [
    "Tensor", "backward",
    "QatConfig", "qat_linear",
    "QuantSpec", "compute_scale", "fake_quant", "quantize", "dequantize",
]

__version__ = "0.1.0"
