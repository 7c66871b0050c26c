"""Dog-posture CNN classifier, quantization, attribution and treat-dispenser control."""

from .errors import TreatNetError
from .graph import CLASS_NAMES, ModelGraph, build_convnet, fold_batchnorm, forward, flop_count, param_count
from .quantize import QuantScheme, QuantizedModel, deserialize, quantize, quantized_forward, serialize

__version__ = "0.1.0"

__all__ = [
    "CLASS_NAMES",
    "ModelGraph",
    "QuantScheme",
    "QuantizedModel",
    "TreatNetError",
    "build_convnet",
    "deserialize",
    "flop_count",
    "fold_batchnorm",
    "forward",
    "param_count",
    "quantize",
    "quantized_forward",
    "serialize",
]
