"""Integer-only inference kernels for a quantized transformer block."""

from .block import CalibratedBlock, IntegerBlock, calibrate, int_forward
from .fsbr import (
    ReconstructionConfig,
    Site,
    SmoothingVector,
    apply_smoothing,
    fold_parallel_linear_linear,
    fold_serial_linear_linear,
    fold_serial_linear_norm,
    fold_swiglu_nonlinear,
    fsbr_reconstruct,
)
from .intmath import DyadicScale, di_exp, fit_dyadic, i_sqrt, int_div, round_div
from .matmul import Accumulator, di_matmul, int_matmul, requantize
from .model import BlockWeights, QConfig, float_forward, random_block, simulated_forward
from .nonlinear import (
    ClipConfig,
    NormParams,
    di_clipped_softmax,
    di_layernorm,
    di_rmsnorm,
    di_sigmoid,
    di_swiglu,
)
from .quant import Granularity, QuantTensor, StaticQuantParams, dequantize, quantize
from .trace import trace_float

__all__ = [
    "Accumulator", "BlockWeights", "CalibratedBlock", "ClipConfig", "DyadicScale",
    "Granularity", "IntegerBlock", "NormParams", "QConfig", "QuantTensor",
    "ReconstructionConfig", "Site", "SmoothingVector", "StaticQuantParams",
    "apply_smoothing", "calibrate", "dequantize", "di_clipped_softmax", "di_exp",
    "di_layernorm", "di_matmul", "di_rmsnorm", "di_sigmoid", "di_swiglu", "fit_dyadic",
    "float_forward", "fold_parallel_linear_linear", "fold_serial_linear_linear",
    "fold_serial_linear_norm", "fold_swiglu_nonlinear", "fsbr_reconstruct", "i_sqrt",
    "int_div", "int_forward", "int_matmul", "quantize", "random_block", "requantize",
    "round_div", "simulated_forward", "trace_float",
]
