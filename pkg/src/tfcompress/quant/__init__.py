"""Post-training quantization: calibration, int8/fp16 numerics and mixed-precision execution."""

from .calibrate import Calibration, SiteStats, calibrate, site_names
from .executable import (
    PRESETS,
    ExecutableModel,
    PrecisionAssignment,
    block_assignment,
    boundary_assignment,
    build_quantized_model,
    quantize_weights,
    student_mix,
    teacher_mix,
)
from .kernels import fakequant_conv2d, fold_batchnorm, qconv2d, qconv_transpose2d
from .numerics import (
    QuantParams,
    affine_params,
    dequantize,
    fake_quant,
    fp16_round,
    per_channel_params,
    per_tensor_params,
    quantize_tensor,
    symmetric_params,
)
from .sweep import SweepCurve, SweepPoint, select_mixed_precision, sensitivity_sweep

__all__ = [
    "Calibration", "SiteStats", "calibrate", "site_names",
    "PRESETS", "ExecutableModel", "PrecisionAssignment", "block_assignment", "boundary_assignment",
    "build_quantized_model", "quantize_weights", "student_mix", "teacher_mix",
    "fakequant_conv2d", "fold_batchnorm", "qconv2d", "qconv_transpose2d",
    "QuantParams", "affine_params", "dequantize", "fake_quant", "fp16_round", "per_channel_params",
    "per_tensor_params", "quantize_tensor", "symmetric_params",
    "SweepCurve", "SweepPoint", "select_mixed_precision", "sensitivity_sweep",
]
