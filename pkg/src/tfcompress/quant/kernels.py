"""Integer convolution kernels and their float fake-quant references.

Products of int8 operands are accumulated as integers. The GEMM runs in
float64, which represents every partial sum exactly while it stays below
2**53; the result is then checked against the int32 range. With
|q_in - zp_in| <= 255 and |q_w| <= 127 the accumulator bound is
K * 255 * 127 for K = C_in * kh * kw, so layers up to K = 66_000 are safe by
construction (the largest canonical layer has K = 4608).
"""

from __future__ import annotations

import numpy as np

from ..tensor import Tensor, no_grad, ops
from .numerics import QMAX, QMIN, QuantParams, dequantize, quantize_tensor

INT32_MAX = 2**31 - 1
MAX_REDUCTION = INT32_MAX // (255 * 127)


def fold_batchnorm(weight, bias, gamma, beta, mean, var, eps: float, axis: int) -> tuple[np.ndarray, np.ndarray]:
    """Fold inference-mode batchnorm into conv weight/bias (float64)."""
    w = np.asarray(weight, np.float64)
    b = np.asarray(bias, np.float64)
    if gamma is None:
        return w, b
    k = np.asarray(gamma, np.float64) / np.sqrt(np.asarray(var, np.float64) + eps)
    shape = [1] * w.ndim
    shape[axis] = -1
    return w * k.reshape(shape), (b - np.asarray(mean, np.float64)) * k + np.asarray(beta, np.float64)


def _float_conv(x, w, transpose: bool, stride, padding, output_padding) -> np.ndarray:
    with no_grad():
        if transpose:
            return ops.conv_transpose2d(Tensor(x), Tensor(w), None, stride, padding, output_padding).data
        return ops.conv2d(Tensor(x), Tensor(w), None, stride, padding).data


def integer_accumulate(q_input, zp_in: int, q_weight, transpose: bool = False, stride=1, padding=0,
                       output_padding=0) -> np.ndarray:
    """Exact int32 accumulator sum_k (q_in - zp_in) * q_w for every output element."""
    k = q_weight.shape[0 if transpose else 1] * q_weight.shape[2] * q_weight.shape[3]
    if k > MAX_REDUCTION:
        raise OverflowError(f"reduction length {k} can overflow the int32 accumulator (limit {MAX_REDUCTION})")
    x = np.asarray(q_input, np.float64) - float(zp_in)
    acc = _float_conv(x, np.asarray(q_weight, np.float64), transpose, stride, padding, output_padding)
    if np.abs(acc).max(initial=0) > INT32_MAX:
        raise OverflowError("int32 accumulator overflow")
    return acc.astype(np.int64)


def quantize_bias(bias, qp_in: QuantParams, qp_w: QuantParams) -> np.ndarray:
    """Bias on the accumulator grid: round(b / (s_in * s_w[c])) as int32."""
    if bias is None:
        return None
    q = np.round(np.asarray(bias, np.float64) / (float(qp_in.scale) * qp_w.scale))
    if np.abs(q).max(initial=0) > INT32_MAX:
        raise OverflowError("bias does not fit the int32 accumulator")
    return q.astype(np.int64)


def requantize(acc: np.ndarray, qp_in: QuantParams, qp_w: QuantParams, qp_out: QuantParams) -> np.ndarray:
    """int32 accumulators (N, C, H, W) -> int8 at the output scale."""
    m = (float(qp_in.scale) * qp_w.scale / float(qp_out.scale)).reshape(1, -1, 1, 1)
    return np.clip(np.round(acc * m) + int(qp_out.zero_point), QMIN, QMAX).astype(np.int8)


def qconv2d(q_input, q_weight, qp_in: QuantParams, qp_w: QuantParams, qp_out: QuantParams, bias=None,
            stride=1, padding=0, transpose: bool = False, output_padding=0) -> np.ndarray:
    """int8 x int8 -> int32 accumulate (+ int32 bias) -> int8 requantized output.

    ``qp_w`` is per-output-channel symmetric. ``transpose`` selects the
    transposed convolution with (I, O, kh, kw) weights.
    """
    if not qp_w.symmetric:
        raise ValueError("weight params must be symmetric")
    if qp_in.axis is not None or qp_out.axis is not None:
        raise ValueError("activation params must be per-tensor")
    acc = integer_accumulate(q_input, int(qp_in.zero_point), q_weight, transpose, stride, padding, output_padding)
    qb = quantize_bias(bias, qp_in, qp_w)
    if qb is not None:
        acc = acc + qb.reshape(1, -1, 1, 1)
        if np.abs(acc).max(initial=0) > INT32_MAX:
            raise OverflowError("int32 accumulator overflow after bias")
    return requantize(acc, qp_in, qp_w, qp_out)


def qconv_transpose2d(q_input, q_weight, qp_in, qp_w, qp_out, bias=None, stride=1, padding=0, output_padding=0):
    return qconv2d(q_input, q_weight, qp_in, qp_w, qp_out, bias, stride, padding, True, output_padding)


def fakequant_conv2d(q_input, q_weight, qp_in: QuantParams, qp_w: QuantParams, qp_out: QuantParams, bias=None,
                     stride=1, padding=0, transpose: bool = False, output_padding=0) -> np.ndarray:
    """Float reference: dequantize operands, convolve in float64, quantize the result."""
    x = dequantize(q_input, qp_in, np.float64)
    w = dequantize(q_weight, qp_w, np.float64)
    y = _float_conv(x, w, transpose, stride, padding, output_padding)
    if bias is not None:
        y = y + np.asarray(bias, np.float64).reshape(1, -1, 1, 1)
    return quantize_tensor(y, qp_out)
