"""Integer and half-precision number formats."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

QMIN, QMAX = -128, 127
SCALE_FLOOR = 1e-8


@dataclass(frozen=True)
class QuantParams:
    """Affine int8 mapping x ~ scale * (q - zero_point).

    ``axis`` is None for per-tensor parameters, otherwise the channel axis the
    arrays ``scale`` / ``zero_point`` index.
    """

    scale: np.ndarray
    zero_point: np.ndarray
    axis: int | None = None

    def __post_init__(self):
        s = np.asarray(self.scale, dtype=np.float64)
        z = np.asarray(self.zero_point, dtype=np.int64)
        if s.shape != z.shape:
            raise ValueError("scale and zero_point shapes differ")
        if self.axis is None and s.ndim != 0:
            raise ValueError("per-tensor params need scalar scale")
        if self.axis is not None and s.ndim != 1:
            raise ValueError("per-channel params need one scale per channel")
        if not np.all(s > 0) or not np.all(np.isfinite(s)):
            raise ValueError("scale must be positive and finite")
        if np.any(z < QMIN) or np.any(z > QMAX):
            raise ValueError(f"zero_point outside [{QMIN}, {QMAX}]")
        object.__setattr__(self, "scale", s)
        object.__setattr__(self, "zero_point", z)

    @property
    def symmetric(self) -> bool:
        return bool(np.all(self.zero_point == 0))

    def broadcast(self, ndim: int) -> tuple[np.ndarray, np.ndarray]:
        if self.axis is None:
            return self.scale, self.zero_point
        shape = [1] * ndim
        shape[self.axis] = -1
        return self.scale.reshape(shape), self.zero_point.reshape(shape)

    def to_dict(self) -> dict:
        return {"scale": self.scale.tolist(), "zero_point": self.zero_point.tolist(), "axis": self.axis}

    @classmethod
    def from_dict(cls, d: dict) -> "QuantParams":
        return cls(np.asarray(d["scale"]), np.asarray(d["zero_point"]), d.get("axis"))


def _floor_scale(scale, where: str = "") -> np.ndarray:
    scale = np.asarray(scale, dtype=np.float64)
    if np.any(scale < SCALE_FLOOR):
        warnings.warn(f"degenerate range{' at ' + where if where else ''}: scale floored to {SCALE_FLOOR}", stacklevel=3)
    return np.maximum(scale, SCALE_FLOOR)


def affine_params(lo: float, hi: float, where: str = "") -> QuantParams:
    """Asymmetric per-tensor params covering [lo, hi] (always including 0)."""
    lo, hi = min(float(lo), 0.0), max(float(hi), 0.0)
    scale = float(_floor_scale((hi - lo) / (QMAX - QMIN), where))
    zp = int(np.clip(np.round(QMIN - lo / scale), QMIN, QMAX))
    return QuantParams(np.float64(scale), np.int64(zp))


def symmetric_params(absmax, axis: int | None = None, where: str = "") -> QuantParams:
    scale = _floor_scale(np.asarray(absmax, dtype=np.float64) / QMAX, where)
    return QuantParams(scale, np.zeros(scale.shape, np.int64), axis)


def quantize_tensor(x, qp: QuantParams) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    s, z = qp.broadcast(x.ndim)
    return np.clip(np.round(x / s) + z, QMIN, QMAX).astype(np.int8)


def dequantize(q, qp: QuantParams, dtype=np.float32) -> np.ndarray:
    q = np.asarray(q)
    s, z = qp.broadcast(q.ndim)
    return ((q.astype(np.float64) - z) * s).astype(dtype)


def fake_quant(x, qp: QuantParams, dtype=np.float32) -> np.ndarray:
    return dequantize(quantize_tensor(x, qp), qp, dtype)


def weight_axis(is_transpose: bool) -> int:
    """Output-channel axis: 0 for (O, I, kh, kw) conv weights, 1 for (I, O, kh, kw) transposed weights."""
    return 1 if is_transpose else 0


def per_channel_params(w: np.ndarray, axis: int = 0) -> QuantParams:
    """Symmetric per-output-channel scales max|w_c| / 127."""
    other = tuple(i for i in range(w.ndim) if i != axis)
    return symmetric_params(np.abs(w).max(axis=other), axis=axis)


def per_tensor_params(w: np.ndarray) -> QuantParams:
    return symmetric_params(np.abs(w).max())


def fp16_round(x) -> np.ndarray:
    """Round to the nearest binary16 value (ties to even), kept in float32 storage."""
    x = np.asarray(x)
    with np.errstate(over="ignore"):
        h = x.astype(np.float16)
    if np.any(np.isinf(h) & np.isfinite(x)):
        raise OverflowError(f"value {np.abs(x[np.isinf(h) & np.isfinite(x)]).max():.6g} overflows binary16")
    return h.astype(np.float32)
