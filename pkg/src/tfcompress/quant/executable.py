"""Per-layer precision assignment and mixed-precision execution."""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from ..graph.build import BN_EPS, ConvLayer, GeneratorModel, activate
from ..graph.spec import GeneratorSpec
from ..tensor import Tensor, no_grad, ops
from .calibrate import Calibration, site_names
from .kernels import fold_batchnorm, qconv2d
from .numerics import QuantParams, dequantize, fp16_round, per_channel_params, quantize_tensor, weight_axis

PRECISIONS = ("fp32", "fp16", "int8")


class PrecisionAssignment(OrderedDict):
    """layer name -> precision token, in the model's layer order."""

    @classmethod
    def uniform(cls, layer_names, precision: str) -> "PrecisionAssignment":
        return cls((n, precision) for n in layer_names)

    def validate(self, layer_names) -> None:
        names = list(layer_names)
        missing = [n for n in names if n not in self]
        extra = [n for n in self if n not in names]
        if missing or extra:
            raise KeyError(f"assignment does not match the model: missing {missing}, unknown {extra}")
        bad = {k: v for k, v in self.items() if v not in PRECISIONS}
        if bad:
            raise ValueError(f"unknown precision tokens: {bad}")

    def count(self, precision: str) -> int:
        return sum(1 for v in self.values() if v == precision)

    def boundary_index(self) -> tuple[str, int] | None:
        """('suffix_fp16' | 'prefix_fp16', b) when the map is b FP16 layers at one end and INT8 elsewhere."""
        vals = list(self.values())
        if set(vals) - {"fp16", "int8"}:
            return None
        b = vals.count("fp16")
        n = len(vals)
        if vals == ["int8"] * (n - b) + ["fp16"] * b:
            return ("suffix_fp16", b)
        if vals == ["fp16"] * b + ["int8"] * (n - b):
            return ("prefix_fp16", b)
        return None

    def transitions(self) -> list[tuple[str, str, str, str]]:
        """(prev layer, layer, prev precision, precision) wherever execution order switches precision."""
        items = list(self.items())
        return [(a, b, pa, pb) for (a, pa), (b, pb) in zip(items, items[1:]) if pa != pb]

    def save(self, path: str | Path) -> None:
        lines = ["# layer: precision (fp32 | fp16 | int8), in execution order"]
        lines += [f"{k}: {v}" for k, v in self.items()]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "PrecisionAssignment":
        raw = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        return cls((str(k), str(v).lower()) for k, v in raw.items())


def boundary_assignment(layer_names, b: int, axis: str = "suffix_fp16") -> PrecisionAssignment:
    names = list(layer_names)
    n = len(names)
    if not 0 <= b <= n:
        raise ValueError(f"boundary index {b} outside [0, {n}]")
    if axis == "suffix_fp16":
        fp16 = set(names[n - b :])
    elif axis == "prefix_fp16":
        fp16 = set(names[:b])
    else:
        raise ValueError(f"unknown sweep axis {axis!r}")
    return PrecisionAssignment((k, "fp16" if k in fp16 else "int8") for k in names)


def block_assignment(spec: GeneratorSpec, fp16_blocks, base: str = "int8") -> PrecisionAssignment:
    owner = spec.block_of()
    unknown = set(fp16_blocks) - set(owner.values())
    if unknown:
        raise KeyError(f"unknown blocks {sorted(unknown)}")
    return PrecisionAssignment((l.name, "fp16" if owner[l.name] in fp16_blocks else base) for l in spec.layers())


def student_mix(spec: GeneratorSpec) -> PrecisionAssignment:
    """Decoder output block in FP16, everything else INT8."""
    return block_assignment(spec, {spec.output_block.name})


def teacher_mix(spec: GeneratorSpec) -> PrecisionAssignment:
    """First two face-encoder blocks and last two face-decoder blocks in FP16, everything else INT8."""
    enc = [b.name for b in spec.face_encoder[:2]]
    dec = [b.name for b in spec.face_decoder[-2:]]
    return block_assignment(spec, set(enc + dec))


PRESETS = {"student_mix": student_mix, "teacher_mix": teacher_mix}


# ---------------------------------------------------------------------------
# execution
# ---------------------------------------------------------------------------

@dataclass
class _Int8Layer:
    spec: object
    q_weight: np.ndarray
    qp_w: QuantParams
    bias: np.ndarray
    qp_in: QuantParams
    qp_out: QuantParams

    def __call__(self, x: Tensor) -> Tensor:
        s = self.spec
        q_in = quantize_tensor(x.data, self.qp_in)
        q_out = qconv2d(q_in, self.q_weight, self.qp_in, self.qp_w, self.qp_out, self.bias, s.stride, s.padding,
                        s.is_transpose, s.output_padding)
        y = dequantize(q_out, self.qp_out)
        if s.kind == "residual_conv":
            y = y + dequantize(q_in, self.qp_in)
        return activate(Tensor(y), s.act)


@dataclass
class _Fp16Layer:
    spec: object
    weight: np.ndarray
    bias: np.ndarray

    def __call__(self, x: Tensor) -> Tensor:
        s = self.spec
        x16 = Tensor(fp16_round(x.data))
        if s.is_transpose:
            y = ops.conv_transpose2d(x16, Tensor(self.weight), Tensor(self.bias), s.stride, s.padding, s.output_padding)
        else:
            y = ops.conv2d(x16, Tensor(self.weight), Tensor(self.bias), s.stride, s.padding)
        y = Tensor(fp16_round(y.data))
        if s.kind == "residual_conv":
            y = y + x16
        return Tensor(fp16_round(activate(y, s.act).data))


def folded(layer: ConvLayer) -> tuple[np.ndarray, np.ndarray]:
    axis = weight_axis(layer.spec.is_transpose)
    return fold_batchnorm(layer.weight.data, layer.bias.data, None if layer.gamma is None else layer.gamma.data,
                          None if layer.beta is None else layer.beta.data, layer.running_mean, layer.running_var,
                          BN_EPS, axis)


def quantize_weights(model: GeneratorModel) -> "OrderedDict[str, tuple[np.ndarray, QuantParams]]":
    """Per-output-channel symmetric int8 weights (batchnorm folded in)."""
    out = OrderedDict()
    for name, layer in model.layers.items():
        w, _ = folded(layer)
        qp = per_channel_params(w, weight_axis(layer.spec.is_transpose))
        out[name] = (quantize_tensor(w, qp), qp)
    return out


class ExecutableModel:
    """A trained generator bound to a precision assignment. Stateless at inference."""

    def __init__(self, model: GeneratorModel, assignment: PrecisionAssignment, calibration: Calibration | None):
        assignment.validate(model.layers)
        self.model = model
        self.assignment = PrecisionAssignment(assignment)
        self.calibration = calibration
        self.kernels = {}
        for name, layer in model.layers.items():
            prec = assignment[name]
            if prec == "fp32":
                continue
            w, b = folded(layer)
            if prec == "fp16":
                self.kernels[name] = _Fp16Layer(layer.spec, fp16_round(w.astype(np.float32)), fp16_round(b.astype(np.float32)))
            else:
                if calibration is None:
                    raise ValueError("INT8 layers need a calibration")
                s_in, s_out = site_names(name)
                qp_w = per_channel_params(w, weight_axis(layer.spec.is_transpose))
                self.kernels[name] = _Int8Layer(layer.spec, quantize_tensor(w, qp_w), qp_w, b,
                                                calibration.qparams[s_in], calibration.qparams[s_out])

    @property
    def spec(self) -> GeneratorSpec:
        return self.model.spec

    def boundary_ops(self) -> int:
        """Quantize/dequantize/round ops inserted around non-FP32 layers."""
        n = 0
        for name, prec in self.assignment.items():
            if prec == "int8":
                n += 2  # quantize input, dequantize output
            elif prec == "fp16":
                n += 2  # round input, round output
        return n

    def _run(self, layer: ConvLayer, x: Tensor) -> Tensor:
        k = self.kernels.get(layer.spec.name)
        return layer(x, False) if k is None else k(x)

    def forward(self, speech, faces):
        with no_grad():
            return self.model.forward(Tensor(speech), Tensor(faces), layer_fn=self._run)

    __call__ = forward

    def generate(self, speech: np.ndarray, faces: np.ndarray, batch_size: int = 64) -> np.ndarray:
        outs = []
        for i in range(0, len(speech), batch_size):
            y, _ = self.forward(speech[i : i + batch_size], faces[i : i + batch_size])
            outs.append(y.data)
        return np.concatenate(outs, axis=0)


def build_quantized_model(model: GeneratorModel, assignment: PrecisionAssignment,
                          calibration: Calibration | None = None) -> ExecutableModel:
    if model.training:
        raise ValueError("quantize a model in eval mode")
    return ExecutableModel(model, assignment, calibration)
