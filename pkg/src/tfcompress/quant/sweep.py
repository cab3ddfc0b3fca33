"""Boundary-index sensitivity sweep and mixed-precision selection."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from ..graph.build import GeneratorModel
from .calibrate import Calibration
from .executable import PrecisionAssignment, boundary_assignment, build_quantized_model


@dataclass
class SweepPoint:
    boundary_index: int
    proxy_fid: float
    n_fp16: int
    boundary_ops: int
    fp16_layers: list[str] = field(default_factory=list)


@dataclass
class SweepCurve:
    axis: str
    layer_names: list[str]
    points: list[SweepPoint]

    def values(self) -> np.ndarray:
        return np.array([p.proxy_fid for p in self.points])

    def assignment(self, b: int) -> PrecisionAssignment:
        return boundary_assignment(self.layer_names, b, self.axis)

    def to_dict(self) -> dict:
        return {"axis": self.axis, "layer_names": self.layer_names, "points": [asdict(p) for p in self.points]}


def sensitivity_sweep(model: GeneratorModel, calibration: Calibration, speech: np.ndarray, faces: np.ndarray,
                      axis: str = "suffix_fp16", reference: np.ndarray | None = None, embedder=None,
                      batch_size: int = 128, progress=None) -> SweepCurve:
    """proxy-FID against the FP32 outputs for every boundary index 0..num_layers.

    Index 0 is all-INT8; the last index is all-FP16.
    """
    from ..metrics import proxy_fid

    if len(speech) == 0:
        raise ValueError("evaluation set is empty")
    names = list(model.layers)
    if reference is None:
        reference = model.generate(speech, faces, batch_size)
    points = []
    for b in range(len(names) + 1):
        a = boundary_assignment(names, b, axis)
        ex = build_quantized_model(model, a, calibration)
        out = ex.generate(speech, faces, batch_size)
        fid = proxy_fid(reference, out, embedder)
        points.append(SweepPoint(b, fid, a.count("fp16"), ex.boundary_ops(),
                                 [k for k, v in a.items() if v == "fp16"]))
        if progress is not None:
            progress(points[-1])
    return SweepCurve(axis, names, points)


def select_mixed_precision(curve: SweepCurve, max_fp16_layers: int | None = None) -> PrecisionAssignment:
    """Lowest-degradation point with at most ``max_fp16_layers`` FP16 layers (ties -> fewer FP16 layers)."""
    if not curve.points:
        raise ValueError("empty sweep curve")
    feasible = [p for p in curve.points if max_fp16_layers is None or p.n_fp16 <= max_fp16_layers]
    if not feasible:
        raise ValueError(f"no sweep point satisfies the budget of {max_fp16_layers} FP16 layers")
    best = min(feasible, key=lambda p: (p.proxy_fid, p.n_fp16))
    return curve.assignment(best.boundary_index)
