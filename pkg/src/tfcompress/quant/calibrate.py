"""Activation range calibration."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..graph.build import ConvLayer, GeneratorModel, activate
from ..tensor import Tensor, no_grad
from .numerics import QuantParams, affine_params

N_BINS = 2048
DEFAULT_PERCENTILE = 99.99


@dataclass
class SiteStats:
    """Observed range and a histogram of |x| over [0, absmax]."""

    min: float = np.inf
    max: float = -np.inf
    hist: np.ndarray = field(default_factory=lambda: np.zeros(N_BINS, np.int64))
    count: int = 0

    @property
    def absmax(self) -> float:
        return max(abs(self.min), abs(self.max))

    def observe_range(self, x: np.ndarray) -> None:
        self.min = min(self.min, float(x.min()))
        self.max = max(self.max, float(x.max()))

    def observe_hist(self, x: np.ndarray) -> None:
        top = self.absmax if self.absmax > 0 else 1.0
        h, _ = np.histogram(np.abs(x), bins=N_BINS, range=(0.0, top))
        self.hist += h
        self.count += x.size

    def percentile_abs(self, p: float) -> float:
        """Upper edge of the bin where the cumulative |x| mass reaches p percent."""
        if self.count == 0:
            return 0.0
        cum = np.cumsum(self.hist)
        idx = int(np.searchsorted(cum, p / 100.0 * self.count))
        return (min(idx, N_BINS - 1) + 1) * self.absmax / N_BINS


@dataclass
class Calibration:
    method: str
    percentile: float | None
    stats: dict[str, SiteStats]
    qparams: dict[str, QuantParams]

    def to_dict(self) -> dict:
        return {"method": self.method, "percentile": self.percentile,
                "qparams": {k: v.to_dict() for k, v in self.qparams.items()}}

    @classmethod
    def from_dict(cls, d: dict) -> "Calibration":
        return cls(d["method"], d.get("percentile"), {}, {k: QuantParams.from_dict(v) for k, v in d["qparams"].items()})


def site_names(layer_name: str) -> tuple[str, str]:
    """Each layer owns an input site and a conv-output (pre-activation) site."""
    return f"{layer_name}:in", f"{layer_name}:out"


def run_layer_observed(layer: ConvLayer, x: Tensor, observe) -> Tensor:
    """Float inference of one layer, reporting its input and conv output to ``observe``."""
    s_in, s_out = site_names(layer.spec.name)
    observe(s_in, x.data)
    pre = layer.pre_activation(x, False)
    observe(s_out, pre.data)
    if layer.spec.kind == "residual_conv":
        pre = pre + x
    return activate(pre, layer.spec.act)


def _passes(model: GeneratorModel, speech, faces, batch_size, observe):
    with no_grad():
        for i in range(0, len(speech), batch_size):
            model.forward(Tensor(speech[i : i + batch_size]), Tensor(faces[i : i + batch_size]),
                          layer_fn=lambda layer, x: run_layer_observed(layer, x, observe))


def calibrate(model: GeneratorModel, speech: np.ndarray, faces: np.ndarray, method: str = "percentile",
              percentile: float = DEFAULT_PERCENTILE, batch_size: int = 128) -> Calibration:
    """Per-tensor affine activation params for every layer input and conv output.

    ``minmax`` uses the observed range; ``percentile`` clips the range to the
    p-th percentile of |x|. Two passes over the data: ranges, then histograms.
    """
    if len(speech) == 0:
        raise ValueError("calibration set is empty")
    if method not in ("minmax", "percentile"):
        raise ValueError(f"unknown calibration method {method!r}")
    if model.training:
        raise ValueError("calibrate needs the model in eval mode")
    stats: dict[str, SiteStats] = {}

    def observe_range(site, x):
        stats.setdefault(site, SiteStats()).observe_range(x)

    def observe_hist(site, x):
        stats[site].observe_hist(x)

    _passes(model, speech, faces, batch_size, observe_range)
    _passes(model, speech, faces, batch_size, observe_hist)
    qparams = {}
    for site, st in stats.items():
        lo, hi = st.min, st.max
        if method == "percentile":
            p = st.percentile_abs(percentile)
            lo, hi = max(lo, -p), min(hi, p)
        qparams[site] = affine_params(lo, hi, where=site)
    return Calibration(method, percentile if method == "percentile" else None, stats, qparams)
