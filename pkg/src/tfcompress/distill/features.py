"""Fixed random-weight conv features used for perceptual losses and proxy-FID."""

from __future__ import annotations

from collections import OrderedDict

import numpy as np

from ..graph.build import Network, _build_layers, _conv
from ..tensor import Tensor, no_grad, ops

STAGE_WIDTHS = (16, 32, 64, 64)
DEFAULT_SEED = 1234


class FeatureExtractor(Network):
    """Four stride-2 3x3 conv stages with ReLU; weights never train."""

    kind = "feature_extractor"

    def __init__(self, layers: "OrderedDict", seed: int):
        super().__init__(layers)
        self.seed = seed
        self.freeze()

    @property
    def dim(self) -> int:
        return STAGE_WIDTHS[-1]

    def stages(self, frames: Tensor) -> list[Tensor]:
        x = frames * 2.0 - 1.0
        out = []
        for layer in self.layers.values():
            x = layer(x, False)
            out.append(x)
        return out

    def embed(self, frames: np.ndarray, batch_size: int = 128) -> np.ndarray:
        """Global-average-pooled final stage, (N, 64) float64."""
        rows = []
        with no_grad():
            for i in range(0, len(frames), batch_size):
                last = self.stages(Tensor(np.asarray(frames[i : i + batch_size])))[-1]
                rows.append(ops.global_avg_pool(last).data.astype(np.float64))
        return np.concatenate(rows, axis=0)


def build_feature_extractor(seed: int = DEFAULT_SEED, in_ch: int = 3) -> FeatureExtractor:
    specs, c = [], in_ch
    for i, w in enumerate(STAGE_WIDTHS):
        specs.append(_conv(f"fx.stage{i}", c, w, 3, 2, 1, norm="none", act="relu"))
        c = w
    return FeatureExtractor(_build_layers(specs, seed), seed)
