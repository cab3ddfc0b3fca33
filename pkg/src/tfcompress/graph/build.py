"""Turn layer tables into executable networks on the tensor engine."""

from __future__ import annotations

import hashlib
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from ..tensor import Tensor, ops
from ..tensor.core import no_grad
from .spec import GeneratorSpec, LayerSpec, SpecError, infer_shapes

BN_MOMENTUM = 0.1
BN_EPS = 1e-5


@dataclass
class ConvLayer:
    """One conv / transposed-conv layer with optional batchnorm, residual add and activation."""

    spec: LayerSpec
    weight: Tensor
    bias: Tensor
    gamma: Tensor | None = None
    beta: Tensor | None = None
    running_mean: np.ndarray | None = None
    running_var: np.ndarray | None = None

    @classmethod
    def init(cls, spec: LayerSpec, rng: np.random.Generator) -> "ConvLayer":
        kh, kw = spec.kernel
        if spec.is_transpose:
            shape = (spec.in_ch, spec.out_ch, kh, kw)
            fan_in = max(1.0, spec.in_ch * kh * kw / (spec.stride[0] * spec.stride[1]))
        else:
            shape = (spec.out_ch, spec.in_ch, kh, kw)
            fan_in = spec.in_ch * kh * kw
        bound = np.sqrt(6.0 / fan_in)
        w = rng.uniform(-bound, bound, size=shape).astype(np.float32)
        layer = cls(spec, Tensor(w, requires_grad=True), Tensor(np.zeros(spec.out_ch, np.float32), requires_grad=True))
        if spec.norm == "batchnorm":
            layer.gamma = Tensor(np.ones(spec.out_ch, np.float32), requires_grad=True)
            layer.beta = Tensor(np.zeros(spec.out_ch, np.float32), requires_grad=True)
            layer.running_mean = np.zeros(spec.out_ch, np.float32)
            layer.running_var = np.ones(spec.out_ch, np.float32)
        return layer

    def parameters(self) -> list[Tensor]:
        ps = [self.weight, self.bias]
        if self.gamma is not None:
            ps += [self.gamma, self.beta]
        return ps

    def tensors(self) -> "OrderedDict[str, np.ndarray]":
        out = OrderedDict(weight=self.weight.data, bias=self.bias.data)
        if self.gamma is not None:
            out.update(gamma=self.gamma.data, beta=self.beta.data,
                       running_mean=self.running_mean, running_var=self.running_var)
        return out

    def pre_activation(self, x: Tensor, training: bool) -> Tensor:
        s = self.spec
        if s.is_transpose:
            y = ops.conv_transpose2d(x, self.weight, self.bias, s.stride, s.padding, s.output_padding)
        else:
            y = ops.conv2d(x, self.weight, self.bias, s.stride, s.padding)
        if self.gamma is not None:
            y = ops.batchnorm2d(y, self.gamma, self.beta, self.running_mean, self.running_var,
                                training, BN_MOMENTUM, BN_EPS)
        return y

    def __call__(self, x: Tensor, training: bool = False) -> Tensor:
        y = self.pre_activation(x, training)
        if self.spec.kind == "residual_conv":
            y = y + x
        return activate(y, self.spec.act)


def activate(x: Tensor, act: str) -> Tensor:
    if act == "relu":
        return ops.relu(x)
    if act == "leaky_relu":
        return ops.leaky_relu(x)
    if act == "sigmoid":
        return ops.sigmoid(x)
    return x


class Network:
    """Ordered collection of named conv layers with shared bookkeeping."""

    kind = "network"

    def __init__(self, layers: "OrderedDict[str, ConvLayer]"):
        self.layers = layers
        self.training = False

    def train(self, mode: bool = True) -> "Network":
        self.training = mode
        return self

    def eval(self) -> "Network":
        return self.train(False)

    def parameters(self) -> list[Tensor]:
        return [p for layer in self.layers.values() for p in layer.parameters()]

    def freeze(self) -> "Network":
        for p in self.parameters():
            p.requires_grad = False
            p.grad = None
        return self.eval()

    def astype(self, dtype) -> "Network":
        """Cast all weights and running statistics in place (f64 is for gradient checks only)."""
        for layer in self.layers.values():
            for p in layer.parameters():
                p.data = p.data.astype(dtype)
            if layer.running_mean is not None:
                layer.running_mean = layer.running_mean.astype(dtype)
                layer.running_var = layer.running_var.astype(dtype)
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        out = OrderedDict()
        for name, layer in self.layers.items():
            for k, v in layer.tensors().items():
                out[f"{name}.{k}"] = v
        return out

    def load_state_dict(self, state: dict) -> None:
        own = self.state_dict()
        missing = [k for k in own if k not in state]
        extra = [k for k in state if k not in own]
        if missing or extra:
            raise KeyError(f"state mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
        for k, dst in own.items():
            src = np.asarray(state[k])
            if src.shape != dst.shape:
                raise ValueError(f"shape mismatch for {k}: checkpoint {src.shape} vs model {dst.shape}")
            dst[...] = src

    def weight_hash(self) -> str:
        h = hashlib.sha256()
        for k, v in self.state_dict().items():
            h.update(k.encode())
            h.update(np.ascontiguousarray(v).tobytes())
        return h.hexdigest()


def _build_layers(specs: list[LayerSpec], seed: int) -> "OrderedDict[str, ConvLayer]":
    rng = np.random.default_rng(seed)
    return OrderedDict((s.name, ConvLayer.init(s, rng)) for s in specs)


# ---------------------------------------------------------------------------
# generator
# ---------------------------------------------------------------------------

class GeneratorModel(Network):
    """Speech encoder + face encoder + skip-connected face decoder."""

    kind = "generator"

    def __init__(self, spec: GeneratorSpec, layers):
        super().__init__(layers)
        self.spec = spec
        self.layer_index = spec.layer_index()
        self.tap_points = [b.name for b in spec.face_decoder]

    @property
    def layer_names(self) -> list[str]:
        return list(self.layers)

    def check_inputs(self, speech: Tensor, faces: Tensor) -> None:
        sp, fp = tuple(self.spec.speech_input), tuple(self.spec.face_input)
        if speech.ndim != 4 or speech.shape[1:] != sp:
            raise ValueError(f"speech must be (N, {sp[0]}, {sp[1]}, {sp[2]}), got {speech.shape}")
        if faces.ndim != 4 or faces.shape[1:] != fp:
            raise ValueError(f"faces must be (N, {fp[0]}, {fp[1]}, {fp[2]}), got {faces.shape}")
        if speech.shape[0] != faces.shape[0]:
            raise ValueError("speech and faces batch sizes differ")

    def forward(self, speech: Tensor, faces: Tensor, layer_fn=None) -> tuple[Tensor, "OrderedDict[str, Tensor]"]:
        """Return (frames in [0, 1], decoder taps keyed by block name).

        ``layer_fn(layer, x)`` overrides per-layer execution; the quantized
        executor uses it to run layers at their assigned precision.
        """
        self.check_inputs(speech, faces)
        run = layer_fn or (lambda layer, x: layer(x, self.training))
        s = self.spec
        x = speech
        for b in s.speech_encoder:
            for ls in b.layers:
                x = run(self.layers[ls.name], x)
        feats = {}
        f = faces
        for b in s.face_encoder:
            for ls in b.layers:
                f = run(self.layers[ls.name], f)
            feats[b.name] = f
        taps: OrderedDict[str, Tensor] = OrderedDict()
        for b in s.face_decoder:
            for ls in b.layers:
                x = run(self.layers[ls.name], x)
            taps[b.name] = x
            x = ops.concat([x, feats[s.skip_wiring[b.name]]], axis=1)
        for ls in s.output_block.layers:
            x = run(self.layers[ls.name], x)
        return x, taps

    __call__ = forward

    def generate(self, speech: np.ndarray, faces: np.ndarray, batch_size: int = 64) -> np.ndarray:
        """Inference helper over numpy arrays, chunked."""
        outs = []
        with no_grad():
            for i in range(0, len(speech), batch_size):
                y, _ = self.forward(Tensor(speech[i : i + batch_size]), Tensor(faces[i : i + batch_size]))
                outs.append(y.data)
        return np.concatenate(outs, axis=0)


def build_model(spec: GeneratorSpec, seed: int) -> GeneratorModel:
    infer_shapes(spec)
    model = GeneratorModel(spec, _build_layers(spec.layers(), seed))
    if len(model.tap_points) != 7:
        raise SpecError("decoder_block_count", "generator needs 7 decoder taps")
    return model


# ---------------------------------------------------------------------------
# auxiliary networks
# ---------------------------------------------------------------------------

def _conv(name, cin, cout, k, s, p, norm="batchnorm", act="relu") -> LayerSpec:
    from .spec import pair
    return LayerSpec(name, "conv", cin, cout, pair(k), pair(s), pair(p), norm, act)


def _reduce_stack(prefix: str, in_chw, widths, strides, out_dim: int, act: str, head_act: str = "relu") -> list[LayerSpec]:
    """3x3 strided convs, then one conv whose kernel covers the remaining map (-> 1x1)."""
    c, h, w = in_chw
    specs = []
    for i, (wd, st) in enumerate(zip(widths, strides)):
        ls = _conv(f"{prefix}.conv{i}", c, wd, 3, st, 1, act=act)
        h, w = ls.out_hw(h, w)
        c = wd
        specs.append(ls)
    specs.append(_conv(f"{prefix}.head", c, out_dim, (h, w), 1, 0, norm="none", act=head_act))
    return specs


class SyncExpert(Network):
    """Audio-visual embedder: speech window -> 64-d, mouth crop -> 64-d, both unit-norm."""

    kind = "sync_expert"

    def __init__(self, layers, speech_names, video_names, frame_hw):
        super().__init__(layers)
        self.speech_names = speech_names
        self.video_names = video_names
        self.frame_hw = frame_hw

    @staticmethod
    def mouth_crop(frames: Tensor) -> Tensor:
        h = frames.shape[2]
        return frames[:, :, h // 2 :, :]

    def _embed(self, names, x: Tensor) -> Tensor:
        for n in names:
            x = self.layers[n](x, self.training)
        x = x.reshape(x.shape[0], -1)
        return ops.l2_normalize(x, axis=1)

    def embed_speech(self, speech: Tensor) -> Tensor:
        return self._embed(self.speech_names, speech)

    def embed_video(self, frames: Tensor) -> Tensor:
        return self._embed(self.video_names, self.mouth_crop(frames))

    def forward(self, speech: Tensor, frames: Tensor) -> tuple[Tensor, Tensor]:
        return self.embed_speech(speech), self.embed_video(frames)

    __call__ = forward


def build_sync_expert(seed: int, speech_shape=(1, 16, 5), frame_hw=(32, 32), dim: int = 64,
                      head_act: str = "sigmoid") -> SyncExpert:
    h, w = frame_hw
    sp = _reduce_stack("speech", speech_shape, (16, 32, 64, 64), (1, (2, 1), 2, (2, 1)), dim, "relu", head_act)
    vid = _reduce_stack("video", (3, h - h // 2, w), (16, 32, 64, 64), (1, 2, 2, 2), dim, "relu", head_act)
    layers = _build_layers(sp + vid, seed)
    expert = SyncExpert(layers, [s.name for s in sp], [s.name for s in vid], frame_hw)
    expert.builder = {"speech_shape": list(speech_shape), "frame_hw": list(frame_hw), "dim": dim, "head_act": head_act}
    return expert


class Discriminator(Network):
    """Frame -> one real/fake logit per item."""

    kind = "discriminator"

    def forward(self, frames: Tensor) -> Tensor:
        x = frames
        names = list(self.layers)
        for n in names[:-1]:
            x = self.layers[n](x, self.training)
        x = ops.global_avg_pool(x).reshape(x.shape[0], x.shape[1], 1, 1)
        x = self.layers[names[-1]](x, self.training)
        return x.reshape(x.shape[0])

    __call__ = forward


def build_discriminator(seed: int, frame_shape=(3, 32, 32)) -> Discriminator:
    c = frame_shape[0]
    specs = [
        _conv("disc.conv0", c, 16, 3, 2, 1, norm="none", act="leaky_relu"),
        _conv("disc.conv1", 16, 32, 3, 2, 1, act="leaky_relu"),
        _conv("disc.conv2", 32, 64, 3, 2, 1, act="leaky_relu"),
        _conv("disc.conv3", 64, 64, 3, 1, 1, act="leaky_relu"),
        _conv("disc.logit", 64, 1, 1, 1, 0, norm="none", act="none"),
    ]
    return Discriminator(_build_layers(specs, seed))
