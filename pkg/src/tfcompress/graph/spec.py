"""Generator descriptions: layer tables, loading, validation and scaling."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from ..tensor.ops import conv_out_size, conv_transpose_out_size, pair

SPEC_VERSION = 1
SPEC_DIR = Path(__file__).parent / "specs"
CANONICAL_SPECS = ("wav2lip_full", "wav2lip_toy")

KINDS = ("conv", "conv_transpose", "residual_conv", "output_conv")
NORMS = ("batchnorm", "none")
ACTS = ("relu", "leaky_relu", "sigmoid", "none")


class SpecError(ValueError):
    """A generator description violates one of its structural rules."""

    def __init__(self, rule: str, detail: str):
        super().__init__(f"[{rule}] {detail}")
        self.rule = rule


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str
    in_ch: int
    out_ch: int
    kernel: tuple[int, int]
    stride: tuple[int, int]
    padding: tuple[int, int]
    norm: str = "batchnorm"
    act: str = "relu"
    output_padding: tuple[int, int] = (0, 0)

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        try:
            return cls(
                name=str(d["name"]),
                kind=d["kind"],
                in_ch=int(d["in_ch"]),
                out_ch=int(d["out_ch"]),
                kernel=pair(d["kernel"]),
                stride=pair(d.get("stride", 1)),
                padding=pair(d.get("padding", 0)),
                norm=d.get("norm", "batchnorm"),
                act=d.get("act", "relu"),
                output_padding=pair(d.get("output_padding", 0)),
            )
        except KeyError as e:
            raise SpecError("layer_fields", f"layer {d.get('name', '?')} lacks field {e}") from None

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for k in ("kernel", "stride", "padding", "output_padding"):
            d[k] = list(d[k])
        return d

    @property
    def has_bias(self) -> bool:
        return True

    @property
    def is_transpose(self) -> bool:
        return self.kind == "conv_transpose"

    def out_hw(self, h: int, w: int) -> tuple[int, int]:
        (kh, kw), (sh, sw), (ph, pw) = self.kernel, self.stride, self.padding
        if self.is_transpose:
            oph, opw = self.output_padding
            return conv_transpose_out_size(h, kh, sh, ph, oph), conv_transpose_out_size(w, kw, sw, pw, opw)
        return conv_out_size(h, kh, sh, ph), conv_out_size(w, kw, sw, pw)


@dataclass(frozen=True)
class Block:
    name: str
    layers: tuple[LayerSpec, ...]


@dataclass(frozen=True)
class GeneratorSpec:
    name: str
    speech_input: tuple[int, int, int]
    face_input: tuple[int, int, int]
    speech_encoder: tuple[Block, ...]
    face_encoder: tuple[Block, ...]
    face_decoder: tuple[Block, ...]
    output_block: Block
    skip_wiring: dict = field(hash=False)
    output_channels: int = 3
    channel_multiplier: float = 1.0
    residuals_enabled: bool = True
    spec_version: int = SPEC_VERSION

    # -- views ---------------------------------------------------------------
    def blocks(self) -> list[tuple[str, Block]]:
        """(section, block) pairs in execution order."""
        out = [("speech_encoder", b) for b in self.speech_encoder]
        out += [("face_encoder", b) for b in self.face_encoder]
        out += [("face_decoder", b) for b in self.face_decoder]
        out.append(("output_block", self.output_block))
        return out

    def layers(self) -> list[LayerSpec]:
        """All layers in the total order that defines the boundary-index axis."""
        return [layer for _, b in self.blocks() for layer in b.layers]

    def layer_index(self) -> dict[str, int]:
        return {layer.name: i for i, layer in enumerate(self.layers())}

    def block_of(self) -> dict[str, str]:
        return {layer.name: b.name for _, b in self.blocks() for layer in b.layers}

    @property
    def frame_shape(self) -> tuple[int, int, int]:
        return (self.output_channels, self.face_input[1], self.face_input[2])

    def to_dict(self) -> dict:
        def blocks(bs):
            return [{"name": b.name, "layers": [layer.to_dict() for layer in b.layers]} for b in bs]

        return {
            "spec_version": self.spec_version,
            "name": self.name,
            "channel_multiplier": self.channel_multiplier,
            "residuals_enabled": self.residuals_enabled,
            "speech_input": list(self.speech_input),
            "face_input": list(self.face_input),
            "output_channels": self.output_channels,
            "speech_encoder": blocks(self.speech_encoder),
            "face_encoder": blocks(self.face_encoder),
            "face_decoder": blocks(self.face_decoder),
            "output_block": [layer.to_dict() for layer in self.output_block.layers],
            "skip_wiring": dict(self.skip_wiring),
        }

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def variant(self, channel_multiplier: float | None = None, residuals_enabled: bool | None = None) -> "GeneratorSpec":
        """Rescale channels / drop residual layers relative to this spec's base table."""
        return derive(self, channel_multiplier, residuals_enabled)


# ---------------------------------------------------------------------------
# loading
# ---------------------------------------------------------------------------

def resolve_spec_path(name_or_path: str | Path) -> Path:
    p = Path(name_or_path)
    if p.exists():
        return p
    cand = SPEC_DIR / f"{name_or_path}.yaml"
    if cand.exists():
        return cand
    raise FileNotFoundError(f"no spec file or canonical spec named {name_or_path!r}")


def load_spec(
    name_or_path: str | Path,
    channel_multiplier: float | None = None,
    residuals_enabled: bool | None = None,
) -> GeneratorSpec:
    """Parse a spec file (or canonical name), validate it and apply scaling.

    The file's layer table is stated at its own ``channel_multiplier`` /
    ``residuals_enabled`` (the canonical files are x1.0 with residuals);
    the arguments rescale relative to that.
    """
    path = resolve_spec_path(name_or_path)
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as e:
        raise SpecError("parse", f"{path}: {e}") from None
    if not isinstance(raw, dict):
        raise SpecError("parse", f"{path}: top level must be a mapping")
    return spec_from_dict(raw, channel_multiplier, residuals_enabled)


def spec_from_dict(raw: dict, channel_multiplier=None, residuals_enabled=None) -> GeneratorSpec:
    version = raw.get("spec_version")
    if version != SPEC_VERSION:
        raise SpecError("spec_version", f"unsupported spec_version {version!r} (expected {SPEC_VERSION})")

    def blocks(key):
        out = []
        for b in raw.get(key) or []:
            out.append(Block(str(b["name"]), tuple(LayerSpec.from_dict(layer) for layer in b["layers"])))
        return tuple(out)

    out_layers = raw.get("output_block") or []
    if isinstance(out_layers, dict):
        out_layers = out_layers.get("layers", [])
    base = GeneratorSpec(
        name=str(raw.get("name", "unnamed")),
        speech_input=tuple(int(v) for v in raw["speech_input"]),
        face_input=tuple(int(v) for v in raw["face_input"]),
        speech_encoder=blocks("speech_encoder"),
        face_encoder=blocks("face_encoder"),
        face_decoder=blocks("face_decoder"),
        output_block=Block("output", tuple(LayerSpec.from_dict(layer) for layer in out_layers)),
        skip_wiring={str(k): str(v) for k, v in (raw.get("skip_wiring") or {}).items()},
        output_channels=int(raw.get("output_channels", 3)),
        channel_multiplier=float(raw.get("channel_multiplier", 1.0)),
        residuals_enabled=bool(raw.get("residuals_enabled", True)),
    )
    validate(base)
    if channel_multiplier is None and residuals_enabled is None:
        return base
    return derive(base, channel_multiplier, residuals_enabled)


# ---------------------------------------------------------------------------
# scaling
# ---------------------------------------------------------------------------

def scale_channels(n: int, multiplier: float) -> int:
    return max(1, int(round(n * multiplier)))


def derive(base: GeneratorSpec, channel_multiplier: float | None, residuals_enabled: bool | None) -> GeneratorSpec:
    """Rescale interior widths and optionally strip residual layers.

    Input channels are re-derived from the wiring so skip concatenations
    stay consistent after rounding. Scaling is relative to ``base``'s own
    table; derive from the x1.0 table to avoid compounding rounding.
    """
    mult = base.channel_multiplier if channel_multiplier is None else channel_multiplier
    res = base.residuals_enabled if residuals_enabled is None else residuals_enabled
    if mult <= 0:
        raise SpecError("channel_multiplier", f"must be positive, got {mult}")
    rel = mult / base.channel_multiplier
    if res and not base.residuals_enabled:
        raise SpecError("residuals_enabled", "cannot re-enable residual layers removed from the base spec")

    out_rgb = base.output_block.layers[-1].name

    def width(layer: LayerSpec) -> int:
        if layer.name == out_rgb:
            return layer.out_ch
        return scale_channels(layer.out_ch, rel)

    def rebuild(block: Block, in_ch: int) -> tuple[Block, int]:
        layers = []
        c = in_ch
        for layer in block.layers:
            if layer.kind == "residual_conv" and not res:
                continue
            oc = c if layer.kind == "residual_conv" else width(layer)
            layers.append(dataclasses.replace(layer, in_ch=c, out_ch=oc))
            c = oc
        return Block(block.name, tuple(layers)), c

    sp_blocks, c = [], base.speech_input[0]
    for b in base.speech_encoder:
        nb, c = rebuild(b, c)
        sp_blocks.append(nb)
    speech_ch = c
    fe_blocks, fe_out, c = [], {}, base.face_input[0]
    for b in base.face_encoder:
        nb, c = rebuild(b, c)
        fe_blocks.append(nb)
        fe_out[b.name] = c
    dec_blocks, c = [], speech_ch
    for b in base.face_decoder:
        nb, c = rebuild(b, c)
        dec_blocks.append(nb)
        c += fe_out[base.skip_wiring[b.name]]
    ob, _ = rebuild(base.output_block, c)
    spec = dataclasses.replace(
        base,
        speech_encoder=tuple(sp_blocks),
        face_encoder=tuple(fe_blocks),
        face_decoder=tuple(dec_blocks),
        output_block=ob,
        channel_multiplier=mult,
        residuals_enabled=res,
    )
    validate(spec)
    return spec


# ---------------------------------------------------------------------------
# validation and shape inference
# ---------------------------------------------------------------------------

def validate(spec: GeneratorSpec) -> None:
    """Raise :class:`SpecError` naming the first violated rule."""
    if len(spec.face_decoder) != 7:
        raise SpecError("decoder_block_count", f"face_decoder must have exactly 7 blocks, found {len(spec.face_decoder)}")
    if not spec.output_block.layers:
        raise SpecError("output_block", "output block is empty")
    names = [layer.name for layer in spec.layers()]
    dup = sorted({n for n in names if names.count(n) > 1})
    if dup:
        raise SpecError("unique_names", f"duplicate layer names: {dup}")
    block_names = [b.name for _, b in spec.blocks()]
    if len(set(block_names)) != len(block_names):
        raise SpecError("unique_names", "duplicate block names")
    for layer in spec.layers():
        if layer.kind not in KINDS:
            raise SpecError("layer_kind", f"{layer.name}: unknown kind {layer.kind!r}")
        if layer.norm not in NORMS:
            raise SpecError("layer_norm", f"{layer.name}: unknown norm {layer.norm!r}")
        if layer.act not in ACTS:
            raise SpecError("layer_act", f"{layer.name}: unknown act {layer.act!r}")
        if layer.in_ch < 1 or layer.out_ch < 1:
            raise SpecError("channels", f"{layer.name}: channel counts must be >= 1")
        if layer.kind == "residual_conv":
            k, s, p = layer.kernel, layer.stride, layer.padding
            same = s == (1, 1) and all(2 * pp == kk - 1 for kk, pp in zip(k, p))
            if not same or layer.in_ch != layer.out_ch:
                raise SpecError("residual_shape", f"{layer.name}: residual_conv must keep channels and use stride 1 'same' padding")
    if not spec.residuals_enabled and any(layer.kind == "residual_conv" for layer in spec.layers()):
        raise SpecError("residuals_removed", "residuals_enabled=false but residual_conv layers remain")
    last = spec.output_block.layers[-1]
    if last.out_ch != spec.output_channels:
        raise SpecError("output_channels", f"{last.name} emits {last.out_ch} channels, expected {spec.output_channels}")

    enc_names = {b.name for b in spec.face_encoder}
    dec_names = [b.name for b in spec.face_decoder]
    for d, e in spec.skip_wiring.items():
        if d not in dec_names:
            raise SpecError("skip_wiring", f"skip_wiring names unknown decoder block {d!r}")
        if e not in enc_names:
            raise SpecError("skip_wiring", f"skip_wiring for {d!r} names unknown face-encoder block {e!r}")
    missing = [d for d in dec_names if d not in spec.skip_wiring]
    if missing:
        raise SpecError("skip_wiring", f"decoder blocks without skip wiring: {missing}")
    infer_shapes(spec)


def infer_shapes(spec: GeneratorSpec) -> dict[str, tuple[tuple[int, int, int], tuple[int, int, int]]]:
    """Per-layer (input CHW, output CHW) for one sample, checking channel chains and skip junctions."""
    shapes: dict[str, tuple] = {}

    def run(block: Block, chw: tuple[int, int, int]) -> tuple[int, int, int]:
        c, h, w = chw
        for layer in block.layers:
            if layer.in_ch != c:
                raise SpecError("channel_chain", f"{layer.name}: expects {layer.in_ch} input channels, receives {c}")
            ho, wo = layer.out_hw(h, w)
            if ho < 1 or wo < 1:
                raise SpecError("spatial", f"{layer.name}: output spatial size {ho}x{wo} is empty")
            if layer.kind == "residual_conv" and (ho, wo) != (h, w):
                raise SpecError("residual_shape", f"{layer.name}: residual changes spatial size")
            shapes[layer.name] = ((c, h, w), (layer.out_ch, ho, wo))
            c, h, w = layer.out_ch, ho, wo
        return c, h, w

    chw = tuple(spec.speech_input)
    for b in spec.speech_encoder:
        chw = run(b, chw)
    if chw[1:] != (1, 1):
        raise SpecError("speech_embedding", f"speech encoder must reduce to 1x1, got {chw[1]}x{chw[2]}")
    enc_out = {}
    fchw = tuple(spec.face_input)
    for b in spec.face_encoder:
        fchw = run(b, fchw)
        enc_out[b.name] = fchw
    for b in spec.face_decoder:
        chw = run(b, chw)
        skip = enc_out[spec.skip_wiring[b.name]]
        if skip[1:] != chw[1:]:
            raise SpecError(
                "skip_spatial",
                f"{b.name} emits {chw[1]}x{chw[2]} but skip {spec.skip_wiring[b.name]} is {skip[1]}x{skip[2]}",
            )
        chw = (chw[0] + skip[0], chw[1], chw[2])
    chw = run(spec.output_block, chw)
    if chw[1:] != tuple(spec.face_input[1:]):
        raise SpecError("output_shape", f"output is {chw[1]}x{chw[2]}, face frames are {spec.face_input[1]}x{spec.face_input[2]}")
    return shapes


def save_spec(spec: GeneratorSpec, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(spec.to_dict(), sort_keys=False), encoding="utf-8")
