"""Exact parameter and multiply-accumulate accounting for generator specs."""

from __future__ import annotations

from .spec import GeneratorSpec, LayerSpec, infer_shapes


def layer_params(layer: LayerSpec) -> int:
    kh, kw = layer.kernel
    n = layer.in_ch * layer.out_ch * kh * kw
    if layer.has_bias:
        n += layer.out_ch
    if layer.norm == "batchnorm":
        n += 2 * layer.out_ch
    return n


def layer_macs(layer: LayerSpec, in_chw: tuple[int, int, int], out_chw: tuple[int, int, int]) -> int:
    """MACs for one sample; norm, activation and bias adds are excluded.

    Transposed convolutions use the same output-side formula as ordinary
    ones (Cout*Hout*Wout*Cin*K^2), i.e. the dense equivalent over the
    zero-upsampled input, which is how common profilers report them.
    """
    kh, kw = layer.kernel
    _, ho, wo = out_chw
    return layer.out_ch * ho * wo * layer.in_ch * kh * kw


def count_params(spec: GeneratorSpec) -> int:
    return sum(layer_params(layer) for layer in spec.layers())


def count_macs(spec: GeneratorSpec, batch: int = 1) -> int:
    shapes = infer_shapes(spec)
    return batch * sum(layer_macs(layer, *shapes[layer.name]) for layer in spec.layers())


def per_layer_table(spec: GeneratorSpec) -> list[dict]:
    shapes = infer_shapes(spec)
    rows = []
    for i, layer in enumerate(spec.layers()):
        cin, cout = shapes[layer.name]
        rows.append({
            "index": i,
            "name": layer.name,
            "kind": layer.kind,
            "in": cin,
            "out": cout,
            "params": layer_params(layer),
            "macs": layer_macs(layer, cin, cout),
        })
    return rows
