"""Generator descriptions, network construction and compute accounting."""

from .build import (
    ConvLayer,
    Discriminator,
    GeneratorModel,
    Network,
    SyncExpert,
    build_discriminator,
    build_model,
    build_sync_expert,
)
from .counting import count_macs, count_params, per_layer_table
from .spec import CANONICAL_SPECS, GeneratorSpec, LayerSpec, SpecError, infer_shapes, load_spec, save_spec

__all__ = [
    "ConvLayer", "Discriminator", "GeneratorModel", "Network", "SyncExpert",
    "build_discriminator", "build_model", "build_sync_expert",
    "count_macs", "count_params", "per_layer_table",
    "CANONICAL_SPECS", "GeneratorSpec", "LayerSpec", "SpecError", "infer_shapes", "load_spec", "save_spec",
]
