"""Persistence, run logs and latency measurement."""

from .bench import BenchResult, bench, bench_generator, speedup_table
from .checkpoint import (
    Checkpoint,
    CheckpointError,
    ChecksumError,
    VersionError,
    load_checkpoint,
    load_model,
    model_checkpoint,
    save_checkpoint,
    save_model,
)
from .runlog import RunLog, read_runlog

__all__ = [
    "BenchResult", "bench", "bench_generator", "speedup_table",
    "Checkpoint", "CheckpointError", "ChecksumError", "VersionError", "load_checkpoint", "load_model",
    "model_checkpoint", "save_checkpoint", "save_model",
    "RunLog", "read_runlog",
]
