"""Wall-clock latency harness."""

from __future__ import annotations

import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

MIN_ITERS = 30
MIN_WARMUP = 5


@dataclass
class BenchResult:
    model_id: str
    precision: str
    warmup: int
    iters: int
    times_ms: list[float]
    threads: int
    input_dims: dict = field(default_factory=dict)

    @property
    def median_ms(self) -> float:
        return float(np.median(self.times_ms))

    @property
    def p10_ms(self) -> float:
        return float(np.percentile(self.times_ms, 10))

    @property
    def p90_ms(self) -> float:
        return float(np.percentile(self.times_ms, 90))

    def summary(self) -> dict:
        return {"model_id": self.model_id, "precision": self.precision, "median_ms": self.median_ms,
                "p10_ms": self.p10_ms, "p90_ms": self.p90_ms, "iters": self.iters, "warmup": self.warmup,
                "threads": self.threads}

    def record(self) -> dict:
        out = asdict(self)
        out.update(self.summary())
        out["kind"] = "bench"
        return out


def default_threads() -> int:
    return len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else (os.cpu_count() or 1)


def bench(fn, inputs: tuple, iters: int = MIN_ITERS, warmup: int = MIN_WARMUP, threads: int | None = None,
          model_id: str = "model", precision: str = "fp32") -> BenchResult:
    """Time ``fn(*inputs)`` ``iters`` times after ``warmup`` untimed calls, with BLAS pinned to ``threads``."""
    if iters < MIN_ITERS:
        raise ValueError(f"iters must be >= {MIN_ITERS}")
    warmup = max(warmup, MIN_WARMUP)
    threads = threads or default_threads()
    times = []
    with threadpool_limits(limits=threads):
        for _ in range(warmup):
            fn(*inputs)
        for _ in range(iters):
            t0 = time.perf_counter()
            fn(*inputs)
            times.append((time.perf_counter() - t0) * 1e3)
    dims = {f"input{i}": list(np.shape(x)) for i, x in enumerate(inputs)}
    return BenchResult(model_id, precision, warmup, iters, times, threads, dims)


def bench_generator(model, speech: np.ndarray, faces: np.ndarray, **kw) -> BenchResult:
    """Latency of one batched forward of a generator or an executable quantized model."""
    if hasattr(model, "generate"):
        return bench(lambda s, f: model.generate(s, f, batch_size=len(s)), (speech, faces), **kw)
    return bench(model, (speech, faces), **kw)


def speedup_table(results: list[BenchResult], baseline: tuple[str, str]) -> str:
    """Precision x model grid of median ms, with speedup vs the ``(model_id, precision)`` baseline."""
    base = next((r for r in results if (r.model_id, r.precision) == baseline), None)
    if base is None:
        raise KeyError(f"baseline {baseline} not among the results")
    models = list(dict.fromkeys(r.model_id for r in results))
    precs = list(dict.fromkeys(r.precision for r in results))
    cell = {(r.model_id, r.precision): r for r in results}
    width = max(16, *(len(m) + 2 for m in models))
    lines = ["precision".ljust(10) + "".join(m.rjust(width) for m in models)]
    for p in precs:
        row = p.ljust(10)
        for m in models:
            r = cell.get((m, p))
            row += ("-" if r is None else f"{r.median_ms:.6g} ({base.median_ms / r.median_ms:.3g}x)").rjust(width)
        lines.append(row)
    lines.append(f"baseline: {baseline[0]} {baseline[1]} = {base.median_ms:.6g} ms median; "
                 f"host CPU, {base.threads} thread(s); embedded-GPU figures are not reproduced here")
    return "\n".join(lines)
