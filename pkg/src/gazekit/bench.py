"""Single-image forward-latency measurement and model-vs-model comparison.

Protocol: batch-1 forwards on a fixed random input, a warmup block excluded
from statistics, wall time from a monotonic clock, and (by default) the BLAS
thread pool pinned to one thread to mimic a small edge CPU.
"""

from __future__ import annotations

import contextlib
import dataclasses
import json
import platform
import time

import numpy as np

from .tensor import Tensor, no_grad


@dataclasses.dataclass
class LatencyReport:
    name: str
    n_runs: int
    warmup: int
    mean_ms: float
    std_ms: float
    p50_ms: float
    p99_ms: float
    host: str
    threads: int

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "LatencyReport":
        return cls(**json.loads(text))


def _limit_threads(threads: int):
    """Best effort BLAS thread pinning; a no-op when threadpoolctl is absent."""
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        return contextlib.nullcontext()
    return threadpool_limits(limits=threads)


def measure_latency(
    model,
    input_shape=(1, 1, 128, 128),
    n_runs: int = 1000,
    warmup: int = 20,
    threads: int = 1,
    seed: int = 0,
    name: str = "model",
    csv_path=None,
) -> LatencyReport:
    """Time ``n_runs`` batch-1 forwards of a model (or any array callable)."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xBE9C]))
    image = Tensor(rng.random(input_shape, np.float32))
    forward = model.forward if hasattr(model, "forward") else model
    if hasattr(model, "eval"):
        model.eval()

    times_ms = np.empty(n_runs, np.float64)
    with _limit_threads(threads), no_grad():
        for _ in range(warmup):
            forward(image)
        for run in range(n_runs):
            start = time.perf_counter()
            forward(image)
            times_ms[run] = (time.perf_counter() - start) * 1e3

    if csv_path is not None:
        with open(csv_path, "w") as fh:
            fh.write("run,ms\n")
            fh.writelines(f"{run},{ms:.6f}\n" for run, ms in enumerate(times_ms))

    return LatencyReport(
        name=name,
        n_runs=n_runs,
        warmup=warmup,
        mean_ms=float(times_ms.mean()),
        std_ms=float(times_ms.std()),
        p50_ms=float(np.percentile(times_ms, 50)),
        p99_ms=float(np.percentile(times_ms, 99)),
        host=f"{platform.platform()} / {platform.processor() or 'unknown-cpu'}",
        threads=threads,
    )


def compare(report_a: LatencyReport, report_b: LatencyReport):
    """Ratio mean(b)/mean(a) plus a small aligned comparison table."""
    ratio = report_b.mean_ms / report_a.mean_ms
    rows = [
        ("model", report_a.name, report_b.name),
        ("mean ms", f"{report_a.mean_ms:.3f}", f"{report_b.mean_ms:.3f}"),
        ("std ms", f"{report_a.std_ms:.3f}", f"{report_b.std_ms:.3f}"),
        ("p50 ms", f"{report_a.p50_ms:.3f}", f"{report_b.p50_ms:.3f}"),
        ("p99 ms", f"{report_a.p99_ms:.3f}", f"{report_b.p99_ms:.3f}"),
        ("runs", str(report_a.n_runs), str(report_b.n_runs)),
    ]
    widths = [max(len(r[c]) for r in rows) for c in range(3)]
    lines = ["  ".join(cell.ljust(widths[c]) for c, cell in enumerate(row)) for row in rows]
    lines.append(f"latency ratio ({report_b.name}/{report_a.name}): {ratio:.3f}")
    return ratio, "\n".join(lines)
