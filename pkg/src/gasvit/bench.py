"""Inference latency / throughput harness.

Protocol: ``warmup_runs`` untimed forwards, then ``n_runs`` forwards each
timed individually with a monotonic clock on one fixed, seeded input batch.
"""

from __future__ import annotations

import csv
import io
import json
import os
import platform
import time
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import tensor_core as tc
from .arch import Model, forward


@dataclass
class BenchReport:
    batch_size: int
    n_runs: int
    warmup_runs: int
    samples_ms: list[float]
    threads: int = 1
    hardware: str = ""
    model_name: str = ""
    mean_ms: float = field(init=False)
    median_ms: float = field(init=False)
    p95_ms: float = field(init=False)
    throughput: float = field(init=False)

    def __post_init__(self):
        s = np.asarray(self.samples_ms, dtype=np.float64)
        self.mean_ms = float(s.mean())
        self.median_ms = float(np.median(s))
        self.p95_ms = float(np.percentile(s, 95))
        self.throughput = self.batch_size / (self.mean_ms / 1000.0)

    def latency(self, stat: str = "mean") -> float:
        return {"mean": self.mean_ms, "median": self.median_ms, "p95": self.p95_ms}[stat]

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("mean_ms", "median_ms", "p95_ms", "throughput"):
            d.pop(k)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "BenchReport":
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "BenchReport":
        return cls.from_dict(json.loads(text))

    def samples_text(self) -> str:
        return "".join(f"{v!r}\n" for v in self.samples_ms)


def format_table(reports: list[BenchReport], stat: str = "mean") -> str:
    """Plain-text table with the columns Model, Batch Size, Latency (ms), Throughput (images/s)."""
    name_w = max([len("Model")] + [len(r.model_name) for r in reports])
    lines = [
        f"{'Model':<{name_w}}  {'Batch Size':>10}  {'Latency (ms)':>12}  {'Throughput (images/s)':>21}",
    ]
    lines.append("-" * len(lines[0]))
    for r in reports:
        lines.append(f"{r.model_name:<{name_w}}  {r.batch_size:>10d}  {r.latency(stat):>12.2f}  {r.throughput:>21.1f}")
    lines.append(f"latency statistic: {stat}; runs per row: {', '.join(str(r.n_runs) for r in reports)}")
    if reports:
        lines.append(f"hardware: {reports[0].hardware}")
    return "\n".join(lines)


def format_csv(reports: list[BenchReport]) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["model", "batch_size", "n_runs", "warmup_runs", "threads",
                 "mean_ms", "median_ms", "p95_ms", "throughput_images_per_s"])
    for r in reports:
        wr.writerow([r.model_name, r.batch_size, r.n_runs, r.warmup_runs, r.threads,
                     repr(r.mean_ms), repr(r.median_ms), repr(r.p95_ms), repr(r.throughput)])
    return buf.getvalue()


def hardware_descriptor(threads: int) -> str:
    cpu = platform.processor() or platform.machine()
    return f"{cpu}; {os.cpu_count()} logical CPUs; numpy {np.__version__}; threads={threads}"


def run_bench(
    model: Model,
    batch_size: int = 1,
    n_runs: int = 1000,
    warmup_runs: int = 10,
    seed: int = 0,
    threads: int = 1,
    fn: Callable[[Model, np.ndarray], np.ndarray] = forward,
) -> BenchReport:
    if n_runs < 1 or batch_size < 1 or warmup_runs < 0:
        raise ValueError("need n_runs >= 1, batch_size >= 1, warmup_runs >= 0")
    r, c = model.spec.input_resolution, model.spec.in_channels
    x = np.random.default_rng(seed).standard_normal((batch_size, c, r, r)).astype(model.pos_embed.dtype)
    samples = []
    with tc.threads(threads):
        for i in range(warmup_runs):
            fn(model, x)
        for i in range(n_runs):
            t0 = time.perf_counter_ns()
            try:
                fn(model, x)
            except Exception as e:
                raise RuntimeError(f"forward failed on timed run {i}: {e}") from e
            # clamp to one tick so a sample is never zero on coarse clocks
            samples.append(max(time.perf_counter_ns() - t0, 1) / 1e6)
    return BenchReport(
        batch_size=batch_size, n_runs=n_runs, warmup_runs=warmup_runs, samples_ms=samples,
        threads=threads, hardware=hardware_descriptor(threads), model_name=model.spec.name or "model",
    )
