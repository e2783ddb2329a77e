"""End-to-end single-frame latency measurement."""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .arch import Network
from .data import normalize
from .metrics import argmax_mask


@dataclass
class BenchReport:
    warmup: int
    repeats: int
    times_ms: list[float] = field(default_factory=list)

    @property
    def mean_ms(self) -> float:
        return float(np.mean(self.times_ms))

    @property
    def fps(self) -> float:
        return 1000.0 / self.mean_ms

    def to_text(self, sep: str = "\t") -> str:
        head = sep.join(["warmup", "repeats", "mean_ms", "fps"])
        row = sep.join([str(self.warmup), str(self.repeats), repr(self.mean_ms), repr(self.fps)])
        times = "\n".join(f"{i}{sep}{t!r}" for i, t in enumerate(self.times_ms))
        return f"{head}\n{row}\n# run{sep}ms\n{times}\n"


def infer_mask(net: Network, image: np.ndarray, means: Sequence[float]) -> np.ndarray:
    """Full per-frame pipeline: normalise, eval-mode forward, argmax to 0/255."""
    x = normalize(image, means, dtype=next(iter(net.params.values())).dtype)
    probs = net.forward(x, mode="eval").final.data
    return argmax_mask(probs).astype(np.uint8) * 255


def bench_latency(net: Network, image: np.ndarray, means: Sequence[float] = (0.0, 0.0, 0.0),
                  repeats: int = 500, warmup: int = 20) -> BenchReport:
    """Time ``repeats`` complete inferences after ``warmup`` untimed ones."""
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    for _ in range(warmup):
        infer_mask(net, image, means)
    times = []
    for _ in range(repeats):
        start = time.perf_counter_ns()
        infer_mask(net, image, means)
        times.append((time.perf_counter_ns() - start) / 1e6)
    return BenchReport(warmup, repeats, times)
