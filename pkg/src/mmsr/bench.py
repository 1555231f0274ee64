"""Throughput of the per-pixel oracle versus the fused modulation kernel.

The oracle is timed on a horizontal strip of ``naive_rows`` rows (its cost
per pixel does not depend on the row), the fused kernel on the whole map.
Both are reported in pixels per second.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .modulation import modulate, reference_modulate


@dataclass
class BenchRow:
    channels: int
    size: int
    hw: int
    naive_px_per_s: float
    fast_px_per_s: float

    @property
    def speedup(self) -> float:
        return self.fast_px_per_s / self.naive_px_per_s


def bench_one(channels: int, size: int, hw: int, naive_rows: int = 4, repeat: int = 3, seed: int = 0) -> BenchRow:
    rng = np.random.default_rng(seed)
    a = Tensor(rng.standard_normal((channels, hw, hw)).astype(np.float32) * 0.1)
    b = Tensor(rng.standard_normal((channels, hw, hw)).astype(np.float32) * 0.1)
    rows = min(naive_rows, hw)
    start = (hw - rows) // 2

    best_naive = np.inf
    for _ in range(max(1, repeat // 2)):
        t0 = time.perf_counter()
        reference_modulate(a, b, size, rows=(start, start + rows))
        best_naive = min(best_naive, time.perf_counter() - t0)
    best_fast = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        modulate(a, b, size)
        best_fast = min(best_fast, time.perf_counter() - t0)
    return BenchRow(channels, size, hw, rows * hw / best_naive, hw * hw / best_fast)


def run_bench(sizes=(1, 3, 5, 7, 11), channels=(64,), hw: int = 128, naive_rows: int = 4, repeat: int = 3):
    return [bench_one(c, s, hw, naive_rows, repeat) for c in channels for s in sizes]


def format_rows(rows) -> list[str]:
    out = ["channels,size,hw,naive_px_per_s,fast_px_per_s,speedup"]
    for r in rows:
        out.append(f"{r.channels},{r.size},{r.hw},{r.naive_px_per_s:.1f},{r.fast_px_per_s:.1f},{r.speedup:.2f}")
    return out
