"""Dense versus windowed masked attention: FLOPs and wall-clock time."""

from __future__ import annotations

import os
import platform
import statistics
import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.stats import spearmanr

from .attention import BENCH_ROWS, MaskSpec, ProjectionParams, flop_count, nonlocal_infer, nonlocal_infer_dense


@dataclass
class BenchRow:
    setting: str
    dense_flops: int
    masked_flops: int
    ratio: float
    dense_ms: float
    masked_ms: float

    @property
    def speedup(self) -> float:
        return self.dense_ms / self.masked_ms


def median_ms(fn: Callable[[], object], repeats: int) -> float:
    fn()  # warm-up, not timed
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append((time.perf_counter() - t0) * 1e3)
    return statistics.median(times)


def run_bench(
    dims: tuple[int, int, int] = (16, 28, 28),
    channels: int = 16,
    bottleneck: int = 8,
    specs: Sequence[MaskSpec] = BENCH_ROWS,
    repeats: int = 5,
    seed: int = 0,
) -> list[BenchRow]:
    """Time every mask setting against one shared dense baseline.

    The dense forward does not depend on the mask, so it is timed once and
    its median is reported on every row.
    """
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(dims + (channels,))
    p = ProjectionParams.init(channels, bottleneck, rng)
    p.w_z = rng.standard_normal(p.w_z.shape)
    dense_ms = median_ms(lambda: nonlocal_infer_dense(x, p), repeats)
    rows = []
    for spec in specs:
        fc = flop_count(dims, channels, bottleneck, spec)
        masked_ms = median_ms(lambda: nonlocal_infer(x, p, spec), repeats)
        rows.append(BenchRow(spec.label(), fc.dense, fc.masked, fc.ratio, dense_ms, masked_ms))
    return rows


def rank_correlation(rows: Sequence[BenchRow]) -> float:
    """Spearman correlation between FLOP ratio and measured time ratio."""
    rho = spearmanr([r.ratio for r in rows], [r.masked_ms / r.dense_ms for r in rows]).statistic
    return float(rho)


def machine_info() -> list[str]:
    return [
        f"# machine: {platform.machine()} {platform.system()} {platform.release()}",
        f"# python: {platform.python_version()} numpy: {np.__version__} cpus: {os.cpu_count()}",
    ]


def format_bench_csv(rows: Sequence[BenchRow], header_comments: Sequence[str] = ()) -> str:
    lines = list(header_comments)
    lines.append("setting,dense_flops,masked_flops,ratio,dense_ms,masked_ms")
    for r in rows:
        lines.append(f"{r.setting},{r.dense_flops},{r.masked_flops},{r.ratio:.6f},{r.dense_ms:.3f},{r.masked_ms:.3f}")
    return "\n".join(lines) + "\n"
