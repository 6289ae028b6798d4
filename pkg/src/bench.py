"""Wall-clock timing of the statistics kernel, full versus sampled."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Sequence, Tuple

import numpy as np

from .models import BenchResult, SamplingStrategy, Shape4, Tensor4
from .reporting import write_csv
from .rng import RngStream
from .sampling import make_plan, plan_indices, realized_ratio
from .tensor_core import channel_moments, full_indices

logger = logging.getLogger(__name__)

BENCH_COLUMNS = [
    "n",
    "h",
    "w",
    "c",
    "m",
    "strategy",
    "nominal_ratio",
    "realized_ratio",
    "t_full_us",
    "t_sampled_us",
    "speedup",
    "iqr_full",
    "iqr_sampled",
]

MIN_REPETITIONS = 5


@dataclass(frozen=True)
class BenchGrid:
    shapes: Tuple[Shape4, ...] = ((64, 128, 128, 32),)
    strategies: Tuple[str, ...] = ("FS",)
    ratios: Tuple[float, ...] = (1.0, 0.25, 0.0625, 0.03125)
    repetitions: int = 7
    warmup: int = 2
    seed: int = 0

    def cells(self) -> List[Tuple[int, Shape4, str, float]]:
        out = []
        for shape in self.shapes:
            for tag in self.strategies:
                for ratio in self.ratios:
                    out.append((len(out), shape, tag, ratio))
        return out


def _timed(fn: Any, repetitions: int, warmup: int) -> Tuple[np.ndarray, Any]:
    result = None
    for _ in range(warmup):
        result = fn()
    samples = np.empty(repetitions)
    for i in range(repetitions):
        start = time.perf_counter()
        result = fn()
        samples[i] = (time.perf_counter() - start) * 1e6
    return samples, result


def _iqr(samples: np.ndarray) -> float:
    q1, q3 = np.percentile(samples, [25, 75])
    return float(q3 - q1)


def _cross_check(t: Tensor4, indices: np.ndarray, stats: Any, label: str) -> None:
    points = t.positions()[indices]
    if not (
        np.allclose(stats.mean, points.mean(axis=0), rtol=1e-9, atol=1e-12)
        and np.allclose(stats.variance, points.var(axis=0), rtol=1e-9, atol=1e-12)
    ):
        raise RuntimeError(f"{label} statistics kernel disagrees with the numpy reference")


def time_stats_kernel(
    n: int,
    h: int,
    w: int,
    c: int,
    strategy: str,
    ratio: float,
    repetitions: int = 7,
    warmup: int = 2,
    seed: int = 0,
) -> BenchResult:
    """Median wall time of channel_moments over all positions and over a sampled plan.

    Both variants gather their index set first, read the same input tensor
    and are checked against numpy before their timings are reported.
    """
    if repetitions < MIN_REPETITIONS:
        raise ValueError(f"repetitions must be >= {MIN_REPETITIONS}, got {repetitions}")
    rng = RngStream(seed).derive("bench", n, h, w, c, strategy, ratio)
    t = Tensor4(rng.derive("data").generator().standard_normal((n, h, w, c)))
    plan = make_plan(SamplingStrategy(strategy, ratio), [t.shape], 0, rng)
    full_idx = full_indices(t)
    sampled_idx = plan_indices(plan, 0)

    full_times, full_stats = _timed(lambda: channel_moments(t, full_idx), repetitions, warmup)
    sampled_times, sampled_stats = _timed(
        lambda: channel_moments(t, sampled_idx), repetitions, warmup
    )
    _cross_check(t, full_idx, full_stats, "full")
    _cross_check(t, sampled_idx, sampled_stats, "sampled")

    result = BenchResult(
        n=n,
        h=h,
        w=w,
        c=c,
        strategy=strategy,
        nominal_ratio=ratio,
        realized_ratio=realized_ratio(plan, 0),
        t_full_us=float(np.median(full_times)),
        t_sampled_us=float(np.median(sampled_times)),
        iqr_full=_iqr(full_times),
        iqr_sampled=_iqr(sampled_times),
        repetitions=repetitions,
    )
    logger.info(
        "bench %s m=%d c=%d ratio=%g: full %.1fus sampled %.1fus speedup %.2fx",
        strategy, result.m, c, ratio, result.t_full_us, result.t_sampled_us, result.speedup,
    )
    return result


def bench_row(result: BenchResult) -> Dict[str, Any]:
    return {
        "n": result.n,
        "h": result.h,
        "w": result.w,
        "c": result.c,
        "m": result.m,
        "strategy": result.strategy,
        "nominal_ratio": result.nominal_ratio,
        "realized_ratio": result.realized_ratio,
        "t_full_us": result.t_full_us,
        "t_sampled_us": result.t_sampled_us,
        "speedup": result.speedup,
        "iqr_full": result.iqr_full,
        "iqr_sampled": result.iqr_sampled,
    }


def bench_sweep(grid: BenchGrid) -> List[BenchResult]:
    """One result per (shape, strategy, ratio) cell; each cell seeds its own input."""
    results = []
    for cell, (n, h, w, c), tag, ratio in grid.cells():
        results.append(
            time_stats_kernel(
                n, h, w, c, tag, ratio, grid.repetitions, grid.warmup, seed=grid.seed + cell
            )
        )
    return results


def write_bench_csv(
    results: Sequence[BenchResult], output_path: Path, manifest: str | None = None
) -> Path:
    return write_csv([bench_row(r) for r in results], BENCH_COLUMNS, output_path, manifest)


__all__ = [
    "BENCH_COLUMNS",
    "BenchGrid",
    "time_stats_kernel",
    "bench_row",
    "bench_sweep",
    "write_bench_csv",
]
