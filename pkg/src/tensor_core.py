"""Reduction and indexing primitives shared by every layer.

All reductions go through ``pairwise_sum``: a balanced adder tree that pairs
neighbours level by level. The association order depends only on the operand
count, so results are bit-stable for a fixed input order.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Iterable, Iterator, List, Tuple

import numpy as np

from .models import ChannelStats, Shape4, Tensor4

_reduction_recorders: List[List[int]] = []


@contextmanager
def record_reductions() -> Iterator[List[int]]:
    """Collect the operand count of every pairwise_sum call made inside the block."""
    lengths: List[int] = []
    _reduction_recorders.append(lengths)
    try:
        yield lengths
    finally:
        _reduction_recorders.remove(lengths)


def pairwise_sum(values: Iterable[float] | np.ndarray, axis: int = 0) -> float | np.ndarray:
    """Sum along ``axis`` with a balanced binary tree of depth ceil(log2(len)).

    A 1-D input returns a float; higher-rank input returns the reduced array.
    """
    arr = np.asarray(values if isinstance(values, np.ndarray) else list(values), dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    arr = np.moveaxis(arr, axis, 0)
    length = arr.shape[0]
    if length == 0:
        raise ValueError("empty reduction")
    for lengths in _reduction_recorders:
        lengths.append(length)

    while arr.shape[0] > 1:
        half = arr.shape[0] // 2
        paired = arr[0 : 2 * half : 2] + arr[1 : 2 * half : 2]
        if arr.shape[0] % 2:
            paired = np.concatenate([paired, arr[-1:]], axis=0)
        arr = paired

    result = arr[0]
    if np.ndim(result) == 0:
        return float(result)
    return np.array(result)


class KahanSummation:
    """Incremental compensated summation."""

    def __init__(self) -> None:
        self.sum = 0.0
        self.carry = 0.0

    def add(self, value: float) -> None:
        value = float(value) - self.carry
        total = self.sum + value
        self.carry = (total - self.sum) - value
        self.sum = total


def kahan_sum(values: Iterable[float]) -> float:
    acc = KahanSummation()
    for v in values:
        acc.add(v)
    return acc.sum


def _dims(t: Tensor4 | Shape4) -> Shape4:
    if isinstance(t, Tensor4):
        return t.shape
    n, h, w, c = (int(d) for d in t)
    return (n, h, w, c)


def full_indices(t: Tensor4 | Shape4) -> np.ndarray:
    n, h, w, _ = _dims(t)
    return np.arange(n * h * w, dtype=np.int64)


def check_indices(indices: Iterable[int] | np.ndarray, m: int) -> np.ndarray:
    idx = np.asarray(indices if isinstance(indices, np.ndarray) else list(indices), dtype=np.int64)
    idx = idx.reshape(-1)
    if idx.size == 0:
        raise ValueError("empty index set")
    if idx.min() < 0 or idx.max() >= m:
        raise ValueError(f"index out of range for {m} positions")
    return idx


def channel_moments(t: Tensor4, indices: Iterable[int] | np.ndarray) -> ChannelStats:
    """Mean and population variance per channel over the given (N,H,W) positions."""
    idx = check_indices(indices, t.m)
    points = t.positions()[idx]
    s = idx.size
    mean = pairwise_sum(points) / s
    variance = pairwise_sum((points - mean) ** 2) / s
    return ChannelStats(mean=mean, variance=variance, count=s)


def gather_rows(t: Tensor4 | Shape4, begin_n: int, ns: int) -> np.ndarray:
    n, h, w, _ = _dims(t)
    if ns < 1 or begin_n < 0 or begin_n + ns > n:
        raise ValueError(f"sample range [{begin_n}, {begin_n + ns}) out of bounds for n={n}")
    start = begin_n * h * w
    return np.arange(start, start + ns * h * w, dtype=np.int64)


def gather_patch(
    t: Tensor4 | Shape4, begin_h: int, begin_w: int, hs: int, ws: int
) -> np.ndarray:
    """Flat indices of the hs x ws patch at (begin_h, begin_w) in every sample."""
    n, h, w, _ = _dims(t)
    if hs < 1 or ws < 1:
        raise ValueError("patch size must be >= 1")
    if not (0 <= begin_h <= h - hs and 0 <= begin_w <= w - ws):
        raise ValueError(
            f"patch {hs}x{ws} at ({begin_h},{begin_w}) out of bounds for {h}x{w} map"
        )
    samples = np.arange(n, dtype=np.int64)[:, None, None]
    rows = np.arange(begin_h, begin_h + hs, dtype=np.int64)[None, :, None]
    cols = np.arange(begin_w, begin_w + ws, dtype=np.int64)[None, None, :]
    return ((samples * h + rows) * w + cols).reshape(-1)


def split_index(flat: int, dims: Shape4) -> Tuple[int, int, int]:
    """Inverse of the flat (N,H,W) position index."""
    _, h, w, _ = dims
    sample, rest = divmod(int(flat), h * w)
    row, col = divmod(rest, w)
    return sample, row, col


__all__ = [
    "record_reductions",
    "pairwise_sum",
    "KahanSummation",
    "kahan_sum",
    "full_indices",
    "check_indices",
    "channel_moments",
    "gather_rows",
    "gather_patch",
    "split_index",
]
