"""Virtual dataset normalization.

Dataset moments are fitted once offline; every iteration draws fresh
Gaussian virtual samples, puts them in front of the real batch, and the BN
layers take their statistics from those leading rows.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable

import numpy as np

from .models import ChannelStats, Tensor4, VirtualSampler
from .reporting import save_json_report
from .rng import RngStream
from .tensor_core import channel_moments, full_indices, gather_rows


def fit_dataset_stats(dataset: Iterable[Tensor4], n_v: int = 1) -> VirtualSampler:
    """Per-channel mean/std over every pixel of every sample, in one pass.

    Batch moments come from channel_moments and are merged with the
    parallel-variance update, so no batch is held after it is folded in.
    """
    count = 0
    mean: np.ndarray | None = None
    m2: np.ndarray | None = None
    dims: tuple[int, int, int] | None = None
    for batch in dataset:
        if dims is None:
            dims = (batch.h, batch.w, batch.c)
        elif (batch.h, batch.w, batch.c) != dims:
            raise ValueError(f"batch shape {batch.shape} does not match {dims}")
        stats = channel_moments(batch, full_indices(batch))
        if mean is None or m2 is None:
            count, mean, m2 = stats.count, stats.mean.copy(), stats.variance * stats.count
            continue
        total = count + stats.count
        delta = stats.mean - mean
        mean = mean + delta * (stats.count / total)
        m2 = m2 + stats.variance * stats.count + delta**2 * (count * stats.count / total)
        count = total
    if mean is None or m2 is None or dims is None:
        raise ValueError("empty dataset")
    return VirtualSampler(
        dataset_mean=mean,
        dataset_std=np.sqrt(np.maximum(m2 / count, 0.0)),
        n_v=n_v,
        input_dims=dims,
    )


def sample_virtual(vs: VirtualSampler, rng: RngStream) -> Tensor4:
    h, w, c = vs.input_dims
    noise = rng.generator().standard_normal((vs.n_v, h, w, c))
    return Tensor4(noise * vs.dataset_std + vs.dataset_mean)


def prepend_virtual(real: Tensor4, virtual: Tensor4) -> Tensor4:
    if (real.h, real.w, real.c) != (virtual.h, virtual.w, virtual.c):
        raise ValueError(
            f"virtual shape {virtual.shape} does not match real shape {real.shape}"
        )
    return Tensor4(np.concatenate([virtual.data, real.data], axis=0))


def virtual_stats(x_with_virtual: Tensor4, n_v: int) -> ChannelStats:
    if not 1 <= n_v <= x_with_virtual.n:
        raise ValueError(f"n_v={n_v} exceeds batch of {x_with_virtual.n}")
    return channel_moments(x_with_virtual, gather_rows(x_with_virtual, 0, n_v))


def save_sampler(vs: VirtualSampler, path: Path) -> Path:
    payload = {
        "dataset_mean": vs.dataset_mean.tolist(),
        "dataset_std": vs.dataset_std.tolist(),
        "n_v": vs.n_v,
        "input_dims": list(vs.input_dims),
    }
    save_json_report(payload, path)
    return Path(path)


def load_sampler(path: Path, n_v: int | None = None) -> VirtualSampler:
    with Path(path).open("r", encoding="utf-8") as handle:
        payload = json.load(handle)
    h, w, c = (int(d) for d in payload["input_dims"])
    return VirtualSampler(
        dataset_mean=np.asarray(payload["dataset_mean"], dtype=np.float64),
        dataset_std=np.asarray(payload["dataset_std"], dtype=np.float64),
        n_v=int(payload["n_v"]) if n_v is None else n_v,
        input_dims=(h, w, c),
    )


__all__ = [
    "fit_dataset_stats",
    "sample_virtual",
    "prepend_virtual",
    "virtual_stats",
    "save_sampler",
    "load_sampler",
]
