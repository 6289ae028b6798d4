"""Batch normalization with full or sampled statistics.

Forward normalizes every position with statistics estimated from the index
set S. Backward reduces dl/dE, dl/dVar, dl/dgamma and dl/dbeta over all m
positions; only positions in S receive the statistic terms of dl/dx.
"""

from __future__ import annotations

from dataclasses import replace
from typing import Sequence

import numpy as np

from .models import (
    BnForwardCache,
    BnGradients,
    BnLayerState,
    ChannelStats,
    StatGroup,
    Tensor4,
)
from .tensor_core import check_indices, pairwise_sum

DEFAULT_EPSILON = 1e-5
DEFAULT_DECAY = 0.9


class NonFiniteInputError(ValueError):
    """Raised when a BN layer sees NaN or Inf activations or batch statistics."""


def init_bn_state(
    channels: int, epsilon: float = DEFAULT_EPSILON, decay: float = DEFAULT_DECAY
) -> BnLayerState:
    return BnLayerState(
        gamma=np.ones(channels),
        beta=np.zeros(channels),
        epsilon=epsilon,
        moving_mean=np.zeros(channels),
        moving_var=np.ones(channels),
        decay=decay,
        initialized=False,
    )


def _check_channels(state: BnLayerState, channels: int) -> None:
    if state.channels != channels:
        raise ValueError(f"layer has {state.channels} channels, input has {channels}")


def bn_forward_train(
    x: Tensor4,
    state: BnLayerState,
    stats: ChannelStats,
    indices: Sequence[int] | np.ndarray,
    groups: Sequence[StatGroup] | None = None,
) -> tuple[Tensor4, BnForwardCache]:
    """Normalize all of ``x`` with ``stats`` estimated on ``indices``.

    ``groups`` describes how mixed statistics were assembled (see mix_stats);
    without it the whole index set is a single group of weight 1.
    """
    if not np.all(np.isfinite(x.data)):
        raise NonFiniteInputError("non-finite input")
    if not stats.all_finite():
        raise NonFiniteInputError("non-finite statistics")
    _check_channels(state, x.c)
    if stats.channels != x.c:
        raise ValueError(f"stats cover {stats.channels} channels, input has {x.c}")
    idx = check_indices(indices, x.m)
    if stats.count != idx.size:
        raise ValueError(f"stats.count {stats.count} != |indices| {idx.size}")
    if groups is None:
        groups = (StatGroup(indices=idx, weight=1.0, mean=stats.mean),)
    elif sum(g.indices.size for g in groups) != idx.size:
        raise ValueError("statistic groups do not partition the index set")

    inv_std = 1.0 / np.sqrt(stats.variance + state.epsilon)
    x_hat = (x.data - stats.mean) * inv_std
    y = state.gamma * x_hat + state.beta
    cache = BnForwardCache(
        indices=idx,
        x_hat=x_hat,
        mean=stats.mean,
        variance=stats.variance,
        x=x,
        groups=tuple(groups),
    )
    return Tensor4(y), cache


def bn_forward_eval(x: Tensor4, state: BnLayerState) -> Tensor4:
    if not state.initialized:
        raise RuntimeError("moving statistics are not initialized")
    _check_channels(state, x.c)
    inv_std = 1.0 / np.sqrt(state.moving_var + state.epsilon)
    x_hat = (x.data - state.moving_mean) * inv_std
    return Tensor4(state.gamma * x_hat + state.beta)


def update_moving_average(state: BnLayerState, stats: ChannelStats) -> BnLayerState:
    """X_ma <- alpha * X_new + (1 - alpha) * X_ma; the first call copies X_new."""
    if not stats.all_finite():
        raise NonFiniteInputError("non-finite statistics")
    _check_channels(state, stats.channels)
    if not state.initialized:
        return replace(
            state,
            moving_mean=np.array(stats.mean),
            moving_var=np.array(stats.variance),
            initialized=True,
        )
    alpha = state.decay
    return replace(
        state,
        moving_mean=alpha * stats.mean + (1.0 - alpha) * state.moving_mean,
        moving_var=alpha * stats.variance + (1.0 - alpha) * state.moving_var,
    )


def reset_moving_average(state: BnLayerState) -> BnLayerState:
    return replace(state, initialized=False)


def mix_stats(virtual: ChannelStats, sampled: ChannelStats, mix: float) -> ChannelStats:
    """Linear combination of means and of variances (not pooled moments)."""
    if virtual.channels != sampled.channels:
        raise ValueError(
            f"channel mismatch: {virtual.channels} virtual vs {sampled.channels} sampled"
        )
    if not 0.0 <= mix <= 1.0:
        raise ValueError(f"mix must be in [0, 1], got {mix}")
    return ChannelStats(
        mean=mix * virtual.mean + (1.0 - mix) * sampled.mean,
        variance=mix * virtual.variance + (1.0 - mix) * sampled.variance,
        count=virtual.count + sampled.count,
    )


def bn_backward(
    d_out: Tensor4 | np.ndarray, cache: BnForwardCache, state: BnLayerState
) -> BnGradients:
    x = cache.x
    dy_full = d_out.data if isinstance(d_out, Tensor4) else np.asarray(d_out, dtype=np.float64)
    if dy_full.shape != x.shape:
        raise ValueError(f"d_out shape {dy_full.shape} != cached input shape {x.shape}")

    m, c = x.m, x.c
    dy = dy_full.reshape(m, c)
    x_hat = cache.x_hat.reshape(m, c)
    points = x.positions()
    inv_std = 1.0 / np.sqrt(cache.variance + state.epsilon)

    d_xhat = dy * state.gamma
    d_mean = pairwise_sum(d_xhat) * -inv_std
    d_var = pairwise_sum(d_xhat * (points - cache.mean)) * -0.5 * inv_std**3
    d_gamma = pairwise_sum(dy * x_hat)
    d_beta = pairwise_sum(dy)

    d_x = d_xhat * inv_std
    for group in cache.groups:
        s = group.indices.size
        d_x[group.indices] += group.weight * (
            d_mean / s + d_var * 2.0 * (points[group.indices] - group.mean) / s
        )

    return BnGradients(
        d_input=d_x.reshape(x.shape),
        d_gamma=np.asarray(d_gamma),
        d_beta=np.asarray(d_beta),
    )


__all__ = [
    "DEFAULT_EPSILON",
    "DEFAULT_DECAY",
    "NonFiniteInputError",
    "init_bn_state",
    "bn_forward_train",
    "bn_forward_eval",
    "update_moving_average",
    "reset_moving_average",
    "mix_stats",
    "bn_backward",
]
