"""Simulated multi-node micro-batch normalization.

A gradient batch is split into K contiguous shards, one per virtual node.
Local policies normalize each shard with its own statistics and accumulate
shard gradients into a single optimizer step. Synchronised policies run the
gradient batch as one logical tensor whose statistics come from the rows of
the participating nodes, which matches an all-reduced Sync-BN forward and
backward exactly.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from .batchnorm import mix_stats
from .models import ChannelStats, MicroBnConfig, SyntheticDataset, Tensor4, TrainReport, VirtualSampler
from .net import Gradients, Model, NormContext
from .rng import RngStream
from .tensor_core import channel_moments, full_indices, gather_rows, pairwise_sum
from .training import StepFn, StepInfo, TrainConfig, fit, fit_sampler, forward_backward
from .vdn import prepend_virtual, sample_virtual, virtual_stats

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class NodeMoments:
    """Per-node (count, sum, sum of squares) per channel."""

    count: int
    total: np.ndarray
    total_sq: np.ndarray


def shard_batch(x: Tensor4, k: int) -> List[Tensor4]:
    if k < 1 or x.n % k:
        raise ValueError(f"batch of {x.n} cannot be split into {k} equal shards")
    size = x.n // k
    return [Tensor4(x.data[i * size : (i + 1) * size]) for i in range(k)]


def node_moments(shard: Tensor4) -> NodeMoments:
    points = shard.positions()
    return NodeMoments(
        count=shard.m,
        total=np.asarray(pairwise_sum(points)),
        total_sq=np.asarray(pairwise_sum(points**2)),
    )


def pooled_moments(nodes: Sequence[NodeMoments]) -> ChannelStats:
    """Exact pooled statistics: E[x^2] - E[x]^2 over the union of nodes."""
    if not nodes:
        raise ValueError("no nodes to pool")
    count = sum(node.count for node in nodes)
    mean = pairwise_sum(np.stack([node.total for node in nodes])) / count
    second = pairwise_sum(np.stack([node.total_sq for node in nodes])) / count
    return ChannelStats(mean=mean, variance=np.maximum(second - mean**2, 0.0), count=count)


def choose_sync_nodes(k_total: int, k: int, rng: RngStream, epoch: int) -> Tuple[int, ...]:
    """Nodes whose statistics are shared this epoch; refreshed once per epoch."""
    if not 1 <= k <= k_total:
        raise ValueError(f"k must be in [1, {k_total}], got {k}")
    chosen = rng.derive("nodes", epoch).generator().choice(k_total, size=k, replace=False)
    return tuple(int(i) for i in np.sort(chosen))


def _vdn_nodes(config: MicroBnConfig) -> Tuple[int, ...]:
    return tuple(range(config.nodes)) if config.vdn_nodes is None else config.vdn_nodes


def node_statistics(
    shards: Sequence[Tensor4],
    config: MicroBnConfig,
    rng: RngStream,
    epoch: int = 0,
    sampler: VirtualSampler | None = None,
    mix: float | None = None,
) -> List[ChannelStats]:
    """Statistics each node normalizes its shard with under ``config.policy``.

    For local_vdn, ``mix`` None means virtual-only statistics; otherwise the
    virtual and real-row estimates are mixed with that coefficient.
    """
    k = len(shards)
    if config.policy == "local":
        return [channel_moments(s, full_indices(s)) for s in shards]
    if config.policy == "sync_full":
        pooled = pooled_moments([node_moments(s) for s in shards])
        return [pooled] * k
    if config.policy == "sync_bs":
        chosen = choose_sync_nodes(k, config.k_nodes, rng, epoch)
        pooled = pooled_moments([node_moments(shards[i]) for i in chosen])
        return [pooled] * k

    if sampler is None:
        raise ValueError("local_vdn needs a fitted VirtualSampler")
    feeding = _vdn_nodes(config)
    out: List[ChannelStats] = []
    for node, shard in enumerate(shards):
        if node not in feeding:
            out.append(channel_moments(shard, full_indices(shard)))
            continue
        virtual = sample_virtual(sampler, rng.derive("virtual", epoch, 0, node))
        combined = prepend_virtual(shard, virtual)
        v_stats = virtual_stats(combined, sampler.n_v)
        if mix is None:
            out.append(v_stats)
        else:
            real = gather_rows(combined, sampler.n_v, shard.n)
            out.append(mix_stats(v_stats, channel_moments(combined, real), mix))
    return out


def input_stat_spread(stats: Sequence[ChannelStats], reference: ChannelStats) -> float:
    """Largest per-node L2 distance of the mean from the full-batch mean."""
    return max(float(np.linalg.norm(s.mean - reference.mean)) for s in stats)


def _microbn_step(
    config: MicroBnConfig,
    train_config: TrainConfig,
    sampler: VirtualSampler | None,
    rng: RngStream,
) -> StepFn:
    def step(model: Model, xb: Tensor4, yb: np.ndarray, info: StepInfo) -> Tuple[float, Gradients]:
        if config.policy in ("sync_full", "sync_bs"):
            if config.policy == "sync_full":
                nodes: Sequence[int] = range(config.nodes)
            else:
                nodes = choose_sync_nodes(config.nodes, config.k_nodes, rng, info.epoch)
            rows = tuple((node * config.statistic_batch, config.statistic_batch) for node in nodes)
            ctx = NormContext(stat_rows=rows, epoch=info.epoch, iteration=info.iteration)
            return forward_backward(model, xb, yb, ctx)

        feeding = _vdn_nodes(config) if config.policy == "local_vdn" else ()
        weight = config.statistic_batch / config.gradient_batch
        total_loss = 0.0
        grads: Gradients | None = None
        for node, shard in enumerate(shard_batch(xb, config.nodes)):
            labels = yb[node * config.statistic_batch : (node + 1) * config.statistic_batch]
            n_virtual, vdn = 0, "none"
            if node in feeding and sampler is not None:
                virtual = sample_virtual(
                    sampler, rng.derive("virtual", info.epoch, info.iteration, node)
                )
                shard = prepend_virtual(shard, virtual)
                n_virtual = sampler.n_v
                vdn = "mixed" if train_config.vdn == "mixed" else "pure"
            ctx = NormContext(
                n_virtual=n_virtual,
                vdn=vdn,
                mix=train_config.mix,
                track_moving=node == 0,
                epoch=info.epoch,
                iteration=info.iteration,
            )
            loss, shard_grads = forward_backward(model, shard, labels, ctx, weight)
            total_loss += loss
            if grads is None:
                grads = shard_grads
            else:
                grads.accumulate(shard_grads)
        assert grads is not None
        return total_loss, grads

    return step


def run_microbn(
    model: Model,
    dataset: SyntheticDataset,
    config: MicroBnConfig,
    train_config: TrainConfig,
) -> TrainReport:
    """Train with one optimizer step per gradient batch, normalizing per ``config.policy``."""
    if train_config.batch_size != config.gradient_batch:
        raise ValueError(
            f"batch_size {train_config.batch_size} must equal gradient_batch {config.gradient_batch}"
        )
    if train_config.strategy != "Full":
        raise ValueError("micro-BN runs normalize with full node statistics (strategy Full)")
    sampler = fit_sampler(dataset, config.n_v) if config.policy == "local_vdn" else None
    rng = RngStream(train_config.seed)
    pair = f"({config.gradient_batch}, {config.statistic_batch})"
    report = TrainReport(
        name=f"{config.policy}-{pair}",
        strategy=train_config.strategy,
        ratio=train_config.ratio,
        seed=train_config.seed,
        vdn=train_config.vdn if config.policy == "local_vdn" else "none",
        tags={
            "policy": config.policy,
            "gradient_batch": config.gradient_batch,
            "statistic_batch": config.statistic_batch,
            "nodes": config.nodes,
        },
    )
    first = Tensor4(dataset.train_images.data[: config.gradient_batch])
    spread = input_stat_spread(
        node_statistics(shard_batch(first, config.nodes), config, rng, 0, sampler,
                        train_config.mix if train_config.vdn == "mixed" else None),
        channel_moments(first, full_indices(first)),
    )
    report.tags["input_stat_spread"] = spread
    logger.info("micro-BN %s over %d nodes, input mean spread %.4f", pair, config.nodes, spread)
    report = fit(model, dataset, train_config, _microbn_step(config, train_config, sampler, rng), report)
    report.name = f"{config.policy}-{pair}"
    return report


__all__ = [
    "NodeMoments",
    "shard_batch",
    "node_moments",
    "pooled_moments",
    "choose_sync_nodes",
    "node_statistics",
    "input_stat_spread",
    "run_microbn",
]
