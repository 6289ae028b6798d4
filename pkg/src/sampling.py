"""Per-layer sampling plans for NS, BS, FS and FRS.

Index state is drawn once per epoch from the ("plan", epoch, layer) substream
and then reused by every iteration of that epoch.
"""

from __future__ import annotations

import logging
import math
from dataclasses import replace
from functools import lru_cache
from typing import Any, Dict, List, Sequence

import numpy as np

from .models import LayerPlan, SamplingPlan, SamplingStrategy, Shape4
from .rng import RngStream
from .tensor_core import full_indices, gather_patch, gather_rows

logger = logging.getLogger(__name__)


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def sample_count(ratio: float, total: int) -> int:
    return max(1, round_half_up(ratio * total))


def patch_side(ratio: float, side: int) -> int:
    """Side of the near-square FS patch; clamped to the map."""
    return min(side, max(1, round_half_up(side * math.sqrt(ratio))))


def _layer_plan(
    strategy: SamplingStrategy, dims: Shape4, gen: np.random.Generator
) -> LayerPlan:
    n, h, w, c = (int(d) for d in dims)
    if min(n, h, w, c) < 1:
        raise ValueError(f"layer dims must be >= 1, got {dims}")
    whole = LayerPlan(dims=(n, h, w, c), begin_n=0, ns=n, begin_h=0, begin_w=0, hs=h, ws=w)
    tag = strategy.tag
    if tag == "Full":
        return whole
    if tag in ("NS", "BS"):
        ns = sample_count(strategy.ratio, n)
        if ns > n:
            raise ValueError("oversampling")
        begin_n = 0 if tag == "NS" else int(gen.integers(0, n - ns, endpoint=True))
        return replace(whole, begin_n=begin_n, ns=ns)
    if tag == "FS":
        hs = patch_side(strategy.ratio, h)
        ws = patch_side(strategy.ratio, w)
        begin_h = int(gen.integers(0, h - hs, endpoint=True))
        begin_w = int(gen.integers(0, w - ws, endpoint=True))
        return replace(whole, begin_h=begin_h, begin_w=begin_w, hs=hs, ws=ws)
    # FRS
    m = n * h * w
    s = sample_count(strategy.ratio, m)
    if s > m:
        raise ValueError("oversampling")
    chosen = np.sort(gen.choice(m, size=s, replace=False))
    return replace(whole, indices=tuple(int(i) for i in chosen))


def make_plan(
    strategy: SamplingStrategy,
    layer_dims: Sequence[Shape4],
    epoch: int,
    rng: RngStream,
) -> SamplingPlan:
    """Build the index state of every layer for ``epoch``.

    The result depends only on (strategy, dims, epoch, rng.seed).
    """
    layers = tuple(
        _layer_plan(strategy, dims, rng.derive("plan", epoch, layer).generator())
        for layer, dims in enumerate(layer_dims)
    )
    return SamplingPlan(strategy=strategy, layers=layers, epoch=epoch)


def refresh_plan(plan: SamplingPlan, epoch: int, rng: RngStream) -> SamplingPlan:
    if epoch <= plan.epoch:
        raise ValueError(f"non-monotone epoch: {epoch} after {plan.epoch}")
    if plan.strategy.tag in ("Full", "NS"):
        return replace(plan, epoch=epoch)
    refreshed = make_plan(plan.strategy, [lp.dims for lp in plan.layers], epoch, rng)
    logger.debug("refreshed %s plan for epoch %d", plan.strategy.tag, epoch)
    return refreshed


@lru_cache(maxsize=256)
def _layer_indices(lp: LayerPlan, tag: str) -> np.ndarray:
    if tag == "Full":
        idx = full_indices(lp.dims)
    elif tag in ("NS", "BS"):
        idx = gather_rows(lp.dims, lp.begin_n, lp.ns)
    elif tag == "FS":
        idx = gather_patch(lp.dims, lp.begin_h, lp.begin_w, lp.hs, lp.ws)
    else:
        idx = np.asarray(lp.indices, dtype=np.int64)
    idx.flags.writeable = False
    return idx


def plan_indices(plan: SamplingPlan, layer: int) -> np.ndarray:
    """Flat (N,H,W) positions sampled at ``layer``; read-only and constant per epoch."""
    if not 0 <= layer < len(plan.layers):
        raise KeyError(f"unknown layer {layer}")
    return _layer_indices(plan.layers[layer], plan.strategy.tag)


def sampled_size(plan: SamplingPlan, layer: int) -> int:
    lp = plan.layers[layer]
    tag = plan.strategy.tag
    if tag in ("NS", "BS"):
        return lp.ns * lp.dims[1] * lp.dims[2]
    if tag == "FS":
        return lp.dims[0] * lp.hs * lp.ws
    if tag == "FRS":
        return len(lp.indices)
    return lp.m


def realized_ratio(plan: SamplingPlan, layer: int) -> float:
    return sampled_size(plan, layer) / plan.layers[layer].m


def run_name(plan: SamplingPlan, layer: int = 0, vdn: str = "none") -> str:
    """Approach-Sampled_size/Original_size-ratio(%) label, e.g. "FS-9/144-6.25%"."""
    s = sampled_size(plan, layer)
    m = plan.layers[layer].m
    approach = plan.strategy.tag
    if vdn != "none":
        approach = "VDN" if vdn == "pure" else f"VDN+{approach}"
    return f"{approach}-{s}/{m}-{100.0 * s / m:.4g}%"


def plan_manifest(plan: SamplingPlan) -> Dict[str, Any]:
    layers: List[Dict[str, Any]] = []
    for i, lp in enumerate(plan.layers):
        entry: Dict[str, Any] = {
            "layer": i,
            "dims": list(lp.dims),
            "realized_ratio": realized_ratio(plan, i),
        }
        tag = plan.strategy.tag
        if tag in ("NS", "BS"):
            entry.update(begin_n=lp.begin_n, ns=lp.ns)
        elif tag == "FS":
            entry.update(begin_h=lp.begin_h, begin_w=lp.begin_w, hs=lp.hs, ws=lp.ws)
        elif tag == "FRS":
            entry["indices"] = list(lp.indices)
        layers.append(entry)
    return {
        "strategy": plan.strategy.tag,
        "ratio": plan.strategy.ratio,
        "epoch": plan.epoch,
        "layers": layers,
    }


__all__ = [
    "round_half_up",
    "sample_count",
    "patch_side",
    "make_plan",
    "refresh_plan",
    "plan_indices",
    "sampled_size",
    "realized_ratio",
    "run_name",
    "plan_manifest",
]
