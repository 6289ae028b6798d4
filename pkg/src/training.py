"""SGD training loop with per-epoch plan refresh and moving-average tracking."""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Callable, Dict, List, Sequence, Tuple

import numpy as np

from .analysis import ErrorRecorder
from .batchnorm import NonFiniteInputError, reset_moving_average
from .datasets import iterate_batches
from .models import (
    EpochMetrics,
    SamplingPlan,
    SamplingStrategy,
    SyntheticDataset,
    Tensor4,
    TrainReport,
    VirtualSampler,
)
from .net import (
    VDN_MODES,
    Gradients,
    Model,
    NormContext,
    backward,
    forward,
    softmax_cross_entropy,
)
from .rng import RngStream
from .sampling import make_plan, plan_manifest, refresh_plan, run_name
from .tensor_core import pairwise_sum
from .vdn import fit_dataset_stats, prepend_virtual, sample_virtual

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 0.05
    momentum: float = 0.9
    lr_milestones: Tuple[int, ...] = ()
    lr_gamma: float = 0.1
    weight_decay: float = 0.0
    strategy: str = "Full"
    ratio: float = 1.0
    vdn: str = "none"
    n_v: int = 1
    mix: float = 0.5
    decay: float = 0.9
    seed: int = 0
    ma_reset_per_epoch: bool = False
    record_errors: bool = False

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if self.vdn not in VDN_MODES:
            raise ValueError(f"unknown vdn mode '{self.vdn}'")
        if not 0.0 <= self.mix <= 1.0:
            raise ValueError("mix must be in [0, 1]")
        if self.n_v < 1:
            raise ValueError("n_v must be >= 1")
        if not 0.0 < self.decay <= 1.0:
            raise ValueError(f"decay must be in (0, 1], got {self.decay}")
        SamplingStrategy(self.strategy, self.ratio)


@dataclass(frozen=True)
class StepInfo:
    epoch: int
    iteration: int
    plan: SamplingPlan
    recorder: ErrorRecorder | None


StepFn = Callable[[Model, Tensor4, np.ndarray, StepInfo], Tuple[float, Gradients]]


class SGD:
    """Plain SGD with momentum; updates parameters in place."""

    def __init__(self, momentum: float = 0.9, weight_decay: float = 0.0) -> None:
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity: Dict[str, np.ndarray] = {}

    def step(self, model: Model, grads: Gradients, lr: float) -> None:
        for name, param in model.parameters().items():
            grad = grads.params[name]
            if self.weight_decay:
                grad = grad + self.weight_decay * param
            velocity = self.velocity.get(name)
            if velocity is None:
                velocity = np.zeros_like(param)
            velocity = self.momentum * velocity - lr * grad
            self.velocity[name] = velocity
            param += velocity
        model.version += 1


def learning_rate(config: TrainConfig, epoch: int) -> float:
    drops = sum(1 for milestone in config.lr_milestones if epoch >= milestone)
    return config.lr * config.lr_gamma**drops


def forward_backward(
    model: Model, x: Tensor4, labels: np.ndarray, context: NormContext, weight: float = 1.0
) -> Tuple[float, Gradients]:
    """One pass; ``weight`` scales loss and gradient (shard share of the batch)."""
    logits, caches = forward(model, x, "train", context)
    loss, d_logits = softmax_cross_entropy(logits, labels)
    return loss * weight, backward(model, caches, d_logits * weight)


def evaluate(model: Model, images: Tensor4, labels: np.ndarray, batch_size: int = 256) -> float:
    correct = 0
    for xb, yb in iterate_batches(images, labels, batch_size, drop_last=False):
        logits, _ = forward(model, xb, "eval")
        correct += int((logits.argmax(axis=1) == yb).sum())
    return correct / images.n


def fit_sampler(dataset: SyntheticDataset, n_v: int) -> VirtualSampler:
    batches = (xb for xb, _ in iterate_batches(
        dataset.train_images, dataset.train_labels, 64, drop_last=False
    ))
    return fit_dataset_stats(batches, n_v=n_v)


def _plain_step(config: TrainConfig, sampler: VirtualSampler | None, rng: RngStream) -> StepFn:
    def step(model: Model, xb: Tensor4, yb: np.ndarray, info: StepInfo) -> Tuple[float, Gradients]:
        n_virtual = 0
        if sampler is not None:
            virtual = sample_virtual(sampler, rng.derive("virtual", info.epoch, info.iteration))
            xb = prepend_virtual(xb, virtual)
            n_virtual = sampler.n_v
        ctx = NormContext(
            plan=info.plan,
            n_virtual=n_virtual,
            vdn=config.vdn,
            mix=config.mix,
            recorder=info.recorder,
            epoch=info.epoch,
            iteration=info.iteration,
        )
        return forward_backward(model, xb, yb, ctx)

    return step


def fit(
    model: Model,
    dataset: SyntheticDataset,
    config: TrainConfig,
    step: StepFn,
    report: TrainReport,
) -> TrainReport:
    """Shared epoch loop; ``step`` decides how one gradient batch is computed."""
    images, labels = dataset.train_images, dataset.train_labels
    if images.n < config.batch_size:
        raise ValueError(f"train split of {images.n} samples is smaller than one batch")
    rng = RngStream(config.seed)
    strategy = SamplingStrategy(config.strategy, config.ratio)
    dims = model.bn_dims(config.batch_size, images.h, images.w, images.c)
    for layer in model.bn_layers():
        layer.state = replace(layer.state, decay=config.decay)
    optimizer = SGD(config.momentum, config.weight_decay)
    recorder = ErrorRecorder() if config.record_errors and dims else None

    plan: SamplingPlan | None = None
    for epoch in range(config.epochs):
        plan = make_plan(strategy, dims, epoch, rng) if plan is None else refresh_plan(plan, epoch, rng)
        report.plans.append(plan_manifest(plan))
        if epoch == 0 and dims:
            report.name = run_name(plan, 0, config.vdn)
        if config.ma_reset_per_epoch and epoch > 0:
            for layer in model.bn_layers():
                layer.state = reset_moving_average(layer.state)

        lr = learning_rate(config, epoch)
        order = rng.derive("shuffle", epoch).generator().permutation(images.n)
        losses: List[float] = []
        for it, (xb, yb) in enumerate(iterate_batches(images, labels, config.batch_size, order)):
            try:
                loss, grads = step(model, xb, yb, StepInfo(epoch, it, plan, recorder))
            except NonFiniteInputError:
                loss, grads = float("nan"), None
            if grads is None or not np.isfinite(loss) or not grads.all_finite():
                report.diverged = True
                report.diverged_at = (epoch, it)
                logger.warning("%s seed %d diverged at epoch %d iteration %d",
                               report.name, config.seed, epoch, it)
                break
            optimizer.step(model, grads, lr)
            losses.append(loss)
        if report.diverged:
            break

        train_loss = pairwise_sum(losses) / len(losses)
        val_acc = evaluate(model, dataset.val_images, dataset.val_labels)
        report.epochs.append(EpochMetrics(epoch, train_loss, val_acc, lr))
        logger.info("%s seed %d epoch %d loss %.4f val_acc %.4f",
                    report.name, config.seed, epoch, train_loss, val_acc)

    if recorder is not None:
        report.trace = recorder.trace()
    return report


def train(model: Model, dataset: SyntheticDataset, config: TrainConfig) -> TrainReport:
    sampler = fit_sampler(dataset, config.n_v) if config.vdn != "none" else None
    report = TrainReport(
        name=config.strategy,
        strategy=config.strategy,
        ratio=config.ratio,
        seed=config.seed,
        vdn=config.vdn,
    )
    return fit(model, dataset, config, _plain_step(config, sampler, RngStream(config.seed)), report)


def decay_sweep(
    model_factory: Callable[[int], Model],
    dataset: SyntheticDataset,
    base: TrainConfig,
    alphas: Sequence[float],
    seeds: Sequence[int],
) -> Dict[float, List[TrainReport]]:
    """Train every (alpha, seed) pair with the moving-average decay set to alpha."""
    results: Dict[float, List[TrainReport]] = {}
    for alpha in alphas:
        runs = []
        for seed in seeds:
            config = replace(base, decay=alpha, seed=seed)
            report = train(model_factory(seed), dataset, config)
            report.tags["decay"] = alpha
            runs.append(report)
        results[alpha] = runs
        logger.info("decay %.2f: mean final val_acc %.4f", alpha,
                    float(np.mean([r.final_val_acc for r in runs])))
    return results


__all__ = [
    "TrainConfig",
    "StepInfo",
    "SGD",
    "learning_rate",
    "forward_backward",
    "evaluate",
    "fit_sampler",
    "fit",
    "train",
    "decay_sweep",
]
