"""Small trainable network: 3x3 conv, dense, ReLU, BN, global average pooling.

Layers keep numpy arrays in (N, H, W, C) or (N, F) layout. BN layers draw
their statistics according to a NormContext (sampling plan, virtual rows,
synchronised micro-BN rows) and hand the estimates to an optional recorder.
"""

from __future__ import annotations

import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Sequence, Tuple

import numpy as np

from .analysis import ErrorRecorder, record_errors
from .batchnorm import (
    DEFAULT_DECAY,
    DEFAULT_EPSILON,
    bn_backward,
    bn_forward_eval,
    bn_forward_train,
    init_bn_state,
    mix_stats,
    update_moving_average,
)
from .models import BnLayerState, SamplingPlan, Shape4, StatGroup, Tensor4
from .rng import RngStream
from .sampling import plan_indices
from .tensor_core import channel_moments, gather_rows
from .vdn import virtual_stats

logger = logging.getLogger(__name__)

LAYER_KINDS = ("conv3x3", "dense", "relu", "bn", "global_avg_pool")
VDN_MODES = ("none", "pure", "mixed")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    fan_in: int = 0
    fan_out: int = 0

    def __post_init__(self) -> None:
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind '{self.kind}'")


@dataclass
class NormContext:
    """How BN layers estimate statistics during one forward pass.

    ``stat_rows`` lists (begin, count) sample ranges whose full feature maps
    supply the statistics; it takes precedence over ``plan``.
    """

    plan: SamplingPlan | None = None
    n_virtual: int = 0
    vdn: str = "none"
    mix: float = 0.5
    stat_rows: Tuple[Tuple[int, int], ...] | None = None
    track_moving: bool = True
    recorder: ErrorRecorder | None = None
    epoch: int = 0
    iteration: int = 0

    def __post_init__(self) -> None:
        if self.vdn not in VDN_MODES:
            raise ValueError(f"unknown vdn mode '{self.vdn}'")
        if self.vdn != "none" and self.n_virtual < 1:
            raise ValueError("vdn needs at least one virtual row")


class Layer(ABC):
    kind = ""

    @abstractmethod
    def forward(self, x: np.ndarray, ctx: NormContext | None) -> Tuple[np.ndarray, Any]: ...

    @abstractmethod
    def backward(self, d_out: np.ndarray, cache: Any) -> Tuple[np.ndarray, Dict[str, np.ndarray]]: ...

    def params(self) -> Dict[str, np.ndarray]:
        return {}

    def output_shape(self, shape: Tuple[int, ...]) -> Tuple[int, ...]:
        return shape


class Conv3x3(Layer):
    """Direct 3x3 convolution, stride 1, zero 'same' padding."""

    kind = "conv3x3"

    def __init__(self, cin: int, cout: int, rng: np.random.Generator) -> None:
        self.weight = rng.standard_normal((3, 3, cin, cout)) * np.sqrt(2.0 / (9 * cin))
        self.bias = np.zeros(cout)

    def forward(self, x: np.ndarray, ctx: NormContext | None) -> Tuple[np.ndarray, Any]:
        n, h, w, cin = x.shape
        if cin != self.weight.shape[2]:
            raise ValueError(f"conv expects {self.weight.shape[2]} channels, got {cin}")
        padded = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
        out = np.zeros((n, h, w, self.weight.shape[3]))
        for di in range(3):
            for dj in range(3):
                out += padded[:, di : di + h, dj : dj + w, :] @ self.weight[di, dj]
        return out + self.bias, padded

    def backward(self, d_out: np.ndarray, cache: Any) -> Tuple[np.ndarray, Dict[str, np.ndarray]]:
        padded = cache
        n, h, w, _ = d_out.shape
        d_weight = np.zeros_like(self.weight)
        d_padded = np.zeros_like(padded)
        for di in range(3):
            for dj in range(3):
                window = padded[:, di : di + h, dj : dj + w, :]
                d_weight[di, dj] = np.tensordot(window, d_out, axes=([0, 1, 2], [0, 1, 2]))
                d_padded[:, di : di + h, dj : dj + w, :] += d_out @ self.weight[di, dj].T
        d_bias = d_out.sum(axis=(0, 1, 2))
        return d_padded[:, 1:-1, 1:-1, :], {"weight": d_weight, "bias": d_bias}

    def params(self) -> Dict[str, np.ndarray]:
        return {"weight": self.weight, "bias": self.bias}

    def output_shape(self, shape: Tuple[int, ...]) -> Tuple[int, ...]:
        n, h, w, _ = shape
        return (n, h, w, int(self.weight.shape[3]))


class Dense(Layer):
    """Fully connected layer; 4-D inputs are flattened per sample."""

    kind = "dense"

    def __init__(self, fan_in: int, fan_out: int, rng: np.random.Generator) -> None:
        self.weight = rng.standard_normal((fan_in, fan_out)) * np.sqrt(2.0 / fan_in)
        self.bias = np.zeros(fan_out)

    def forward(self, x: np.ndarray, ctx: NormContext | None) -> Tuple[np.ndarray, Any]:
        flat = x.reshape(x.shape[0], -1)
        if flat.shape[1] != self.weight.shape[0]:
            raise ValueError(f"dense expects {self.weight.shape[0]} features, got {flat.shape[1]}")
        return flat @ self.weight + self.bias, (flat, x.shape)

    def backward(self, d_out: np.ndarray, cache: Any) -> Tuple[np.ndarray, Dict[str, np.ndarray]]:
        flat, in_shape = cache
        grads = {"weight": flat.T @ d_out, "bias": d_out.sum(axis=0)}
        return (d_out @ self.weight.T).reshape(in_shape), grads

    def params(self) -> Dict[str, np.ndarray]:
        return {"weight": self.weight, "bias": self.bias}

    def output_shape(self, shape: Tuple[int, ...]) -> Tuple[int, ...]:
        return (shape[0], int(self.weight.shape[1]))


class ReLU(Layer):
    kind = "relu"

    def forward(self, x: np.ndarray, ctx: NormContext | None) -> Tuple[np.ndarray, Any]:
        mask = x > 0
        return x * mask, mask

    def backward(self, d_out: np.ndarray, cache: Any) -> Tuple[np.ndarray, Dict[str, np.ndarray]]:
        return d_out * cache, {}


class GlobalAvgPool(Layer):
    kind = "global_avg_pool"

    def forward(self, x: np.ndarray, ctx: NormContext | None) -> Tuple[np.ndarray, Any]:
        return x.mean(axis=(1, 2)), x.shape

    def backward(self, d_out: np.ndarray, cache: Any) -> Tuple[np.ndarray, Dict[str, np.ndarray]]:
        n, h, w, c = cache
        return np.broadcast_to(d_out[:, None, None, :] / (h * w), cache).copy(), {}

    def output_shape(self, shape: Tuple[int, ...]) -> Tuple[int, ...]:
        return (shape[0], shape[3])


class BatchNorm(Layer):
    """BN layer; ``index`` is its position among the model's BN layers."""

    kind = "bn"

    def __init__(self, channels: int, index: int, epsilon: float, decay: float) -> None:
        self.index = index
        self.state: BnLayerState = init_bn_state(channels, epsilon=epsilon, decay=decay)

    def params(self) -> Dict[str, np.ndarray]:
        return {"gamma": self.state.gamma, "beta": self.state.beta}

    def _statistics(self, t: Tensor4, ctx: NormContext):
        nv = ctx.n_virtual
        offset = nv * t.h * t.w
        if ctx.stat_rows is not None:
            sampled = np.concatenate([gather_rows(t, b, k) for b, k in ctx.stat_rows])
        elif ctx.plan is None:
            sampled = np.arange(offset, t.m, dtype=np.int64)
        else:
            dims = ctx.plan.layers[self.index].dims
            if dims != (t.n - nv, t.h, t.w, t.c):
                raise ValueError(
                    f"plan dims {dims} do not match BN layer {self.index} input "
                    f"{(t.n - nv, t.h, t.w, t.c)}"
                )
            sampled = plan_indices(ctx.plan, self.index) + offset

        if ctx.vdn == "none":
            return channel_moments(t, sampled), sampled, None
        v_stats = virtual_stats(t, nv)
        virt = gather_rows(t, 0, nv)
        if ctx.vdn == "pure":
            return v_stats, virt, None
        s_stats = channel_moments(t, sampled)
        groups = (
            StatGroup(indices=virt, weight=ctx.mix, mean=v_stats.mean),
            StatGroup(indices=sampled, weight=1.0 - ctx.mix, mean=s_stats.mean),
        )
        stats = mix_stats(v_stats, s_stats, ctx.mix)
        return stats, np.concatenate([virt, sampled]), groups

    def forward(self, x: np.ndarray, ctx: NormContext | None) -> Tuple[np.ndarray, Any]:
        flat_input = x.ndim == 2
        t = Tensor4(x[:, None, None, :] if flat_input else x)
        if ctx is None:
            y = bn_forward_eval(t, self.state).data
            return (y[:, 0, 0, :] if flat_input else y), None

        stats, indices, groups = self._statistics(t, ctx)
        y4, cache = bn_forward_train(t, self.state, stats, indices, groups)
        if ctx.track_moving:
            self.state = update_moving_average(self.state, stats)
        if ctx.recorder is not None:
            real = np.arange(ctx.n_virtual * t.h * t.w, t.m, dtype=np.int64)
            record_errors(ctx.recorder, self.index, stats, channel_moments(t, real))
        y = np.array(y4.data)
        return (y[:, 0, 0, :] if flat_input else y), (cache, flat_input)

    def backward(self, d_out: np.ndarray, cache: Any) -> Tuple[np.ndarray, Dict[str, np.ndarray]]:
        if cache is None:
            raise ValueError("BN backward needs a train-mode forward")
        bn_cache, flat_input = cache
        d4 = d_out[:, None, None, :] if flat_input else d_out
        grads = bn_backward(d4, bn_cache, self.state)
        d_in = grads.d_input[:, 0, 0, :] if flat_input else grads.d_input
        return d_in, {"gamma": grads.d_gamma, "beta": grads.d_beta}


@dataclass
class Model:
    layers: List[Layer]
    version: int = 0

    def bn_layers(self) -> List[BatchNorm]:
        return [layer for layer in self.layers if isinstance(layer, BatchNorm)]

    def bn_dims(self, n: int, h: int, w: int, c: int) -> List[Shape4]:
        """Input dims of every BN layer for a batch of shape (n, h, w, c)."""
        shape: Tuple[int, ...] = (n, h, w, c)
        dims: List[Shape4] = []
        for layer in self.layers:
            if isinstance(layer, BatchNorm):
                if len(shape) == 4:
                    dims.append((shape[0], shape[1], shape[2], shape[3]))
                else:
                    dims.append((shape[0], 1, 1, shape[1]))
            shape = layer.output_shape(shape)
        return dims

    def parameters(self) -> Dict[str, np.ndarray]:
        out: Dict[str, np.ndarray] = {}
        for i, layer in enumerate(self.layers):
            for name, value in layer.params().items():
                out[f"{i}.{name}"] = value
        return out

    def layer_name(self, i: int) -> str:
        return f"{i}:{self.layers[i].kind}"


@dataclass
class ForwardCaches:
    version: int
    n_virtual: int
    layer_caches: List[Any]
    input_shape: Tuple[int, ...]


@dataclass
class Gradients:
    params: Dict[str, np.ndarray]
    d_input: np.ndarray

    def accumulate(self, other: "Gradients") -> None:
        for name, grad in other.params.items():
            self.params[name] = self.params[name] + grad

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(g)) for g in self.params.values())


def build_model(
    specs: Sequence[LayerSpec],
    rng: RngStream,
    epsilon: float = DEFAULT_EPSILON,
    decay: float = DEFAULT_DECAY,
) -> Model:
    gen = rng.derive("init").generator()
    layers: List[Layer] = []
    bn_count = 0
    for spec in specs:
        if spec.kind == "conv3x3":
            layers.append(Conv3x3(spec.fan_in, spec.fan_out, gen))
        elif spec.kind == "dense":
            layers.append(Dense(spec.fan_in, spec.fan_out, gen))
        elif spec.kind == "relu":
            layers.append(ReLU())
        elif spec.kind == "global_avg_pool":
            layers.append(GlobalAvgPool())
        else:
            layers.append(BatchNorm(spec.fan_out, bn_count, epsilon, decay))
            bn_count += 1
    return Model(layers)


def conv_bn_specs(
    in_channels: int, conv_channels: Sequence[int], classes: int, batch_norm: bool = True
) -> List[LayerSpec]:
    """conv3x3 [-> bn] -> relu per entry, then global pooling and a dense head."""
    specs: List[LayerSpec] = []
    cin = in_channels
    for cout in conv_channels:
        specs.append(LayerSpec("conv3x3", cin, cout))
        if batch_norm:
            specs.append(LayerSpec("bn", cout, cout))
        specs.append(LayerSpec("relu"))
        cin = cout
    specs.append(LayerSpec("global_avg_pool"))
    specs.append(LayerSpec("dense", cin, classes))
    return specs


def forward(
    model: Model,
    x: Tensor4 | np.ndarray,
    mode: str = "train",
    context: NormContext | None = None,
) -> Tuple[np.ndarray, ForwardCaches]:
    """Run the model; logits cover the real (non-virtual) rows only."""
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown mode '{mode}'")
    data = x.data if isinstance(x, Tensor4) else np.asarray(x, dtype=np.float64)
    ctx = (context or NormContext()) if mode == "train" else None
    n_virtual = ctx.n_virtual if ctx is not None else 0
    if n_virtual >= data.shape[0]:
        raise ValueError("batch holds no real rows")

    out = np.array(data)
    caches: List[Any] = []
    for layer in model.layers:
        out, cache = layer.forward(out, ctx)
        caches.append(cache)
    return out[n_virtual:], ForwardCaches(model.version, n_virtual, caches, data.shape)


def backward(model: Model, caches: ForwardCaches, d_logits: np.ndarray) -> Gradients:
    if caches.version != model.version or len(caches.layer_caches) != len(model.layers):
        raise ValueError("stale cache")
    d = np.asarray(d_logits, dtype=np.float64)
    if caches.n_virtual:
        d = np.concatenate([np.zeros((caches.n_virtual,) + d.shape[1:]), d], axis=0)
    params: Dict[str, np.ndarray] = {}
    for i in reversed(range(len(model.layers))):
        d, grads = model.layers[i].backward(d, caches.layer_caches[i])
        for name, grad in grads.items():
            params[f"{i}.{name}"] = grad
    return Gradients(params=params, d_input=d)


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its gradient w.r.t. the logits."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    n = logits.shape[0]
    rows = np.arange(n)
    loss = float(-log_probs[rows, labels].mean())
    d_logits = np.exp(log_probs)
    d_logits[rows, labels] -= 1.0
    return loss, d_logits / n


@dataclass
class GradCheckReport:
    per_layer: Dict[str, float] = field(default_factory=dict)
    tolerance: float = 1e-4

    @property
    def max_error(self) -> float:
        return max(self.per_layer.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance


def relative_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def grad_check(
    model: Model,
    x: Tensor4 | np.ndarray,
    labels: np.ndarray,
    tolerance: float = 1e-4,
    context: NormContext | None = None,
    step: float = 1e-5,
    check_input: bool = True,
) -> GradCheckReport:
    """Compare backward() with central differences of the cross-entropy loss.

    Every parameter entry (and input entry when ``check_input``) is perturbed
    by +/-step; the sampling plan and virtual rows stay fixed throughout.
    """
    ctx = replace(context or NormContext(), track_moving=False, recorder=None)
    data = np.array(x.data if isinstance(x, Tensor4) else x, dtype=np.float64)

    def loss_at(inputs: np.ndarray) -> float:
        logits, _ = forward(model, inputs, "train", ctx)
        return softmax_cross_entropy(logits, labels)[0]

    logits, caches = forward(model, data, "train", ctx)
    _, d_logits = softmax_cross_entropy(logits, labels)
    grads = backward(model, caches, d_logits)

    report = GradCheckReport(tolerance=tolerance)
    for i, layer in enumerate(model.layers):
        worst = None
        for name, param in layer.params().items():
            analytic = grads.params[f"{i}.{name}"]
            for idx in np.ndindex(param.shape):
                original = param[idx]
                param[idx] = original + step
                plus = loss_at(data)
                param[idx] = original - step
                minus = loss_at(data)
                param[idx] = original
                err = relative_error(float(analytic[idx]), (plus - minus) / (2 * step))
                worst = err if worst is None else max(worst, err)
        if worst is not None:
            report.per_layer[model.layer_name(i)] = worst

    if check_input:
        worst_input = 0.0
        for idx in np.ndindex(data.shape):
            original = data[idx]
            data[idx] = original + step
            plus = loss_at(data)
            data[idx] = original - step
            minus = loss_at(data)
            data[idx] = original
            numeric = (plus - minus) / (2 * step)
            worst_input = max(worst_input, relative_error(float(grads.d_input[idx]), numeric))
        report.per_layer["input"] = worst_input

    logger.debug("gradient check max relative error %.3e", report.max_error)
    return report


__all__ = [
    "LAYER_KINDS",
    "VDN_MODES",
    "LayerSpec",
    "NormContext",
    "Layer",
    "Conv3x3",
    "Dense",
    "ReLU",
    "GlobalAvgPool",
    "BatchNorm",
    "Model",
    "ForwardCaches",
    "Gradients",
    "build_model",
    "conv_bn_specs",
    "forward",
    "backward",
    "softmax_cross_entropy",
    "GradCheckReport",
    "relative_error",
    "grad_check",
]
