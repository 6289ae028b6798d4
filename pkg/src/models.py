"""Domain models for sampled batch normalization."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Dict, List, Tuple

import numpy as np

Shape4 = Tuple[int, int, int, int]

STRATEGY_TAGS = ("Full", "NS", "BS", "FS", "FRS")
MICROBN_POLICIES = ("local", "sync_full", "sync_bs", "local_vdn")


def _frozen_array(values: Any) -> np.ndarray:
    arr = np.array(values, dtype=np.float64)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class Tensor4:
    """Dense activation tensor in (N, H, W, C) layout, 64-bit."""

    data: np.ndarray

    def __post_init__(self) -> None:
        arr = np.array(self.data, dtype=np.float64, order="C")
        if arr.ndim != 4:
            raise ValueError(f"Tensor4 needs 4 dimensions, got shape {arr.shape}")
        if min(arr.shape) < 1:
            raise ValueError(f"Tensor4 dimensions must be >= 1, got {arr.shape}")
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @classmethod
    def from_flat(cls, n: int, h: int, w: int, c: int, values: Any) -> "Tensor4":
        flat = np.asarray(values, dtype=np.float64).ravel()
        if flat.size != n * h * w * c:
            raise ValueError(
                f"expected {n * h * w * c} values for ({n},{h},{w},{c}), got {flat.size}"
            )
        return cls(flat.reshape(n, h, w, c))

    @property
    def n(self) -> int:
        return int(self.data.shape[0])

    @property
    def h(self) -> int:
        return int(self.data.shape[1])

    @property
    def w(self) -> int:
        return int(self.data.shape[2])

    @property
    def c(self) -> int:
        return int(self.data.shape[3])

    @property
    def shape(self) -> Shape4:
        return (self.n, self.h, self.w, self.c)

    @property
    def m(self) -> int:
        """Points per channel (n*h*w)."""
        return self.n * self.h * self.w

    @property
    def flat(self) -> np.ndarray:
        return self.data.reshape(-1)

    def positions(self) -> np.ndarray:
        """(m, c) view: one row per (sample, row, col) position."""
        return self.data.reshape(self.m, self.c)


@dataclass(frozen=True, eq=False)
class ChannelStats:
    """Per-channel mean and population variance plus the point count behind them."""

    mean: np.ndarray
    variance: np.ndarray
    count: int

    def __post_init__(self) -> None:
        mean = _frozen_array(self.mean).reshape(-1)
        variance = _frozen_array(self.variance).reshape(-1)
        if mean.shape != variance.shape:
            raise ValueError("mean and variance must cover the same channels")
        if np.any(variance < 0):
            raise ValueError("variance must be non-negative")
        if int(self.count) < 1:
            raise ValueError("count must be >= 1")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "variance", variance)
        object.__setattr__(self, "count", int(self.count))

    @property
    def channels(self) -> int:
        return int(self.mean.size)

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(self.variance)

    def all_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.mean)) and np.all(np.isfinite(self.variance)))


@dataclass(frozen=True)
class SamplingStrategy:
    """Strategy tag plus nominal sampling ratio s/m."""

    tag: str
    ratio: float = 1.0

    def __post_init__(self) -> None:
        if self.tag not in STRATEGY_TAGS:
            raise ValueError(
                f"unknown strategy '{self.tag}', expected one of {STRATEGY_TAGS}"
            )
        if not 0.0 < self.ratio <= 1.0:
            raise ValueError(f"ratio must be in (0, 1], got {self.ratio}")
        if self.tag == "Full" and self.ratio != 1.0:
            raise ValueError("Full strategy requires ratio 1")


@dataclass(frozen=True)
class LayerPlan:
    """Index state of one layer for one epoch.

    NS/BS use begin_n/ns, FS uses the patch rectangle, FRS keeps explicit
    flat indices. Unused fields cover the whole dimension.
    """

    dims: Shape4
    begin_n: int
    ns: int
    begin_h: int
    begin_w: int
    hs: int
    ws: int
    indices: Tuple[int, ...] = ()

    @property
    def m(self) -> int:
        n, h, w, _ = self.dims
        return n * h * w


@dataclass(frozen=True)
class SamplingPlan:
    strategy: SamplingStrategy
    layers: Tuple[LayerPlan, ...]
    epoch: int


@dataclass(eq=False)
class BnLayerState:
    """Trainable affine parameters and moving statistics of one BN layer."""

    gamma: np.ndarray
    beta: np.ndarray
    epsilon: float = 1e-5
    moving_mean: np.ndarray = field(default_factory=lambda: np.zeros(0))
    moving_var: np.ndarray = field(default_factory=lambda: np.zeros(0))
    decay: float = 0.9
    initialized: bool = False

    def __post_init__(self) -> None:
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if not 0.0 < self.decay <= 1.0:
            raise ValueError(f"decay must be in (0, 1], got {self.decay}")

    @property
    def channels(self) -> int:
        return int(self.gamma.size)


@dataclass(frozen=True, eq=False)
class StatGroup:
    """One subset of positions feeding the statistics with a mixing weight."""

    indices: np.ndarray
    weight: float
    mean: np.ndarray


@dataclass(frozen=True, eq=False)
class BnForwardCache:
    indices: np.ndarray
    x_hat: np.ndarray
    mean: np.ndarray
    variance: np.ndarray
    x: Tensor4
    groups: Tuple[StatGroup, ...]


@dataclass(frozen=True, eq=False)
class BnGradients:
    d_input: np.ndarray
    d_gamma: np.ndarray
    d_beta: np.ndarray


@dataclass(frozen=True, eq=False)
class VirtualSampler:
    """Offline per-channel dataset moments used to draw virtual samples."""

    dataset_mean: np.ndarray
    dataset_std: np.ndarray
    n_v: int
    input_dims: Tuple[int, int, int]

    def __post_init__(self) -> None:
        if np.any(np.asarray(self.dataset_std) < 0):
            raise ValueError("dataset_std must be non-negative")
        if self.n_v < 1:
            raise ValueError("n_v must be >= 1")
        object.__setattr__(self, "dataset_mean", _frozen_array(self.dataset_mean))
        object.__setattr__(self, "dataset_std", _frozen_array(self.dataset_std))


@dataclass(frozen=True, eq=False)
class ErrorTrace:
    """E_mu / E_sigma per (layer, iteration); rows are layers."""

    e_mu: np.ndarray
    e_sigma: np.ndarray

    @property
    def layers(self) -> int:
        return int(self.e_mu.shape[0])

    @property
    def iterations(self) -> int:
        return int(self.e_mu.shape[1])


@dataclass(frozen=True, eq=False)
class CovModel:
    matrix: np.ndarray

    def __post_init__(self) -> None:
        cov = _frozen_array(self.matrix)
        if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
            raise ValueError("covariance must be a square matrix")
        if not np.allclose(cov, cov.T, rtol=0.0, atol=1e-12):
            raise ValueError("covariance must be symmetric")
        if np.linalg.eigvalsh(cov).min() < -1e-10:
            raise ValueError("covariance must be positive semi-definite")
        object.__setattr__(self, "matrix", cov)

    @property
    def dimension(self) -> int:
        return int(self.matrix.shape[0])


@dataclass(frozen=True)
class SpeedupModel:
    m: int
    s: int
    depth_full: float
    depth_sampled: float
    speedup: float
    mem_fraction: float
    adds_full: int
    adds_sampled: int


@dataclass(frozen=True)
class BenchResult:
    n: int
    h: int
    w: int
    c: int
    strategy: str
    nominal_ratio: float
    realized_ratio: float
    t_full_us: float
    t_sampled_us: float
    iqr_full: float
    iqr_sampled: float
    repetitions: int

    @property
    def m(self) -> int:
        return self.n * self.h * self.w

    @property
    def speedup(self) -> float:
        return self.t_full_us / self.t_sampled_us


@dataclass(frozen=True)
class MicroBnConfig:
    """(gradient batch, statistic batch) pair plus the normalization policy."""

    gradient_batch: int
    statistic_batch: int
    policy: str = "local"
    k_nodes: int = 1
    n_v: int = 1
    vdn_nodes: Tuple[int, ...] | None = None

    def __post_init__(self) -> None:
        if self.statistic_batch < 1 or self.gradient_batch < 1:
            raise ValueError("batch sizes must be >= 1")
        if self.gradient_batch % self.statistic_batch:
            raise ValueError(
                f"gradient_batch {self.gradient_batch} is not divisible by "
                f"statistic_batch {self.statistic_batch}"
            )
        if self.policy not in MICROBN_POLICIES:
            raise ValueError(f"unknown micro-BN policy '{self.policy}'")
        if self.policy == "sync_bs" and not 1 <= self.k_nodes <= self.nodes:
            raise ValueError(f"k_nodes must be in [1, {self.nodes}], got {self.k_nodes}")
        if self.n_v < 1:
            raise ValueError("n_v must be >= 1")
        if self.vdn_nodes is not None and any(
            not 0 <= node < self.nodes for node in self.vdn_nodes
        ):
            raise ValueError(f"vdn_nodes must lie in [0, {self.nodes})")

    @property
    def nodes(self) -> int:
        return self.gradient_batch // self.statistic_batch


@dataclass(frozen=True, eq=False)
class SyntheticDataset:
    train_images: Tensor4
    train_labels: np.ndarray
    val_images: Tensor4
    val_labels: np.ndarray
    classes: int
    params: Dict[str, Any] = field(default_factory=dict)


@dataclass(frozen=True)
class EpochMetrics:
    epoch: int
    train_loss: float
    val_acc: float
    lr: float


@dataclass
class TrainReport:
    """Outcome of one training run."""

    name: str
    strategy: str
    ratio: float
    seed: int
    vdn: str = "none"
    epochs: List[EpochMetrics] = field(default_factory=list)
    diverged: bool = False
    diverged_at: Tuple[int, int] | None = None
    trace: ErrorTrace | None = None
    plans: List[Dict[str, Any]] = field(default_factory=list)
    tags: Dict[str, Any] = field(default_factory=dict)

    @property
    def final_val_acc(self) -> float:
        return self.epochs[-1].val_acc if self.epochs else float("nan")


__all__ = [
    "Shape4",
    "STRATEGY_TAGS",
    "MICROBN_POLICIES",
    "Tensor4",
    "ChannelStats",
    "SamplingStrategy",
    "LayerPlan",
    "SamplingPlan",
    "BnLayerState",
    "StatGroup",
    "BnForwardCache",
    "BnGradients",
    "VirtualSampler",
    "ErrorTrace",
    "CovModel",
    "SpeedupModel",
    "BenchResult",
    "MicroBnConfig",
    "SyntheticDataset",
    "EpochMetrics",
    "TrainReport",
]
