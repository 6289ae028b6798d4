"""YAML run configuration.

One file drives every command. Each top-level section maps onto a frozen
dataclass below; unknown keys and out-of-range values raise ConfigError
naming the offending field. The master seed can be overridden by the
BNSAMPLING_SEED environment variable and by ``--seed`` (the flag wins).
"""

from __future__ import annotations

import dataclasses
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Mapping, Tuple, Type, TypeVar

import yaml

from .models import MICROBN_POLICIES, STRATEGY_TAGS, Shape4
from .net import VDN_MODES

logger = logging.getLogger(__name__)

SEED_ENV = "BNSAMPLING_SEED"
COMMANDS = ("train", "microbn", "bench", "analyze", "decay-sweep")

T = TypeVar("T")


class ConfigError(ValueError):
    """Invalid configuration; ``field`` is the dotted path of the bad entry."""

    def __init__(self, field: str, message: str) -> None:
        super().__init__(f"{field}: {message}")
        self.field = field


@dataclass(frozen=True)
class DatasetSection:
    classes: int = 4
    per_class: int = 64
    height: int = 12
    width: int = 12
    channels: int = 1
    noise: float = 0.4
    val_fraction: float = 0.25
    seed: int | None = None


@dataclass(frozen=True)
class ModelSection:
    conv_channels: Tuple[int, ...] = (8, 8, 8)
    batch_norm: bool = True
    epsilon: float = 1e-5


@dataclass(frozen=True)
class TrainSection:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 0.05
    momentum: float = 0.9
    lr_milestones: Tuple[int, ...] = ()
    lr_gamma: float = 0.1
    weight_decay: float = 0.0
    decay: float = 0.9
    n_v: int = 1
    mix: float = 0.5
    ma_reset_per_epoch: bool = False
    record_errors: bool = True


@dataclass(frozen=True)
class VariantSection:
    strategy: str = "Full"
    ratio: float = 1.0
    vdn: str = "none"
    mix: float | None = None
    name: str | None = None

    @property
    def label(self) -> str:
        if self.name:
            return self.name
        base = self.strategy if self.strategy == "Full" else f"{self.strategy}@{self.ratio:g}"
        return base if self.vdn == "none" else f"VDN-{self.vdn}+{base}"


@dataclass(frozen=True)
class MicroBnSection:
    gradient_batch: int = 64
    statistic_batch: int = 4
    baseline_statistic_batch: int = 32
    policies: Tuple[str, ...] = ("local", "local_vdn", "sync_full")
    k_nodes: int = 1
    n_v: int = 1
    vdn_nodes: Tuple[int, ...] | None = None
    vdn: str = "pure"


@dataclass(frozen=True)
class BenchSection:
    shapes: Tuple[Shape4, ...] = ((16, 256, 256, 32),)
    strategies: Tuple[str, ...] = ("FS",)
    ratios: Tuple[float, ...] = (1.0, 0.25, 0.0625, 0.03125)
    repetitions: int = 7
    warmup: int = 2


@dataclass(frozen=True)
class AnalysisSection:
    cov_models: int = 20
    max_points: int = 16
    draws: int = 1_000_000
    alphas: Tuple[float, ...] = (0.3, 0.7, 0.9)
    horizon: int = 100_000
    estimator_dims: Shape4 = (16, 16, 16, 4)
    estimator_ratio: float = 0.0625
    estimator_trials: int = 100
    within_corr: float = 0.5
    speedup_cases: Tuple[Tuple[int, float], ...] = ((56 * 56 * 128, 0.03125),)


@dataclass(frozen=True)
class DecaySweepSection:
    alphas: Tuple[float, ...] = (0.5, 0.7, 0.9, 1.0)
    strategy: str = "BS"
    ratio: float = 0.03125
    vdn: str = "none"


@dataclass(frozen=True)
class RunConfig:
    """Resolved configuration of one CLI invocation."""

    command: str = "train"
    seed: int = 0
    seeds: Tuple[int, ...] = (0,)
    out: Path = Path("runs")
    jobs: int = 1
    dataset: DatasetSection = field(default_factory=DatasetSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    variants: Tuple[VariantSection, ...] = (VariantSection(),)
    microbn: MicroBnSection = field(default_factory=MicroBnSection)
    bench: BenchSection = field(default_factory=BenchSection)
    analysis: AnalysisSection = field(default_factory=AnalysisSection)
    decay_sweep: DecaySweepSection = field(default_factory=DecaySweepSection)

    @property
    def run_seeds(self) -> Tuple[int, ...]:
        """Training seeds: the master seed offset by every entry of ``seeds``."""
        return tuple(self.seed + offset for offset in self.seeds)

    @property
    def dataset_seed(self) -> int:
        return self.seed if self.dataset.seed is None else self.dataset.seed


SECTIONS: Dict[str, Type[Any]] = {
    "dataset": DatasetSection,
    "model": ModelSection,
    "train": TrainSection,
    "microbn": MicroBnSection,
    "bench": BenchSection,
    "analysis": AnalysisSection,
    "decay_sweep": DecaySweepSection,
}


def _tupled(value: Any) -> Any:
    if isinstance(value, list):
        return tuple(_tupled(v) for v in value)
    return value


def _section(cls: Type[T], raw: Any, prefix: str) -> T:
    if raw is None:
        return cls()
    if not isinstance(raw, Mapping):
        raise ConfigError(prefix, "expected a mapping")
    known = {f.name for f in dataclasses.fields(cls)}  # type: ignore[arg-type]
    for key in raw:
        if key not in known:
            raise ConfigError(f"{prefix}.{key}", "unknown key")
    return cls(**{key: _tupled(value) for key, value in raw.items()})


def _check(condition: bool, field_name: str, message: str) -> None:
    if not condition:
        raise ConfigError(field_name, message)


def _check_ratio(ratio: Any, field_name: str) -> None:
    _check(
        isinstance(ratio, (int, float)) and 0.0 < float(ratio) <= 1.0,
        field_name,
        f"ratio must be in (0, 1], got {ratio!r}",
    )


def _check_strategy(tag: str, ratio: float, prefix: str) -> None:
    _check(tag in STRATEGY_TAGS, f"{prefix}.strategy", f"expected one of {STRATEGY_TAGS}")
    _check_ratio(ratio, f"{prefix}.ratio")
    _check(tag != "Full" or ratio == 1.0, f"{prefix}.ratio", "Full strategy requires ratio 1")


def validate(config: RunConfig) -> RunConfig:
    _check(config.command in COMMANDS, "command", f"expected one of {COMMANDS}")
    _check(len(config.seeds) > 0, "seeds", "at least one seed is required")
    _check(config.jobs >= 1, "jobs", "must be >= 1")

    ds = config.dataset
    _check(ds.classes >= 2, "dataset.classes", "must be >= 2")
    _check(ds.per_class >= 2, "dataset.per_class", "must be >= 2")
    _check(ds.height >= 3 and ds.width >= 3, "dataset.height", "maps must be at least 3x3")
    _check(ds.channels >= 1, "dataset.channels", "must be >= 1")
    _check(ds.noise >= 0, "dataset.noise", "must be non-negative")
    _check(0.0 < ds.val_fraction < 1.0, "dataset.val_fraction", "must be in (0, 1)")

    _check(len(config.model.conv_channels) > 0, "model.conv_channels", "at least one conv layer")
    _check(all(c >= 1 for c in config.model.conv_channels), "model.conv_channels", "must be >= 1")
    _check(config.model.epsilon > 0, "model.epsilon", "must be positive")

    tr = config.train
    _check(tr.epochs >= 1, "train.epochs", "must be >= 1")
    _check(tr.batch_size >= 1, "train.batch_size", "must be >= 1")
    _check(tr.lr >= 0, "train.lr", "must be non-negative")
    _check(0.0 < tr.decay <= 1.0, "train.decay", "must be in (0, 1]")
    _check(0.0 <= tr.mix <= 1.0, "train.mix", "must be in [0, 1]")
    _check(tr.n_v >= 1, "train.n_v", "must be >= 1")
    train_split = ds.per_class - min(ds.per_class - 1, max(1, round(ds.per_class * ds.val_fraction)))
    _check(
        config.command not in ("train", "decay-sweep") or ds.classes * train_split >= tr.batch_size,
        "train.batch_size",
        "larger than the train split",
    )

    _check(len(config.variants) > 0, "variants", "at least one variant is required")
    labels = set()
    for i, variant in enumerate(config.variants):
        prefix = f"variants[{i}]"
        _check_strategy(variant.strategy, variant.ratio, prefix)
        _check(variant.vdn in VDN_MODES, f"{prefix}.vdn", f"expected one of {VDN_MODES}")
        _check(
            variant.mix is None or 0.0 <= variant.mix <= 1.0, f"{prefix}.mix", "must be in [0, 1]"
        )
        _check(variant.label not in labels, f"{prefix}.name", f"duplicate label '{variant.label}'")
        labels.add(variant.label)

    mb = config.microbn
    _check(mb.statistic_batch >= 1, "microbn.statistic_batch", "must be >= 1")
    _check(
        mb.gradient_batch % mb.statistic_batch == 0,
        "microbn.statistic_batch",
        "must divide gradient_batch",
    )
    _check(
        mb.baseline_statistic_batch >= 1 and mb.gradient_batch % mb.baseline_statistic_batch == 0,
        "microbn.baseline_statistic_batch",
        "must divide gradient_batch",
    )
    for policy in mb.policies:
        _check(policy in MICROBN_POLICIES, "microbn.policies", f"unknown policy '{policy}'")
    nodes = mb.gradient_batch // mb.statistic_batch
    _check(1 <= mb.k_nodes <= nodes, "microbn.k_nodes", f"must be in [1, {nodes}]")
    _check(mb.n_v >= 1, "microbn.n_v", "must be >= 1")
    _check(mb.vdn in ("pure", "mixed"), "microbn.vdn", "expected pure or mixed")
    _check(
        config.command != "microbn" or ds.classes * train_split >= mb.gradient_batch,
        "microbn.gradient_batch",
        "larger than the train split",
    )
    if mb.vdn_nodes is not None:
        _check(
            all(0 <= node < nodes for node in mb.vdn_nodes),
            "microbn.vdn_nodes",
            f"nodes must lie in [0, {nodes})",
        )

    bench = config.bench
    _check(bench.repetitions >= 5, "bench.repetitions", "must be >= 5")
    for shape in bench.shapes:
        _check(len(shape) == 4 and min(shape) >= 1, "bench.shapes", f"bad shape {shape}")
    for tag in bench.strategies:
        _check(tag in STRATEGY_TAGS, "bench.strategies", f"unknown strategy '{tag}'")
    for ratio in bench.ratios:
        _check_ratio(ratio, "bench.ratios")

    an = config.analysis
    _check(an.draws >= 2, "analysis.draws", "must be >= 2")
    _check(an.max_points >= 2, "analysis.max_points", "must be >= 2")
    _check(an.estimator_trials >= 1, "analysis.estimator_trials", "must be >= 1")
    _check(0.0 <= an.within_corr <= 1.0, "analysis.within_corr", "must be in [0, 1]")
    _check_ratio(an.estimator_ratio, "analysis.estimator_ratio")
    for alpha in an.alphas:
        _check(0.0 < alpha <= 1.0, "analysis.alphas", f"alpha {alpha} not in (0, 1]")

    sweep = config.decay_sweep
    _check(len(sweep.alphas) > 0, "decay_sweep.alphas", "at least one alpha is required")
    for alpha in sweep.alphas:
        _check(0.0 < alpha <= 1.0, "decay_sweep.alphas", f"alpha {alpha} not in (0, 1]")
    _check_strategy(sweep.strategy, sweep.ratio, "decay_sweep")
    _check(sweep.vdn in VDN_MODES, "decay_sweep.vdn", f"expected one of {VDN_MODES}")
    return config


def parse_config(raw: Mapping[str, Any] | None, command: str = "train") -> RunConfig:
    """Build a validated RunConfig from an already-parsed YAML mapping."""
    raw = dict(raw or {})
    top = {f.name for f in dataclasses.fields(RunConfig)}
    for key in raw:
        if key not in top:
            raise ConfigError(key, "unknown key")
    try:
        kwargs: Dict[str, Any] = {"command": raw.pop("command", command)}
        for name, cls in SECTIONS.items():
            kwargs[name] = _section(cls, raw.pop(name, None), name)
        if "variants" in raw:
            variants = raw.pop("variants")
            if not isinstance(variants, list):
                raise ConfigError("variants", "expected a list")
            kwargs["variants"] = tuple(
                _section(VariantSection, v, f"variants[{i}]") for i, v in enumerate(variants)
            )
        if "out" in raw:
            kwargs["out"] = Path(raw.pop("out"))
        if "seeds" in raw:
            seeds = raw.pop("seeds")
            kwargs["seeds"] = tuple(seeds) if isinstance(seeds, list) else (seeds,)
        kwargs.update({key: _tupled(value) for key, value in raw.items()})
        return validate(RunConfig(**kwargs))
    except TypeError as e:
        raise ConfigError("config", str(e)) from e


def load_config(
    path: Path | None,
    command: str = "train",
    seed: int | None = None,
    out: Path | None = None,
    jobs: int | None = None,
) -> RunConfig:
    """Read ``path`` (or defaults when None) and apply environment and flag overrides."""
    raw: Dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError("config", f"file not found: {path}")
        with path.open("r", encoding="utf-8") as handle:
            try:
                loaded = yaml.safe_load(handle)
            except yaml.YAMLError as e:
                raise ConfigError("config", f"invalid YAML: {e}") from e
        if loaded is not None and not isinstance(loaded, Mapping):
            raise ConfigError("config", "top level must be a mapping")
        raw = dict(loaded or {})
    raw["command"] = command

    env_seed = os.environ.get(SEED_ENV)
    if env_seed is not None:
        try:
            raw["seed"] = int(env_seed)
        except ValueError as e:
            raise ConfigError("seed", f"{SEED_ENV}={env_seed!r} is not an integer") from e
        logger.debug("master seed %s taken from %s", env_seed, SEED_ENV)
    if seed is not None:
        raw["seed"] = seed
    if out is not None:
        raw["out"] = str(out)
    if jobs is not None:
        raw["jobs"] = jobs
    return parse_config(raw, command)


def config_manifest(config: RunConfig) -> Dict[str, Any]:
    """Plain mapping of the resolved config, as embedded in manifest.json."""
    return dataclasses.asdict(config)


__all__ = [
    "SEED_ENV",
    "COMMANDS",
    "ConfigError",
    "DatasetSection",
    "ModelSection",
    "TrainSection",
    "VariantSection",
    "MicroBnSection",
    "BenchSection",
    "AnalysisSection",
    "DecaySweepSection",
    "RunConfig",
    "parse_config",
    "validate",
    "load_config",
    "config_manifest",
]
