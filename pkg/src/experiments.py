"""Command runners behind the CLI.

Each runner takes a validated RunConfig, writes its artifacts under
``config.out`` and returns a CommandResult whose exit code the CLI passes
on: 0 on success, 3 when any training run diverged.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Dict, List, Sequence, Tuple

from . import __version__
from .analysis import (
    compare_estimators,
    equicorrelated_cov,
    iid_cov,
    ma_variance_ratio,
    mean_offdiag_abs,
    monte_carlo_mean_variance,
    pearson_matrix,
    predict_mean_variance,
    random_psd_cov,
    sign_test_pvalue,
    simulate_ma_variance_ratio,
    theoretical_speedup,
    trace_rows,
)
from .bench import BenchGrid, bench_sweep, write_bench_csv
from .compare import compare_reports
from .config import ConfigError, RunConfig, VariantSection, config_manifest
from .datasets import make_blob_dataset
from .microbn import run_microbn
from .models import MicroBnConfig, SyntheticDataset, TrainReport
from .net import Model, build_model, conv_bn_specs
from .reporting import iso_timestamp, manifest_hash, save_json_report, write_csv
from .rng import RngStream
from .training import TrainConfig, decay_sweep, train

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CRASH = 1
EXIT_CONFIG = 2
EXIT_DIVERGED = 3

METRIC_COLUMNS = ["name", "epoch", "train_loss", "val_acc", "strategy", "ratio", "seed"]
ERROR_COLUMNS = ["name", "seed", "layer", "iter", "e_mu", "e_sigma"]
CORR_COLUMNS = ["name", "seed", "which", "layer_i", "layer_j", "pearson", "mean_offdiag_abs"]
SUMMARY_COLUMNS = ["label", "runs", "diverged", "mean_acc", "std_acc", "gap_to_baseline", "rank"]
MICROBN_COLUMNS = METRIC_COLUMNS + ["policy", "gradient_batch", "statistic_batch"]
DECAY_COLUMNS = ["alpha", "seed", "final_val_acc", "diverged"]


@dataclass
class CommandResult:
    command: str
    exit_code: int = EXIT_OK
    summary: Dict[str, Any] = field(default_factory=dict)
    artifacts: List[Path] = field(default_factory=list)


def config_hash(config: RunConfig) -> str:
    """Hash of everything that determines results; output location and job count excluded."""
    payload = config_manifest(config)
    payload.pop("out", None)
    payload.pop("jobs", None)
    payload["version"] = __version__
    return manifest_hash(payload)


def build_dataset(config: RunConfig) -> SyntheticDataset:
    ds = config.dataset
    return make_blob_dataset(
        classes=ds.classes,
        per_class=ds.per_class,
        h=ds.height,
        w=ds.width,
        noise=ds.noise,
        seed=config.dataset_seed,
        channels=ds.channels,
        val_fraction=ds.val_fraction,
    )


def build_run_model(config: RunConfig, seed: int) -> Model:
    specs = conv_bn_specs(
        config.dataset.channels,
        config.model.conv_channels,
        config.dataset.classes,
        batch_norm=config.model.batch_norm,
    )
    return build_model(specs, RngStream(seed), epsilon=config.model.epsilon, decay=config.train.decay)


def train_config_for(config: RunConfig, variant: VariantSection, seed: int) -> TrainConfig:
    tr = config.train
    return TrainConfig(
        epochs=tr.epochs,
        batch_size=tr.batch_size,
        lr=tr.lr,
        momentum=tr.momentum,
        lr_milestones=tr.lr_milestones,
        lr_gamma=tr.lr_gamma,
        weight_decay=tr.weight_decay,
        strategy=variant.strategy,
        ratio=variant.ratio,
        vdn=variant.vdn,
        n_v=tr.n_v,
        mix=tr.mix if variant.mix is None else variant.mix,
        decay=tr.decay,
        seed=seed,
        ma_reset_per_epoch=tr.ma_reset_per_epoch,
        record_errors=tr.record_errors,
    )


def _train_job(job: Tuple[RunConfig, int, int]) -> TrainReport:
    config, variant_index, seed = job
    variant = config.variants[variant_index]
    report = train(
        build_run_model(config, seed), build_dataset(config), train_config_for(config, variant, seed)
    )
    report.tags["variant"] = variant.label
    return report


def _microbn_job(job: Tuple[RunConfig, MicroBnConfig, int]) -> TrainReport:
    config, mb, seed = job
    tc = TrainConfig(
        epochs=config.train.epochs,
        batch_size=mb.gradient_batch,
        lr=config.train.lr,
        momentum=config.train.momentum,
        lr_milestones=config.train.lr_milestones,
        lr_gamma=config.train.lr_gamma,
        weight_decay=config.train.weight_decay,
        vdn=config.microbn.vdn if mb.policy == "local_vdn" else "none",
        n_v=mb.n_v,
        mix=config.train.mix,
        decay=config.train.decay,
        seed=seed,
        ma_reset_per_epoch=config.train.ma_reset_per_epoch,
    )
    return run_microbn(build_run_model(config, seed), build_dataset(config), mb, tc)


def _run_jobs(fn: Callable[[Any], TrainReport], jobs: Sequence[Any], workers: int) -> List[TrainReport]:
    """Results come back in job order whatever the worker count."""
    if workers <= 1 or len(jobs) <= 1:
        return [fn(job) for job in jobs]
    with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
        return list(pool.map(fn, jobs))


def _metric_rows(reports: Sequence[TrainReport]) -> List[Dict[str, Any]]:
    rows = []
    for report in reports:
        for metrics in report.epochs:
            rows.append(
                {
                    "name": report.name,
                    "epoch": metrics.epoch,
                    "train_loss": metrics.train_loss,
                    "val_acc": metrics.val_acc,
                    "strategy": report.strategy,
                    "ratio": report.ratio,
                    "seed": report.seed,
                    **report.tags,
                }
            )
    return rows


def _run_entries(reports: Sequence[TrainReport]) -> List[Dict[str, Any]]:
    return [
        {
            "name": r.name,
            "seed": r.seed,
            "vdn": r.vdn,
            "diverged": r.diverged,
            "diverged_at": r.diverged_at,
            "final_val_acc": r.final_val_acc,
            "realized_ratios": [
                [layer["realized_ratio"] for layer in plan["layers"]] for plan in r.plans
            ],
            "plans": r.plans,
            "tags": r.tags,
        }
        for r in reports
    ]


def _write_manifest(
    config: RunConfig, digest: str, extra: Dict[str, Any], result: CommandResult
) -> None:
    path = config.out / "manifest.json"
    save_json_report(
        {
            "command": config.command,
            "manifest_hash": digest,
            "version": __version__,
            "created": iso_timestamp(),
            "config": config_manifest(config),
            **extra,
        },
        path,
    )
    result.artifacts.append(path)


def _diverged_exit(reports: Sequence[TrainReport], result: CommandResult) -> None:
    diverged = [f"{r.name} (seed {r.seed})" for r in reports if r.diverged]
    result.summary["diverged runs"] = len(diverged)
    if diverged:
        logger.warning("diverged: %s", ", ".join(diverged))
        result.exit_code = EXIT_DIVERGED


def _summary_rows(summary: Dict[str, Any]) -> List[Dict[str, Any]]:
    return list(summary["groups"])


def run_train(config: RunConfig) -> CommandResult:
    result = CommandResult("train")
    digest = config_hash(config)
    jobs = [
        (config, index, seed)
        for index in range(len(config.variants))
        for seed in config.run_seeds
    ]
    logger.info("training %d variants x %d seeds", len(config.variants), len(config.run_seeds))
    reports = _run_jobs(_train_job, jobs, config.jobs)

    out = config.out
    result.artifacts.append(
        write_csv(_metric_rows(reports), METRIC_COLUMNS, out / "metrics.csv", digest)
    )

    error_rows: List[Dict[str, Any]] = []
    corr_rows: List[Dict[str, Any]] = []
    for report in reports:
        if report.trace is None or report.trace.iterations == 0:
            continue
        for row in trace_rows(report.trace):
            error_rows.append({"name": report.name, "seed": report.seed, **row})
        if report.trace.iterations < 3 or report.trace.layers < 2:
            continue
        for which in ("mu", "sigma"):
            matrix = pearson_matrix(report.trace, which)
            offdiag = mean_offdiag_abs(matrix)
            report.tags[f"corr_{which}"] = offdiag
            for i in range(matrix.shape[0]):
                for j in range(matrix.shape[1]):
                    corr_rows.append(
                        {
                            "name": report.name,
                            "seed": report.seed,
                            "which": which,
                            "layer_i": i,
                            "layer_j": j,
                            "pearson": matrix[i, j],
                            "mean_offdiag_abs": offdiag,
                        }
                    )
    if config.train.record_errors:
        result.artifacts.append(write_csv(error_rows, ERROR_COLUMNS, out / "errors.csv", digest))
        result.artifacts.append(write_csv(corr_rows, CORR_COLUMNS, out / "corr.csv", digest))

    groups: Dict[str, List[TrainReport]] = {}
    for report in reports:
        groups.setdefault(report.tags["variant"], []).append(report)
    comparison = compare_reports(groups, baseline=config.variants[0].label)
    result.artifacts.append(
        write_csv(_summary_rows(comparison), SUMMARY_COLUMNS, out / "summary.csv", digest)
    )
    _write_manifest(config, digest, {"comparison": comparison, "runs": _run_entries(reports)}, result)

    result.summary["runs"] = len(reports)
    result.summary["best variant"] = comparison["best"]
    for group in comparison["groups"]:
        result.summary[f"{group['label']} mean val_acc"] = round(group["mean_acc"], 4)
    _diverged_exit(reports, result)
    return result


def microbn_configs(config: RunConfig) -> List[MicroBnConfig]:
    """Baseline local run at the large statistic batch, then every configured policy."""
    mb = config.microbn
    configs = [MicroBnConfig(mb.gradient_batch, mb.baseline_statistic_batch, "local")]
    for policy in mb.policies:
        configs.append(
            MicroBnConfig(
                gradient_batch=mb.gradient_batch,
                statistic_batch=mb.statistic_batch,
                policy=policy,
                k_nodes=mb.k_nodes,
                n_v=mb.n_v,
                vdn_nodes=mb.vdn_nodes,
            )
        )
    return configs


def run_microbn_command(config: RunConfig) -> CommandResult:
    result = CommandResult("microbn")
    digest = config_hash(config)
    configs = microbn_configs(config)
    jobs = [(config, mb, seed) for mb in configs for seed in config.run_seeds]
    reports = _run_jobs(_microbn_job, jobs, config.jobs)

    result.artifacts.append(
        write_csv(_metric_rows(reports), MICROBN_COLUMNS, config.out / "metrics.csv", digest)
    )
    groups: Dict[str, List[TrainReport]] = {}
    for report in reports:
        groups.setdefault(report.name, []).append(report)
    comparison = compare_reports(groups, baseline=reports[0].name)
    result.artifacts.append(
        write_csv(_summary_rows(comparison), SUMMARY_COLUMNS, config.out / "summary.csv", digest)
    )
    _write_manifest(config, digest, {"comparison": comparison, "runs": _run_entries(reports)}, result)

    result.summary["runs"] = len(reports)
    for group in comparison["groups"]:
        result.summary[f"{group['label']} mean val_acc"] = round(group["mean_acc"], 4)
    _diverged_exit(reports, result)
    return result


def run_bench(config: RunConfig) -> CommandResult:
    result = CommandResult("bench")
    digest = config_hash(config)
    b = config.bench
    grid = BenchGrid(
        shapes=b.shapes,
        strategies=b.strategies,
        ratios=b.ratios,
        repetitions=b.repetitions,
        warmup=b.warmup,
        seed=config.seed,
    )
    results = bench_sweep(grid)
    result.artifacts.append(write_bench_csv(results, config.out / "bench.csv", digest))
    _write_manifest(config, digest, {"cells": len(results)}, result)
    result.summary["cells"] = len(results)
    if results:
        best = max(results, key=lambda r: r.speedup)
        result.summary["best speedup"] = f"{best.speedup:.2f}x ({best.strategy} @ {best.nominal_ratio:g})"
    return result


def mean_variance_checks(config: RunConfig, rng: RngStream) -> List[Dict[str, Any]]:
    """Predicted vs Monte-Carlo variance of the sampled mean over several covariance models."""
    an = config.analysis
    rows = []
    for k in range(an.cov_models):
        s = 2 + k % (an.max_points - 1)
        if k == 0:
            kind, cov = "iid", iid_cov(s, 1.0)
        elif k == 1:
            kind, cov = "fully_correlated", equicorrelated_cov(s, 1.0, 1.0)
        else:
            kind, cov = "random", random_psd_cov(s, rng.derive("cov", k))
        predicted = predict_mean_variance(cov)
        estimate, std_err = monte_carlo_mean_variance(cov, an.draws, rng.derive("mc", k))
        z = abs(estimate - predicted) / std_err if std_err > 0 else 0.0
        rows.append(
            {
                "model": k,
                "kind": kind,
                "s": s,
                "predicted": predicted,
                "monte_carlo": estimate,
                "std_err": std_err,
                "z": z,
                "within_3se": bool(z <= 3.0),
            }
        )
    return rows


def run_analyze(config: RunConfig) -> CommandResult:
    result = CommandResult("analyze")
    digest = config_hash(config)
    an = config.analysis
    rng = RngStream(config.seed).derive("analyze")
    out = config.out

    mv_rows = mean_variance_checks(config, rng)
    result.artifacts.append(
        write_csv(mv_rows, list(mv_rows[0]) if mv_rows else ["model"], out / "mean_variance.csv", digest)
    )

    ma_rows = []
    for alpha in an.alphas:
        predicted = ma_variance_ratio(alpha)
        simulated = simulate_ma_variance_ratio(alpha, an.horizon, rng.derive("ma", alpha))
        ma_rows.append(
            {
                "alpha": alpha,
                "predicted": predicted,
                "simulated": simulated,
                "rel_error": abs(simulated - predicted) / predicted,
            }
        )
    result.artifacts.append(
        write_csv(ma_rows, ["alpha", "predicted", "simulated", "rel_error"], out / "moving_average.csv", digest)
    )

    strategies = ("FS", "BS")
    errors = compare_estimators(
        an.estimator_dims, an.estimator_ratio, an.estimator_trials,
        rng.derive("estimators"), an.within_corr, strategies,
    )
    est_rows = [
        {"trial": t, **{f"e_mu_{tag}": errors[t, k] for k, tag in enumerate(strategies)}}
        for t in range(errors.shape[0])
    ]
    pvalue = sign_test_pvalue(errors[:, 0], errors[:, 1])
    result.artifacts.append(
        write_csv(est_rows, ["trial"] + [f"e_mu_{tag}" for tag in strategies], out / "estimators.csv", digest)
    )

    speed_rows = []
    for m, ratio in an.speedup_cases:
        model = theoretical_speedup(int(m), float(ratio))
        speed_rows.append(
            {
                "m": model.m,
                "ratio": ratio,
                "s": model.s,
                "depth_full": model.depth_full,
                "depth_sampled": model.depth_sampled,
                "speedup": model.speedup,
                "speedup_pct": 100.0 * (model.speedup - 1.0),
                "mem_fraction": model.mem_fraction,
                "adds_full": model.adds_full,
                "adds_sampled": model.adds_sampled,
            }
        )
    result.artifacts.append(
        write_csv(speed_rows, list(speed_rows[0]) if speed_rows else ["m"], out / "speedup.csv", digest)
    )

    means = errors.mean(axis=0)
    estimator_summary = {
        "mean_e_mu": {tag: float(means[k]) for k, tag in enumerate(strategies)},
        "sign_test_p": pvalue,
    }
    _write_manifest(config, digest, {"estimators": estimator_summary}, result)

    result.summary["mean-variance checks within 3 s.e."] = (
        f"{sum(r['within_3se'] for r in mv_rows)}/{len(mv_rows)}"
    )
    result.summary["max moving-average rel. error"] = (
        round(max(r["rel_error"] for r in ma_rows), 4) if ma_rows else None
    )
    result.summary["E_mu FS vs BS"] = f"{means[0]:.4g} vs {means[1]:.4g} (p={pvalue:.3g})"
    return result


def _decay_job(job: Tuple[RunConfig, float, int]) -> TrainReport:
    config, alpha, seed = job
    variant = VariantSection(config.decay_sweep.strategy, config.decay_sweep.ratio, config.decay_sweep.vdn)
    tc = replace(train_config_for(config, variant, seed), decay=alpha, record_errors=False)
    report = train(build_run_model(config, seed), build_dataset(config), tc)
    report.tags["decay"] = alpha
    return report


def run_decay_sweep(config: RunConfig) -> CommandResult:
    result = CommandResult("decay-sweep")
    digest = config_hash(config)
    sweep = config.decay_sweep
    seeds = config.run_seeds
    if config.jobs <= 1:
        variant = VariantSection(sweep.strategy, sweep.ratio, sweep.vdn)
        base = replace(train_config_for(config, variant, seeds[0]), record_errors=False)
        by_alpha = decay_sweep(
            lambda seed: build_run_model(config, seed), build_dataset(config), base, sweep.alphas, seeds
        )
    else:
        jobs = [(config, alpha, seed) for alpha in sweep.alphas for seed in seeds]
        reports = _run_jobs(_decay_job, jobs, config.jobs)
        by_alpha = {alpha: [r for r in reports if r.tags["decay"] == alpha] for alpha in sweep.alphas}

    rows = [
        {
            "alpha": alpha,
            "seed": r.seed,
            "final_val_acc": r.final_val_acc,
            "diverged": r.diverged,
        }
        for alpha, runs in by_alpha.items()
        for r in runs
    ]
    result.artifacts.append(write_csv(rows, DECAY_COLUMNS, config.out / "decay.csv", digest))

    groups = {f"{alpha:g}": runs for alpha, runs in by_alpha.items()}
    baseline = f"{config.train.decay:g}" if f"{config.train.decay:g}" in groups else next(iter(groups))
    comparison = compare_reports(groups, baseline)
    result.artifacts.append(
        write_csv(_summary_rows(comparison), SUMMARY_COLUMNS, config.out / "summary.csv", digest)
    )
    all_reports = [r for runs in by_alpha.values() for r in runs]
    _write_manifest(config, digest, {"comparison": comparison, "runs": _run_entries(all_reports)}, result)

    labels = [f"{alpha:g}" for alpha in sorted(sweep.alphas)]
    best = comparison["best"]
    result.summary["best alpha"] = best
    if len(labels) > 2:
        interior = best not in (labels[0], labels[-1])
        result.summary["interior optimum"] = interior
        if not interior:
            logger.warning("best decay rate %s sits on the edge of the swept range", best)
    _diverged_exit(all_reports, result)
    return result


COMMAND_RUNNERS: Dict[str, Callable[[RunConfig], CommandResult]] = {
    "train": run_train,
    "microbn": run_microbn_command,
    "bench": run_bench,
    "analyze": run_analyze,
    "decay-sweep": run_decay_sweep,
}


def run(config: RunConfig) -> CommandResult:
    """Run ``config.command``; artifacts land in ``config.out``."""
    try:
        config.out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise ConfigError("out", f"output directory is not writable: {e}") from e
    logger.info("%s -> %s", config.command, config.out)
    return COMMAND_RUNNERS[config.command](config)


__all__ = [
    "EXIT_OK",
    "EXIT_CRASH",
    "EXIT_CONFIG",
    "EXIT_DIVERGED",
    "CommandResult",
    "config_hash",
    "build_dataset",
    "build_run_model",
    "train_config_for",
    "microbn_configs",
    "mean_variance_checks",
    "run_train",
    "run_microbn_command",
    "run_bench",
    "run_analyze",
    "run_decay_sweep",
    "run",
]
