"""Estimation-error bookkeeping and the statistical models behind sampling.

Covers the per-layer error trace (E_mu, E_sigma), inter-layer Pearson
correlation, the variance of a sampled mean under correlated data, the
moving-average variance ratio and the adder-tree speedup model.
"""

from __future__ import annotations

import logging
import math
import warnings
from typing import Dict, List, Sequence, Tuple

import numpy as np
from scipy import signal, stats

from .models import ChannelStats, CovModel, ErrorTrace, SamplingStrategy, Shape4, SpeedupModel, Tensor4
from .rng import RngStream
from .sampling import make_plan, plan_indices, round_half_up
from .tensor_core import channel_moments, full_indices

logger = logging.getLogger(__name__)


class ErrorRecorder:
    """Single-writer store of per-layer estimation errors, one entry per forward."""

    def __init__(self) -> None:
        self._e_mu: Dict[int, List[float]] = {}
        self._e_sigma: Dict[int, List[float]] = {}

    def append(self, layer: int, e_mu: float, e_sigma: float) -> None:
        self._e_mu.setdefault(layer, []).append(e_mu)
        self._e_sigma.setdefault(layer, []).append(e_sigma)

    def trace(self) -> ErrorTrace:
        layers = sorted(self._e_mu)
        if layers != list(range(len(layers))):
            raise ValueError(f"layers {layers} are not contiguous from 0")
        if not layers:
            return ErrorTrace(np.zeros((0, 0)), np.zeros((0, 0)))
        # an interrupted forward leaves trailing entries in the first layers only
        t = min(len(self._e_mu[i]) for i in layers)
        return ErrorTrace(
            e_mu=np.array([self._e_mu[i][:t] for i in layers]),
            e_sigma=np.array([self._e_sigma[i][:t] for i in layers]),
        )


def record_errors(
    recorder: ErrorRecorder, layer: int, sampled_stats: ChannelStats, full_stats: ChannelStats
) -> ErrorRecorder:
    """Append ||mu_s - mu||_2 and ||sigma_s - sigma||_2 (sigma = std) for ``layer``."""
    if sampled_stats.channels != full_stats.channels:
        raise ValueError(
            f"channel mismatch: {sampled_stats.channels} vs {full_stats.channels}"
        )
    e_mu = float(np.linalg.norm(sampled_stats.mean - full_stats.mean))
    e_sigma = float(np.linalg.norm(sampled_stats.std - full_stats.std))
    recorder.append(layer, e_mu, e_sigma)
    return recorder


def trace_rows(trace: ErrorTrace) -> List[Dict[str, float]]:
    rows: List[Dict[str, float]] = []
    for layer in range(trace.layers):
        for it in range(trace.iterations):
            rows.append(
                {
                    "layer": layer,
                    "iter": it,
                    "e_mu": float(trace.e_mu[layer, it]),
                    "e_sigma": float(trace.e_sigma[layer, it]),
                }
            )
    return rows


def pearson_matrix(trace: ErrorTrace, which: str = "mu") -> np.ndarray:
    """L x L Pearson correlation between layer error series.

    Rows/columns of constant series are NaN.
    """
    series = trace.e_mu if which == "mu" else trace.e_sigma
    if trace.iterations < 3:
        raise ValueError(f"need at least 3 iterations, got {trace.iterations}")
    centered = series - series.mean(axis=1, keepdims=True)
    norms = np.sqrt((centered**2).sum(axis=1))
    constant = norms == 0.0
    if np.any(constant):
        warnings.warn(
            f"constant error series in layers {np.flatnonzero(constant).tolist()}; "
            "their correlations are undefined",
            RuntimeWarning,
            stacklevel=2,
        )
    safe = np.where(constant, 1.0, norms)
    corr = np.clip((centered @ centered.T) / np.outer(safe, safe), -1.0, 1.0)
    np.fill_diagonal(corr, 1.0)
    corr[constant, :] = np.nan
    corr[:, constant] = np.nan
    return corr


def mean_offdiag_abs(matrix: np.ndarray) -> float:
    mask = ~np.eye(matrix.shape[0], dtype=bool)
    values = np.abs(matrix[mask])
    values = values[np.isfinite(values)]
    return float(values.mean()) if values.size else float("nan")


def iid_cov(s: int, v: float = 1.0) -> CovModel:
    return CovModel(np.eye(s) * v)


def equicorrelated_cov(s: int, v: float = 1.0, rho: float = 0.0) -> CovModel:
    return CovModel(v * ((1.0 - rho) * np.eye(s) + rho * np.ones((s, s))))


def block_cov(sizes: Sequence[int], v: float, rho_within: float, rho_between: float = 0.0) -> CovModel:
    """Blocks of mutually correlated points, e.g. positions of the same sample."""
    labels = np.repeat(np.arange(len(sizes)), sizes)
    same = labels[:, None] == labels[None, :]
    corr = np.where(same, rho_within, rho_between)
    np.fill_diagonal(corr, 1.0)
    return CovModel(v * corr)


def random_psd_cov(s: int, rng: RngStream) -> CovModel:
    gen = rng.generator()
    factor = gen.standard_normal((s, s))
    cov = factor @ factor.T / s
    return CovModel((cov + cov.T) / 2.0)


def predict_mean_variance(cov: CovModel) -> float:
    """Var of the mean of s correlated points: (sum Var + 2 sum_{i<j} Cov) / s^2."""
    s = cov.dimension
    variances = float(np.trace(cov.matrix))
    covariances = float(np.triu(cov.matrix, k=1).sum())
    return (variances + 2.0 * covariances) / s**2


def monte_carlo_mean_variance(
    cov: CovModel, draws: int, rng: RngStream, chunk: int = 100_000
) -> Tuple[float, float]:
    """Empirical variance of the sampled mean and its standard error."""
    eigvals, eigvecs = np.linalg.eigh(cov.matrix)
    factor = eigvecs * np.sqrt(np.clip(eigvals, 0.0, None))
    gen = rng.generator()
    means = np.empty(draws)
    done = 0
    while done < draws:
        size = min(chunk, draws - done)
        points = gen.standard_normal((size, cov.dimension)) @ factor.T
        means[done : done + size] = points.mean(axis=1)
        done += size
    estimate = float(np.var(means, ddof=1))
    return estimate, estimate * math.sqrt(2.0 / (draws - 1))


def ma_variance_ratio(alpha: float) -> float:
    """Steady-state Var[X_ma] / Var[X] for i.i.d. estimates: alpha / (2 - alpha)."""
    if not 0.0 < alpha <= 1.0:
        raise ValueError(f"alpha must be in (0, 1], got {alpha}")
    return alpha / (2.0 - alpha)


def moving_average_series(estimates: np.ndarray, alpha: float) -> np.ndarray:
    """X_ma over a stream: first value copied, then alpha*new + (1-alpha)*old."""
    x = np.asarray(estimates, dtype=np.float64)
    initial = np.array([(1.0 - alpha) * x[0]])
    out, _ = signal.lfilter([alpha], [1.0, -(1.0 - alpha)], x, zi=initial)
    return out


def simulate_ma_variance_ratio(
    alpha: float, horizon: int, rng: RngStream, burn_in: int = 1000
) -> float:
    if not 0.0 < alpha <= 1.0:
        raise ValueError(f"alpha must be in (0, 1], got {alpha}")
    estimates = rng.generator().standard_normal(horizon + burn_in)
    tracked = moving_average_series(estimates, alpha)[burn_in:]
    return float(np.var(tracked) / np.var(estimates[burn_in:]))


def theoretical_speedup(m: int, ratio: float) -> SpeedupModel:
    """Adder-tree depth model: log(m) / log(s) and the visited-data fraction s/m."""
    s = round_half_up(ratio * m)
    if s < 2:
        raise ValueError(f"sampled size {s} is below 2")
    depth_full = math.log2(m)
    depth_sampled = math.log2(s)
    return SpeedupModel(
        m=m,
        s=s,
        depth_full=depth_full,
        depth_sampled=depth_sampled,
        speedup=depth_full / depth_sampled,
        mem_fraction=s / m,
        adds_full=m - 1,
        adds_sampled=s - 1,
    )


def correlated_activations(dims: Shape4, within_corr: float, rng: RngStream) -> Tensor4:
    """Unit-variance activations whose positions correlate within a sample only.

    Each (sample, channel) shares an offset; cross-sample correlation is 0.
    """
    if not 0.0 <= within_corr <= 1.0:
        raise ValueError("within_corr must be in [0, 1]")
    n, h, w, c = dims
    gen = rng.generator()
    offsets = gen.standard_normal((n, 1, 1, c))
    noise = gen.standard_normal((n, h, w, c))
    return Tensor4(math.sqrt(within_corr) * offsets + math.sqrt(1.0 - within_corr) * noise)


def compare_estimators(
    dims: Shape4,
    ratio: float,
    trials: int,
    rng: RngStream,
    within_corr: float = 0.5,
    strategies: Sequence[str] = ("FS", "BS"),
) -> np.ndarray:
    """E_mu of each strategy on fresh correlated batches; shape (trials, len(strategies))."""
    errors = np.zeros((trials, len(strategies)))
    for trial in range(trials):
        batch = correlated_activations(dims, within_corr, rng.derive("data", trial))
        full = channel_moments(batch, full_indices(batch))
        for k, tag in enumerate(strategies):
            plan = make_plan(SamplingStrategy(tag, ratio), [dims], trial, rng.derive(tag))
            sampled = channel_moments(batch, plan_indices(plan, 0))
            errors[trial, k] = np.linalg.norm(sampled.mean - full.mean)
    return errors


def sign_test_pvalue(smaller: np.ndarray, larger: np.ndarray) -> float:
    """One-sided sign test that ``smaller`` tends to be below ``larger``."""
    diffs = np.asarray(larger) - np.asarray(smaller)
    wins = int((diffs > 0).sum())
    decided = int((diffs != 0).sum())
    if decided == 0:
        return 1.0
    return float(stats.binomtest(wins, decided, 0.5, alternative="greater").pvalue)


__all__ = [
    "ErrorRecorder",
    "record_errors",
    "trace_rows",
    "pearson_matrix",
    "mean_offdiag_abs",
    "iid_cov",
    "equicorrelated_cov",
    "block_cov",
    "random_psd_cov",
    "predict_mean_variance",
    "monte_carlo_mean_variance",
    "ma_variance_ratio",
    "moving_average_series",
    "simulate_ma_variance_ratio",
    "theoretical_speedup",
    "correlated_activations",
    "compare_estimators",
    "sign_test_pvalue",
]
