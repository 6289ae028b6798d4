import math

import numpy as np
import pytest

from src.analysis import (
    ErrorRecorder,
    block_cov,
    compare_estimators,
    equicorrelated_cov,
    iid_cov,
    ma_variance_ratio,
    mean_offdiag_abs,
    monte_carlo_mean_variance,
    moving_average_series,
    pearson_matrix,
    predict_mean_variance,
    random_psd_cov,
    record_errors,
    sign_test_pvalue,
    simulate_ma_variance_ratio,
    theoretical_speedup,
    trace_rows,
)
from src.models import ChannelStats, CovModel, ErrorTrace
from src.rng import RngStream


def test_record_errors_uses_l2_norms():
    recorder = ErrorRecorder()
    full = ChannelStats([0.0, 0.0], [1.0, 4.0], 10)
    sampled = ChannelStats([3.0, 4.0], [4.0, 1.0], 5)
    record_errors(recorder, 0, sampled, full)
    trace = recorder.trace()
    assert trace.e_mu[0, 0] == pytest.approx(5.0)
    assert trace.e_sigma[0, 0] == pytest.approx(math.sqrt(2.0))
    with pytest.raises(ValueError):
        record_errors(recorder, 0, ChannelStats([0.0], [1.0], 1), full)


def test_interrupted_forward_is_truncated():
    recorder = ErrorRecorder()
    for it in range(3):
        recorder.append(0, float(it), 0.0)
        recorder.append(1, float(it), 0.0)
    recorder.append(0, 9.0, 0.0)
    trace = recorder.trace()
    assert (trace.layers, trace.iterations) == (2, 3)
    assert len(trace_rows(trace)) == 6
    assert trace_rows(trace)[-1] == {"layer": 1, "iter": 2, "e_mu": 2.0, "e_sigma": 0.0}


def test_recorder_rejects_gaps_in_layers():
    recorder = ErrorRecorder()
    recorder.append(1, 0.0, 0.0)
    with pytest.raises(ValueError):
        recorder.trace()


def test_pearson_matrix_of_linked_series():
    base = np.array([1.0, 3.0, 2.0, 5.0, 4.0])
    trace = ErrorTrace(np.stack([base, 2 * base + 1, -base]), np.zeros((3, 5)))
    corr = pearson_matrix(trace)
    np.testing.assert_allclose(corr, [[1, 1, -1], [1, 1, -1], [-1, -1, 1]], atol=1e-12)
    assert mean_offdiag_abs(corr) == pytest.approx(1.0)


def test_independent_series_are_nearly_uncorrelated():
    gen = RngStream(4).derive("series").generator()
    trace = ErrorTrace(gen.random((3, 1000)), np.zeros((3, 1000)))
    corr = pearson_matrix(trace)
    assert np.all(np.abs(corr[~np.eye(3, dtype=bool)]) < 0.1)


def test_constant_series_gives_nan_with_warning():
    trace = ErrorTrace(np.array([[1.0, 2.0, 4.0], [3.0, 3.0, 3.0]]), np.zeros((2, 3)))
    with pytest.warns(RuntimeWarning, match="constant error series"):
        corr = pearson_matrix(trace)
    assert corr[0, 0] == 1.0
    assert np.isnan(corr[1]).all() and np.isnan(corr[:, 1]).all()
    assert math.isnan(mean_offdiag_abs(corr))


def test_pearson_needs_three_iterations():
    with pytest.raises(ValueError):
        pearson_matrix(ErrorTrace(np.ones((2, 2)), np.ones((2, 2))))


def test_mean_variance_closed_forms():
    assert predict_mean_variance(iid_cov(16, v=2.0)) == pytest.approx(2.0 / 16)
    # fully correlated points carry no more information than one point
    assert predict_mean_variance(equicorrelated_cov(16, v=2.0, rho=1.0)) == pytest.approx(2.0)
    blocks = block_cov([4, 4], v=1.0, rho_within=0.5)
    assert predict_mean_variance(blocks) == pytest.approx((8 + 2 * 2 * 6 * 0.5) / 64)


def test_cov_model_validation():
    with pytest.raises(ValueError):
        CovModel(np.array([[1.0, 0.5], [0.0, 1.0]]))
    with pytest.raises(ValueError):
        CovModel(np.array([[1.0, 2.0], [2.0, 1.0]]))
    assert random_psd_cov(5, RngStream(0)).dimension == 5


@pytest.mark.parametrize(
    "cov",
    [iid_cov(8), equicorrelated_cov(8, rho=0.3), block_cov([2, 3, 3], 1.5, 0.6, 0.1)],
)
def test_monte_carlo_agrees_with_prediction(cov):
    estimate, se = monte_carlo_mean_variance(cov, 200_000, RngStream(11))
    assert abs(estimate - predict_mean_variance(cov)) <= 3 * se


@pytest.mark.slow
def test_monte_carlo_agrees_on_random_covariances():
    root = RngStream(0).derive("analyze", "cov")
    failures = 0
    for k in range(20):
        cov = random_psd_cov(16, root.derive(k))
        estimate, se = monte_carlo_mean_variance(cov, 1_000_000, root.derive("mc", k))
        failures += abs(estimate - predict_mean_variance(cov)) > 3 * se
    assert failures <= 1


def test_moving_average_series_copies_first_value():
    out = moving_average_series(np.array([4.0, 0.0, 2.0]), alpha=0.5)
    np.testing.assert_allclose(out, [4.0, 2.0, 2.0])


@pytest.mark.parametrize("alpha", [0.3, 0.7, 0.9])
def test_moving_average_variance_ratio(alpha):
    simulated = simulate_ma_variance_ratio(alpha, 100_000, RngStream(3).derive(alpha))
    assert simulated == pytest.approx(ma_variance_ratio(alpha), rel=0.05)


def test_ma_ratio_bounds():
    assert ma_variance_ratio(1.0) == 1.0
    with pytest.raises(ValueError):
        ma_variance_ratio(0.0)


def test_theoretical_speedup():
    model = theoretical_speedup(401408, 1 / 32)
    assert model.s == 12544
    assert model.speedup - 1 == pytest.approx(0.367, abs=1e-3)
    assert model.mem_fraction == pytest.approx(0.03125)
    assert model.adds_full == 401407
    with pytest.raises(ValueError):
        theoretical_speedup(16, 1 / 32)


def test_fs_estimates_the_mean_better_than_bs():
    errors = compare_estimators((16, 16, 16, 4), 1 / 16, 100, RngStream(0).derive("estimators"))
    fs, bs = errors[:, 0], errors[:, 1]
    assert fs.mean() < bs.mean()
    assert sign_test_pvalue(fs, bs) < 0.05


def test_sign_test_edge_cases():
    assert sign_test_pvalue(np.ones(4), np.ones(4)) == 1.0
    assert sign_test_pvalue(np.zeros(10), np.ones(10)) == pytest.approx(0.5**10)
