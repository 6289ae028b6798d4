import numpy as np
import pytest
from scipy import stats

from src.models import SamplingStrategy
from src.rng import RngStream
from src.sampling import (
    make_plan,
    patch_side,
    plan_indices,
    plan_manifest,
    realized_ratio,
    refresh_plan,
    round_half_up,
    run_name,
    sample_count,
    sampled_size,
)

DIMS = [(8, 6, 6, 4), (8, 3, 3, 8)]


def test_round_half_up():
    assert round_half_up(0.5) == 1
    assert round_half_up(2.5) == 3
    assert round_half_up(2.4999) == 2


def test_counts_are_clamped_to_at_least_one():
    assert sample_count(1 / 128, 32) == 1
    assert sample_count(0.25, 8) == 2
    assert patch_side(1 / 1024, 6) == 1
    assert patch_side(1.0, 6) == 6


def test_ns_uses_leading_samples_and_never_moves(rng):
    plan = make_plan(SamplingStrategy("NS", 0.25), DIMS, 0, rng)
    for layer in range(len(DIMS)):
        assert plan.layers[layer].begin_n == 0
        assert plan.layers[layer].ns == 2
    later = refresh_plan(plan, 5, rng)
    assert later.epoch == 5
    assert later.layers == plan.layers


def test_bs_range_stays_inside_the_batch(rng):
    strategy = SamplingStrategy("BS", 0.25)
    for epoch in range(50):
        plan = make_plan(strategy, DIMS, epoch, rng)
        for lp in plan.layers:
            assert 0 <= lp.begin_n <= lp.dims[0] - lp.ns
            idx = plan_indices(plan, 0)
            assert idx.size == plan.layers[0].ns * 36


def test_bs_start_is_uniform_over_epochs():
    rng = RngStream(99)
    strategy = SamplingStrategy("BS", 0.25)
    starts = [make_plan(strategy, [(8, 2, 2, 1)], epoch, rng).layers[0].begin_n for epoch in range(700)]
    counts = np.bincount(starts, minlength=7)
    assert counts.size == 7
    assert stats.chisquare(counts).pvalue > 0.001


def test_fs_patch_is_shared_across_samples(rng):
    plan = make_plan(SamplingStrategy("FS", 0.25), DIMS, 0, rng)
    lp = plan.layers[0]
    assert (lp.hs, lp.ws) == (3, 3)
    idx = plan_indices(plan, 0)
    per_sample = idx.reshape(8, -1) - (np.arange(8) * 36)[:, None]
    assert all(np.array_equal(per_sample[0], row) for row in per_sample)


def test_frs_indices_sorted_unique(rng):
    plan = make_plan(SamplingStrategy("FRS", 0.1), DIMS, 3, rng)
    idx = plan_indices(plan, 0)
    assert idx.size == sample_count(0.1, 8 * 36)
    assert np.all(np.diff(idx) > 0)


def test_full_plan_covers_everything(rng):
    plan = make_plan(SamplingStrategy("Full"), DIMS, 0, rng)
    assert np.array_equal(plan_indices(plan, 1), np.arange(8 * 9))
    assert realized_ratio(plan, 1) == 1.0


def test_plan_is_deterministic_and_refreshes_per_epoch(rng):
    strategy = SamplingStrategy("FS", 0.25)
    a = make_plan(strategy, DIMS, 2, rng)
    b = make_plan(strategy, DIMS, 2, RngStream(rng.seed))
    assert a == b
    epochs = [make_plan(strategy, DIMS, e, rng).layers[0] for e in range(10)]
    assert len({(lp.begin_h, lp.begin_w) for lp in epochs}) > 1


def test_refresh_rejects_non_monotone_epoch(rng):
    plan = make_plan(SamplingStrategy("BS", 0.5), DIMS, 3, rng)
    with pytest.raises(ValueError, match="non-monotone epoch"):
        refresh_plan(plan, 3, rng)
    assert refresh_plan(plan, 4, rng) == make_plan(plan.strategy, DIMS, 4, rng)


def test_plan_indices_are_read_only_and_layer_checked(rng):
    plan = make_plan(SamplingStrategy("BS", 0.5), DIMS, 0, rng)
    idx = plan_indices(plan, 0)
    with pytest.raises(ValueError):
        idx[0] = 1
    with pytest.raises(KeyError):
        plan_indices(plan, 2)


def test_strategy_validation():
    with pytest.raises(ValueError):
        SamplingStrategy("XS", 0.5)
    with pytest.raises(ValueError):
        SamplingStrategy("FS", 1.5)
    with pytest.raises(ValueError):
        SamplingStrategy("Full", 0.5)


def test_run_name_and_manifest(rng):
    plan = make_plan(SamplingStrategy("FS", 0.0625), [(1, 12, 12, 4)], 0, rng)
    assert sampled_size(plan, 0) == 9
    assert run_name(plan) == "FS-9/144-6.25%"
    assert run_name(plan, vdn="mixed") == "VDN+FS-9/144-6.25%"
    manifest = plan_manifest(plan)
    assert manifest["strategy"] == "FS"
    assert manifest["layers"][0]["hs"] == 3
    assert manifest["layers"][0]["realized_ratio"] == pytest.approx(0.0625)
