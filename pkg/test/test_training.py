from dataclasses import replace

import numpy as np
import pytest
from scipy.optimize import minimize

from src.analysis import mean_offdiag_abs, pearson_matrix
from src.compare import compare_reports
from src.datasets import iterate_batches, make_blob_dataset
from src.models import SyntheticDataset, Tensor4
from src.net import Gradients, build_model, conv_bn_specs, softmax_cross_entropy
from src.rng import RngStream
from src.training import SGD, TrainConfig, decay_sweep, learning_rate, train


def quick_config(**overrides):
    base = TrainConfig(epochs=3, batch_size=12, lr=0.05, seed=0)
    return replace(base, **overrides)


def test_blob_dataset_is_balanced_and_deterministic():
    a = make_blob_dataset(classes=3, per_class=8, h=5, w=5, noise=0.2, seed=1)
    b = make_blob_dataset(classes=3, per_class=8, h=5, w=5, noise=0.2, seed=1)
    assert np.array_equal(a.train_images.data, b.train_images.data)
    assert np.bincount(a.train_labels).tolist() == [6, 6, 6]
    assert np.bincount(a.val_labels).tolist() == [2, 2, 2]
    with pytest.raises(ValueError):
        make_blob_dataset(classes=1, per_class=8, h=5, w=5, noise=0.2, seed=1)


def test_noise_free_images_repeat_within_a_class():
    data = make_blob_dataset(classes=4, per_class=6, h=12, w=12, noise=0.0, seed=3)
    images = data.train_images.data
    for k in range(4):
        same = images[data.train_labels == k]
        assert all(np.array_equal(img, same[0]) for img in same)
    assert not np.array_equal(images[data.train_labels == 0][0], images[data.train_labels == 2][0])


def test_low_noise_blobs_are_linearly_separable():
    data = make_blob_dataset(classes=4, per_class=64, h=12, w=12, noise=0.1, seed=0)
    n = data.train_images.n
    features = np.hstack([data.train_images.data.reshape(n, -1), np.ones((n, 1))])
    shape = (features.shape[1], data.classes)

    def objective(flat):
        loss, d_logits = softmax_cross_entropy(features @ flat.reshape(shape), data.train_labels)
        return loss, (features.T @ d_logits).ravel()

    fitted = minimize(objective, np.zeros(np.prod(shape)), jac=True, method="L-BFGS-B")
    predicted = np.argmax(features @ fitted.x.reshape(shape), axis=1)
    assert np.mean(predicted == data.train_labels) >= 0.99


def test_iterate_batches_drops_incomplete_tail():
    images = Tensor4(np.zeros((10, 3, 3, 1)))
    labels = np.arange(10)
    sizes = [xb.n for xb, _ in iterate_batches(images, labels, 4)]
    assert sizes == [4, 4]
    sizes = [xb.n for xb, _ in iterate_batches(images, labels, 4, drop_last=False)]
    assert sizes == [4, 4, 2]


def test_learning_rate_steps_at_milestones():
    config = TrainConfig(lr=1.0, lr_milestones=(2, 4), lr_gamma=0.5)
    assert [learning_rate(config, e) for e in range(5)] == [1.0, 1.0, 0.5, 0.5, 0.25]


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(strategy="FS", ratio=1.5)
    with pytest.raises(ValueError):
        TrainConfig(vdn="virtual")
    with pytest.raises(ValueError):
        TrainConfig(decay=0.0)


def test_training_learns_the_blob_task(tiny_dataset, tiny_model_factory):
    report = train(tiny_model_factory(), tiny_dataset, quick_config(epochs=8))
    assert not report.diverged
    assert len(report.epochs) == 8
    assert report.epochs[-1].train_loss < report.epochs[0].train_loss
    assert report.final_val_acc > 1 / 3


@pytest.mark.parametrize(
    "strategy,ratio,vdn",
    [
        ("FS", 0.25, "none"),
        ("BS", 0.25, "none"),
        ("NS", 0.25, "none"),
        ("FRS", 0.2, "none"),
        ("FS", 0.25, "mixed"),
        ("Full", 1.0, "pure"),
    ],
)
def test_sampled_variants_train_without_diverging(
    strategy, ratio, vdn, tiny_dataset, tiny_model_factory
):
    config = quick_config(strategy=strategy, ratio=ratio, vdn=vdn, record_errors=True)
    report = train(tiny_model_factory(), tiny_dataset, config)
    assert not report.diverged
    assert len(report.plans) == 3
    assert report.trace is not None
    assert report.trace.layers == 2
    assert report.trace.iterations == 3 * 3


def test_training_is_deterministic(tiny_dataset, tiny_model_factory):
    config = quick_config(strategy="BS", ratio=0.5, vdn="mixed")
    a = train(tiny_model_factory(), tiny_dataset, config)
    b = train(tiny_model_factory(), tiny_dataset, config)
    assert a.epochs == b.epochs
    assert a.plans == b.plans
    assert a.name == b.name == "VDN+BS-216/432-50%"


def test_plans_refresh_each_epoch_except_ns(tiny_dataset, tiny_model_factory):
    ns = train(tiny_model_factory(), tiny_dataset, quick_config(strategy="NS", ratio=0.25))
    assert all(p["layers"] == ns.plans[0]["layers"] for p in ns.plans)
    assert [p["epoch"] for p in ns.plans] == [0, 1, 2]
    fs = train(tiny_model_factory(), tiny_dataset, quick_config(strategy="FS", ratio=0.25, epochs=6))
    assert len({str(p["layers"]) for p in fs.plans}) > 1


def test_non_finite_input_is_flagged_not_raised(tiny_dataset, tiny_model_factory):
    images = np.array(tiny_dataset.train_images.data)
    images[:] = np.nan
    broken = SyntheticDataset(
        Tensor4(images),
        tiny_dataset.train_labels,
        tiny_dataset.val_images,
        tiny_dataset.val_labels,
        tiny_dataset.classes,
    )
    report = train(tiny_model_factory(), broken, quick_config())
    assert report.diverged
    assert report.diverged_at == (0, 0)
    assert report.epochs == []


def test_huge_learning_rate_is_flagged_as_divergence(tiny_dataset, tiny_model_factory):
    report = train(tiny_model_factory(), tiny_dataset, TrainConfig(epochs=3, batch_size=12, lr=1e3))
    assert report.diverged
    assert report.diverged_at is not None
    assert len(report.epochs) < 3


def test_zero_learning_rate_leaves_parameters_and_loss_unchanged(tiny_dataset, tiny_model_factory):
    model = tiny_model_factory()
    before = {k: v.copy() for k, v in model.parameters().items()}
    # one batch holds the whole train split, so every epoch sees the same statistics
    config = quick_config(epochs=3, batch_size=tiny_dataset.train_images.n, lr=0.0)
    report = train(model, tiny_dataset, config)
    assert not report.diverged
    for name, value in model.parameters().items():
        assert np.array_equal(value, before[name])
    losses = [e.train_loss for e in report.epochs]
    assert losses == pytest.approx([losses[0]] * 3, rel=1e-9)


def test_moving_average_reset_per_epoch(tiny_dataset, tiny_model_factory):
    model = tiny_model_factory()
    train(model, tiny_dataset, quick_config(ma_reset_per_epoch=True, epochs=2))
    assert all(layer.state.initialized for layer in model.bn_layers())


def test_sgd_step_moves_parameters_and_bumps_version(tiny_model_factory):
    model = tiny_model_factory()
    params = model.parameters()
    before = {k: v.copy() for k, v in params.items()}
    grads = Gradients({k: np.ones_like(v) for k, v in params.items()}, np.zeros(1))
    SGD(momentum=0.0).step(model, grads, lr=0.1)
    assert model.version == 1
    for name, value in model.parameters().items():
        np.testing.assert_allclose(value, before[name] - 0.1)


def test_decay_sweep_runs_every_alpha_and_seed(tiny_dataset):
    def factory(seed):
        return build_model(conv_bn_specs(1, (3,), 3), RngStream(seed))

    base = quick_config(epochs=2, strategy="BS", ratio=0.25)
    results = decay_sweep(factory, tiny_dataset, base, [0.5, 1.0], [0, 1])
    assert sorted(results) == [0.5, 1.0]
    assert all(len(runs) == 2 for runs in results.values())
    assert all(r.tags["decay"] == alpha for alpha, runs in results.items() for r in runs)
    assert [r.seed for r in results[0.5]] == [0, 1]


def blob_task():
    return make_blob_dataset(classes=4, per_class=64, h=12, w=12, noise=0.4, seed=0)


def blob_model(seed):
    return build_model(conv_bn_specs(1, (8, 8, 8), 4), RngStream(seed))


def test_fs_estimates_batch_means_better_than_ns_in_the_first_epoch():
    dataset = blob_task()
    base = TrainConfig(epochs=1, batch_size=32, lr=0.05, record_errors=True)
    fs = train(blob_model(0), dataset, replace(base, strategy="FS", ratio=1 / 16))
    ns = train(blob_model(0), dataset, replace(base, strategy="NS", ratio=1 / 32))
    assert fs.name == "FS-288/4608-6.25%"
    assert fs.trace.iterations == ns.trace.iterations == 6
    assert fs.trace.e_mu.mean() < ns.trace.e_mu.mean()


@pytest.mark.slow
def test_bs_errors_are_less_correlated_across_layers_than_ns():
    dataset = blob_task()
    base = TrainConfig(epochs=3, batch_size=32, lr=0.05, record_errors=True)
    spread = {}
    for strategy in ("BS", "NS"):
        runs = [
            train(blob_model(seed), dataset, replace(base, seed=seed, strategy=strategy, ratio=1 / 32))
            for seed in range(5)
        ]
        spread[strategy] = np.nanmean([mean_offdiag_abs(pearson_matrix(r.trace)) for r in runs])
    assert spread["BS"] < spread["NS"]


@pytest.mark.slow
def test_sampled_strategies_track_full_bn_accuracy():
    dataset = blob_task()
    base = TrainConfig(epochs=30, batch_size=32, lr=0.05, lr_milestones=(20,), decay=0.9)
    variants = {
        "Full": dict(strategy="Full", ratio=1.0),
        "FS": dict(strategy="FS", ratio=1 / 16),
        "VDN": dict(strategy="FS", ratio=1 / 16, vdn="mixed"),
        "BS": dict(strategy="BS", ratio=1 / 16),
        "NS": dict(strategy="NS", ratio=1 / 32),
    }
    groups = {}
    for label, overrides in variants.items():
        groups[label] = [
            train(
                blob_model(seed),
                dataset,
                replace(base, seed=seed, **overrides),
            )
            for seed in range(5)
        ]
    summary = compare_reports(groups, baseline="Full")
    acc = {g["label"]: g["mean_acc"] for g in summary["groups"]}
    assert acc["Full"] >= 0.95
    assert abs(acc["FS"] - acc["Full"]) <= 0.02
    assert abs(acc["VDN"] - acc["Full"]) <= 0.02
    tie = 0.005
    assert acc["FS"] + tie >= acc["VDN"]
    assert acc["VDN"] + tie >= acc["BS"]
    assert acc["BS"] + tie >= acc["NS"]
    assert acc["NS"] == min(acc.values())
