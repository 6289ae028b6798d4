import numpy as np
import pytest

from src.analysis import ErrorRecorder
from src.models import SamplingStrategy, Tensor4
from src.net import (
    Layer,
    LayerSpec,
    NormContext,
    backward,
    build_model,
    conv_bn_specs,
    forward,
    grad_check,
    relative_error,
    softmax_cross_entropy,
)
from src.rng import RngStream
from src.sampling import make_plan
from src.vdn import fit_dataset_stats, prepend_virtual, sample_virtual


def small_batch(n=4, h=4, w=4, seed=0):
    gen = np.random.default_rng(seed)
    x = Tensor4(gen.standard_normal((n, h, w, 1)))
    labels = gen.integers(0, 3, size=n)
    return x, labels


def three_layer_model(seed=0):
    return build_model(conv_bn_specs(1, (2, 2, 2), 3), RngStream(seed))


@pytest.mark.parametrize(
    "tag,ratio",
    [("Full", 1.0), ("NS", 0.5), ("BS", 0.5), ("FS", 0.25), ("FRS", 0.5)],
)
def test_gradients_match_finite_differences(tag, ratio):
    model = three_layer_model()
    x, labels = small_batch()
    plan = make_plan(SamplingStrategy(tag, ratio), model.bn_dims(*x.shape), 0, RngStream(1))
    report = grad_check(model, x, labels, context=NormContext(plan=plan))
    assert report.passed, report.per_layer


@pytest.mark.parametrize("vdn,tag,ratio", [("pure", "Full", 1.0), ("mixed", "FS", 0.25), ("mixed", "BS", 0.5)])
def test_vdn_gradients_match_finite_differences(vdn, tag, ratio):
    model = three_layer_model(seed=2)
    x, labels = small_batch(seed=3)
    sampler = fit_dataset_stats([x], n_v=1)
    combined = prepend_virtual(x, sample_virtual(sampler, RngStream(0).derive("virtual", 0, 0)))
    plan = make_plan(SamplingStrategy(tag, ratio), model.bn_dims(*x.shape), 0, RngStream(4))
    ctx = NormContext(plan=plan, n_virtual=1, vdn=vdn, mix=0.4)
    report = grad_check(model, combined, labels, context=ctx)
    assert report.passed, report.per_layer


def test_logits_cover_real_rows_only():
    model = three_layer_model()
    x, _ = small_batch()
    combined = prepend_virtual(x, Tensor4(np.zeros((2, 4, 4, 1))))
    logits, caches = forward(model, combined, "train", NormContext(n_virtual=2, vdn="pure"))
    assert logits.shape == (4, 3)
    grads = backward(model, caches, np.ones((4, 3)))
    assert grads.d_input.shape == combined.shape


def test_backward_rejects_stale_cache():
    model = three_layer_model()
    x, labels = small_batch()
    logits, caches = forward(model, x)
    _, d_logits = softmax_cross_entropy(logits, labels)
    model.version += 1
    with pytest.raises(ValueError, match="stale cache"):
        backward(model, caches, d_logits)


def test_eval_before_any_training_step_raises():
    model = three_layer_model()
    x, _ = small_batch()
    with pytest.raises(RuntimeError):
        forward(model, x, "eval")


def test_eval_uses_moving_statistics():
    model = three_layer_model()
    x, _ = small_batch()
    forward(model, x, "train", NormContext())
    logits_eval, _ = forward(model, x, "eval")
    logits_train, _ = forward(model, x, "train", NormContext(track_moving=False))
    # the first moving-average update copies the batch statistics
    np.testing.assert_array_equal(logits_eval, logits_train)


def test_plan_dims_must_match_layer_input():
    model = three_layer_model()
    x, _ = small_batch()
    plan = make_plan(SamplingStrategy("BS", 0.5), model.bn_dims(8, 4, 4, 1), 0, RngStream(0))
    with pytest.raises(ValueError):
        forward(model, x, "train", NormContext(plan=plan))


def test_recorder_gets_one_entry_per_bn_layer():
    model = three_layer_model()
    x, _ = small_batch()
    plan = make_plan(SamplingStrategy("FS", 0.25), model.bn_dims(*x.shape), 0, RngStream(0))
    recorder = ErrorRecorder()
    forward(model, x, "train", NormContext(plan=plan, recorder=recorder))
    forward(model, x, "train", NormContext(plan=plan, recorder=recorder))
    trace = recorder.trace()
    assert (trace.layers, trace.iterations) == (3, 2)
    assert np.all(trace.e_mu > 0)


def test_full_plan_records_zero_error():
    model = three_layer_model()
    x, _ = small_batch()
    recorder = ErrorRecorder()
    forward(model, x, "train", NormContext(recorder=recorder))
    assert np.all(recorder.trace().e_mu == 0.0)


def test_softmax_cross_entropy_gradient():
    logits = np.array([[2.0, 0.0, -1.0], [0.0, 0.0, 0.0]])
    labels = np.array([0, 2])
    loss, grad = softmax_cross_entropy(logits, labels)
    assert loss == pytest.approx(
        0.5 * (-np.log(np.exp(2) / (np.exp(2) + 1 + np.exp(-1))) + np.log(3.0))
    )
    np.testing.assert_allclose(grad.sum(axis=1), 0.0, atol=1e-15)


def test_dense_bn_layers_accept_flat_input():
    specs = [
        LayerSpec("global_avg_pool"),
        LayerSpec("dense", 1, 4),
        LayerSpec("bn", 4, 4),
        LayerSpec("relu"),
        LayerSpec("dense", 4, 3),
    ]
    model = build_model(specs, RngStream(0))
    x, labels = small_batch(n=6)
    assert model.bn_dims(*x.shape) == [(6, 1, 1, 4)]
    report = grad_check(model, x, labels)
    assert report.passed, report.per_layer


def test_relative_error_floor():
    assert relative_error(0.0, 1e-9) == pytest.approx(1e-3)
    assert relative_error(1.0, 1.0) == 0.0


def test_unknown_layer_kind():
    with pytest.raises(ValueError):
        LayerSpec("pool")


def test_layer_base_is_abstract():
    with pytest.raises(TypeError):
        Layer()
