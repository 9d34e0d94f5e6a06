import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from excitest import engine
from conftest import make_linear_model, make_mlp_model


def test_softmax_hand_values():
    # zero weights, bias carries the logits: softmax([1, 2])
    model = make_linear_model(np.zeros((3, 2)), np.array([1.0, 2.0]))
    probs, _ = engine.forward(model, np.zeros(3, np.float32))
    e1, e2 = math.exp(1.0), math.exp(2.0)
    assert probs[0] == pytest.approx(e1 / (e1 + e2), abs=1e-6)
    assert probs[1] == pytest.approx(e2 / (e1 + e2), abs=1e-6)


def test_uniform_probabilities_give_log_class_count_loss():
    model = make_linear_model(np.zeros((4, 10)), np.zeros(10))
    x = np.linspace(0, 1, 4).astype(np.float32)
    assert engine.loss(model, x, 7) == pytest.approx(math.log(10.0), abs=1e-6)


def test_mlp_forward_hand_oracle():
    w1 = np.array([[1.0, -1.0], [0.5, 2.0]])
    b1 = np.array([0.1, -0.2])
    w2 = np.array([[1.0, 0.0], [-1.0, 1.0]])
    b2 = np.array([0.0, 0.3])
    model = make_mlp_model(w1, b1, w2, b2)
    x = np.array([0.4, 0.6], np.float32)
    h = np.maximum(x @ w1 + b1, 0.0)
    logits = h @ w2 + b2
    expect = np.exp(logits) / np.exp(logits).sum()
    probs, trace = engine.forward(model, x)
    assert probs == pytest.approx(expect, abs=1e-6)
    # trace reports post-activation hidden units and raw output units
    assert trace[engine.NeuronId(0, 0)] == pytest.approx(h[0], abs=1e-6)
    assert trace[engine.NeuronId(0, 1)] == pytest.approx(h[1], abs=1e-6)
    assert trace[engine.NeuronId(2, 0)] == pytest.approx(logits[0], abs=1e-6)


def test_conv_and_maxpool_hand_oracle():
    # one 2x2 kernel, stride 1, no padding, on a 3x3 image; then 2x2 pool
    kernel = np.array([[1.0, 0.0], [0.0, -1.0]])
    img = np.arange(9, dtype=np.float32).reshape(1, 3, 3) / 10.0
    layers = [
        engine.conv2d(1, 1, 2, 2),
        engine.maxpool2d(2, stride=1),
        engine.flatten(),
        engine.dense(1, 2),
        engine.softmax(),
    ]
    weights = [
        {"W": kernel.reshape(1, 1, 2, 2).astype(np.float32), "b": np.zeros(1, np.float32)},
        {},
        {},
        {"W": np.eye(1, 2, dtype=np.float32), "b": np.zeros(2, np.float32)},
        {},
    ]
    model = engine.NetworkModel((1, 3, 3), layers, weights, 2)
    conv = np.empty((2, 2))
    for i in range(2):
        for j in range(2):
            conv[i, j] = (img[0, i : i + 2, j : j + 2] * kernel).sum()
    pooled = conv.max()
    probs = engine.forward_batch(model, img[None])[0]
    logits = np.array([pooled, 0.0])
    expect = np.exp(logits) / np.exp(logits).sum()
    assert probs == pytest.approx(expect, abs=1e-6)


def test_dense_gradient_hand_oracle():
    # linear softmax: dL/dW[i, j] = x_i (p_j - 1{j==y}), dL/db = p - onehot
    w = np.array([[0.3, -0.2], [0.1, 0.4]])
    b = np.array([0.05, -0.1])
    model = make_linear_model(w, b)
    x = np.array([1.0, 0.5], np.float32)
    z = x @ w + b
    p = np.exp(z) / np.exp(z).sum()
    grads, dx = engine.gradients(model, x, 0)
    expect_db = p - np.array([1.0, 0.0])
    assert grads[0]["b"] == pytest.approx(expect_db, abs=1e-6)
    assert grads[0]["W"] == pytest.approx(np.outer(x, expect_db), abs=1e-6)
    assert dx == pytest.approx(w @ expect_db, abs=1e-6)


def _finite_difference_check(model, x, label, h=1e-3, tol=1e-3):
    grads = engine.batch_gradients(model, x[None], [label])
    worst = 0.0
    for li, g in enumerate(grads):
        for name, darr in g.items():
            arr = model.weights[li][name]
            flat = darr.reshape(-1)
            probe = np.argsort(-np.abs(flat))[:10]  # densest entries only
            for k in probe:
                idx = np.unravel_index(k, arr.shape)
                plus = model.copy()
                plus.weights[li][name][idx] += h
                minus = model.copy()
                minus.weights[li][name][idx] -= h
                fd = (
                    engine.loss(plus, x, label) - engine.loss(minus, x, label)
                ) / (2 * h)
                denom = max(abs(fd), abs(flat[k]), 1e-4)
                worst = max(worst, abs(fd - flat[k]) / denom)
    return worst, tol


def test_finite_difference_gradients_mlp():
    rng = np.random.default_rng(0)
    model = make_mlp_model(
        rng.normal(0, 0.5, (4, 5)),
        rng.normal(0, 0.1, 5),
        rng.normal(0, 0.5, (5, 3)),
        rng.normal(0, 0.1, 3),
    )
    x = rng.uniform(0, 1, 4).astype(np.float32)
    worst, tol = _finite_difference_check(model, x, 1)
    assert worst <= tol


def test_finite_difference_gradients_conv():
    rng = np.random.default_rng(1)
    layers = [
        engine.conv2d(1, 2, 3, 3, padding=1),
        engine.relu(),
        engine.maxpool2d(2),
        engine.flatten(),
        engine.dense(2 * 3 * 3, 3),
        engine.softmax(),
    ]
    weights = engine.init_weights((1, 6, 6), layers, seed=1)
    model = engine.NetworkModel((1, 6, 6), layers, weights, 3)
    x = rng.uniform(0, 1, (1, 6, 6)).astype(np.float32)
    worst, tol = _finite_difference_check(model, x, 2)
    assert worst <= tol


def test_ablation_matches_manual_zeroing():
    w1 = np.array([[1.0, -0.5, 0.3], [0.2, 0.8, -0.4]])
    b1 = np.array([0.1, 0.0, -0.1])
    w2 = np.array([[0.5, -0.5], [1.0, 0.2], [-0.3, 0.9]])
    b2 = np.zeros(2)
    model = make_mlp_model(w1, b1, w2, b2)
    x = np.array([0.7, 0.3], np.float32)
    h = np.maximum(x @ w1 + b1, 0.0)
    h[1] = 0.0  # ablate hidden unit 1 by hand
    logits = h @ w2 + b2
    expect = np.exp(logits) / np.exp(logits).sum()
    probs, trace = engine.forward(model, x, mask=[engine.NeuronId(0, 1)])
    assert probs == pytest.approx(expect, abs=1e-6)
    assert trace[engine.NeuronId(0, 1)] == 0.0


def test_ablation_is_idempotent(blobs_model, blobs_data):
    x = blobs_data.inputs[0]
    mask = [engine.NeuronId(1, 0), engine.NeuronId(1, 3)]
    once = engine.forward_batch(blobs_model, x[None], mask=mask)
    twice = engine.forward_batch(blobs_model, x[None], mask=list(mask) + list(mask))
    assert np.array_equal(once, twice)


def test_mask_rejects_invalid_neuron(blobs_model):
    with pytest.raises(engine.EngineError):
        engine.forward(blobs_model, np.zeros(8, np.float32), mask=[engine.NeuronId(0, 0)])
    with pytest.raises(engine.EngineError):
        engine.forward(blobs_model, np.zeros(8, np.float32), mask=[engine.NeuronId(1, 99)])


def test_per_row_keep_masks_match_per_example_masks(blobs_model, blobs_data):
    xs = blobs_data.inputs[:4]
    ys = blobs_data.labels[:4]
    counts = dict(engine.countable_layers(blobs_model))
    keep = {1: np.ones((4, counts[1]), np.float32)}
    keep[1][0, 2] = 0.0
    keep[1][2, 5] = 0.0
    batched = engine.example_losses(blobs_model, xs, ys, keep)
    singles = [
        engine.loss(blobs_model, xs[0], ys[0], mask=[engine.NeuronId(1, 2)]),
        engine.loss(blobs_model, xs[1], ys[1]),
        engine.loss(blobs_model, xs[2], ys[2], mask=[engine.NeuronId(1, 5)]),
        engine.loss(blobs_model, xs[3], ys[3]),
    ]
    assert batched == pytest.approx(singles, abs=1e-6)


def test_sgd_step_arithmetic():
    model = make_linear_model(np.array([[0.2, -0.1]]), np.array([0.0, 0.0]))
    x = np.array([1.0], np.float32)
    z = np.array([0.2, -0.1])
    p = np.exp(z) / np.exp(z).sum()
    expect_db = p - np.array([0.0, 1.0])  # label 1
    stepped = engine.sgd_step(model, x[None], [1], learning_rate=0.5)
    assert stepped.weights[0]["b"] == pytest.approx(-0.5 * expect_db, abs=1e-6)
    assert stepped.weights[0]["W"][0] == pytest.approx(
        np.array([0.2, -0.1]) - 0.5 * expect_db, abs=1e-6
    )
    # the input model is untouched
    assert np.array_equal(model.weights[0]["b"], np.zeros(2, np.float32))


def test_neuron_accounting_mlp(digits_model):
    # hidden 32 + output 10; flatten/relu/softmax contribute nothing
    assert engine.neuron_count(digits_model) == 42
    ids = engine.neuron_ids(digits_model)
    assert len(ids) == len(set(ids)) == 42


def test_neuron_accounting_convnet(digits_conv_model):
    # conv 8 + conv 16 + dense 32 + dense 10 channels/units
    assert engine.neuron_count(digits_conv_model) == 66


def test_model_validation_rejects_bad_shapes():
    with pytest.raises(engine.EngineError):
        engine.NetworkModel(
            (3,),
            [engine.dense(4, 2), engine.softmax()],
            [{"W": np.zeros((4, 2), np.float32), "b": np.zeros(2, np.float32)}, {}],
            2,
        )
    with pytest.raises(engine.EngineError):
        engine.NetworkModel(
            (3,),
            [engine.dense(3, 2)],  # missing softmax head
            [{"W": np.zeros((3, 2), np.float32), "b": np.zeros(2, np.float32)}],
            2,
        )


def test_loss_rejects_out_of_range_labels(blobs_model):
    with pytest.raises(engine.EngineError):
        engine.loss(blobs_model, np.zeros(8, np.float32), 3)


@settings(max_examples=30, deadline=None)
@given(
    xs=hnp.arrays(
        np.float32,
        st.tuples(st.integers(1, 5), st.just(8)),
        elements=st.floats(0, 1, width=32),
    )
)
def test_probabilities_form_a_distribution(blobs_model, xs):
    probs = engine.forward_batch(blobs_model, xs)
    assert np.all(probs >= 0)
    assert np.all(probs <= 1)
    assert probs.sum(axis=1) == pytest.approx(np.ones(len(xs)), abs=1e-5)


@settings(max_examples=20, deadline=None)
@given(
    x=hnp.arrays(np.float32, (8,), elements=st.floats(0, 1, width=32)),
    label=st.integers(0, 2),
)
def test_loss_is_finite_and_nonnegative(blobs_model, x, label):
    val = engine.loss(blobs_model, x, label)
    assert np.isfinite(val)
    assert val >= 0.0


def test_single_and_batch_forward_agree(blobs_model, blobs_data):
    xs = blobs_data.inputs[:5]
    batch = engine.forward_batch(blobs_model, xs)
    for i in range(5):
        single, _ = engine.forward(blobs_model, xs[i])
        assert single == pytest.approx(batch[i], abs=1e-6)
