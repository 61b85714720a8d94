import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from continuum import nn


def zero_model(layer_sizes, activation="sigmoid"):
    return nn.deserialize_params(layer_sizes, activation, np.zeros(nn.param_count(layer_sizes)))


def numerical_gradient(model: nn.MlpModel, batch: nn.Batch, h: float = 1e-5) -> np.ndarray:
    """Central finite differences on the flat parameter vector; the oracle for backprop."""
    vec = nn.serialize_params(model)
    out = np.empty_like(vec)
    for i in range(vec.size):
        plus = vec.copy()
        plus[i] += h
        minus = vec.copy()
        minus[i] -= h
        loss_plus = nn.loss(
            nn.deserialize_params(model.layer_sizes, model.hidden_activation, plus), batch
        )
        loss_minus = nn.loss(
            nn.deserialize_params(model.layer_sizes, model.hidden_activation, minus), batch
        )
        out[i] = (loss_plus - loss_minus) / (2 * h)
    return out


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    mask = scale > 1e-10
    if not mask.any():
        return 0.0
    return float((np.abs(analytic - numeric)[mask] / scale[mask]).max())


def random_batch(rng, input_dim, num_classes, n=8) -> nn.Batch:
    return nn.Batch(rng.normal(size=(n, input_dim)), rng.integers(0, num_classes, size=n))


def test_param_count_formula():
    assert nn.param_count([512, 32, 8]) == 512 * 32 + 32 + 32 * 8 + 8
    assert nn.param_count([2, 3]) == 2 * 3 + 3
    model = nn.init_model([512, 32, 8], "sigmoid", seed=5)
    assert model.param_count == 16680
    assert nn.serialize_params(model).size == 16680


def test_init_is_deterministic_and_seed_sensitive():
    a = nn.init_model([2, 3], "sigmoid", seed=1)
    b = nn.init_model([2, 3], "sigmoid", seed=1)
    for wa, wb in zip(a.weights, b.weights):
        assert np.array_equal(wa, wb)
    for ba, bb in zip(a.biases, b.biases):
        assert np.array_equal(ba, bb)
    c = nn.init_model([4, 4, 4], "sigmoid", seed=1)
    d = nn.init_model([4, 4, 4], "sigmoid", seed=2)
    assert not np.array_equal(nn.serialize_params(c), nn.serialize_params(d))


def test_init_glorot_bounds_and_zero_biases():
    model = nn.init_model([20, 10, 5], "relu", seed=9)
    for w, (fan_in, fan_out) in zip(model.weights, zip(model.layer_sizes, model.layer_sizes[1:])):
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        assert np.abs(w).max() <= limit
    for b in model.biases:
        assert np.array_equal(b, np.zeros_like(b))


def test_init_rejects_bad_layers():
    with pytest.raises(ValueError):
        nn.init_model([], "sigmoid", seed=0)
    with pytest.raises(ValueError):
        nn.init_model([4], "sigmoid", seed=0)
    with pytest.raises(ValueError):
        nn.init_model([4, 0], "sigmoid", seed=0)
    with pytest.raises(ValueError):
        nn.init_model([4, 2], "softplus", seed=0)


def test_zero_model_predicts_uniform():
    model = zero_model([3, 8])
    probs = nn.forward(model, np.array([[1.0, -2.0, 0.5]]))
    assert probs.shape == (1, 8)
    np.testing.assert_allclose(probs, 0.125, atol=1e-15)


def test_forward_shape_and_row_sums():
    model = nn.init_model([512, 32, 8], "sigmoid", seed=1)
    x = np.random.default_rng(0).normal(size=(1, 512))
    probs = nn.forward(model, x)
    assert probs.shape == (1, 8)
    assert abs(probs.sum() - 1.0) < 1e-12
    with pytest.raises(ValueError):
        nn.forward(model, np.zeros((1, 8)))


def test_zero_model_loss_is_log_num_classes():
    rng = np.random.default_rng(3)
    batch8 = random_batch(rng, 4, 8)
    assert nn.loss(zero_model([4, 8]), batch8) == pytest.approx(math.log(8), abs=1e-12)
    batch4 = random_batch(rng, 4, 4)
    assert nn.loss(zero_model([4, 4]), batch4) == pytest.approx(math.log(4), abs=1e-12)


def test_loss_invariant_under_sample_duplication():
    rng = np.random.default_rng(4)
    model = nn.init_model([5, 6, 3], "tanh", seed=2)
    batch = random_batch(rng, 5, 3, n=6)
    doubled = nn.Batch(
        np.concatenate([batch.features, batch.features]),
        np.concatenate([batch.labels, batch.labels]),
    )
    assert nn.loss(model, doubled) == pytest.approx(nn.loss(model, batch), abs=1e-12)


@pytest.mark.parametrize("activation", ["sigmoid", "relu", "tanh"])
def test_gradient_matches_finite_differences(activation):
    rng = np.random.default_rng(11)
    model = nn.init_model([5, 4, 3], activation, seed=7)
    batch = random_batch(rng, 5, 3, n=8)
    analytic = nn.serialize_gradients(nn.gradient(model, batch))
    numeric = numerical_gradient(model, batch)
    assert max_relative_error(analytic, numeric) < 1e-5


def test_zero_model_balanced_batch_has_zero_output_bias_gradient():
    features = np.random.default_rng(5).normal(size=(8, 6))
    labels = np.array([0, 1, 2, 3, 0, 1, 2, 3])
    grads = nn.gradient(zero_model([6, 4]), nn.Batch(features, labels))
    np.testing.assert_allclose(grads.biases[-1], 0.0, atol=1e-15)
    assert grads.sample_count == 8


def test_gradient_linearity_over_batch_concatenation():
    rng = np.random.default_rng(6)
    model = nn.init_model([4, 5, 3], "sigmoid", seed=3)
    b1 = random_batch(rng, 4, 3, n=5)
    b2 = random_batch(rng, 4, 3, n=11)
    both = nn.Batch(
        np.concatenate([b1.features, b2.features]), np.concatenate([b1.labels, b2.labels])
    )
    g1 = nn.serialize_gradients(nn.gradient(model, b1))
    g2 = nn.serialize_gradients(nn.gradient(model, b2))
    combined = (5 * g1 + 11 * g2) / 16
    full = nn.serialize_gradients(nn.gradient(model, both))
    np.testing.assert_allclose(combined, full, atol=1e-12)


def test_gradient_is_deterministic():
    rng = np.random.default_rng(7)
    model = nn.init_model([6, 4, 3], "relu", seed=8)
    batch = random_batch(rng, 6, 3)
    a = nn.serialize_gradients(nn.gradient(model, batch))
    b = nn.serialize_gradients(nn.gradient(model, batch))
    assert np.array_equal(a, b)


def test_sgd_step_arithmetic():
    model = nn.deserialize_params([1, 1], "sigmoid", np.array([1.0, 0.0]))
    grads = nn.Gradients((np.array([[2.0]]),), (np.array([0.0]),), 1)
    stepped = nn.sgd_step(model, grads, 0.1)
    assert stepped.weights[0][0, 0] == pytest.approx(0.8, abs=1e-15)
    assert model.weights[0][0, 0] == 1.0  # input model untouched


def test_sgd_step_identity_cases():
    model = nn.init_model([3, 2], "sigmoid", seed=1)
    zero = nn.Gradients(
        tuple(np.zeros_like(w) for w in model.weights),
        tuple(np.zeros_like(b) for b in model.biases),
        1,
    )
    same = nn.sgd_step(model, zero, 0.5)
    assert np.array_equal(nn.serialize_params(same), nn.serialize_params(model))
    batch = random_batch(np.random.default_rng(0), 3, 2)
    grads = nn.gradient(model, batch)
    frozen = nn.sgd_step(model, grads, 0.0)
    assert np.array_equal(nn.serialize_params(frozen), nn.serialize_params(model))
    with pytest.raises(ValueError):
        nn.sgd_step(model, grads, -0.1)


def test_sgd_step_shape_mismatch():
    model = nn.init_model([3, 2], "sigmoid", seed=1)
    other = nn.gradient(
        nn.init_model([4, 2], "sigmoid", seed=1), random_batch(np.random.default_rng(1), 4, 2)
    )
    with pytest.raises(ValueError):
        nn.sgd_step(model, other, 0.1)


def test_evaluate_tie_breaks_to_lowest_class():
    model = zero_model([3, 4])
    features = np.random.default_rng(8).normal(size=(10, 3))
    all_zero = nn.evaluate(model, features, np.zeros(10, dtype=np.int64))
    assert all_zero.accuracy == 1.0  # uniform probabilities: argmax tie -> class 0
    uniform_labels = np.arange(400) % 4
    mixed = nn.evaluate(model, np.random.default_rng(9).normal(size=(400, 3)), uniform_labels)
    assert mixed.accuracy == 0.25
    assert mixed.mean_loss == pytest.approx(math.log(4), abs=1e-12)


def test_evaluate_rejects_empty():
    model = zero_model([3, 4])
    with pytest.raises(ValueError):
        nn.evaluate(model, np.zeros((0, 3)), np.zeros(0, dtype=np.int64))


def test_serialization_round_trip_is_bitwise():
    model = nn.init_model([7, 5, 4, 3], "tanh", seed=13)
    vec = nn.serialize_params(model)
    back = nn.deserialize_params(model.layer_sizes, model.hidden_activation, vec)
    assert np.array_equal(nn.serialize_params(back), vec)
    for w1, w2 in zip(model.weights, back.weights):
        assert np.array_equal(w1, w2)


def test_serialization_canonical_order():
    w0 = np.array([[1.0, 2.0], [3.0, 4.0]])
    b0 = np.array([5.0, 6.0])
    w1 = np.array([[7.0], [8.0]])
    b1 = np.array([9.0])
    model = nn.MlpModel((2, 2, 1), "sigmoid", (w0, w1), (b0, b1))
    expected = np.array([1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0])
    assert np.array_equal(nn.serialize_params(model), expected)


def test_deserialize_rejects_wrong_length():
    with pytest.raises(ValueError):
        nn.deserialize_params([512, 32, 8], "sigmoid", np.zeros(16744))
    nn.deserialize_params([512, 32, 8], "sigmoid", np.zeros(16680))


layer_sizes_strategy = st.lists(st.integers(1, 6), min_size=2, max_size=4)


@given(layers=layer_sizes_strategy, seed=st.integers(0, 2**31), data=st.data())
@settings(max_examples=60, deadline=None)
def test_softmax_rows_sum_to_one(layers, seed, data):
    model = nn.init_model(layers, "sigmoid", seed=seed)
    n = data.draw(st.integers(1, 5))
    features = np.array(
        data.draw(
            st.lists(
                st.lists(st.floats(-50, 50), min_size=layers[0], max_size=layers[0]),
                min_size=n,
                max_size=n,
            )
        )
    )
    probs = nn.forward(model, features)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)
    assert (probs >= 0).all() and (probs <= 1).all()


@given(seed=st.integers(0, 2**31))
@settings(max_examples=25, deadline=None)
def test_gradient_matches_finite_differences_random_models(seed):
    rng = np.random.default_rng(seed)
    layers = [int(rng.integers(2, 7)) for _ in range(int(rng.integers(2, 4)))]
    activation = ("sigmoid", "relu", "tanh")[int(rng.integers(0, 3))]
    model = nn.init_model(layers, activation, seed=seed)
    batch = random_batch(rng, layers[0], layers[-1], n=int(rng.integers(1, 7)))
    analytic = nn.serialize_gradients(nn.gradient(model, batch))
    numeric = numerical_gradient(model, batch)
    assert max_relative_error(analytic, numeric) < 1e-5


def test_small_step_does_not_increase_loss_smoke():
    # statistical smoke property on unit-scale problems, not a theorem
    for seed in range(20):
        rng = np.random.default_rng(seed)
        model = nn.init_model([6, 5, 4], "sigmoid", seed=seed)
        batch = random_batch(rng, 6, 4, n=12)
        before = nn.loss(model, batch)
        stepped = nn.sgd_step(model, nn.gradient(model, batch), 1e-4)
        assert nn.loss(stepped, batch) <= before + 1e-12
