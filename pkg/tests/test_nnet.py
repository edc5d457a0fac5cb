import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bnalab.nnet import (
    BatchNorm,
    Dense,
    MlpModel,
    NormOverride,
    OptimizerConfig,
    build_mlp,
    forward,
    gradients,
    load_model,
    predict,
    recalibrate_bn,
    save_model,
    train,
)


def _fd(f, arr, h=1e-6):
    out = np.zeros_like(arr)
    for idx in np.ndindex(arr.shape):
        old = arr[idx]
        arr[idx] = old + h
        up = f()
        arr[idx] = old - h
        down = f()
        arr[idx] = old
        out[idx] = (up - down) / (2 * h)
    return out


@pytest.mark.parametrize("training", [False, True])
def test_parameter_and_input_gradients_match_finite_differences(rng, training):
    model = build_mlp(3, [4, 3], 3, rng)
    for layer in model.layers:
        if isinstance(layer, BatchNorm):
            layer.running_mean[:] = rng.normal(size=layer.width)
            layer.running_var[:] = rng.uniform(0.5, 2, layer.width)
            layer.gamma[:] = rng.uniform(0.5, 1.5, layer.width)
            layer.beta[:] = rng.normal(size=layer.width)
    x = rng.uniform(0, 1, (6, 3))
    y = rng.integers(0, 3, 6)
    _, g = gradients(model, x, y, training=training)

    def loss():
        return gradients(model, x, y, training=training)[0]

    for name, arr in model.trainable_arrays():
        np.testing.assert_allclose(g.params[name], _fd(loss, arr), rtol=1e-5, atol=1e-8, err_msg=name)
    np.testing.assert_allclose(g.inputs, _fd(loss, x), rtol=1e-5, atol=1e-8)


def test_training_does_not_leak_running_stats_from_gradient_calls(rng):
    model = build_mlp(3, [4], 2, rng)
    before = model.layers[1].running_mean.copy()
    gradients(model, rng.uniform(size=(5, 3)), np.zeros(5, int), training=True)
    np.testing.assert_array_equal(model.layers[1].running_mean, before)


def test_norm_override_gradients(rng):
    model = build_mlp(3, [3], 2, rng)
    ov = {1: NormOverride(rng.normal(size=3), rng.uniform(0.5, 2, 3), np.full(3, -1.5), np.full(3, 1.5))}
    x = rng.uniform(0, 1, (8, 3))
    y = rng.integers(0, 2, 8)
    _, g = gradients(model, x, y, overrides=ov)

    def loss():
        return gradients(model, x, y, overrides=ov)[0]

    np.testing.assert_allclose(g.norm_mu[1], _fd(loss, ov[1].mu), rtol=1e-5, atol=1e-8)
    np.testing.assert_allclose(g.norm_sigma[1], _fd(loss, ov[1].sigma), rtol=1e-5, atol=1e-8)
    np.testing.assert_allclose(g.norm_lower[1], _fd(loss, ov[1].lower), rtol=1e-5, atol=1e-8)
    np.testing.assert_allclose(g.norm_upper[1], _fd(loss, ov[1].upper), rtol=1e-5, atol=1e-8)


def test_serialisation_round_trip_is_bit_exact(tmp_path, blob_problem):
    model, x, _ = blob_problem
    path = tmp_path / "m.json"
    save_model(model, path)
    back = load_model(path)
    np.testing.assert_array_equal(forward(back, x)[0], forward(model, x)[0])
    for (n1, a1), (n2, a2) in zip(model.trainable_arrays(), back.trainable_arrays()):
        assert n1 == n2 and a1.tobytes() == a2.tobytes()


def test_training_is_deterministic(blob_problem):
    _, x, y = blob_problem
    outs = []
    for _ in range(2):
        m = build_mlp(4, [6], 3, np.random.default_rng(0))
        train(m, x, y, OptimizerConfig(epochs=3, seed=5))
        outs.append(forward(m, x)[0])
    np.testing.assert_array_equal(*outs)


def test_trained_model_fits_separable_blobs(blob_problem):
    model, x, y = blob_problem
    assert np.mean(predict(model, x) == y) > 0.98


def test_recalibration_sets_exact_statistics(blob_problem):
    model, x, _ = blob_problem
    m = model.copy()
    recalibrate_bn(m, x)
    _, trace = forward(m, x)
    z = trace.pre_bn[1]
    np.testing.assert_allclose(m.layers[1].running_mean, z.mean(axis=0), atol=1e-12)
    np.testing.assert_allclose(m.layers[1].running_var, z.var(axis=0, ddof=1), atol=1e-12)


def test_shape_checks():
    with pytest.raises(ValueError):
        MlpModel([Dense(np.zeros((3, 4)), np.zeros(4)), BatchNorm(np.ones(5), np.zeros(5), np.zeros(5), np.ones(5))], 5)
    with pytest.raises(ValueError):
        MlpModel([Dense(np.zeros((3, 4)), np.zeros(4))], 3)
    m = build_mlp(3, [2], 2, np.random.default_rng(0))
    with pytest.raises(ValueError):
        forward(m, np.zeros((1, 4)))


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 5), st.integers(1, 4), st.integers(2, 5), st.integers(0, 10_000))
def test_forward_shapes(d, h, c, seed):
    r = np.random.default_rng(seed)
    m = build_mlp(d, [h], c, r)
    scores, trace = forward(m, r.uniform(size=(7, d)))
    assert scores.shape == (7, c)
    assert trace[1].shape == (7, h)
    assert set(predict(m, r.uniform(size=(7, d)))) <= set(range(c))


def test_identity_batch_norm_divides_by_stabilised_std():
    from bnalab.nnet import Activation, BN_EPS
    bn = BatchNorm(np.ones(1), np.zeros(1), np.zeros(1), np.ones(1))
    m = MlpModel([Dense(np.eye(1), np.zeros(1)), bn, Activation("linear"), Dense(np.eye(1), np.zeros(1))], 1)
    assert forward(m, [[3.0]])[0][0, 0] == pytest.approx(3.0 / np.sqrt(1 + BN_EPS), abs=1e-15)


def test_affine_arithmetic():
    from bnalab.nnet import Activation
    m = MlpModel([Dense(np.array([[2.0]]), np.array([1.0])), Activation("linear")], 1)
    assert forward(m, [[3.0]])[0][0, 0] == 7.0


def test_bn_substitution():
    from bnalab.nnet import Activation
    bn = BatchNorm(np.array([2.0]), np.array([-1.0]), np.array([4.0]), np.array([4.0]), epsilon_stab=1e-300)
    m = MlpModel([Dense(np.array([[1.0]]), np.zeros(1)), bn, Activation("linear"), Dense(np.eye(1), np.zeros(1))], 1)
    assert forward(m, [[6.0]])[0][0, 0] == pytest.approx(1.0, abs=1e-15)


def test_zero_epochs_leave_the_model_unchanged(blob_problem):
    model, x, y = blob_problem
    m = model.copy()
    train(m, x, y, OptimizerConfig(epochs=0, recalibrate_bn=True))
    for (_, a), (_, b) in zip(m.trainable_arrays(), model.trainable_arrays()):
        assert a.tobytes() == b.tobytes()
    np.testing.assert_array_equal(m.layers[1].running_mean, model.layers[1].running_mean)


def test_constant_loss_has_zero_gradients(blob_problem):
    model, x, y = blob_problem
    _, g = gradients(model, x[:5], y[:5], loss="constant")
    assert all(not np.any(v) for v in g.params.values())


def test_linear_squared_loss_closed_form():
    from bnalab.nnet import Activation
    w, x, y = np.array([[0.5], [-1.0]]), np.array([[2.0, 3.0]]), 1.5
    m = MlpModel([Dense(w.copy(), np.zeros(1)), Activation("linear")], 1)
    _, g = gradients(m, x, [[y]], loss="squared")
    expected = 2 * (x @ w - y).item() * x[0]
    np.testing.assert_allclose(g.params["0.weights"][:, 0], expected)


def test_two_dimensional_blobs_held_out_accuracy():
    r = np.random.default_rng(0)
    y = np.repeat([0, 1], 300)
    x = np.array([[0.3, 0.3], [0.7, 0.7]])[y] + 0.06 * r.standard_normal((600, 2))
    test = r.permutation(600)
    fit, held = test[:450], test[450:]
    m = build_mlp(2, [8], 2, np.random.default_rng(1))
    train(m, x[fit], y[fit], OptimizerConfig(lr=0.02, epochs=20, seed=0))
    assert np.mean(predict(m, x[held]) == y[held]) >= 0.98
