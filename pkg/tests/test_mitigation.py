import json

import numpy as np
import pytest
from helpers import gradient_relative_errors, toy_problem

from bnalab.attacks import AdditiveTrigger
from bnalab.detector import DetectionOutcome
from bnalab.mitigation import (
    MitigatedClassifier,
    MitigationConfig,
    activation_divergences,
    infer,
    initial_transforms,
    insert_norm_layers,
    mitigate,
    moment_matched_transforms,
    objective,
    optimize_transforms,
    trainable_checksum,
    transforms_from_dict,
    transforms_to_dict,
)
from bnalab.nnet import BatchNorm, build_mlp, forward, predict

SHIFT = AdditiveTrigger(np.array([0.1, -0.05, 0.08, 0.0]))


def _outcome(target, sources, trigger=SHIFT):
    return DetectionOutcome([], [(s, target) for s in sources], {target: sources}, {target: trigger}, 7.0, "additive")


@pytest.mark.parametrize("kind", ["tv", "js", "kl"])
@pytest.mark.parametrize("hidden,batch_norm,clamps", [([2], True, False), ([2, 2], True, False), ([4], False, True)])
def test_objective_gradients_match_finite_differences(kind, hidden, batch_norm, clamps):
    worst = gradient_relative_errors(toy_problem(hidden, 0, batch_norm, clamps), kind)
    assert max(worst.values()) <= 1e-3, worst


def test_clamp_gradients_are_exercised():
    model, theta, x_trig, layouts, targets = toy_problem([4], 0, batch_norm=False, clamps=True)
    _, _, grads = objective(model, theta, x_trig, layouts, targets, 10.0, "tv")
    g = grads[1]
    assert np.any(g["lower"] != 0) or np.any(g["upper"] != 0)


def test_inserted_layers_are_identity_and_keep_weights():
    base = build_mlp(3, [4, 2], 2, np.random.default_rng(0), batch_norm=False)
    with_bn = insert_norm_layers(base)
    assert len(with_bn.bn_indices) == 2
    x = np.random.default_rng(1).uniform(size=(10, 3))
    np.testing.assert_allclose(forward(with_bn, x)[0], forward(base, x)[0], rtol=1e-12)
    for bn in (with_bn.layers[i] for i in with_bn.bn_indices):
        assert isinstance(bn, BatchNorm)
        np.testing.assert_allclose(bn.running_std, 1.0)


def test_checksum_tracks_trainable_parameters_only(blob_problem):
    model, _, _ = blob_problem
    m = model.copy()
    c = trainable_checksum(m)
    m.layers[1].running_mean += 1.0
    assert trainable_checksum(m) == c
    m.layers[1].gamma[0] += 1e-12
    assert trainable_checksum(m) != c


@pytest.mark.parametrize("init", ["moments", "identity"])
def test_empty_trigger_keeps_stored_statistics(blob_problem, init):
    model, x, y = blob_problem
    res = optimize_transforms(model, x[y == 0], AdditiveTrigger(np.zeros(4)), MitigationConfig(init=init))
    bn = model.layers[1]
    ov = res.theta[1]
    assert np.max(np.abs(ov.mu - bn.running_mean) / bn.running_std) <= 1e-3
    assert np.max(np.abs(ov.sigma / bn.running_std - 1)) <= 1e-3
    assert res.loss_history[0] == pytest.approx(0.0, abs=1e-12)
    assert res.parameters_untouched


def test_descent_from_stored_statistics(blob_problem):
    model, x, y = blob_problem
    res = optimize_transforms(model, x[y == 0], SHIFT, MitigationConfig(init="identity"))
    h = res.loss_history
    assert len(h) == 11
    assert all(b <= a for a, b in zip(h[1:], h[2:]))
    assert h[-1] <= 0.5 * h[0]
    assert res.parameters_untouched and not res.aborted


def test_moment_start_aligns_an_additive_shift(blob_problem):
    model, x, y = blob_problem
    xs = x[y == 0]
    theta = moment_matched_transforms(model, xs, SHIFT.embed(xs))
    _, clean = forward(model, xs)
    _, trig = forward(model, SHIFT.embed(xs), overrides=theta)
    np.testing.assert_allclose(trig[1].mean(axis=0), clean[1].mean(axis=0), atol=1e-9)
    np.testing.assert_allclose(trig[1].std(axis=0), clean[1].std(axis=0), rtol=1e-9)


def test_divergence_reduced_after_mitigation(blob_problem):
    model, x, y = blob_problem
    xs = x[y == 0]
    res = optimize_transforms(model, xs, SHIFT)
    before = activation_divergences(model, xs, SHIFT.embed(xs), res.layouts)[1].sum()
    after = activation_divergences(model, xs, SHIFT.embed(xs), res.layouts, theta=res.theta)[1].sum()
    assert after <= 0.4 * before


def test_transform_sidecar_round_trip(blob_problem):
    model, _, _ = blob_problem
    theta = initial_transforms(model)
    back = transforms_from_dict(json.loads(json.dumps(transforms_to_dict(theta, tau=150.0))))
    np.testing.assert_array_equal(back[1].mu, theta[1].mu)
    np.testing.assert_array_equal(back[1].sigma, theta[1].sigma)


def test_clean_outcome_wrapper_is_pass_through(blob_problem):
    model, x, _ = blob_problem
    clean = DetectionOutcome([], [], {}, {}, 7.0, "additive")
    w = MitigatedClassifier(model, clean)
    pred, flags = infer(w, x)
    np.testing.assert_array_equal(pred, predict(model, x))
    assert not flags.any()
    with pytest.raises(ValueError):
        mitigate(model, clean, (x, np.zeros(len(x), int)))


def test_wrapper_only_reconsiders_detected_target_predictions(blob_problem):
    model, x, y = blob_problem
    wrapper, results = mitigate(model, _outcome(1, [0]), (x, y))
    assert all(r.parameters_untouched for r in results.values())
    pred, flags = wrapper.infer(x)
    base = predict(model, x)
    # predictions outside the detected target class are trusted as they are
    np.testing.assert_array_equal(pred[base != 1], base[base != 1])
    assert not flags[base != 1].any()
    # a flag is raised exactly when the decision changed
    np.testing.assert_array_equal(flags, pred != base)


def test_mitigate_leaves_model_bytes_untouched(blob_problem):
    model, x, y = blob_problem
    before = [a.tobytes() for _, a in model.trainable_arrays()]
    stats = [(model.layers[1].running_mean.tobytes(), model.layers[1].running_var.tobytes())]
    mitigate(model, _outcome(2, [0, 1]), (x, y))
    assert [a.tobytes() for _, a in model.trainable_arrays()] == before
    assert [(model.layers[1].running_mean.tobytes(), model.layers[1].running_var.tobytes())] == stats
