"""Shared oracles for the unit and acceptance suites."""
import numpy as np

from bnalab.histogram import DivergenceKind
from bnalab.mitigation import (
    clean_clamp_ranges,
    initial_transforms,
    insert_norm_layers,
    layer_histograms,
    objective,
    reference_layouts,
)
from bnalab.nnet import build_mlp

PARAM_KEYS = (("mu", "mu"), ("sigma", "sigma"), ("lower", "lower"), ("upper", "upper"))


def toy_problem(hidden, seed, batch_norm=True, clamps=False):
    """Tiny model, clean rows, shifted 'triggered' rows and a perturbed transform set."""
    rng = np.random.default_rng(seed)
    model = build_mlp(3, hidden, 2, rng, batch_norm=batch_norm)
    if not batch_norm:
        model = insert_norm_layers(model)
    x = rng.uniform(0, 1, (40, 3))
    x_trig = np.clip(x + np.array([0.2, -0.1, 0.15]), 0, 1)
    ranges = clean_clamp_ranges(model, x) if clamps else None
    theta = initial_transforms(model, ranges)
    for ov in theta.values():
        ov.mu += rng.normal(0, 0.1, ov.mu.shape)
        ov.sigma *= rng.uniform(0.8, 1.2, ov.sigma.shape)
        if ov.lower is not None:
            # pull the bounds inside the clean range so they are active
            ov.lower *= 0.6
            ov.upper *= 0.6
    layouts = reference_layouts(model, x, 0.3)
    targets = layer_histograms(model, x, layouts, 10.0)
    return model, theta, x_trig, layouts, targets


def gradient_relative_errors(problem, kind, tau=10.0, h=1e-6):
    """Worst relative error between analytic and central-difference gradients, per parameter kind."""
    model, theta, x_trig, layouts, targets = problem
    kind = DivergenceKind(kind)
    _, _, grads = objective(model, theta, x_trig, layouts, targets, tau, kind)
    worst = {}
    for i, ov in theta.items():
        for key, attr in PARAM_KEYS:
            arr = getattr(ov, attr)
            if arr is None:
                continue
            fd = np.zeros_like(arr)
            for j in range(arr.size):
                old = arr[j]
                arr[j] = old + h
                up = objective(model, theta, x_trig, layouts, targets, tau, kind)[0]
                arr[j] = old - h
                down = objective(model, theta, x_trig, layouts, targets, tau, kind)[0]
                arr[j] = old
                fd[j] = (up - down) / (2 * h)
            g = grads[i][key]
            scale = max(np.abs(fd).max(), 1e-12)
            err = float(np.max(np.abs(g - fd) / np.maximum(np.abs(fd), 1e-3 * scale)))
            worst[f"{i}.{key}"] = err
    return worst
