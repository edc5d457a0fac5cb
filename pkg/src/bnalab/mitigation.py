"""Normalization-statistics alteration by divergence minimisation.

Only the BN location/scale (and, for inserted transform layers, clamp bounds)
are optimised; dense weights, biases and BN gamma/beta never change.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .attacks import embed
from .histogram import (
    DivergenceKind,
    build_bins,
    divergence_grad_q,
    divergence_per_row,
    histogram_grad_values,
    soft_histogram,
)
from .nnet import (
    BatchNorm,
    Dense,
    MlpModel,
    NormOverride,
    Optimizer,
    _backward,
    _forward,
    forward,
    predict,
)

log = logging.getLogger(__name__)

SIGMA_FLOOR = 1e-6


def trainable_checksum(model: MlpModel) -> str:
    """sha256 over dense weights/biases and BN gamma/beta bytes."""
    h = hashlib.sha256()
    for name, arr in model.trainable_arrays():
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr, dtype=np.float64).tobytes())
    return h.hexdigest()


def insert_norm_layers(model: MlpModel) -> MlpModel:
    """Copy of a BN-free model with an identity BN after every hidden dense layer."""
    if model.bn_indices:
        return model.copy()
    layers = []
    dense_seen = 0
    n_dense = sum(isinstance(l, Dense) for l in model.layers)
    for layer in model.copy().layers:
        layers.append(layer)
        if isinstance(layer, Dense):
            dense_seen += 1
            if dense_seen < n_dense:
                w = layer.width
                eps = 1e-5
                layers.append(BatchNorm(np.ones(w), np.zeros(w), np.zeros(w), np.full(w, 1.0 - eps), eps))
    return MlpModel(layers, model.class_count)


TransformParams = dict  # bn layer index -> NormOverride


def initial_transforms(model: MlpModel, clamp_ranges=None) -> TransformParams:
    """Start from the stored running statistics (no-op transform).

    `clamp_ranges` maps a BN index to (lower, upper) in normalised units; the
    bounds are then optimised too.
    """
    theta = {}
    for i in model.bn_indices:
        bn = model.layers[i]
        lo = hi = None
        if clamp_ranges and i in clamp_ranges:
            lo, hi = (np.array(a, dtype=float) for a in clamp_ranges[i])
        theta[i] = NormOverride(bn.running_mean.copy(), bn.running_std.copy(), lo, hi)
    return theta


def moment_matched_transforms(model, x_clean, x_trig, theta=None):
    """Per-neuron location/scale that give triggered activations the clean mean and std.

    Layers are matched in order, so a layer's triggered statistics already
    reflect the transforms chosen for earlier layers.
    """
    theta = initial_transforms(model) if theta is None else theta
    for i in model.bn_indices:
        _, clean = forward(model, x_clean)
        _, trig = forward(model, x_trig, overrides=theta)
        bn = model.layers[i]
        zc, zb = clean.pre_bn[i], trig.pre_bn[i]
        sc, sb = zc.std(axis=0), zb.std(axis=0)
        ok = (sc > 1e-12) & (sb > 1e-12)
        ratio = np.where(ok, sb / np.where(ok, sc, 1.0), 1.0)
        sigma = bn.running_std * ratio
        mu = zb.mean(axis=0) - ratio * (zc.mean(axis=0) - bn.running_mean)
        theta[i].mu[:] = mu
        theta[i].sigma[:] = np.maximum(sigma, SIGMA_FLOOR)
    return theta


def transforms_to_dict(theta, layouts=None, tau=None):
    out = {"layers": {}}
    for i, ov in theta.items():
        entry = {"mu": ov.mu.tolist(), "sigma": ov.sigma.tolist()}
        entry["upsilon"] = None if ov.lower is None else ov.lower.tolist()
        entry["omega"] = None if ov.upper is None else ov.upper.tolist()
        if layouts is not None:
            entry["bins"] = layouts[i].to_dict()
        out["layers"][str(i)] = entry
    if tau is not None:
        out["tau"] = tau
    return out


def transforms_from_dict(d):
    theta = {}
    for i, e in d["layers"].items():
        lo = None if e.get("upsilon") is None else np.array(e["upsilon"])
        hi = None if e.get("omega") is None else np.array(e["omega"])
        theta[int(i)] = NormOverride(np.array(e["mu"]), np.array(e["sigma"]), lo, hi)
    return theta


def clean_clamp_ranges(model, x_ref):
    """Per-neuron [min, max] of normalised clean activations at each BN layer."""
    _, trace = forward(model, x_ref)
    ranges = {}
    for i in model.bn_indices:
        bn = model.layers[i]
        u = (trace.pre_bn[i] - bn.running_mean) / bn.running_std
        ranges[i] = (u.min(axis=0), u.max(axis=0))
    return ranges


def reference_layouts(model, defense_x, delta_b=0.1):
    """Bins from clean defense activations at every BN output of the untouched model."""
    _, trace = forward(model, defense_x)
    return {i: build_bins(trace.post_bn[i], delta_b) for i in model.bn_indices}


def layer_histograms(model, x, layouts, tau, theta=None):
    _, trace = forward(model, x, overrides=theta)
    return {i: soft_histogram(trace.post_bn[i], layouts[i], tau).probs for i in layouts}


def objective(model, theta, x_trig, layouts, targets, tau=150.0, kind=DivergenceKind.TV):
    """Sum over BN layers and neurons of D_k(target || transformed-triggered).

    Returns (loss, per-layer loss, grads) with grads[i] = dict(mu=, sigma=,
    lower=, upper=). Histograms at later layers see transforms at earlier ones.
    """
    kind = DivergenceKind(kind)
    scores, trace, cache = _forward(model, x_trig, overrides=theta)
    total, per_layer, injected = 0.0, {}, {}
    for i, layout in layouts.items():
        values = trace.post_bn[i]
        q = soft_histogram(values, layout, tau).probs
        rows = divergence_per_row(targets[i], q, kind, layout.valid)
        per_layer[i] = rows
        total += float(rows.sum())
        gq = divergence_grad_q(targets[i], q, kind, layout.valid)
        injected[i] = histogram_grad_values(values, layout, tau, gq)
    g = _backward(model, cache, np.zeros_like(scores), injected)
    grads = {
        i: {
            "mu": g.norm_mu[i],
            "sigma": g.norm_sigma[i],
            "lower": g.norm_lower.get(i),
            "upper": g.norm_upper.get(i),
        }
        for i in theta
    }
    return total, per_layer, grads


@dataclass
class MitigationConfig:
    kind: str = "tv"
    lr: float = 0.01
    epochs: int = 10
    batch_size: int | None = None  # None: one full-batch step per epoch
    delta_b: float = 0.1
    tau: float = 150.0
    momentum: float = 0.0
    adaptive: bool = False
    init: str = "moments"  # "moments" | "identity"
    seed: int = 0


@dataclass
class MitigationResult:
    theta: TransformParams
    layouts: dict
    targets: dict
    loss_history: list  # full-batch objective, index 0 = before optimisation
    checksum_before: str
    checksum_after: str
    aborted: bool = False

    @property
    def parameters_untouched(self):
        return self.checksum_before == self.checksum_after


def _pack(theta, scale):
    """Optimiser coordinates: mu = mu0 + s0*shift, sigma = s0*exp(logscale).

    Working in units of each neuron's stored std makes the learning rate
    independent of the raw activation scale.
    """
    params = {}
    for i, ov in theta.items():
        params[f"{i}.shift"] = (ov.mu - scale[i][0]) / scale[i][1]
        params[f"{i}.logscale"] = np.log(ov.sigma / scale[i][1])
        if ov.lower is not None:
            params[f"{i}.lower"] = ov.lower.copy()
            params[f"{i}.upper"] = ov.upper.copy()
    return params


def _unpack(params, scale, theta):
    for i, ov in theta.items():
        mu0, s0 = scale[i]
        ov.mu[:] = mu0 + s0 * params[f"{i}.shift"]
        ov.sigma[:] = np.maximum(s0 * np.exp(params[f"{i}.logscale"]), SIGMA_FLOOR)
        if ov.lower is not None:
            np.minimum(params[f"{i}.lower"], params[f"{i}.upper"], out=params[f"{i}.lower"])
            ov.lower[:] = params[f"{i}.lower"]
            ov.upper[:] = params[f"{i}.upper"]


def _copy_theta(theta):
    return {
        i: NormOverride(
            ov.mu.copy(), ov.sigma.copy(),
            None if ov.lower is None else ov.lower.copy(),
            None if ov.upper is None else ov.upper.copy(),
        )
        for i, ov in theta.items()
    }


def optimize_transforms(model, d_t, trigger, config=None, defense_x=None, theta0=None, layouts=None):
    """Fit per-neuron location/scale so triggered activations match clean ones.

    `d_t` holds clean instances from the detected source classes; targets are
    their histograms through the untouched model and are computed once.
    Bins come from `defense_x` (defaults to `d_t`). One epoch is one pass over
    `d_t` in shuffled mini-batches (full batch when batch_size is None).
    """
    cfg = config or MitigationConfig()
    kind = DivergenceKind(cfg.kind)
    d_t = np.asarray(d_t, dtype=float)
    before = trainable_checksum(model)
    if layouts is None:
        layouts = reference_layouts(model, d_t if defense_x is None else defense_x, cfg.delta_b)
    targets = layer_histograms(model, d_t, layouts, cfg.tau)
    x_trig = embed(trigger, d_t)
    if theta0 is not None:
        theta = _copy_theta(theta0)
    elif cfg.init == "moments":
        theta = moment_matched_transforms(model, d_t, x_trig)
    else:
        theta = initial_transforms(model)
    scale = {i: (model.layers[i].running_mean.copy(), model.layers[i].running_std.copy()) for i in theta}
    params = _pack(theta, scale)
    opt = Optimizer(cfg.lr, momentum=cfg.momentum, adaptive=cfg.adaptive)
    rng = np.random.default_rng(cfg.seed)

    def full_loss(th):
        return objective(model, th, x_trig, layouts, targets, cfg.tau, kind)[0]

    history = [full_loss(theta)]
    last_good = _copy_theta(theta)
    aborted = False
    n = len(d_t)
    bs = n if not cfg.batch_size else min(cfg.batch_size, n)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, bs):
            idx = order[start : start + bs]
            # batch targets are recomputed from the same clean rows
            tgt = targets if bs == n else layer_histograms(model, d_t[idx], layouts, cfg.tau)
            loss, _, grads = objective(model, theta, x_trig[idx], layouts, tgt, cfg.tau, kind)
            if not np.isfinite(loss):
                aborted = True
                break
            flat = {}
            for i, g in grads.items():
                flat[f"{i}.shift"] = g["mu"] * scale[i][1]
                flat[f"{i}.logscale"] = g["sigma"] * theta[i].sigma
                if g["lower"] is not None:
                    flat[f"{i}.lower"], flat[f"{i}.upper"] = g["lower"], g["upper"]
            opt.step(params, flat)
            _unpack(params, scale, theta)
        loss = full_loss(theta)
        if aborted or not np.isfinite(loss):
            aborted = True
            theta = last_good
            log.warning("non-finite mitigation loss at epoch %d; keeping last finite transforms", epoch)
            break
        last_good = _copy_theta(theta)
        history.append(loss)
    after = trainable_checksum(model)
    return MitigationResult(theta, layouts, targets, history, before, after, aborted)


# ---------------------------------------------------------------------------
# inference


@dataclass
class MitigatedClassifier:
    base: MlpModel
    outcome: object  # DetectionOutcome
    transforms: dict = field(default_factory=dict)  # target -> TransformParams

    @property
    def detected_targets(self):
        return [] if self.outcome is None or self.outcome.is_clean else self.outcome.targets_detected

    def infer(self, x):
        """Predicted classes and trigger flags for a batch."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        pred = predict(self.base, x)
        flags = np.zeros(len(x), dtype=bool)
        for t in self.detected_targets:
            idx = np.flatnonzero(pred == t)
            if len(idx) == 0 or t not in self.transforms:
                continue
            g = predict(self.base, x[idx], overrides=self.transforms[t])
            changed = g != t
            pred[idx[changed]] = g[changed]
            flags[idx[changed]] = True
        return pred, flags

    def predict(self, x):
        return self.infer(x)[0]

    def save(self, path, layouts=None, tau=None):
        payload = {"targets": {str(t): transforms_to_dict(th, layouts.get(t) if layouts else None, tau)
                               for t, th in self.transforms.items()}}
        Path(path).write_text(json.dumps(payload, indent=2))


def infer(mitigated: MitigatedClassifier, x):
    return mitigated.infer(x)


def mitigate(model, outcome, defense_set, config=None):
    """Optimise one transform set per detected target. Needs a non-clean outcome."""
    if outcome is None or outcome.is_clean:
        raise ValueError("mitigation requires a detection outcome with at least one detected pair")
    x, y = defense_set
    cfg = config or MitigationConfig()
    results = {}
    for t in outcome.targets_detected:
        d_t = x[np.isin(y, outcome.sources_for[t])]
        results[t] = optimize_transforms(model, d_t, outcome.re_estimated_trigger[t], cfg, defense_x=x)
    wrapper = MitigatedClassifier(model, outcome, {t: r.theta for t, r in results.items()})
    return wrapper, results


def activation_divergences(model, x_clean, x_trig, layouts, tau=150.0, kind="tv", theta=None):
    """Per-layer per-neuron D_k between clean (untouched model) and triggered activations."""
    p = layer_histograms(model, x_clean, layouts, tau)
    q = layer_histograms(model, x_trig, layouts, tau, theta)
    return {i: divergence_per_row(p[i], q[i], kind, layouts[i].valid) for i in layouts}


def write_divergence_csv(path, rows):
    """rows: iterable of dicts with layer, neuron, kind, before, after."""
    rows = list(rows)
    with Path(path).open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["layer", "neuron", "kind", "before", "after"])
        w.writeheader()
        w.writerows(rows)
