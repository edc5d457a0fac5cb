"""Small feed-forward network: dense + batch-norm + activation layers.

Gradients are reverse-accumulated over the fixed layer list; there is no
general autodiff graph. Inference always uses the stored running statistics.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
BN_EPS = 1e-5


@dataclass
class Dense:
    weights: np.ndarray  # (in, out)
    bias: np.ndarray  # (out,)

    @property
    def width(self):
        return self.weights.shape[1]


@dataclass
class BatchNorm:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    epsilon_stab: float = BN_EPS
    momentum: float = 0.1

    @property
    def width(self):
        return self.gamma.shape[0]

    @property
    def running_std(self):
        return np.sqrt(self.running_var + self.epsilon_stab)


@dataclass
class Activation:
    kind: str = "relu"

    def __post_init__(self):
        if self.kind not in ("relu", "linear"):
            raise ValueError(f"unknown activation {self.kind!r}")


@dataclass
class NormOverride:
    """Replacement location/scale (and optional clamps) for one BN layer."""

    mu: np.ndarray
    sigma: np.ndarray
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None


@dataclass
class MlpModel:
    layers: list
    class_count: int

    def __post_init__(self):
        self.check()

    def check(self):
        width = None
        for layer in self.layers:
            if isinstance(layer, Dense):
                if width is not None and layer.weights.shape[0] != width:
                    raise ValueError("dense input width does not chain")
                width = layer.width
            elif isinstance(layer, BatchNorm):
                if width is not None and layer.width != width:
                    raise ValueError("batch-norm width does not chain")
                if np.any(layer.running_var <= 0):
                    raise ValueError("batch-norm running variance must be positive")
                if layer.epsilon_stab <= 0:
                    raise ValueError("epsilon_stab must be positive")
        if width != self.class_count:
            raise ValueError(f"last layer outputs {width} scores, expected {self.class_count}")

    @property
    def input_width(self):
        for layer in self.layers:
            if isinstance(layer, Dense):
                return layer.weights.shape[0]
        raise ValueError("model has no dense layer")

    @property
    def bn_indices(self):
        return [i for i, layer in enumerate(self.layers) if isinstance(layer, BatchNorm)]

    def copy(self):
        layers = []
        for layer in self.layers:
            if isinstance(layer, Dense):
                layers.append(Dense(layer.weights.copy(), layer.bias.copy()))
            elif isinstance(layer, BatchNorm):
                layers.append(
                    BatchNorm(
                        layer.gamma.copy(),
                        layer.beta.copy(),
                        layer.running_mean.copy(),
                        layer.running_var.copy(),
                        layer.epsilon_stab,
                        layer.momentum,
                    )
                )
            else:
                layers.append(Activation(layer.kind))
        return MlpModel(layers, self.class_count)

    def trainable_arrays(self):
        """(name, array) pairs for every trainable parameter, in layer order."""
        out = []
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Dense):
                out += [(f"{i}.weights", layer.weights), (f"{i}.bias", layer.bias)]
            elif isinstance(layer, BatchNorm):
                out += [(f"{i}.gamma", layer.gamma), (f"{i}.beta", layer.beta)]
        return out

    def parameter_count(self):
        return sum(a.size for _, a in self.trainable_arrays())


@dataclass
class ActivationTrace:
    """Post-BN activations per BN layer index; rows are instances."""

    post_bn: dict = field(default_factory=dict)
    pre_bn: dict = field(default_factory=dict)

    def __getitem__(self, layer_index):
        return self.post_bn[layer_index]


def build_mlp(input_width, hidden, class_count, rng, batch_norm=True, activation="relu"):
    """He-initialised MLP: [Dense -> (BN) -> act] * len(hidden) -> Dense."""
    layers = []
    width = input_width
    for h in hidden:
        w = rng.normal(0.0, np.sqrt(2.0 / width), size=(width, h))
        layers.append(Dense(w, np.zeros(h)))
        if batch_norm:
            layers.append(BatchNorm(np.ones(h), np.zeros(h), np.zeros(h), np.ones(h)))
        layers.append(Activation(activation))
        width = h
    w = rng.normal(0.0, np.sqrt(1.0 / width), size=(width, class_count))
    layers.append(Dense(w, np.zeros(class_count)))
    return MlpModel(layers, class_count)


# ---------------------------------------------------------------------------
# forward / backward


def _forward(model, x, training=False, overrides=None):
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[1] != model.input_width:
        raise ValueError(f"batch width {x.shape[1]} != model input width {model.input_width}")
    overrides = overrides or {}
    cache = []
    trace = ActivationTrace()
    h = x
    for i, layer in enumerate(model.layers):
        if isinstance(layer, Dense):
            cache.append(h)
            h = h @ layer.weights + layer.bias
        elif isinstance(layer, BatchNorm):
            trace.pre_bn[i] = h
            if training:
                mean = h.mean(axis=0)
                var = h.var(axis=0)
                std = np.sqrt(var + layer.epsilon_stab)
                u = (h - mean) / std
                cache.append(("batch", h, u, std))
                n = h.shape[0]
                unbiased = var * n / max(n - 1, 1)
                layer.running_mean += layer.momentum * (mean - layer.running_mean)
                layer.running_var += layer.momentum * (unbiased - layer.running_var)
                h = layer.gamma * u + layer.beta
            else:
                ov = overrides.get(i)
                if ov is None:
                    mu, sigma, lo, hi = layer.running_mean, layer.running_std, None, None
                else:
                    mu, sigma, lo, hi = ov.mu, ov.sigma, ov.lower, ov.upper
                u = (h - mu) / sigma
                active = None
                if lo is not None or hi is not None:
                    lo = -np.inf if lo is None else lo
                    hi = np.inf if hi is None else hi
                    below, above = u < lo, u > hi
                    active = (below, above)
                    u = np.clip(u, lo, hi)
                cache.append(("frozen", h, u, mu, sigma, active))
                h = layer.gamma * u + layer.beta
            trace.post_bn[i] = h
        else:
            cache.append(h)
            if layer.kind == "relu":
                h = np.maximum(h, 0.0)
    return h, trace, cache


def forward(model, batch, overrides=None):
    """Inference pass. Returns (scores, ActivationTrace)."""
    scores, trace, _ = _forward(model, batch, training=False, overrides=overrides)
    return scores, trace


def predict(model, batch, overrides=None):
    scores, _ = forward(model, batch, overrides)
    # argmax breaks ties toward the lowest class index
    return np.argmax(scores, axis=1)


@dataclass
class Gradients:
    params: dict  # name -> array, names as in MlpModel.trainable_arrays
    inputs: np.ndarray
    norm_mu: dict = field(default_factory=dict)  # bn index -> d/d(mu)
    norm_sigma: dict = field(default_factory=dict)  # bn index -> d/d(sigma)
    norm_lower: dict = field(default_factory=dict)
    norm_upper: dict = field(default_factory=dict)


def _backward(model, cache, grad_out, injected=None):
    injected = injected or {}
    g = grad_out
    grads = Gradients(params={}, inputs=None)
    for i in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[i]
        c = cache[i]
        if isinstance(layer, Dense):
            grads.params[f"{i}.weights"] = c.T @ g
            grads.params[f"{i}.bias"] = g.sum(axis=0)
            g = g @ layer.weights.T
        elif isinstance(layer, BatchNorm):
            if i in injected:
                g = g + injected[i]
            if c[0] == "batch":
                _, h, u, std = c
                grads.params[f"{i}.gamma"] = (g * u).sum(axis=0)
                grads.params[f"{i}.beta"] = g.sum(axis=0)
                gu = g * layer.gamma
                g = (gu - gu.mean(axis=0) - u * (gu * u).mean(axis=0)) / std
            else:
                _, h, u, mu, sigma, active = c
                grads.params[f"{i}.gamma"] = (g * u).sum(axis=0)
                grads.params[f"{i}.beta"] = g.sum(axis=0)
                gu = g * layer.gamma
                if active is not None:
                    below, above = active
                    grads.norm_lower[i] = (gu * below).sum(axis=0)
                    grads.norm_upper[i] = (gu * above).sum(axis=0)
                    gu = np.where(below | above, 0.0, gu)
                grads.norm_mu[i] = -(gu / sigma).sum(axis=0)
                grads.norm_sigma[i] = -(gu * (h - mu) / sigma**2).sum(axis=0)
                g = gu / sigma
        else:
            if layer.kind == "relu":
                # subgradient at 0 is 0
                g = g * (c > 0)
    grads.inputs = g
    return grads


def softmax(scores):
    z = scores - scores.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(scores, labels):
    """Mean cross-entropy and its gradient w.r.t. scores."""
    labels = np.asarray(labels)
    n = scores.shape[0]
    z = scores - scores.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -logp[np.arange(n), labels].mean()
    g = np.exp(logp)
    g[np.arange(n), labels] -= 1.0
    return loss, g / n


def squared_error(scores, targets):
    targets = np.asarray(targets, dtype=float).reshape(scores.shape)
    r = scores - targets
    return float((r**2).sum() / scores.shape[0]), 2.0 * r / scores.shape[0]


def constant_loss(scores, _targets=None):
    return 1.0, np.zeros_like(scores)


LOSSES = {"cross_entropy": cross_entropy, "squared": squared_error, "constant": constant_loss}


def gradients(model, batch, targets, loss="cross_entropy", overrides=None, training=False):
    """Loss value and reverse-mode gradients for parameters and inputs."""
    loss_fn = LOSSES[loss] if isinstance(loss, str) else loss
    if training:
        saved = [(l.running_mean.copy(), l.running_var.copy()) for l in _bn_layers(model)]
    scores, _, cache = _forward(model, batch, training=training, overrides=overrides)
    if training:
        for layer, (m, v) in zip(_bn_layers(model), saved):
            layer.running_mean[:], layer.running_var[:] = m, v
    value, g = loss_fn(scores, targets)
    return value, _backward(model, cache, g)


def backward_injected(model, batch, injected, overrides=None):
    """Backpropagate gradients injected at BN outputs (no loss at the scores)."""
    scores, trace, cache = _forward(model, batch, overrides=overrides)
    return _backward(model, cache, np.zeros_like(scores), injected)


def _bn_layers(model):
    return [l for l in model.layers if isinstance(l, BatchNorm)]


# ---------------------------------------------------------------------------
# optimisation


@dataclass
class OptimizerConfig:
    lr: float = 0.01
    epochs: int = 30
    batch_size: int = 64
    momentum: float = 0.9
    adaptive: bool = True  # Adam-style per-parameter scaling
    beta2: float = 0.999
    weight_decay: float = 0.0
    holdout_fraction: float = 0.1
    recalibrate_bn: bool = True  # recompute running stats from the fit rows at the end
    seed: int = 0


class Optimizer:
    """Gradient descent with optional momentum and optional adaptive scaling."""

    def __init__(self, lr, momentum=0.9, adaptive=True, beta2=0.999, eps=1e-8):
        self.lr, self.momentum, self.adaptive = lr, momentum, adaptive
        self.beta2, self.eps = beta2, eps
        self.m, self.v, self.t = {}, {}, 0

    def step(self, params, grads):
        """Update `params` (name -> array) in place from `grads`."""
        self.t += 1
        for name, p in params.items():
            g = grads[name]
            if self.adaptive:
                m = self.m.get(name, np.zeros_like(p))
                v = self.v.get(name, np.zeros_like(p))
                m = self.momentum * m + (1 - self.momentum) * g
                v = self.beta2 * v + (1 - self.beta2) * g * g
                self.m[name], self.v[name] = m, v
                mhat = m / (1 - self.momentum**self.t) if self.momentum > 0 else m
                vhat = v / (1 - self.beta2**self.t)
                p -= self.lr * mhat / (np.sqrt(vhat) + self.eps)
            elif self.momentum > 0:
                m = self.momentum * self.m.get(name, np.zeros_like(p)) + g
                self.m[name] = m
                p -= self.lr * m
            else:
                p -= self.lr * g


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainedModel:
    model: MlpModel
    history: list  # held-out cross-entropy per epoch, index 0 = before training
    config: OptimizerConfig


def train(model, x, y, config=None):
    """Mini-batch training with cross-entropy. Mutates and returns the model.

    BN running statistics are updated with momentum during training only.
    """
    config = config or OptimizerConfig()
    x = np.asarray(x, dtype=float)
    y = np.asarray(y)
    if len(x) == 0:
        raise ValueError("empty training set")
    if y.min() < 0 or y.max() >= model.class_count:
        raise ValueError("labels out of range")
    rng = np.random.default_rng(config.seed)
    order = rng.permutation(len(x))
    n_hold = int(round(config.holdout_fraction * len(x))) if config.epochs > 0 else 0
    hold, fit = order[:n_hold], order[n_hold:]
    if len(fit) == 0:
        fit, hold = order, order[:0]

    def holdout_loss():
        if len(hold) == 0:
            return float("nan")
        scores, _ = forward(model, x[hold])
        return float(cross_entropy(scores, y[hold])[0])

    history = [holdout_loss()]
    opt = Optimizer(config.lr, config.momentum, config.adaptive, config.beta2)
    params = dict(model.trainable_arrays())
    for epoch in range(config.epochs):
        perm = rng.permutation(fit)
        for start in range(0, len(perm), config.batch_size):
            idx = perm[start : start + config.batch_size]
            if len(idx) < 2:
                continue
            scores, _, cache = _forward(model, x[idx], training=True)
            value, g = cross_entropy(scores, y[idx])
            if not np.isfinite(value):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch offset {start}")
            grads = _backward(model, cache, g).params
            if config.weight_decay:
                for name in grads:
                    if name.endswith("weights"):
                        grads[name] = grads[name] + config.weight_decay * params[name]
            opt.step(params, grads)
        if config.recalibrate_bn and epoch == config.epochs - 1:
            recalibrate_bn(model, x[fit])
        history.append(holdout_loss())
        log.debug("epoch %d held-out loss %.4f", epoch, history[-1])
    return TrainedModel(model, history, config)


def recalibrate_bn(model, x):
    """Set every BN layer's running mean/variance to exact statistics over x.

    Layers are processed in order so each sees inputs normalised with the
    already recalibrated statistics of earlier layers.
    """
    for i in model.bn_indices:
        _, trace = forward(model, x)
        z = trace.pre_bn[i]
        bn = model.layers[i]
        bn.running_mean = z.mean(axis=0)
        bn.running_var = z.var(axis=0, ddof=1) if len(z) > 1 else np.zeros_like(bn.running_var)
    return model


# ---------------------------------------------------------------------------
# serialisation


def _layer_to_dict(layer):
    if isinstance(layer, Dense):
        return {"type": "dense", "weights": layer.weights.tolist(), "bias": layer.bias.tolist()}
    if isinstance(layer, BatchNorm):
        return {
            "type": "batchnorm",
            "gamma": layer.gamma.tolist(),
            "beta": layer.beta.tolist(),
            "running_mean": layer.running_mean.tolist(),
            "running_var": layer.running_var.tolist(),
            "epsilon_stab": layer.epsilon_stab,
            "momentum": layer.momentum,
        }
    return {"type": "activation", "kind": layer.kind}


def _layer_from_dict(d):
    kind = d["type"]
    if kind == "dense":
        return Dense(np.array(d["weights"], dtype=float), np.array(d["bias"], dtype=float))
    if kind == "batchnorm":
        return BatchNorm(
            *(np.array(d[k], dtype=float) for k in ("gamma", "beta", "running_mean", "running_var")),
            epsilon_stab=d["epsilon_stab"],
            momentum=d.get("momentum", 0.1),
        )
    if kind == "activation":
        return Activation(d["kind"])
    raise ValueError(f"unknown layer type {kind!r}")


def model_to_dict(model):
    return {
        "format": "bnalab-mlp",
        "version": FORMAT_VERSION,
        "class_count": model.class_count,
        "layers": [_layer_to_dict(l) for l in model.layers],
    }


def model_from_dict(d):
    if d.get("version") != FORMAT_VERSION:
        raise ValueError(f"unsupported model format version {d.get('version')}")
    return MlpModel([_layer_from_dict(l) for l in d["layers"]], d["class_count"])


def save_model(model, path, extra=None):
    payload = model_to_dict(model)
    if extra:
        payload.update(extra)
    # json writes floats with repr(), which round-trips bit-exactly
    Path(path).write_text(json.dumps(payload))


def load_model(path):
    return model_from_dict(json.loads(Path(path).read_text()))
