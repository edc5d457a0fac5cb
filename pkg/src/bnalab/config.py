"""Experiment configuration: a flat key/value schema with a JSON twin.

Text form, one entry per line::

    # comment
    seed = 0
    hidden = 32,32
    divergence = tv
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, fields
from pathlib import Path


@dataclass
class ExperimentConfig:
    seed: int = 0
    # data
    class_count: int = 4
    d: int = 20
    train_per_class: int = 1000
    test_per_class: int = 1000
    defense_fraction: float = 0.1
    geometry: str = "smooth"
    radius: float = 0.5
    frequencies: int = 8
    spread: float = 0.03
    correlation: float = 0.9
    # attack
    trigger: str = "additive"  # additive (chessboard) | patch
    perturbation_size: float = 0.01  # chessboard amplitude, or patch coordinate count
    poison_mode: str = "a2o"
    target: int = 2
    poison_count: int = 100  # per source class
    # training
    hidden: tuple = (32,)
    train_lr: float = 0.01
    train_epochs: int = 30
    train_batch: int = 64
    # detection
    threshold: float = 7.0
    re_variant: str = "additive"
    re_steps: int = 500
    re_step_size: float = 0.05
    # mitigation
    divergence: str = "tv"
    delta_b: float = 0.1
    tau: float = 150.0
    lr: float = 0.01
    epochs: int = 10
    init: str = "moments"
    # evaluation
    strip_blend_count: int = 32
    strip_fpr_budget: float = 0.15
    output_dir: str = "runs"

    def __post_init__(self):
        if isinstance(self.hidden, (int, str)):
            self.hidden = _parse_hidden(self.hidden)
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.poison_mode not in ("a2o", "a2a"):
            raise ValueError(f"poison_mode must be a2o or a2a, got {self.poison_mode!r}")
        if self.trigger not in ("additive", "patch"):
            raise ValueError(f"trigger must be additive or patch, got {self.trigger!r}")
        if self.divergence not in ("tv", "js", "kl"):
            raise ValueError(f"divergence must be tv, js or kl, got {self.divergence!r}")
        if self.delta_b <= 0 or self.tau <= 0:
            raise ValueError("delta_b and tau must be positive")

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_text(self):
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name} = {','.join(map(str, v)) if f.name == 'hidden' else v}")
        return "\n".join(lines) + "\n"

    def hash(self):
        """Short digest of every setting except where outputs go."""
        d = self.to_dict()
        d.pop("output_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:12]

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    @classmethod
    def from_dict(cls, d):
        known = {f.name: f for f in fields(cls)}
        unknown = set(d) - set(known)
        if unknown:
            raise KeyError(f"unknown config keys: {sorted(unknown)}")
        return cls(**{k: coerce(known[k], v) for k, v in d.items()})

    @classmethod
    def from_text(cls, text):
        return cls.from_dict(parse_flat(text))

    @classmethod
    def load(cls, path):
        path = Path(path)
        text = path.read_text()
        if path.suffix == ".json":
            return cls.from_dict(json.loads(text))
        return cls.from_text(text)


def _parse_hidden(v):
    if isinstance(v, int):
        return (v,)
    return tuple(int(s) for s in str(v).replace(" ", "").split(",") if s)


def parse_flat(text):
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {n}: expected key = value, got {raw!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k] = v
    return out


def coerce(f, value):
    """Convert a text or JSON value to the type of dataclass field `f`."""
    if f.name == "hidden":
        return _parse_hidden(value) if not isinstance(value, (list, tuple)) else tuple(value)
    kind = type(f.default) if f.default is not dataclasses.MISSING else str
    if kind is bool:
        return value if isinstance(value, bool) else str(value).lower() in ("1", "true", "yes")
    if kind is int:
        return int(value)
    if kind is float:
        return float(value)
    return str(value)


CONFIG_FIELDS = [f.name for f in fields(ExperimentConfig)]


def default_field(name):
    return next(f for f in fields(ExperimentConfig) if f.name == name)


__all__ = ["ExperimentConfig", "parse_flat", "coerce", "CONFIG_FIELDS", "default_field"]
