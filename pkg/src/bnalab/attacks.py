"""Synthetic blob data, trigger embedding and training-set poisoning."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SPLITS = ("train", "defense", "test")


@dataclass
class SyntheticDataset:
    x: np.ndarray  # (n, d) in [0, 1]
    y: np.ndarray  # (n,)
    split: np.ndarray  # (n,) of "train" | "defense" | "test"
    class_count: int

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        self.y = np.asarray(self.y, dtype=int)
        self.split = np.asarray(self.split, dtype=object)

    @property
    def d(self):
        return self.x.shape[1]

    def rows(self, split):
        return np.flatnonzero(self.split == split)

    def part(self, split):
        idx = self.rows(split)
        return self.x[idx], self.y[idx]

    def copy(self):
        return SyntheticDataset(self.x.copy(), self.y.copy(), self.split.copy(), self.class_count)


@dataclass
class BlobConfig:
    class_count: int = 4
    d: int = 20
    train_per_class: int = 1000
    test_per_class: int = 1000
    defense_fraction: float = 0.1
    spread: float = 0.03  # per-feature std of each blob
    correlation: float = 0.0  # AR(1) coefficient between neighbouring features
    geometry: str = "orthogonal"  # "orthogonal" | "smooth" | "uniform"
    radius: float = 0.5  # orthogonal/smooth: distance of each center from 0.5
    frequencies: int = 8  # smooth: number of low-frequency cosines spanning the centers
    center_low: float = 0.25  # uniform: center coordinate range
    center_high: float = 0.75


def cosine_basis(d, k):
    """First k orthonormal DCT-II vectors of length d as columns."""
    n = np.arange(d)
    b = np.cos(np.pi * (n[:, None] + 0.5) * np.arange(k)[None, :] / d)
    return b / np.linalg.norm(b, axis=0)


def _ar1_noise(rng, n, d, rho):
    """Unit-variance noise correlated along the feature index, like neighbouring pixels."""
    e = rng.standard_normal((n, d))
    if rho == 0.0:
        return e
    if not -1.0 < rho < 1.0:
        raise ValueError("correlation must lie in (-1, 1)")
    out = np.empty_like(e)
    out[:, 0] = e[:, 0]
    k = np.sqrt(1.0 - rho * rho)
    for i in range(1, d):
        out[:, i] = rho * out[:, i - 1] + k * e[:, i]
    return out


def make_blobs(config: BlobConfig, seed: int) -> SyntheticDataset:
    """Per-class Gaussian blobs clipped to [0, 1]^d.

    "orthogonal" centers sit at 0.5 + radius * (random orthonormal columns), so
    all class pairs are equidistant; "smooth" draws those columns from the span
    of the first few cosines; "uniform" draws centers from a box. Feature noise
    is AR(1) along the coordinate axis with coefficient `correlation`.
    A random `defense_fraction` of the test instances becomes the defender's
    clean set; the rest stays as the test split.
    """
    rng = np.random.default_rng(seed)
    C, d = config.class_count, config.d
    if config.geometry in ("orthogonal", "smooth"):
        basis = np.eye(d) if config.geometry == "orthogonal" else cosine_basis(d, config.frequencies)
        if C > basis.shape[1]:
            raise ValueError(f"{config.geometry} geometry needs class_count <= {basis.shape[1]}")
        q, _ = np.linalg.qr(basis @ rng.standard_normal((basis.shape[1], C)))
        centers = 0.5 + config.radius * q.T
    elif config.geometry == "uniform":
        centers = rng.uniform(config.center_low, config.center_high, size=(C, d))
    else:
        raise ValueError(f"unknown blob geometry {config.geometry!r}")
    xs, ys, tags = [], [], []
    for split, per in (("train", config.train_per_class), ("test", config.test_per_class)):
        for c in range(C):
            x = centers[c] + config.spread * _ar1_noise(rng, per, d, config.correlation)
            xs.append(np.clip(x, 0.0, 1.0))
            ys.append(np.full(per, c))
            tags.append(np.full(per, split, dtype=object))
    x, y, split = np.concatenate(xs), np.concatenate(ys), np.concatenate(tags)
    test_rows = np.flatnonzero(split == "test")
    n_def = int(round(config.defense_fraction * len(test_rows)))
    split[rng.choice(test_rows, size=n_def, replace=False)] = "defense"
    return SyntheticDataset(x, y, split, C)


# ---------------------------------------------------------------------------
# triggers


@dataclass
class PatchTrigger:
    mask: np.ndarray  # binary (d,)
    pattern: np.ndarray  # (d,) in [0, 1]
    kind: str = field(default="patch", init=False)

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=float)
        self.pattern = np.asarray(self.pattern, dtype=float)
        if not np.all((self.mask == 0) | (self.mask == 1)):
            raise ValueError("patch mask entries must be 0 or 1")
        if self.mask.shape != self.pattern.shape:
            raise ValueError("mask and pattern shapes differ")

    @property
    def d(self):
        return self.mask.shape[0]

    @property
    def size(self):
        return float(self.mask.sum())

    def embed(self, x):
        return embed(self, x)

    def to_dict(self):
        return {"kind": "patch", "mask": self.mask.tolist(), "pattern": self.pattern.tolist()}


@dataclass
class AdditiveTrigger:
    delta: np.ndarray
    kind: str = field(default="additive", init=False)

    def __post_init__(self):
        self.delta = np.asarray(self.delta, dtype=float)

    @property
    def d(self):
        return self.delta.shape[0]

    @property
    def norm(self):
        return float(np.linalg.norm(self.delta))

    size = norm

    def embed(self, x):
        return embed(self, x)

    def to_dict(self):
        return {"kind": "additive", "delta": self.delta.tolist(), "norm": self.norm}


def trigger_from_dict(d):
    if d["kind"] == "patch":
        return PatchTrigger(np.array(d["mask"]), np.array(d["pattern"]))
    if d["kind"] == "additive":
        return AdditiveTrigger(np.array(d["delta"]))
    raise ValueError(f"unknown trigger kind {d['kind']!r}")


def embed(trigger, x):
    """Apply a trigger to one instance or a batch; output stays in [0, 1]."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != trigger.d:
        raise ValueError(f"instance width {x.shape[-1]} != trigger width {trigger.d}")
    if isinstance(trigger, PatchTrigger):
        return (1.0 - trigger.mask) * x + trigger.mask * trigger.pattern
    return np.clip(x + trigger.delta, 0.0, 1.0)


def random_patch(d, rng, size=3):
    """Overwrite `size` random coordinates with random extreme values."""
    mask = np.zeros(d)
    mask[rng.choice(d, size=size, replace=False)] = 1.0
    pattern = mask * rng.integers(0, 2, size=d)
    return PatchTrigger(mask, pattern.astype(float))


def chessboard(d, amplitude=2.0 / 255.0):
    """Alternating +/- amplitude perturbation."""
    return AdditiveTrigger(amplitude * np.where(np.arange(d) % 2 == 0, 1.0, -1.0))


# ---------------------------------------------------------------------------
# poisoning


@dataclass
class PoisonPlan:
    mode: str = "a2o"  # "a2o" | "a2a"
    target: int | None = 0
    poison_count_per_class: int = 50

    def __post_init__(self):
        if self.mode not in ("a2o", "a2a"):
            raise ValueError(f"unknown poison mode {self.mode!r}")
        if self.mode == "a2o" and self.target is None:
            raise ValueError("all-to-one plan needs a target class")
        if self.poison_count_per_class < 0:
            raise ValueError("poison count must be nonnegative")

    def target_of(self, source, class_count):
        """Attack target for an instance of class `source`."""
        if self.mode == "a2o":
            return self.target
        return a2a_target(source, class_count)

    def sources(self, class_count):
        if self.mode == "a2o":
            return [c for c in range(class_count) if c != self.target]
        return list(range(class_count))

    def to_dict(self):
        return {"mode": self.mode, "target": self.target, "poison_count_per_class": self.poison_count_per_class}


def a2a_target(c, class_count):
    return (c + 1) % class_count


def poison(dataset: SyntheticDataset, trigger, plan: PoisonPlan, seed: int):
    """Embed the trigger into chosen train rows and relabel them.

    Returns (poisoned copy, sorted row indices that were poisoned).
    """
    C = dataset.class_count
    if plan.mode == "a2o" and not 0 <= plan.target < C:
        raise ValueError(f"target {plan.target} is not a valid class")
    out = dataset.copy()
    if plan.poison_count_per_class == 0:
        return out, np.array([], dtype=int)
    rng = np.random.default_rng(seed)
    train = dataset.rows("train")
    chosen = []
    for c in plan.sources(C):
        rows = train[dataset.y[train] == c]
        if plan.poison_count_per_class > len(rows):
            raise ValueError(f"class {c} has {len(rows)} train rows, cannot poison {plan.poison_count_per_class}")
        pick = rng.choice(rows, size=plan.poison_count_per_class, replace=False)
        out.x[pick] = embed(trigger, out.x[pick])
        out.y[pick] = plan.target_of(c, C)
        chosen.append(pick)
    return out, np.sort(np.concatenate(chosen))


# ---------------------------------------------------------------------------
# files


def save_dataset_csv(dataset: SyntheticDataset, path, provenance=None, comment=None):
    """CSV with header f0..f{d-1},label,split plus an optional JSON sidecar.

    `comment` becomes a leading '# ...' line.
    """
    path = Path(path)
    with path.open("w", newline="") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        w = csv.writer(fh)
        w.writerow([f"f{i}" for i in range(dataset.d)] + ["label", "split"])
        for row, label, tag in zip(dataset.x, dataset.y, dataset.split):
            w.writerow([repr(float(v)) for v in row] + [int(label), tag])
    if provenance is not None:
        path.with_suffix(".json").write_text(json.dumps({"class_count": dataset.class_count, **provenance}, indent=2))


def load_dataset_csv(path, class_count=None):
    path = Path(path)
    with path.open(newline="") as fh:
        r = csv.reader(line for line in fh if not line.startswith("#"))
        header = next(r)
        d = len(header) - 2
        rows = list(r)
    x = np.array([[float(v) for v in row[:d]] for row in rows]).reshape(len(rows), d)
    y = np.array([int(row[d]) for row in rows], dtype=int)
    split = np.array([row[d + 1] for row in rows], dtype=object)
    if class_count is None:
        side = path.with_suffix(".json")
        class_count = json.loads(side.read_text())["class_count"] if side.exists() else int(y.max()) + 1
    return SyntheticDataset(x, y, split, class_count)
