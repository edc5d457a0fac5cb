"""Reverse-engineering backdoor detector with MAD outlier scoring.

For every ordered class pair (s, t) a minimal trigger sending clean class-s
instances to t is estimated; the detection statistic is the reciprocal of its
size. Pairs whose statistic is an upper MAD outlier are flagged.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .attacks import AdditiveTrigger, PatchTrigger, trigger_from_dict
from .nnet import Optimizer, gradients, predict

log = logging.getLogger(__name__)

MIN_SIZE = 1e-8


@dataclass
class REConfig:
    steps: int = 500
    step_size: float = 0.05
    success_rate: float = 0.9
    shrink: float = 0.05  # additive: fractional norm shrink after a success
    init_cost: float = 1e-3  # patch: initial weight of the mask L1 term
    cost_period: int = 10
    patch_lr: float = 0.1


@dataclass
class REResult:
    trigger: object
    size: float
    success: float
    low_confidence: bool
    steps: int

    @property
    def statistic(self):
        return 1.0 / max(self.size, MIN_SIZE)


def _target_rate(model, x, target):
    return float(np.mean(predict(model, x) == target))


def _reverse_additive(model, x, target, cfg):
    delta = np.zeros(x.shape[1])
    labels = np.full(len(x), target)
    best, best_norm, best_rate = None, np.inf, 0.0
    last_rate = 0.0
    for step in range(cfg.steps):
        xp = np.clip(x + delta, 0.0, 1.0)
        rate = _target_rate(model, xp, target)
        last_rate = rate
        if rate >= cfg.success_rate:
            norm = float(np.linalg.norm(delta))
            if norm < best_norm:
                best, best_norm, best_rate = delta.copy(), norm, rate
            if norm <= MIN_SIZE:
                break
            delta *= 1.0 - cfg.shrink
            continue
        _, g = gradients(model, xp, labels)
        inside = (x + delta > 0.0) & (x + delta < 1.0)
        gd = (g.inputs * inside).sum(axis=0)
        gn = np.linalg.norm(gd)
        if gn == 0:
            break
        delta -= cfg.step_size * gd / gn
    if best is None:
        best, best_norm, best_rate = delta, float(np.linalg.norm(delta)), last_rate
        return REResult(AdditiveTrigger(best), best_norm, best_rate, True, cfg.steps)
    return REResult(AdditiveTrigger(best), best_norm, best_rate, False, step + 1)


def _squash(a):
    return (np.tanh(a) + 1.0) / 2.0


def _reverse_patch(model, x, target, cfg):
    d = x.shape[1]
    params = {"mask": np.full(d, -2.0), "pattern": np.zeros(d)}
    opt = Optimizer(cfg.patch_lr, momentum=0.9, adaptive=True)
    cost = cfg.init_cost
    labels = np.full(len(x), target)
    best, best_size, best_rate = None, np.inf, 0.0
    hits = 0
    step = 0
    for step in range(cfg.steps):
        m, p = _squash(params["mask"]), _squash(params["pattern"])
        xp = (1.0 - m) * x + m * p
        rate = _target_rate(model, xp, target)
        size = float(m.sum())
        if rate >= cfg.success_rate:
            hits += 1
            if size < best_size:
                best, best_size, best_rate = (m.copy(), p.copy()), size, rate
        _, g = gradients(model, xp, labels)
        gx = g.inputs  # (n, d)
        g_m = (gx * (p - x)).sum(axis=0) + cost
        g_p = (gx * m).sum(axis=0)
        grads = {
            "mask": g_m * (1.0 - np.tanh(params["mask"]) ** 2) / 2.0,
            "pattern": g_p * (1.0 - np.tanh(params["pattern"]) ** 2) / 2.0,
        }
        opt.step(params, grads)
        if (step + 1) % cfg.cost_period == 0:
            cost = cost * 2.0 if hits == cfg.cost_period else cost / 2.0
            hits = 0
    low = best is None
    if low:
        best = (_squash(params["mask"]), _squash(params["pattern"]))
        best_size, best_rate = float(best[0].sum()), rate
    m, p = best
    binary = (m > 0.5).astype(float)
    return REResult(PatchTrigger(binary, np.where(binary > 0, p, 0.0)), best_size, best_rate, low, step + 1)


def reverse_engineer_pair(model, clean_source_instances, target, variant="additive", config=None):
    """Estimate a small trigger sending the given instances to `target`."""
    x = np.atleast_2d(np.asarray(clean_source_instances, dtype=float))
    if len(x) == 0:
        raise ValueError("need at least one source instance")
    cfg = config or REConfig()
    if variant == "additive":
        return _reverse_additive(model, x, target, cfg)
    if variant == "patch":
        return _reverse_patch(model, x, target, cfg)
    raise ValueError(f"unknown reverse-engineering variant {variant!r}")


def mad_scores(statistics):
    """|stat - median| / MAD, falling back to the mean absolute deviation."""
    s = np.asarray(statistics, dtype=float)
    if s.size < 3:
        raise ValueError("MAD scoring needs at least 3 statistics")
    dev = np.abs(s - np.median(s))
    # spreads at rounding level count as zero, otherwise scores explode to ~1e18
    noise = 64 * np.finfo(float).eps * np.abs(s).max()
    scale = np.median(dev)
    if scale <= noise:
        scale = dev.mean()
    if scale <= noise:
        return np.zeros_like(s)
    return dev / scale


@dataclass
class PairStatistic:
    source: int
    target: int
    trigger: object
    statistic: float
    size: float
    success: float
    low_confidence: bool
    anomaly_score: float = 0.0

    def to_dict(self):
        return {
            "source": self.source,
            "target": self.target,
            "statistic": self.statistic,
            "size": self.size,
            "success": self.success,
            "low_confidence": self.low_confidence,
            "anomaly_score": self.anomaly_score,
            "trigger": self.trigger.to_dict(),
        }


@dataclass
class DetectionOutcome:
    pairs: list  # all PairStatistic, (s, t) lexicographic
    pairs_detected: list  # [(s, t)]
    sources_for: dict  # t -> sorted list of s
    re_estimated_trigger: dict  # t -> trigger
    threshold: float
    variant: str
    budget: dict = field(default_factory=dict)
    low_confidence: dict = field(default_factory=dict)  # t -> bool
    dropped_pairs: list = field(default_factory=list)

    @property
    def targets_detected(self):
        return sorted(self.sources_for)

    @property
    def is_clean(self):
        return not self.pairs_detected

    def rethreshold(self, threshold):
        """Pairs flagged at a different threshold from the stored scores."""
        med = np.median([p.statistic for p in self.pairs])
        return [(p.source, p.target) for p in self.pairs if p.anomaly_score > threshold and p.statistic > med]

    def to_dict(self):
        return {
            "threshold": self.threshold,
            "variant": self.variant,
            "budget": self.budget,
            "pairs": [p.to_dict() for p in self.pairs],
            "pairs_detected": [list(p) for p in self.pairs_detected],
            "dropped_pairs": [list(p) for p in self.dropped_pairs],
            "targets_detected": self.targets_detected,
            "sources_for": {str(t): s for t, s in self.sources_for.items()},
            "re_estimated_trigger": {str(t): tr.to_dict() for t, tr in self.re_estimated_trigger.items()},
            "low_confidence": {str(t): v for t, v in self.low_confidence.items()},
        }

    @classmethod
    def from_dict(cls, d):
        pairs = [
            PairStatistic(
                p["source"], p["target"], trigger_from_dict(p["trigger"]), p["statistic"], p["size"],
                p["success"], p["low_confidence"], p["anomaly_score"],
            )
            for p in d["pairs"]
        ]
        return cls(
            pairs=pairs,
            pairs_detected=[tuple(p) for p in d["pairs_detected"]],
            sources_for={int(t): list(s) for t, s in d["sources_for"].items()},
            re_estimated_trigger={int(t): trigger_from_dict(v) for t, v in d["re_estimated_trigger"].items()},
            threshold=d["threshold"],
            variant=d["variant"],
            budget=d.get("budget", {}),
            low_confidence={int(t): v for t, v in d.get("low_confidence", {}).items()},
            dropped_pairs=[tuple(p) for p in d.get("dropped_pairs", [])],
        )

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    def export_scores_csv(self, path):
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["source", "target", "size", "statistic", "anomaly_score", "detected"])
            detected = set(self.pairs_detected)
            for p in self.pairs:
                w.writerow([p.source, p.target, p.size, p.statistic, p.anomaly_score, int((p.source, p.target) in detected)])


def _class_instances(x, y, classes):
    return x[np.isin(y, list(classes))]


def disambiguate_sources(model, candidate_sources, target, defense_set, pair_sizes=None,
                         variant="additive", ratio=3.0, config=None):
    """Drop candidate sources whose trigger does not transfer to a joint estimate.

    Candidates are visited from smallest pair-trigger size upward; each is kept
    only if a trigger estimated jointly on the kept set plus the candidate stays
    within `ratio` times the smallest pair size.
    """
    x, y = defense_set
    cands = list(candidate_sources)
    if len(cands) < 2:
        return cands
    if pair_sizes is None:
        pair_sizes = {
            s: reverse_engineer_pair(model, _class_instances(x, y, [s]), target, variant, config).size for s in cands
        }
    order = sorted(cands, key=lambda s: pair_sizes[s])
    kept = [order[0]]
    base = pair_sizes[order[0]]
    for s in order[1:]:
        joint = reverse_engineer_pair(model, _class_instances(x, y, kept + [s]), target, variant, config)
        if joint.size < ratio * max(base, MIN_SIZE):
            kept.append(s)
        else:
            log.info("dropping source %d for target %d: joint size %.3g vs %.3g", s, target, joint.size, base)
    return sorted(kept)


def detect(model, defense_set, threshold=7.0, variant="additive", config=None,
           disambiguate=True, ratio=3.0):
    """Run the pair grid, score it and re-estimate one trigger per detected target."""
    x, y = defense_set
    x, y = np.asarray(x, dtype=float), np.asarray(y)
    C = model.class_count
    cfg = config or REConfig()
    pairs = []
    for s in range(C):
        xs = x[y == s]
        if len(xs) == 0:
            raise ValueError(f"defense set has no instances of class {s}")
        for t in range(C):
            if t == s:
                continue
            res = reverse_engineer_pair(model, xs, t, variant, cfg)
            pairs.append(PairStatistic(s, t, res.trigger, res.statistic, res.size, res.success, res.low_confidence))
    scores = mad_scores([p.statistic for p in pairs])
    med = np.median([p.statistic for p in pairs])
    for p, sc in zip(pairs, scores):
        p.anomaly_score = float(sc)
    flagged = [(p.source, p.target) for p in pairs if p.anomaly_score > threshold and p.statistic > med]
    sizes = {(p.source, p.target): p.size for p in pairs}

    sources_for, dropped = {}, []
    for s, t in flagged:
        sources_for.setdefault(t, []).append(s)
    if disambiguate:
        for t, srcs in list(sources_for.items()):
            kept = disambiguate_sources(model, srcs, t, (x, y), {s: sizes[(s, t)] for s in srcs}, variant, ratio, cfg)
            dropped += [(s, t) for s in srcs if s not in kept]
            sources_for[t] = kept
    detected = [pt for pt in flagged if pt not in dropped]

    triggers, low = {}, {}
    for t in sorted(sources_for):
        res = reverse_engineer_pair(model, _class_instances(x, y, sources_for[t]), t, variant, cfg)
        triggers[t], low[t] = res.trigger, res.low_confidence
    return DetectionOutcome(
        pairs=pairs,
        pairs_detected=detected,
        sources_for={t: sorted(s) for t, s in sorted(sources_for.items())},
        re_estimated_trigger=triggers,
        threshold=threshold,
        variant=variant,
        budget={"steps": cfg.steps, "step_size": cfg.step_size, "success_rate": cfg.success_rate},
        low_confidence=low,
        dropped_pairs=dropped,
    )
