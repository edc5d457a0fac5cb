"""Accuracy, attack success, source inference accuracy, flag rates and STRIP."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .attacks import embed
from .nnet import MlpModel, forward, predict, softmax


def _predict(model_or_wrapper, x):
    if isinstance(model_or_wrapper, MlpModel):
        return predict(model_or_wrapper, x)
    return model_or_wrapper.predict(x)


def _frac(mask):
    mask = np.asarray(mask, dtype=bool)
    return float(mask.mean()) if mask.size else float("nan")


@dataclass
class MetricsReport:
    acc: float
    asr: float
    sia: float
    asr_all: float  # diagnostic: ASR counting target-class instances too
    tpr: float | None = None
    fpr: float | None = None
    fpr_all_classes: float | None = None
    divergences: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("acc", "asr", "sia", "asr_all", "tpr", "fpr", "fpr_all_classes"):
            v = getattr(self, name)
            if v is not None and not np.isnan(v) and not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} is not a fraction")

    def to_dict(self):
        return asdict(self)

    def save_json(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    def rows(self, label="run"):
        """Long-format (label, metric, value) rows for sweep aggregation."""
        out = []
        for name in ("acc", "asr", "sia", "asr_all", "tpr", "fpr", "fpr_all_classes"):
            v = getattr(self, name)
            out.append((label, name, "" if v is None else v))
        return out


def write_long_csv(path, rows, header=("label", "metric", "value")):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def per_instance_targets(plan, y, class_count):
    return np.array([plan.target_of(int(c), class_count) for c in y], dtype=int)


def metrics(model_or_wrapper, test_split, trigger, plan, class_count=None, provenance=None) -> MetricsReport:
    """ACC on clean test rows; ASR and SIA on triggered non-target rows.

    When the argument carries a detection outcome (a mitigated wrapper), flag
    rates are filled in as well.
    """
    x, y = (np.asarray(a) for a in test_split)
    C = class_count or getattr(model_or_wrapper, "class_count", None) or model_or_wrapper.base.class_count
    pred = _predict(model_or_wrapper, x)
    tgt = per_instance_targets(plan, y, C)
    keep = y != tgt
    trig_pred = _predict(model_or_wrapper, embed(trigger, x))
    report = MetricsReport(
        acc=_frac(pred == y),
        asr=_frac(trig_pred[keep] == tgt[keep]),
        sia=_frac(trig_pred[keep] == y[keep]),
        asr_all=_frac(trig_pred == tgt),
        provenance=dict(provenance or {}),
    )
    if hasattr(model_or_wrapper, "infer"):
        rates = detection_rates(model_or_wrapper, (x, y), trigger, plan)
        if rates is not None:
            report.tpr, report.fpr, report.fpr_all_classes = rates
    return report


def detection_rates(wrapper, test_split, trigger, plan):
    """(TPR, target-class FPR, all-class FPR), or None when no target was detected."""
    targets = wrapper.detected_targets
    if not targets:
        return None
    x, y = (np.asarray(a) for a in test_split)
    tgt = per_instance_targets(plan, y, wrapper.base.class_count)
    keep = y != tgt
    _, flags_trig = wrapper.infer(embed(trigger, x[keep]))
    _, flags_clean = wrapper.infer(x)
    return (
        _frac(flags_trig),
        _frac(flags_clean[np.isin(y, targets)]),
        _frac(flags_clean),
    )


# ---------------------------------------------------------------------------
# STRIP


def _entropy(p):
    p = np.clip(p, 1e-12, 1.0)
    return -(p * np.log(p)).sum(axis=-1)


def blend_entropy(model, x, overlays, blend_count, rng):
    """Entropy of the blend-averaged predicted distribution for each row of x."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    out = np.empty(len(x))
    for i, row in enumerate(x):
        pick = overlays[rng.integers(0, len(overlays), size=blend_count)]
        scores, _ = forward(model, 0.5 * row + 0.5 * pick)
        out[i] = _entropy(softmax(scores).mean(axis=0))
    return out


@dataclass
class StripResult:
    tpr: float
    fpr: float
    threshold: float
    blend_count: int
    fpr_budget: float


def strip_baseline(model, defense_split, test_stream, blend_count=32, fpr_budget=0.15, seed=0) -> StripResult:
    """Flag inputs whose blended predictions have low entropy.

    `test_stream` is (x, is_triggered). Half of the defense split provides the
    overlay images; the other half is the clean holdout used to set the entropy
    threshold at the requested false-positive budget.
    """
    xd = np.asarray(defense_split[0], dtype=float)
    if len(xd) == 0:
        raise ValueError("STRIP needs a nonempty defense split")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(xd))
    half = max(len(xd) // 2, 1)
    overlays, holdout = xd[order[:half]], xd[order[half:]]
    if len(holdout) == 0:
        holdout = overlays
    h_clean = blend_entropy(model, holdout, overlays, blend_count, rng)
    threshold = float(np.quantile(h_clean, fpr_budget))
    x, is_trig = test_stream
    is_trig = np.asarray(is_trig, dtype=bool)
    flags = blend_entropy(model, x, overlays, blend_count, rng) < threshold
    return StripResult(_frac(flags[is_trig]), _frac(flags[~is_trig]), threshold, blend_count, fpr_budget)
