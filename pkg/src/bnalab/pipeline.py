"""End-to-end runs: generate, poison, train, detect, mitigate, evaluate.

Every file a run writes carries the config hash and seed. Mitigation is only
reachable through a detection outcome with at least one flagged pair.
"""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import analytic
from .attacks import BlobConfig, PoisonPlan, chessboard, embed, make_blobs, poison, random_patch, save_dataset_csv
from .config import ExperimentConfig
from .detector import DetectionOutcome, REConfig, detect
from .evalkit import metrics, strip_baseline
from .mitigation import (
    MitigatedClassifier,
    MitigationConfig,
    activation_divergences,
    layer_histograms,
    mitigate,
    transforms_to_dict,
)
from .nnet import OptimizerConfig, build_mlp, save_model, train

log = logging.getLogger(__name__)

KINDS = ("tv", "js", "kl")


class StageError(RuntimeError):
    def __init__(self, stage, cause):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


# ---------------------------------------------------------------------------
# stages


def blob_config(cfg: ExperimentConfig) -> BlobConfig:
    return BlobConfig(
        class_count=cfg.class_count, d=cfg.d, train_per_class=cfg.train_per_class,
        test_per_class=cfg.test_per_class, defense_fraction=cfg.defense_fraction,
        spread=cfg.spread, correlation=cfg.correlation, geometry=cfg.geometry,
        radius=cfg.radius, frequencies=cfg.frequencies,
    )


def make_trigger(cfg: ExperimentConfig):
    if cfg.trigger == "additive":
        return chessboard(cfg.d, cfg.perturbation_size)
    rng = np.random.default_rng([cfg.seed, 1])
    return random_patch(cfg.d, rng, int(cfg.perturbation_size))


def make_plan(cfg: ExperimentConfig) -> PoisonPlan:
    return PoisonPlan(cfg.poison_mode, cfg.target if cfg.poison_mode == "a2o" else None, cfg.poison_count)


def generate(cfg: ExperimentConfig):
    """(poisoned dataset, trigger, plan, poisoned row indices)."""
    clean = make_blobs(blob_config(cfg), cfg.seed)
    trigger, plan = make_trigger(cfg), make_plan(cfg)
    data, rows = poison(clean, trigger, plan, cfg.seed)
    return data, trigger, plan, rows


def train_model(cfg: ExperimentConfig, data):
    x, y = data.part("train")
    model = build_mlp(cfg.d, list(cfg.hidden), cfg.class_count, np.random.default_rng(cfg.seed))
    opt = OptimizerConfig(lr=cfg.train_lr, epochs=cfg.train_epochs, batch_size=cfg.train_batch, seed=cfg.seed)
    return train(model, x, y, opt)


def re_config(cfg):
    return REConfig(steps=cfg.re_steps, step_size=cfg.re_step_size)


def run_detection(cfg, model, data) -> DetectionOutcome:
    return detect(model, data.part("defense"), threshold=cfg.threshold, variant=cfg.re_variant, config=re_config(cfg))


def mitigation_config(cfg) -> MitigationConfig:
    return MitigationConfig(
        kind=cfg.divergence, lr=cfg.lr, epochs=cfg.epochs, delta_b=cfg.delta_b, tau=cfg.tau,
        init=cfg.init, seed=cfg.seed,
    )


def run_mitigation(cfg, model, outcome, data):
    """Mitigate when something was detected; otherwise wrap f unchanged."""
    if outcome.is_clean:
        return MitigatedClassifier(model, outcome, {}), {}
    return mitigate(model, outcome, data.part("defense"), mitigation_config(cfg))


def divergence_summary(model, wrapper, results, data, trigger, tau):
    """Summed per-neuron divergences, clean vs triggered test activations of detected sources."""
    xt, yt = data.part("test")
    out, rows = {}, []
    for t, res in results.items():
        src = np.isin(yt, wrapper.outcome.sources_for[t])
        xc, xb = xt[src], embed(trigger, xt[src])
        out[str(t)] = {}
        for kind in KINDS:
            before = activation_divergences(model, xc, xb, res.layouts, tau, kind)
            after = activation_divergences(model, xc, xb, res.layouts, tau, kind, wrapper.transforms[t])
            b = float(sum(v.sum() for v in before.values()))
            a = float(sum(v.sum() for v in after.values()))
            out[str(t)][kind] = {"before": b, "after": a, "reduction": 1.0 - a / b if b > 0 else 0.0}
            for layer in before:
                for j, (vb, va) in enumerate(zip(before[layer], after[layer])):
                    rows.append({"target": t, "layer": layer, "neuron": j, "kind": kind, "before": vb, "after": va})
    return out, rows


def evaluate(cfg, model, wrapper, results, data, trigger, plan):
    xt, yt = data.part("test")
    prov = {"config_hash": cfg.hash(), "seed": cfg.seed}
    vanilla = metrics(model, (xt, yt), trigger, plan, cfg.class_count, prov)
    mitigated = metrics(wrapper, (xt, yt), trigger, plan, cfg.class_count, prov)
    div, rows = divergence_summary(model, wrapper, results, data, trigger, cfg.tau)
    mitigated.divergences = div
    tgt = np.array([plan.target_of(int(c), cfg.class_count) for c in yt])
    keep = yt != tgt
    stream = (np.vstack([xt, embed(trigger, xt[keep])]), np.r_[np.zeros(len(xt), bool), np.ones(keep.sum(), bool)])
    strip = strip_baseline(model, data.part("defense"), stream, cfg.strip_blend_count, cfg.strip_fpr_budget, cfg.seed)
    return vanilla, mitigated, strip, rows


# ---------------------------------------------------------------------------
# files


def _stamp(cfg):
    return {"config_hash": cfg.hash(), "seed": cfg.seed}


def _write_json(path, payload, cfg):
    path.write_text(json.dumps({**_stamp(cfg), **payload}, indent=2, sort_keys=True))


def _write_csv(path, header, rows, cfg):
    with path.open("w", newline="") as fh:
        fh.write(f"# config_hash={cfg.hash()} seed={cfg.seed}\n")
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _histogram_rows(model, wrapper, results, data, trigger, tau):
    """Per-bin clean / triggered / mitigated histograms for plotting."""
    xt, yt = data.part("test")
    rows = []
    for t, res in results.items():
        src = np.isin(yt, wrapper.outcome.sources_for[t])
        xc, xb = xt[src], embed(trigger, xt[src])
        p = layer_histograms(model, xc, res.layouts, tau)
        q0 = layer_histograms(model, xb, res.layouts, tau)
        q1 = layer_histograms(model, xb, res.layouts, tau, wrapper.transforms[t])
        for layer, lay in res.layouts.items():
            for j in range(lay.edges.shape[0]):
                for b in range(int(lay.finite_bins[j]) + 2):
                    lo = lay.edges[j, b - 1] if b > 0 else -np.inf
                    rows.append([t, layer, j, b, lo, p[layer][j, b], q0[layer][j, b], q1[layer][j, b]])
    return rows


@dataclass
class RunResult:
    run_dir: Path
    config: ExperimentConfig
    model: object
    outcome: DetectionOutcome
    wrapper: MitigatedClassifier
    mitigation: dict
    vanilla: object
    mitigated: object
    strip: object
    data: object = None
    trigger: object = None
    plan: object = None
    timings: dict = field(default_factory=dict)

    @property
    def checks(self):
        """Stage assertions that decide the process exit status."""
        return {
            "parameters_untouched": all(r.parameters_untouched for r in self.mitigation.values()),
            "no_aborted_optimisation": not any(r.aborted for r in self.mitigation.values()),
            "clean_passthrough": (not self.outcome.is_clean) or self.mitigated.acc == self.vanilla.acc,
        }


def run_pipeline(cfg: ExperimentConfig, run_dir=None, write=True) -> RunResult:
    run_dir = Path(run_dir or Path(cfg.output_dir) / f"run-{cfg.hash()}-s{cfg.seed}")
    if write:
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "config.txt").write_text(f"# config_hash={cfg.hash()} seed={cfg.seed}\n" + cfg.to_text())
    timings = {}

    def stage(name, fn):
        t0 = time.perf_counter()
        try:
            out = fn()
        except Exception as exc:  # noqa: BLE001 - re-raised with the stage tag
            raise StageError(name, exc) from exc
        timings[name] = time.perf_counter() - t0
        log.info("stage %s done in %.2fs", name, timings[name])
        return out

    data, trigger, plan, rows = stage("generate", lambda: generate(cfg))
    if write:
        save_dataset_csv(data, run_dir / "dataset.csv",
                         {**_stamp(cfg), "poisoned_rows": rows.tolist(), "trigger": trigger.to_dict(), "plan": plan.to_dict()},
                         comment=f"config_hash={cfg.hash()} seed={cfg.seed}")
    trained = stage("train", lambda: train_model(cfg, data))
    model = trained.model
    if write:
        save_model(model, run_dir / "model.json", _stamp(cfg))
    outcome = stage("detect", lambda: run_detection(cfg, model, data))
    if write:
        _write_json(run_dir / "detection.json", outcome.to_dict(), cfg)
        detected = set(outcome.pairs_detected)
        _write_csv(run_dir / "detection_scores.csv", ["source", "target", "size", "statistic", "anomaly_score", "detected"],
                   [[p.source, p.target, p.size, p.statistic, p.anomaly_score, int((p.source, p.target) in detected)]
                    for p in outcome.pairs], cfg)
    wrapper, results = stage("mitigate", lambda: run_mitigation(cfg, model, outcome, data))
    if write and results:
        _write_json(run_dir / "mitigation.json", {"targets": {
            str(t): {**transforms_to_dict(r.theta, r.layouts, cfg.tau), "loss_history": r.loss_history,
                     "checksum_before": r.checksum_before, "checksum_after": r.checksum_after, "aborted": r.aborted}
            for t, r in results.items()}}, cfg)
        _write_csv(run_dir / "loss_history.csv", ["target", "epoch", "loss"],
                   [[t, e, v] for t, r in results.items() for e, v in enumerate(r.loss_history)], cfg)
    vanilla, mitigated, strip, div_rows = stage("evaluate", lambda: evaluate(cfg, model, wrapper, results, data, trigger, plan))
    res = RunResult(run_dir, cfg, model, outcome, wrapper, results, vanilla, mitigated, strip, data, trigger, plan, timings)
    if write:
        _write_csv(run_dir / "divergence.csv", ["target", "layer", "neuron", "kind", "before", "after"],
                   [[r["target"], r["layer"], r["neuron"], r["kind"], r["before"], r["after"]] for r in div_rows], cfg)
        if results:
            _write_csv(run_dir / "histograms.csv", ["target", "layer", "neuron", "bin", "lower_edge", "clean", "triggered", "mitigated"],
                       _histogram_rows(model, wrapper, results, data, trigger, cfg.tau), cfg)
        _write_json(run_dir / "metrics.json", {
            "vanilla": vanilla.to_dict(),
            "mitigated": mitigated.to_dict(),
            "strip": strip.__dict__,
            "detection": {"pairs_detected": [list(p) for p in outcome.pairs_detected],
                          "targets_detected": outcome.targets_detected,
                          "sources_for": {str(t): s for t, s in outcome.sources_for.items()}},
            "checks": res.checks,
        }, cfg)
        _write_json(run_dir / "timings.json", {"seconds": timings}, cfg)
    return res


# ---------------------------------------------------------------------------
# theorem certification


def run_theorem_certification(settings=100, seed=0, mc_samples=100_000, config=None, out=None):
    """Closed-form monotonicity over random valid settings plus a Monte-Carlo cross-check.

    A planted sigma_b > sigma setting is included and must come back as
    "assumptions unmet" rather than as a failure.
    """
    config = config or analytic.AnalyticConfig()
    rng = np.random.default_rng(seed)
    t0 = time.perf_counter()
    records = []
    for k in range(settings):
        setting, model = analytic.random_setting(rng, config=config)
        rep = analytic.verify_theorem1(setting, model, config)
        rec = {"index": k, "d": setting.d, "J": model.J, **rep.to_dict()}
        if mc_samples:
            m_star, v_star = analytic.corrected_moments(setting, model)
            xb = analytic.sample_triggered(setting, mc_samples, rng)
            zs = []
            for a, cf in zip(rep.grid, rep.sia):
                mc = analytic.monte_carlo_sia(setting, model, analytic.interpolate(model, m_star, v_star, a), mc_samples, rng, xb)
                se = np.sqrt(max(cf * (1 - cf), 1e-300) / mc_samples)
                zs.append(abs(mc - cf) / se)
            rec["mc_max_z"] = float(max(zs))
            rec["mc_exceed_3se"] = int(sum(z > 3 for z in zs))
        records.append(rec)

    planted_setting, planted_model = analytic.random_setting(rng, config=config)
    planted_setting = analytic.GaussianSetting(planted_setting.mu, planted_setting.sigma, planted_setting.epsilon,
                                               1.5 * planted_setting.sigma)
    try:
        analytic.verify_theorem1(planted_setting, planted_model, config)
        planted = {"status": "certified", "reasons": []}
    except analytic.AssumptionsUnmet as exc:
        planted = {"status": "assumptions unmet", "reasons": exc.reasons, "measured": exc.measured}

    points = sum(len(r["grid"]) for r in records)
    report = {
        "seed": seed,
        "settings": settings,
        "mc_samples": mc_samples,
        "certified": sum(r["status"] == "certified" for r in records),
        "monotone": sum(r["strictly_decreasing"] for r in records),
        "endpoints_ok": sum(r["endpoint_low_ok"] and r["endpoint_high_ok"] for r in records),
        "mc_points": points if mc_samples else 0,
        "mc_exceedances": sum(r.get("mc_exceed_3se", 0) for r in records),
        "mc_expected_exceedances": points * 0.0026997960632601866 if mc_samples else 0.0,
        "planted": planted,
        "records": records,
        "seconds": time.perf_counter() - t0,
    }
    if out is not None:
        Path(out).write_text(json.dumps(report, indent=2, default=float))
    return report


# ---------------------------------------------------------------------------
# sweeps

SWEEP_AXES = ("tau", "delta_b", "poison_count", "perturbation_size", "divergence")
_MITIGATION_ONLY = ("tau", "delta_b", "divergence")

SWEEP_HEADER = [
    "config_hash", "seed", "axis", "value", "status", "error",
    "vanilla_acc", "vanilla_asr", "vanilla_sia", "acc", "asr", "sia", "tpr", "fpr", "detected_pairs",
    "tv_reduction", "js_reduction", "kl_reduction",
]


def _sweep_row(cfg, axis, value, res=None, error=""):
    base = [cfg.hash(), cfg.seed, axis, value]
    if res is None:
        return base + ["failed", error] + [""] * (len(SWEEP_HEADER) - 6)
    red = {k: np.mean([d[k]["reduction"] for d in res.mitigated.divergences.values()]) if res.mitigated.divergences else ""
           for k in KINDS}
    m, v = res.mitigated, res.vanilla
    return base + ["ok", "", v.acc, v.asr, v.sia, m.acc, m.asr, m.sia,
                   "" if m.tpr is None else m.tpr, "" if m.fpr is None else m.fpr,
                   len(res.outcome.pairs_detected), red["tv"], red["js"], red["kl"]]


def _mitigate_only(cell, prepared):
    data, trigger, plan, model, outcome = prepared
    wrapper, results = run_mitigation(cell, model, outcome, data)
    vanilla, mitigated, strip, _ = evaluate(cell, model, wrapper, results, data, trigger, plan)
    return RunResult(None, cell, model, outcome, wrapper, results, vanilla, mitigated, strip, data, trigger, plan)


def run_sweep(cfg: ExperimentConfig, axis, values, out=None):
    """Repeat the pipeline along one axis; failed cells are recorded and skipped.

    Mitigation-only axes reuse one trained and screened model.
    """
    if axis not in SWEEP_AXES:
        raise ValueError(f"unknown sweep axis {axis!r}; choose from {SWEEP_AXES}")
    rows, results = [], []
    prepared = None
    for value in values:
        try:
            cell = cfg.replace(**{axis: type(getattr(cfg, axis))(value)})
            if axis in _MITIGATION_ONLY:
                if prepared is None:
                    data, trigger, plan, _ = generate(cfg)
                    model = train_model(cfg, data).model
                    prepared = (data, trigger, plan, model, run_detection(cfg, model, data))
                res = _mitigate_only(cell, prepared)
            else:
                res = run_pipeline(cell, write=False)
            rows.append(_sweep_row(cfg, axis, value, res))
            results.append(res)
        except Exception as exc:  # noqa: BLE001 - a failed cell must not stop the sweep
            log.warning("sweep cell %s=%s failed: %s", axis, value, exc)
            rows.append(_sweep_row(cfg, axis, value, error=str(exc)))
            results.append(None)
    if out is not None:
        with Path(out).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(SWEEP_HEADER)
            w.writerows(rows)
    return rows, results
