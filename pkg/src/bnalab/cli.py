"""Command-line entry point: ``bnalab <subcommand> [options]``.

Every config key is also a flag (``--delta-b 0.2``); ``--config`` loads a flat
key = value file or JSON, ``--set key=value`` overrides anything. Exit status
is 0 only when the stage's own checks pass.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from .attacks import load_dataset_csv, save_dataset_csv, trigger_from_dict
from .config import ExperimentConfig, coerce
from .detector import DetectionOutcome
from .evalkit import metrics
from .mitigation import MitigatedClassifier, mitigate, transforms_from_dict, transforms_to_dict
from .nnet import load_model, save_model
from . import pipeline

log = logging.getLogger("bnalab")


def _add_config_flags(p, required_seed=False):
    p.add_argument("--config", type=Path, help="flat key = value file or .json")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    for f in fields(ExperimentConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.name == "seed":
            p.add_argument(flag, type=int, required=required_seed)
        else:
            p.add_argument(flag, dest=f.name, default=None)


def build_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if getattr(args, "config", None) else ExperimentConfig()
    changes = {}
    known = {f.name: f for f in fields(ExperimentConfig)}
    for f in known.values():
        v = getattr(args, f.name, None)
        if v is not None:
            changes[f.name] = coerce(f, v)
    for item in getattr(args, "set", []):
        k, _, v = item.partition("=")
        k = k.strip().replace("-", "_")
        if k not in known:
            raise SystemExit(f"unknown config key {k!r}")
        changes[k] = coerce(known[k], v.strip())
    return cfg.replace(**changes) if changes else cfg


def _load_data(path):
    data = load_dataset_csv(path)
    side = Path(path).with_suffix(".json")
    meta = json.loads(side.read_text()) if side.exists() else {}
    return data, meta


def cmd_gen(args):
    cfg = build_config(args)
    data, trigger, plan, rows = pipeline.generate(cfg)
    save_dataset_csv(data, args.out, {"config_hash": cfg.hash(), "seed": cfg.seed, "poisoned_rows": rows.tolist(),
                                      "trigger": trigger.to_dict(), "plan": plan.to_dict()},
                     comment=f"config_hash={cfg.hash()} seed={cfg.seed}")
    print(f"wrote {args.out} ({len(data.y)} rows, {len(rows)} poisoned)")
    return 0


def cmd_train(args):
    cfg = build_config(args)
    data, _ = _load_data(args.data)
    trained = pipeline.train_model(cfg, data)
    save_model(trained.model, args.out, {"config_hash": cfg.hash(), "seed": cfg.seed, "history": trained.history})
    ok = bool(np.isfinite(trained.history[-1]))
    print(f"wrote {args.out}; held-out loss {trained.history[-1]:.4f}")
    return 0 if ok else 1


def cmd_detect(args):
    cfg = build_config(args)
    data, _ = _load_data(args.data)
    model = load_model(args.model)
    outcome = pipeline.run_detection(cfg, model, data)
    outcome.save(args.out)
    if args.scores:
        outcome.export_scores_csv(args.scores)
    print(f"detected pairs: {outcome.pairs_detected or 'none'}")
    return 0


def cmd_mitigate(args):
    cfg = build_config(args)
    data, _ = _load_data(args.data)
    model = load_model(args.model)
    outcome = DetectionOutcome.from_dict(json.loads(Path(args.detection).read_text()))
    if outcome.is_clean:
        print("detection outcome is clean; nothing to mitigate")
        Path(args.out).write_text(json.dumps({"config_hash": cfg.hash(), "seed": cfg.seed, "targets": {}}))
        return 0
    _, results = mitigate(model, outcome, data.part("defense"), pipeline.mitigation_config(cfg))
    payload = {"config_hash": cfg.hash(), "seed": cfg.seed, "targets": {
        str(t): {**transforms_to_dict(r.theta, r.layouts, cfg.tau), "loss_history": r.loss_history,
                 "checksum_before": r.checksum_before, "checksum_after": r.checksum_after}
        for t, r in results.items()}}
    Path(args.out).write_text(json.dumps(payload, indent=2))
    ok = all(r.parameters_untouched and not r.aborted for r in results.values())
    print(f"wrote {args.out}; trainable parameters untouched: {ok}")
    return 0 if ok else 1


def cmd_eval(args):
    cfg = build_config(args)
    data, meta = _load_data(args.data)
    model = load_model(args.model)
    trigger = trigger_from_dict(meta["trigger"]) if "trigger" in meta else pipeline.make_trigger(cfg)
    plan = pipeline.make_plan(cfg)
    test = data.part("test")
    report = {"config_hash": cfg.hash(), "seed": cfg.seed,
              "vanilla": metrics(model, test, trigger, plan, cfg.class_count).to_dict()}
    if args.detection:
        outcome = DetectionOutcome.from_dict(json.loads(Path(args.detection).read_text()))
        transforms = {}
        if args.mitigation:
            side = json.loads(Path(args.mitigation).read_text())
            transforms = {int(t): transforms_from_dict(v) for t, v in side["targets"].items()}
        wrapper = MitigatedClassifier(model, outcome, transforms)
        report["mitigated"] = metrics(wrapper, test, trigger, plan, cfg.class_count).to_dict()
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text)
    print(text)
    return 0


def cmd_pipeline(args):
    cfg = build_config(args)
    res = pipeline.run_pipeline(cfg, args.run_dir)
    v, m = res.vanilla, res.mitigated
    print(f"run dir: {res.run_dir}")
    print(f"detected: {res.outcome.sources_for or 'nothing'}")
    print(f"vanilla   acc={v.acc:.4f} asr={v.asr:.4f} sia={v.sia:.4f}")
    print(f"mitigated acc={m.acc:.4f} asr={m.asr:.4f} sia={m.sia:.4f} tpr={m.tpr} fpr={m.fpr}")
    failed = [k for k, ok in res.checks.items() if not ok]
    for k in failed:
        print(f"check failed: {k}", file=sys.stderr)
    return 1 if failed else 0


def cmd_certify(args):
    rep = pipeline.run_theorem_certification(args.settings, args.seed, args.mc_samples, out=args.out)
    print(f"certified {rep['certified']}/{rep['settings']}, monotone {rep['monotone']}, endpoints ok {rep['endpoints_ok']}")
    if args.mc_samples:
        print(f"Monte-Carlo points beyond 3 SE: {rep['mc_exceedances']} of {rep['mc_points']} "
              f"(about {rep['mc_expected_exceedances']:.1f} expected by chance)")
    print(f"planted sigma_b > sigma setting: {rep['planted']['status']}")
    ok = rep["certified"] == rep["settings"] and rep["planted"]["status"] == "assumptions unmet"
    return 0 if ok else 1


def cmd_sweep(args):
    cfg = build_config(args)
    values = [v for v in args.values.split(",") if v.strip()] if args.values else []
    rows, _ = pipeline.run_sweep(cfg, args.axis, values, args.out)
    failed = sum(r[4] != "ok" for r in rows)
    print(f"wrote {args.out}: {len(rows)} cells, {failed} failed")
    return 1 if failed else 0


def make_parser():
    ap = argparse.ArgumentParser(prog="bnalab", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate (and poison) a blob dataset")
    _add_config_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen)

    p = sub.add_parser("train", help="train an MLP on the train split")
    _add_config_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("detect", help="reverse-engineer every class pair and flag outliers")
    _add_config_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--scores", help="optional CSV of per-pair anomaly scores")
    p.set_defaults(fn=cmd_detect)

    p = sub.add_parser("mitigate", help="optimise BN statistics for each detected target")
    _add_config_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--detection", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_mitigate)

    p = sub.add_parser("eval", help="ACC / ASR / SIA (and flag rates for a mitigated model)")
    _add_config_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--detection")
    p.add_argument("--mitigation")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("pipeline", help="generate, train, detect, mitigate and evaluate")
    _add_config_flags(p, required_seed=True)
    p.add_argument("--run-dir")
    p.set_defaults(fn=cmd_pipeline)

    p = sub.add_parser("certify", help="closed-form monotonicity certification")
    p.add_argument("--settings", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mc-samples", type=int, default=100_000)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_certify)

    p = sub.add_parser("sweep", help="repeat the pipeline along one axis")
    _add_config_flags(p)
    p.add_argument("--axis", required=True, choices=pipeline.SWEEP_AXES)
    p.add_argument("--values", default="", help="comma-separated values")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_sweep)
    return ap


def main(argv=None):
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except pipeline.StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
