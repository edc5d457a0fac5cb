"""Test-time trigger detection: flagging by the mitigated model vs the STRIP baseline."""
import argparse

from bnalab.config import ExperimentConfig
from bnalab.pipeline import run_pipeline

ap = argparse.ArgumentParser(description=__doc__)
ap.add_argument("--seed", type=int, default=0)
args = ap.parse_args()

scenarios = {
    "additive chessboard": ExperimentConfig(seed=args.seed),
    "3-coordinate patch": ExperimentConfig(seed=args.seed, trigger="patch", perturbation_size=3, re_variant="patch"),
}
print(f"{'trigger':22} {'vanilla ASR':>11} {'BNA TPR':>8} {'BNA FPR':>8} {'STRIP TPR':>9} {'STRIP FPR':>9}")
for name, cfg in scenarios.items():
    res = run_pipeline(cfg, write=False)
    m, s = res.mitigated, res.strip
    tpr = "-" if m.tpr is None else f"{m.tpr:.3f}"
    fpr = "-" if m.fpr is None else f"{m.fpr:.3f}"
    print(f"{name:22} {res.vanilla.asr:11.3f} {tpr:>8} {fpr:>8} {s.tpr:9.3f} {s.fpr:9.3f}")
