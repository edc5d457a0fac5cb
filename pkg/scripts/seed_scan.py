"""Repeat the A2O acceptance scenario over many seeds and tabulate each check."""
import argparse
import csv

import numpy as np

from bnalab.config import ExperimentConfig
from bnalab.pipeline import run_pipeline

ap = argparse.ArgumentParser(description=__doc__)
ap.add_argument("--seeds", type=int, default=16)
ap.add_argument("--mode", choices=["a2o", "a2a"], default="a2o")
ap.add_argument("--out", default="seed_scan.csv")
args = ap.parse_args()

header = ["seed", "detected", "vanilla_acc", "vanilla_asr", "acc", "asr", "sia", "tpr", "fpr", "tv_reduction"]
rows = []
for seed in range(args.seeds):
    res = run_pipeline(ExperimentConfig(seed=seed, poison_mode=args.mode), write=False)
    v, m = res.vanilla, res.mitigated
    red = np.mean([d["tv"]["reduction"] for d in m.divergences.values()]) if m.divergences else float("nan")
    rows.append([seed, str(res.outcome.sources_for), v.acc, v.asr, m.acc, m.asr, m.sia,
                 m.tpr if m.tpr is not None else float("nan"), m.fpr if m.fpr is not None else float("nan"), red])
    print(f"seed {seed:2d} detected {res.outcome.sources_for!s:24} ACC drop {v.acc - m.acc:+.4f} "
          f"ASR {v.asr:.3f}->{m.asr:.3f} SIA {m.sia:.3f} TPR {rows[-1][7]:.3f} FPR {rows[-1][8]:.3f}")

with open(args.out, "w", newline="") as fh:
    w = csv.writer(fh)
    w.writerow(header)
    w.writerows(rows)

arr = np.array([r[2:] for r in rows], dtype=float)
fired = ~np.isnan(arr[:, 5])
print(f"\ndetection fired on {fired.sum()}/{len(rows)} seeds")
if fired.any():
    sub = arr[fired]
    drop = sub[:, 0] - sub[:, 2]
    print(f"among those: ACC drop median {np.median(drop):.4f} (<= 0.02 on {(drop <= 0.02).sum()}), "
          f"ASR median {np.median(sub[:, 3]):.4f}, TPR median {np.median(sub[:, 5]):.3f}, "
          f"FPR median {np.median(sub[:, 6]):.3f}")
