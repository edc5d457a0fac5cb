"""Robustness sweeps over tau, bin width, divergence form, poison count and trigger amplitude."""
import argparse
from pathlib import Path

from bnalab.config import ExperimentConfig
from bnalab.pipeline import run_sweep

GRID = {
    "tau": ["10", "100", "500", "1000"],
    "delta_b": ["0.1", "0.15", "0.2"],
    "divergence": ["tv", "js", "kl"],
    "poison_count": ["25", "50", "100", "200"],
    "perturbation_size": ["0.005", "0.01", "0.02"],
}

ap = argparse.ArgumentParser(description=__doc__)
ap.add_argument("--seed", type=int, default=0)
ap.add_argument("--axes", default=",".join(GRID))
ap.add_argument("--out-dir", default="sweeps")
args = ap.parse_args()

out = Path(args.out_dir)
out.mkdir(parents=True, exist_ok=True)
cfg = ExperimentConfig(seed=args.seed)
for axis in args.axes.split(","):
    rows, _ = run_sweep(cfg, axis, GRID[axis], out / f"{axis}.csv")
    print(f"\n{axis}")
    print(f"{'value':>8} {'status':>7} {'acc':>7} {'asr':>7} {'sia':>7} {'pairs':>5} {'tv red':>7}")
    for r in rows:
        if r[4] != "ok":
            print(f"{r[3]:>8} {r[4]:>7}  {r[5]}")
            continue
        red = f"{r[15]:.3f}" if r[15] != "" else "-"
        print(f"{r[3]:>8} {r[4]:>7} {r[9]:7.4f} {r[10]:7.4f} {r[11]:7.4f} {r[14]:>5} {red:>7}")
