"""One end-to-end run (generate, train, detect, mitigate, evaluate) with artifacts."""
import argparse
import json

from bnalab.config import ExperimentConfig
from bnalab.pipeline import run_pipeline

ap = argparse.ArgumentParser(description=__doc__)
ap.add_argument("--mode", choices=["a2o", "a2a"], default="a2o")
ap.add_argument("--seed", type=int, default=0)
ap.add_argument("--poison-count", type=int, default=None, help="0 gives the clean-model run")
ap.add_argument("--output-dir", default="runs")
args = ap.parse_args()

cfg = ExperimentConfig(seed=args.seed, poison_mode=args.mode, output_dir=args.output_dir)
if args.poison_count is not None:
    cfg = cfg.replace(poison_count=args.poison_count)
res = run_pipeline(cfg)
v, m = res.vanilla, res.mitigated
print(f"run dir {res.run_dir}")
print(f"detected {res.outcome.sources_for or 'nothing'}")
print(f"vanilla   ACC {v.acc:.4f}  ASR {v.asr:.4f}  SIA {v.sia:.4f}")
print(f"mitigated ACC {m.acc:.4f}  ASR {m.asr:.4f}  SIA {m.sia:.4f}  TPR {m.tpr}  FPR {m.fpr}")
print(f"STRIP     TPR {res.strip.tpr:.4f}  FPR {res.strip.fpr:.4f}")
print(json.dumps(m.divergences, indent=1))
print("checks", res.checks)
