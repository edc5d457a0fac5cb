"""How much of the mitigation comes from the moment-matched start vs divergence descent."""
import argparse

from bnalab.config import ExperimentConfig
from bnalab.evalkit import metrics
from bnalab.mitigation import MitigatedClassifier, MitigationConfig, mitigate
from bnalab.pipeline import generate, run_detection, train_model

ap = argparse.ArgumentParser(description=__doc__)
ap.add_argument("--seed", type=int, default=0)
args = ap.parse_args()

cfg = ExperimentConfig(seed=args.seed)
data, trigger, plan, _ = generate(cfg)
model = train_model(cfg, data).model
outcome = run_detection(cfg, model, data)
if outcome.is_clean:
    raise SystemExit("nothing detected at this seed")

variants = {
    "moments, 10 GD epochs": MitigationConfig(init="moments"),
    "moments, no descent": MitigationConfig(init="moments", epochs=0),
    "stored stats, 10 GD epochs": MitigationConfig(init="identity"),
    "stored stats, 200 Adam epochs": MitigationConfig(init="identity", epochs=200, lr=0.05, adaptive=True, momentum=0.9),
}
test = data.part("test")
for name, mc in variants.items():
    wrapper, results = mitigate(model, outcome, data.part("defense"), mc)
    rep = metrics(wrapper, test, trigger, plan, cfg.class_count)
    h = next(iter(results.values())).loss_history
    print(f"{name:30} loss {h[0]:.3g} -> {h[-1]:.3g}   ACC {rep.acc:.4f} ASR {rep.asr:.4f} SIA {rep.sia:.4f}")
base = metrics(MitigatedClassifier(model, outcome, {}), test, trigger, plan, cfg.class_count)
print(f"{'no transform':30} {'':22} ACC {base.acc:.4f} ASR {base.asr:.4f} SIA {base.sia:.4f}")
