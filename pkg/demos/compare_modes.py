"""Run each sharing mode on one seed and print accuracy against floats sent per edge."""
import sys
import warnings

from dclsim.orchestrator import ExperimentConfig, Simulation

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
warnings.simplefilter("ignore")
base = None
print(f"{'mode':8s} {'final acc':>9s} {'gain':>7s} {'floats/edge':>12s}")
for mode in ("none", "data", "fedavg", "modmod"):
    sim = Simulation(ExperimentConfig.from_dict({"mode": mode}), seed)
    sim.run()
    s = sim.summary()
    acc = s["mean_final_acc"]
    base = acc if base is None else base
    print(f"{mode:8s} {acc:9.4f} {100 * (acc - base):+7.2f} {s['B_edge']:12.0f}")
