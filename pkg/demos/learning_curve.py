"""Print the mean accuracy over seen tasks at each checkpoint, with and without module sharing."""
import sys
import warnings
from collections import defaultdict

import numpy as np

from dclsim.orchestrator import ExperimentConfig, Simulation

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
warnings.simplefilter("ignore")
curves = {}
for mode in ("none", "modmod"):
    sim = Simulation(ExperimentConfig.from_dict({"mode": mode}), seed)
    sim.run()
    by_epoch = defaultdict(list)
    for r in sim.rows:
        by_epoch[(r["task"], r["epoch_in_task"])].append(r["acc"])
    curves[mode] = {k: float(np.mean(v)) for k, v in by_epoch.items()}

print(" task epoch    none  modmod")
for key in sorted(curves["none"]):
    print(f"{key[0]:5d} {key[1]:5d}  {curves['none'][key]:.4f}  {curves['modmod'][key]:.4f}")
