"""The whole pipeline on a micro configuration (about half a minute).

simulate -> train -> sensitivity (Hes + KL) -> allocate -> NAS ->
quantize -> evaluate -> report, with content-hashed stage caching: run
it twice and the second pass skips everything.

The desk-scale recipe is `quantsep pipeline --config configs/desk.json`.
"""

import os

import quantsep.config as cfgmod
from quantsep.pipeline import Pipeline

cfg = cfgmod.from_dict({
    "stft": {"n_fft": 128, "win_length": 128, "hop": 64},
    "array": {"positions": [0.0, 0.08], "pairs": [[0, 1]]},
    "mixgen": {"n_scenes": 16, "n_samples": 4160, "seed": 5},
    "model": {"tcn_blocks": 1, "convs_per_block": 2, "bottleneck": 12, "hidden": 16},
    "train": {"steps": 60, "batch_size": 2, "seed": 0},
    "sensitivity": {"m": 1, "probe_scenes": 1},
    "alloc": {"budgets": [4.0]},
    "nas": {"steps": 8, "batch_size": 1, "probe_scenes": 2, "max_rounds": 2},
    "eval": {"timing_runs": 1},
})

out = os.path.join("runs", "demo_pipeline")
summary = Pipeline(cfg, out).run_all()
print()
print("stage cache keys recorded in run.json;"
      f" config hash {summary['config_hash'][:12]}...")
print()
with open(os.path.join(out, "report", "comparison.csv")) as f:
    for line in f.read().splitlines():
        cells = line.split(",")
        print(f"{cells[0]:<12}" + "".join(f"{c:>12}" for c in cells[2:9]))
print()
print("running again (everything cached):")
Pipeline(cfg, out).run_all()
