"""The full staged pipeline on the shipped smoke config.

Every stage (classifier training, attack generation, DAE training, scenario
evaluation) runs on synthetic data in well under a minute.  Running the
script a second time hits the stage cache for everything.

    python demos/03_smoke_experiment.py [out_dir]
"""

import json
import sys
from pathlib import Path

from ensemble_dae.harness.config import shipped_config
from ensemble_dae.harness.pipeline import run_experiment

out = Path(sys.argv[1] if len(sys.argv) > 1 else "runs/smoke")
summary = run_experiment(shipped_config("smoke"), out, seed=0)
print(f"computed {len(summary.misses)} stages, reused {len(summary.hits)} from cache")
print((out / "report.md").read_text())

results = json.loads((out / "results.json").read_text())
for sc in results["scenarios"]:
    pi = sc["percent_increase"]
    print(f"{sc['name']}: p = {sc['p']['value']:+.3f}, "
          f"percent increase {'undefined' if pi is None else format(pi['value'], '+.1f') + '%'}")
