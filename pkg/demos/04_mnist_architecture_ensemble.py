"""Architecture-ensemble DAE on MNIST at desk scale.

Runs the shipped ``mnist-ensemble`` config: FC and CNN victims and
adversaries, DAEs trained on FGS noise from one architecture or from both,
and attacks crafted on the adversary of each type.  Expect roughly half an
hour per seed on one core; stages are cached, so reruns are quick.

    python demos/04_mnist_architecture_ensemble.py /path/to/mnist [seed]
"""

import json
import sys
from pathlib import Path

from ensemble_dae.harness.config import shipped_config
from ensemble_dae.harness.pipeline import run_experiment

mnist_dir = sys.argv[1] if len(sys.argv) > 1 else "/root/data/mnist"
seed = int(sys.argv[2]) if len(sys.argv) > 2 else 0
out = Path(f"runs/mnist-ensemble-seed{seed}")

run_experiment(shipped_config("mnist-ensemble"), out, seed=seed, mnist_dir=mnist_dir)
results = json.loads((out / "results.json").read_text())

for name, m in results["models"].items():
    print(f"{name:>14}: clean accuracy {m['clean_test_accuracy']['value']:.4f}")
print()
for sc in results["scenarios"]:
    print(f"{sc['name']} (pre-defense accuracy {sc['pre_accuracy']['value']:.3f})")
    for label, d in sc["defenses"].items():
        role = "proposed" if label == sc["proposed"] else "baseline"
        print(f"    {label:>16} [{role}] post {d['post_accuracy']['value']:.3f}, "
              f"improvement {d['improvement']['value']:+.3f}")
    if sc["percent_increase"] is not None:
        print(f"    percent increase over baselines: {sc['percent_increase']['value']:+.1f}%")
    if sc["flags"]:
        print(f"    flags: {', '.join(sc['flags'])}")
