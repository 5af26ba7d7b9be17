"""Three gradient attacks against one small classifier.

A fully connected net is trained on synthetic seven-segment digits, then
attacked with FGS, DeepFool and CW.  The printout compares success rates and
perturbation sizes, and an image grid (clean row on top, one row per attack)
is written next to this script.

    python demos/01_three_attacks.py
"""

from pathlib import Path

import numpy as np

from ensemble_dae.attacks import AttackConfig, run_attack
from ensemble_dae.datasets import make_synthetic
from ensemble_dae.harness.images import dump_images
from ensemble_dae.nn import TrainConfig, build_model, evaluate_accuracy, fc_spec, train

data = make_synthetic(1200, seed=0)
train_set, test_set = data.head(1000), data.subset(slice(1000, 1200))

model = build_model(fc_spec("demo-fc", [100, 100]), seed=0)
train(model, train_set, TrainConfig(epochs=10, batch_size=50, lr=0.003))
print(f"clean test accuracy {evaluate_accuracy(model, test_set):.3f}")

x, y = test_set.images[:50], test_set.labels[:50]
configs = [
    AttackConfig("fgs", epsilon=2.5),
    AttackConfig("deepfool"),
    # a trimmed version of the MNIST search budget keeps the demo short
    AttackConfig("cw", binary_search_steps=4, cw_max_iterations=60, learning_rate=0.1),
]
batches = []
for cfg in configs:
    batch = run_attack(model, x, y, cfg)
    batches.append(batch)
    print(f"{cfg.algorithm:>8}: success {batch.success_rate:.2f}, "
          f"mean l2 {batch.norms.mean():.3f}, max l2 {batch.norms.max():.3f}")

# FGS spends its whole budget on every sample; DeepFool and CW stop at the boundary
assert np.allclose(batches[0].norms, 2.5)

out = dump_images(batches, Path(__file__).with_name("three_attacks.pgm"), n=8)
print(f"wrote {out}")
