"""Training a denoising autoencoder on an ensemble of attack noise.

Two classifiers with different widths stand in for two architectures.  The
DAE learns to map clean and attacked images back to the clean original, using
FGS and DeepFool noise crafted on both models.  Afterwards we compare the
victim's accuracy on fresh FGS examples with and without the DAE in front.

    python demos/02_ensemble_defense.py
"""

from ensemble_dae.attacks import AttackConfig, fgs_attack
from ensemble_dae.datasets import make_synthetic
from ensemble_dae.defense import DefenseEnsembleConfig, dae_generator, test_time_defense
from ensemble_dae.evaluation import accuracy_improvement
from ensemble_dae.nn import TrainConfig, build_model, count_correct, fc_spec, get_preset, train

data = make_synthetic(1400, seed=1)
train_set, test_set = data.head(1200), data.subset(slice(1200, 1400))

victim = build_model(fc_spec("victim", [100, 100]), seed=0)
helper = build_model(fc_spec("helper", [200]), seed=1)
for model in (victim, helper):
    train(model, train_set, TrainConfig(epochs=8, batch_size=50, lr=0.003))

cfg = DefenseEnsembleConfig(
    list_attack_alg=[AttackConfig("fgs", epsilon=2.5), AttackConfig("deepfool", max_iterations=20)],
    list_w_model=[victim, helper],
    dae_spec=get_preset("mnist-dae"),
    train=TrainConfig("mse", "adam", 0.001, 100, 10),
)
dae, tset, history, batches = dae_generator(train_set.images, train_set.labels, cfg, return_details=True)
print(f"{len(tset)} training pairs from {len(batches)} attack batches "
      f"(clean copy plus one per algorithm and model)")
print(f"DAE loss {history[0]['loss']:.4f} -> {history[-1]['loss']:.4f}")

n = len(test_set)
attacked = fgs_attack(victim, test_set.images, test_set.labels, AttackConfig("fgs", epsilon=2.5))
pre = count_correct(victim, attacked.perturbed, test_set.labels) / n
post = count_correct(victim, test_time_defense(dae, attacked.perturbed), test_set.labels) / n
clean_post = count_correct(victim, test_time_defense(dae, test_set.images), test_set.labels) / n
print(f"accuracy under attack: {pre:.3f} without the DAE, {post:.3f} with it "
      f"(improvement {accuracy_improvement(post, pre):+.3f})")
print(f"clean accuracy behind the DAE: {clean_post:.3f}")
