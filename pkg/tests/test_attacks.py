import numpy as np
import pytest

from ensemble_dae.attacks import (
    AttackConfig,
    cw_attack,
    deepfool_attack,
    fgs_attack,
    generate_attack_suite,
    l2_norms,
    run_attack,
)
from ensemble_dae.autodiff import Graph, loss_eval
from ensemble_dae.errors import AttackError, ConfigurationError, ContractError
from ensemble_dae.nn import build_model, fc_spec

from conftest import linear_model


def two_class_toy(t=0.5, k=1.0):
    """1-D input, Z0 = k (t - x), Z1 = -Z0, eight dead logits at -100."""
    w = np.zeros((1, 10))
    b = np.full(10, -100.0)
    w[0, 0], b[0] = -k, k * t
    w[0, 1], b[1] = k, -k * t
    return linear_model(w, b, "toy")


def surrogate(model, x, y):
    out = []
    for xi, yi in zip(x, y):
        g = Graph()
        z = model.forward(g, g.tensor(xi[None])).logits
        out.append(float(loss_eval("cw_surrogate", z, np.array([yi])).values))
    return np.array(out)


class TestConfig:
    def test_epsilon_must_be_positive(self):
        with pytest.raises(ContractError):
            AttackConfig("fgs", epsilon=0.0)

    def test_unknown_algorithm(self):
        with pytest.raises(ConfigurationError):
            AttackConfig("pgd")

    @pytest.mark.parametrize("field", ["max_iterations", "binary_search_steps", "cw_max_iterations"])
    def test_counts_at_least_one(self, field):
        with pytest.raises(ContractError):
            AttackConfig("cw", **{field: 0})

    def test_initial_const_positive(self):
        with pytest.raises(ContractError):
            AttackConfig("cw", initial_const=0.0)

    def test_dict_keeps_relevant_fields(self):
        d = AttackConfig("fgs", epsilon=1.5).to_dict()
        assert d == {"algorithm": "fgs", "epsilon": 1.5, "clip": False, "seed": 0}
        assert AttackConfig.from_dict(d) == AttackConfig("fgs", epsilon=1.5)


class TestFgs:
    def test_norm_equals_epsilon(self, small_fc, synthetic):
        batch = fgs_attack(small_fc, synthetic.images[:50], synthetic.labels[:50], AttackConfig("fgs", epsilon=2.5))
        assert np.abs(batch.norms - 2.5).max() < 1e-6
        assert np.abs(l2_norms(batch.perturbed - batch.clean) - batch.norms).max() < 1e-9
        assert not batch.flags.any()

    def test_direction_is_normalised_gradient(self):
        # for a linear softmax model the loss gradient is W (p - onehot)
        w = np.array([[1.0, -1.0] + [0.0] * 8, [0.5, 0.5] + [0.0] * 8])
        model = linear_model(w, np.zeros(10))
        x = np.array([[0.2, 0.4]])
        z = x @ w
        p = np.exp(z - z.max())
        p /= p.sum()
        grad = w @ (p[0] - np.eye(10)[0])
        batch = fgs_attack(model, x, [0], AttackConfig("fgs", epsilon=0.3))
        assert np.allclose(batch.perturbed[0], x[0] + 0.3 * grad / np.linalg.norm(grad), atol=1e-12)

    def test_zero_gradient_flag(self):
        model = linear_model(np.zeros((4, 10)), np.zeros(10))
        x = np.random.default_rng(0).random((3, 4))
        # uniform softmax still has a non-zero gradient unless the kernel is zero
        batch = fgs_attack(model, x, [0, 1, 2], AttackConfig("fgs", epsilon=1.0))
        assert batch.flags.all()
        assert np.array_equal(batch.perturbed, x)

    def test_tiny_gradient_still_normalised(self):
        # a confident linear model: softmax mass off the true class is about e^-40
        w = np.zeros((3, 10))
        w[:, 0] = [20.0, 10.0, 10.0]
        model = linear_model(w, np.zeros(10))
        x = np.array([[1.0, 1.0, 1.0]])
        batch = fgs_attack(model, x, [0], AttackConfig("fgs", epsilon=1.5))
        assert not batch.flags.any()
        assert batch.norms[0] == pytest.approx(1.5, abs=1e-12)
        # the direction is minus the true-class weights
        assert np.allclose(batch.perturbed[0] - x[0], -1.5 * w[:, 0] / np.linalg.norm(w[:, 0]))

    def test_clipping(self, small_fc, synthetic):
        batch = fgs_attack(small_fc, synthetic.images[:20], synthetic.labels[:20],
                           AttackConfig("fgs", epsilon=5.0, clip=True))
        assert batch.perturbed.min() >= 0 and batch.perturbed.max() <= 1

    def test_larger_epsilon_hurts_more(self, small_fc, synthetic):
        x, y = synthetic.images, synthetic.labels
        rates = [fgs_attack(small_fc, x, y, AttackConfig("fgs", epsilon=e)).success_rate for e in (0.5, 2.0, 4.0)]
        assert rates[0] <= rates[1] + 0.02 and rates[1] <= rates[2] + 0.02


class TestDeepFool:
    def test_linear_oracle(self):
        # Z0 = w.x + b, Z1 = 0; one step of |f'| / ||w'|| scaled by the overshoot
        rng = np.random.default_rng(1)
        wv = rng.normal(size=6)
        w = np.zeros((6, 10))
        w[:, 0] = wv
        b = np.full(10, -100.0)
        b[0], b[1] = 0.7, 0.0
        model = linear_model(w, b)
        x = rng.random((4, 6)) * 0.1
        d = x @ wv + 0.7
        assert (d > 0).all()
        batch = deepfool_attack(model, x, AttackConfig("deepfool", overshoot=0.02))
        expected = 1.02 * np.abs(d) / np.linalg.norm(wv)
        assert batch.iterations.tolist() == [1, 1, 1, 1]
        assert np.allclose(batch.norms, expected, rtol=1e-10)
        assert batch.success.all()

    def test_canonical_ratio_same_step_on_binary_model(self):
        w = np.zeros((3, 10))
        w[:, 0] = [1.0, 2.0, -1.0]
        b = np.full(10, -50.0)
        b[0], b[1] = 1.0, 0.0
        model = linear_model(w, b)
        x = np.array([[0.1, 0.2, 0.3]])
        a = deepfool_attack(model, x, AttackConfig("deepfool"))
        c = deepfool_attack(model, x, AttackConfig("deepfool", canonical_ratio=True))
        assert np.allclose(a.perturbed, c.perturbed)

    def test_already_misclassified(self, small_fc, synthetic):
        pred = small_fc.predict(synthetic.images[:30]).argmax(axis=1)
        wrong_label = (pred + 1) % 10
        batch = deepfool_attack(small_fc, synthetic.images[:30], AttackConfig("deepfool"), y=wrong_label)
        assert np.array_equal(batch.perturbed, batch.clean)
        assert not batch.iterations.any()

    def test_constant_logits_are_degenerate(self):
        model = linear_model(np.zeros((5, 10)), np.zeros(10))
        x = np.random.default_rng(2).random((3, 5))
        batch = deepfool_attack(model, x, AttackConfig("deepfool"))
        assert batch.flags.all()
        assert not batch.norms.any()

    def test_successes_are_misclassified(self, small_fc, synthetic):
        x, y = synthetic.images[:60], synthetic.labels[:60]
        batch = deepfool_attack(small_fc, x, AttackConfig("deepfool"), y=y)
        pred = small_fc.predict(batch.perturbed).argmax(axis=1)
        assert (pred[batch.success] != y[batch.success]).all()
        assert (batch.iterations[~batch.success & ~batch.flags] == 50).all()
        # smaller on average than the FGS budget used against the same model
        assert batch.norms.mean() < 2.5


class TestCw:
    def test_successes_have_zero_margin(self, small_fc, synthetic):
        x, y = synthetic.images[:10], synthetic.labels[:10]
        cfg = AttackConfig("cw", binary_search_steps=3, cw_max_iterations=40)
        batch = cw_attack(small_fc, x, y, cfg)
        assert batch.success.any()
        ok = batch.success
        assert not surrogate(small_fc, batch.perturbed[ok], y[ok]).any()
        assert batch.perturbed[ok].min() > 0 and batch.perturbed[ok].max() < 1
        # the reported c is the smallest successful probe
        for i in np.flatnonzero(ok):
            assert batch.const[i] == min(c for c, hit, _ in batch.probe_log[i] if hit)

    def test_fallback_returns_clean(self, small_fc, synthetic):
        cfg = AttackConfig("cw", binary_search_steps=1, cw_max_iterations=1, initial_const=1e-6, random_starts=1)
        batch = cw_attack(small_fc, synthetic.images[:5], synthetic.labels[:5], cfg)
        assert not batch.success.any()
        assert np.array_equal(batch.perturbed, batch.clean)
        assert all(log == [(1e-6, False, None)] for log in batch.probe_log)

    def test_smallest_c_matches_grid_search(self):
        model = two_class_toy()
        x = np.array([[0.2], [0.1], [0.35], [0.05]])
        y = np.zeros(4, dtype=int)
        base = dict(cw_max_iterations=200, learning_rate=0.05)

        def succeeds(c):
            return cw_attack(model, x, y, AttackConfig("cw", binary_search_steps=1, initial_const=c, **base)).success

        batch = cw_attack(model, x, y, AttackConfig("cw", binary_search_steps=8, initial_const=1.0, **base))
        assert batch.success.all()
        # first success on the power-of-two grid c0 * 2^k
        grid = [2.0 ** k for k in range(-6, 3)]
        hits = np.array([succeeds(c) for c in grid])
        c_grid = np.array([grid[hits[:, i].argmax()] for i in range(4)])
        assert (batch.const > c_grid / 2).all() and (batch.const <= c_grid).all()
        # first success on a dense 1/128 grid over (0, 1], frozen from an offline scan;
        # eight probes starting at c0 = 1 resolve c to 1/128
        dense = np.array([0.265625, 0.3671875, 0.1171875, 0.4140625])
        assert np.abs(batch.const - dense).max() <= 1 / 128
        assert succeeds(batch.const.min()).any()
        assert not succeeds(batch.const.min() - 1 / 128).any()

    def test_outputs_inside_open_interval_for_boundary_pixels(self, small_fc):
        x = np.zeros((2, 28, 28, 1))
        x[1] = 1.0
        batch = cw_attack(small_fc, x, [0, 1], AttackConfig("cw", binary_search_steps=2, cw_max_iterations=20))
        ok = batch.success
        assert (batch.perturbed[ok] > 0).all() and (batch.perturbed[ok] < 1).all()


class TestDeterminism:
    @pytest.mark.parametrize("algorithm", ["fgs", "deepfool", "cw"])
    def test_same_seed_same_perturbation(self, small_fc, synthetic, algorithm):
        cfg = AttackConfig(algorithm, cw_max_iterations=15, binary_search_steps=2, seed=7)
        x, y = synthetic.images[:12], synthetic.labels[:12]
        a, b = run_attack(small_fc, x, y, cfg), run_attack(small_fc, x, y, cfg)
        assert np.array_equal(a.perturbed, b.perturbed)


class TestSuite:
    def test_algorithm_major_order(self, small_fc, synthetic):
        other = build_model(fc_spec("other-fc", [16]), seed=1)
        cfgs = [AttackConfig("fgs", epsilon=1.0), AttackConfig("deepfool", max_iterations=3),
                AttackConfig("cw", binary_search_steps=1, cw_max_iterations=3)]
        x, y = synthetic.images[:6], synthetic.labels[:6]
        batches = generate_attack_suite([small_fc, other], cfgs, x, y)
        assert [(b.algorithm, b.source) for b in batches] == [
            (a, m) for a in ("fgs", "deepfool", "cw") for m in (small_fc.name, "other-fc")]

    def test_single_pair_matches_direct_call(self, small_fc, synthetic):
        cfg = AttackConfig("fgs", epsilon=1.5)
        x, y = synthetic.images[:10], synthetic.labels[:10]
        (batch,) = generate_attack_suite([small_fc], [cfg], x, y)
        assert np.array_equal(batch.perturbed, fgs_attack(small_fc, x, y, cfg).perturbed)

    def test_empty_lists_rejected(self, small_fc, synthetic):
        with pytest.raises(ContractError):
            generate_attack_suite([], [AttackConfig("fgs")], synthetic.images, synthetic.labels)
        with pytest.raises(ContractError):
            generate_attack_suite([small_fc], [], synthetic.images, synthetic.labels)

    def test_errors_carry_context(self, small_fc):
        with pytest.raises(AttackError, match="fgs on tiny-fc"):
            generate_attack_suite([small_fc], [AttackConfig("fgs")], np.zeros((2, 5)), [0, 1])
