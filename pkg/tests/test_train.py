import numpy as np
import pytest

from m4mil import data, model, train
from m4mil.autodiff import Tensor
from m4mil.errors import (
    AUCUndefinedError,
    ConfigError,
    ShapeError,
    TrainingDivergedError,
)
from m4mil.model import ModelConfig
from m4mil.train import Adam, TrainConfig


def brute_force_auc(scores, labels):
    """Independent oracle: count winning pairs, ties worth half."""
    scores = np.asarray(scores)
    pos = scores[np.asarray(labels) == 1]
    neg = scores[np.asarray(labels) == 0]
    wins = sum(1.0 for p in pos for q in neg if p > q)
    ties = sum(0.5 for p in pos for q in neg if p == q)
    return (wins + ties) / (len(pos) * len(neg))


def tiny_dataset(seed=1, bags=40, tasks=2, strength=3.0):
    spec = data.SyntheticSpec(
        tasks=tasks,
        bags=bags,
        patch_range=(3, 6),
        d=8,
        prevalence=np.array([0.5, 0.4])[:tasks],
        latent_dim=2,
        task_loadings=np.array([[1.0, 0.0], [0.7, 0.5]])[:tasks],
        signal_fraction=0.5,
        signal_strength=strength,
        noise_sd=0.3,
        seed=seed,
    )
    return data.generate_synthetic(spec)


def tiny_model_config(**overrides):
    kwargs = dict(d=8, tasks=2, d_f=8, d_1=8, attn_width=4, experts=2,
                  tower_hidden=4, variant="M4", seed=0)
    kwargs.update(overrides)
    return ModelConfig(**kwargs)


class TestAdam:
    def test_first_step_is_signed_learning_rate(self):
        p = Tensor(np.array([[1.0, -2.0, 3.0]]), requires_grad=True)
        p.grad = np.array([[0.5, -0.25, 1.0]])
        before = p.values.copy()
        opt = Adam([p], lr=0.1)
        opt.step()
        # m_hat = g and v_hat = g*g on the first step, so the move is -lr*sign(g)
        assert np.allclose(p.values - before, -0.1 * np.sign(p.grad), atol=1e-6)

    def test_zero_gradient_is_noop_but_advances_time(self):
        p = Tensor(np.array([[2.0]]), requires_grad=True)
        opt = Adam([p], lr=0.1)
        p.grad = np.zeros((1, 1))
        opt.step()
        assert opt.t == 1
        assert p.values[0, 0] == 2.0

    def test_absent_gradient_is_noop_for_any_state(self):
        p = Tensor(np.array([[1.0]]), requires_grad=True)
        opt = Adam([p], lr=0.1)
        for _ in range(5):  # warm the moments
            p.grad = np.array([[0.3]])
            opt.step()
        moved = p.values.copy()
        m_before, v_before = opt.m.copy(), opt.v.copy()
        p.grad = None
        opt.step()
        assert np.array_equal(p.values, moved)
        assert np.array_equal(opt.m, m_before)
        assert np.array_equal(opt.v, v_before)

    def test_quadratic_converges(self):
        theta = Tensor(np.array([[1.0]]), requires_grad=True)
        opt = Adam([theta], lr=0.1)
        for _ in range(200):
            theta.grad = 2.0 * theta.values
            opt.step()
        assert abs(theta.values[0, 0]) < 0.05

    def test_gradient_shape_mismatch(self):
        p = Tensor(np.zeros((2, 2)), requires_grad=True)
        p.grad = np.zeros((2, 3))
        with pytest.raises(ShapeError):
            Adam([p]).step()


class TestTrain:
    def test_same_seed_gives_bitwise_identical_trajectories(self):
        bags, _ = tiny_dataset()
        runs = []
        for _ in range(2):
            m = model.build(tiny_model_config())
            runs.append(train.train(m, bags, TrainConfig(lr=1e-3, epochs=3, seed=4)))
        assert runs[0] == runs[1]

    def test_different_seeds_differ(self):
        bags, _ = tiny_dataset()
        trajectories = []
        for seed in (4, 5):
            m = model.build(tiny_model_config())
            trajectories.append(train.train(m, bags, TrainConfig(lr=1e-3, epochs=2, seed=seed)))
        assert trajectories[0] != trajectories[1]

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_loss_decreases_on_separable_data(self, seed):
        bags, _ = tiny_dataset(seed=seed)
        m = model.build(tiny_model_config(seed=seed))
        losses = train.train(m, bags, TrainConfig(lr=1e-4, epochs=30, seed=seed))
        assert losses[-1] < losses[0]

    def test_first_fifty_steps_reduce_loss(self):
        # 10 bags x 5 epochs = 50 optimiser steps
        bags, _ = tiny_dataset(bags=10)
        m = model.build(tiny_model_config())
        losses = train.train(m, bags, TrainConfig(lr=1e-4, epochs=5, seed=0))
        assert losses[-1] < losses[0]

    def test_zero_learning_rate_freezes_parameters(self):
        bags, _ = tiny_dataset(bags=8)
        m = model.build(tiny_model_config())
        before = [t.values.copy() for t in m.parameters()]
        train.train(m, bags, TrainConfig(lr=0.0, epochs=2, seed=0))
        for prev, tensor in zip(before, m.parameters()):
            assert np.array_equal(prev, tensor.values)

    @pytest.mark.filterwarnings("ignore:invalid value")
    def test_nonfinite_loss_aborts_with_diagnostics(self):
        bags, _ = tiny_dataset(bags=6)
        m = model.build(tiny_model_config())
        m.towers[0].out_w.values[...] = np.inf
        with pytest.raises(TrainingDivergedError) as err:
            train.train(m, bags, TrainConfig(lr=1e-3, epochs=1, seed=0))
        assert err.value.epoch == 0
        assert err.value.bag_id.startswith("bag")

    def test_empty_training_set_rejected(self):
        m = model.build(tiny_model_config())
        with pytest.raises(ConfigError):
            train.train(m, [], TrainConfig(epochs=1))

    def test_epoch_and_lr_validation(self):
        with pytest.raises(ConfigError):
            TrainConfig(epochs=0)
        with pytest.raises(ConfigError):
            TrainConfig(lr=-1.0)


class TestAuc:
    def test_worked_example(self):
        assert train.auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75

    def test_perfect_ranking(self):
        assert train.auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0

    def test_all_ties_give_half(self):
        assert train.auc([0.3, 0.3, 0.3, 0.3], [0, 1, 0, 1]) == 0.5

    def test_matches_brute_force_on_random_sets_with_ties(self):
        rng = np.random.default_rng(99)
        for _ in range(200):
            m = rng.integers(4, 20)
            scores = rng.choice([0.1, 0.25, 0.5, 0.7, 0.9], size=m)  # coarse grid forces ties
            labels = rng.integers(0, 2, size=m)
            if labels.min() == labels.max():
                labels[0] = 1 - labels[0]
            assert train.auc(scores, labels) == pytest.approx(
                brute_force_auc(scores, labels), abs=1e-12
            )

    def test_invariant_under_increasing_transforms(self):
        rng = np.random.default_rng(3)
        scores = rng.uniform(-2, 2, 30)
        labels = rng.integers(0, 2, 30)
        labels[0], labels[1] = 0, 1
        base = train.auc(scores, labels)
        assert train.auc(np.exp(scores), labels) == base
        assert train.auc(3.5 * scores + 11.0, labels) == base

    def test_single_class_is_undefined(self):
        with pytest.raises(AUCUndefinedError):
            train.auc([0.1, 0.9], [1, 1])

    def test_bounds(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            scores = rng.uniform(0, 1, 12)
            labels = np.r_[np.ones(6), np.zeros(6)]
            assert 0.0 <= train.auc(scores, labels) <= 1.0


class TestEvaluateAndCrossValidate:
    def test_report_has_one_row_per_fold(self):
        bags, manifest = tiny_dataset(bags=30)
        report = train.cross_validate(
            bags, manifest.task_names, tiny_model_config(),
            TrainConfig(lr=1e-3, epochs=1, seed=0), k=3,
        )
        assert report.fold_aucs.shape == (3, 2)
        assert report.task_names == manifest.task_names

    def test_deterministic_per_seed_and_thread_safe(self):
        bags, manifest = tiny_dataset(bags=24)
        kwargs = dict(k=2)
        a = train.cross_validate(
            bags, manifest.task_names, tiny_model_config(),
            TrainConfig(lr=1e-3, epochs=1, seed=2), **kwargs,
        )
        b = train.cross_validate(
            bags, manifest.task_names, tiny_model_config(),
            TrainConfig(lr=1e-3, epochs=1, seed=2), workers=2, **kwargs,
        )
        assert np.array_equal(a.fold_aucs, b.fold_aucs)

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_high_signal_data_reaches_mean_auc(self, seed):
        spec = data.SyntheticSpec(
            tasks=2, bags=60, patch_range=(4, 8), d=16,
            prevalence=np.array([0.5, 0.4]), latent_dim=2,
            task_loadings=np.array([[1.0, 0.3], [0.3, 1.0]]),
            signal_fraction=0.5, signal_strength=2.0, noise_sd=0.5, seed=seed,
        )
        bags, manifest = data.generate_synthetic(spec)
        cfg = tiny_model_config(d=16, seed=seed)
        report = train.cross_validate(
            bags, manifest.task_names, cfg, TrainConfig(lr=1e-3, epochs=10, seed=seed), k=2
        )
        assert report.mean_auc >= 0.8

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_zero_signal_data_scores_near_chance(self, seed):
        spec = data.SyntheticSpec(
            tasks=2, bags=400, patch_range=(2, 4), d=8,
            prevalence=np.array([0.5, 0.5]), latent_dim=2,
            task_loadings=np.array([[1.0, 0.0], [0.0, 1.0]]),
            signal_fraction=0.5, signal_strength=0.0, noise_sd=0.5, seed=seed,
        )
        bags, _ = data.generate_synthetic(spec)
        cfg = tiny_model_config(experts=1, variant="AMIL_single", seed=seed)
        m = model.build(cfg)
        train.train(m, bags[:40], TrainConfig(lr=1e-3, epochs=3, seed=seed))
        aucs = train.evaluate(m, bags[40:])
        assert np.all(np.abs(aucs - 0.5) <= 0.05)

    def test_single_class_task_reported_as_skipped(self):
        bags, _ = tiny_dataset(bags=12)
        for bag in bags:
            bag.labels[1] = 1.0  # task 2 becomes single-class
        m = model.build(tiny_model_config())
        aucs = train.evaluate(m, bags)
        assert np.isnan(aucs[1]) and not np.isnan(aucs[0])

    def test_report_csv_round_trip(self, tmp_path):
        report = train.EvalReport(
            task_names=["alpha", "beta"],
            fold_aucs=np.array([[0.75, np.nan], [0.5, 0.625]]),
        )
        path = tmp_path / "report.csv"
        report.to_csv(path)
        names, values = train.read_report(path)
        assert names == ["alpha", "beta"]
        assert values[0, 0] == 0.75 and values[1, 1] == 0.625
        assert np.isnan(values[1, 0])  # fold column for the skipped cell
        assert values[0, 2] == 0.625  # mean column ignores the NaN fold
        assert report.mean_auc == pytest.approx((0.625 + 0.625) / 2)


class TestGradcheckSuite:
    SUITE_CONFIG = ModelConfig(
        d=12, tasks=2, d_f=8, d_1=8, attn_width=4, experts=2, tower_hidden=4, seed=3
    )

    def test_everything_passes_at_small_dims(self):
        checks = train.gradcheck_suite(self.SUITE_CONFIG, n_patches=6)
        assert all(c.passed for c in checks), [c.name for c in checks if not c.passed]
        names = [c.name for c in checks]
        for variant in ("AMIL_single", "MMoE_AMIL", "MMoE_MPAMIL", "M4"):
            assert f"variant:{variant}" in names
        assert "layer:mp_amil_forward[preserve]" in names
        assert "layer:mp_amil_forward[literal]" in names

    def test_corrupted_gradients_are_flagged(self):
        checks = train.gradcheck_suite(self.SUITE_CONFIG, n_patches=6, corrupt=True)
        assert any(not c.passed for c in checks)
