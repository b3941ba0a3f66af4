"""Trainer tests on small synthetic blobs (fast, no file I/O)."""

import numpy as np
import pytest

from ibnlab.data import Dataset, ImbalanceSpec, SplitBundle
from ibnlab.layers import Mode, build_fc_model
from ibnlab.tensor import ShapeError, Tensor
from ibnlab.train import (
    RESULT_COLUMNS,
    ExperimentConfig,
    OptimizerState,
    TrainingDivergedError,
    build_model,
    config_from_dict,
    config_hash,
    evaluate,
    run_experiment,
    run_id,
    run_single,
    sgd_step,
    train,
)


def blob_dataset(n_per_class, seed=0, noise=0.05, side=28):
    """Two linearly separable pixel-pattern classes."""
    rng = np.random.default_rng(seed)
    half = side // 2
    means = np.zeros((2, 1, side, side))
    means[0, 0, :half] = 0.8
    means[1, 0, half:] = 0.8
    labels = np.repeat([0, 1], n_per_class)
    images = means[labels] + rng.normal(0.0, noise, (2 * n_per_class, 1, side, side))
    return Dataset(np.clip(images, 0.0, 1.0), labels, ["0", "1"])


def blob_bundle(n_train=64, n_eval=32, seed=0):
    return SplitBundle(
        train=blob_dataset(n_train, seed=seed),
        val=blob_dataset(n_eval, seed=seed + 1),
        test=blob_dataset(n_eval, seed=seed + 2),
        class_map={0: 0, 1: 1},
    )


def blob_source(per_class=260, seed=0):
    """A larger pool the split builder can carve from (labels 0 and 1)."""
    return blob_dataset(per_class, seed=seed)


def tiny_config(**overrides):
    base = dict(
        label="toy",
        imbalance=ImbalanceSpec([0], [1], 100, 0.1, val_fraction=0.1, test_per_class=40),
        epochs=2,
        batch_size=16,
        seed=0,
    )
    base.update(overrides)
    return ExperimentConfig(**base)


class TestSgdStep:
    def make(self, value):
        return [Tensor(np.array(value))]

    def test_vanilla_descent(self):
        p = self.make([1.0, 2.0])
        state = OptimizerState(0.1, 0.0, 0.0)
        sgd_step(p, [Tensor(np.array([1.0, 1.0]))], state)
        np.testing.assert_array_equal(p[0].data, [0.9, 1.9])

    def test_zero_gradient_no_move(self):
        p = self.make([3.0])
        sgd_step(p, [Tensor(np.array([0.0]))], OptimizerState(0.1, 0.0, 0.0))
        np.testing.assert_array_equal(p[0].data, [3.0])

    def test_two_step_momentum_recurrence(self):
        # v1 = -0.1, p1 = 0.9; v2 = 0.9*(-0.1) - 0.1 = -0.19, p2 = 0.71
        p = self.make([1.0])
        state = OptimizerState(0.1, 0.9, 0.0)
        g = [Tensor(np.array([1.0]))]
        sgd_step(p, g, state)
        np.testing.assert_allclose(p[0].data, [0.9])
        sgd_step(p, g, state)
        np.testing.assert_allclose(p[0].data, [0.71])

    def test_weight_decay_pulls_to_zero(self):
        p = self.make([1.0])
        sgd_step(p, [Tensor(np.array([0.0]))], OptimizerState(0.1, 0.0, 0.5))
        np.testing.assert_allclose(p[0].data, [0.95])

    def test_vanilla_equals_plain_descent_exactly(self):
        rng = np.random.default_rng(0)
        vals = rng.normal(size=7)
        grads = rng.normal(size=7)
        p = self.make(vals.copy())
        sgd_step(p, [Tensor(grads)], OptimizerState(0.05, 0.0, 0.0))
        np.testing.assert_array_equal(p[0].data, vals - 0.05 * grads)

    def test_shape_mismatch(self):
        p = self.make([1.0, 2.0])
        with pytest.raises(ShapeError):
            sgd_step(p, [Tensor(np.array([1.0]))], OptimizerState())

    def test_velocity_buffer_reuse(self):
        p = self.make([0.0])
        state = OptimizerState(1.0, 0.5, 0.0)
        g = [Tensor(np.array([1.0]))]
        sgd_step(p, g, state)
        first_buffer = state.velocities[0]
        sgd_step(p, g, state)
        assert state.velocities[0] is first_buffer

    def test_state_validation(self):
        with pytest.raises(ValueError):
            OptimizerState(learning_rate=0.0)
        with pytest.raises(ValueError):
            OptimizerState(momentum=1.0)
        with pytest.raises(ValueError):
            OptimizerState(weight_decay=-0.1)


class TestExperimentConfig:
    def test_sigmoid_needs_binary(self):
        with pytest.raises(ValueError, match="binary"):
            tiny_config(
                output="sigmoid",
                loss_kind="bce",
                imbalance=ImbalanceSpec([0, 1], [2], 100, 0.1),
            )

    def test_sigmoid_needs_bce(self):
        with pytest.raises(ValueError, match="bce"):
            tiny_config(output="sigmoid", loss_kind="cce")

    def test_strip_requires_final_bn(self):
        with pytest.raises(ValueError, match="final_bn"):
            tiny_config(final_bn=False, strip_bn_at_inference=True)

    def test_cnn_restrictions(self):
        with pytest.raises(ValueError):
            tiny_config(arch="simple_cnn", first_bn=True)
        with pytest.raises(ValueError):
            tiny_config(arch="simple_cnn", dropout=0.2)
        with pytest.raises(ValueError):
            tiny_config(arch="simple_cnn", output="sigmoid", loss_kind="bce")

    def test_unknown_fields(self):
        with pytest.raises(ValueError, match="unknown arch"):
            tiny_config(arch="transformer")
        with pytest.raises(ValueError, match="unknown config keys"):
            config_from_dict({"arch": "fc", "optimzer": "sgd"})
        with pytest.raises(ValueError, match="unknown imbalance keys"):
            config_from_dict({"imbalance": {"majority": [8]}})

    def test_dict_round_trip(self):
        cfg = tiny_config(weighted_loss=True, label_smoothing=0.1)
        again = config_from_dict(cfg.to_dict())
        assert again == cfg

    def test_hash_ignores_seed_and_label(self):
        a = tiny_config(seed=0)
        b = tiny_config(seed=99)
        c = tiny_config(label="other")
        d = tiny_config(final_bn=False)
        assert config_hash(a) == config_hash(b) == config_hash(c)
        assert config_hash(a) != config_hash(d)
        assert run_id(a) == f"toy-{config_hash(a)}-s0"

    def test_loss_tag(self):
        assert tiny_config().loss_tag() == "cce"
        assert tiny_config(weighted_loss=True).loss_tag() == "cce[wl]"
        assert (
            tiny_config(loss_kind="bce", weighted_loss=True, label_smoothing=0.1).loss_tag()
            == "bce[wl,ls=0.1]"
        )


class TestTrain:
    def test_loss_non_increasing_on_separable_blobs(self):
        bundle = blob_bundle()
        cfg = tiny_config(epochs=5, batch_size=16)
        model = build_fc_model(num_classes=2, final_bn=True, seed=0)
        model, history = train(model, bundle, cfg)
        assert len(history) == 5
        for earlier, later in zip(history, history[1:]):
            assert later <= earlier + 1e-9
        assert model.mode is Mode.INFER

    def test_epochs_zero_is_identity(self):
        bundle = blob_bundle()
        model = build_fc_model(num_classes=2, seed=1)
        before = {k: v.copy() for k, v in model.named_state().items()}
        model, history = train(model, bundle, tiny_config(epochs=0))
        assert history == []
        for k, v in model.named_state().items():
            np.testing.assert_array_equal(v, before[k])

    def test_identical_seeds_identical_parameters(self):
        def run():
            bundle = blob_bundle()
            model = build_fc_model(num_classes=2, final_bn=True, seed=3)
            model, history = train(model, bundle, tiny_config(epochs=3, seed=3))
            return history, model.named_state()

        h1, s1 = run()
        h2, s2 = run()
        assert h1 == h2
        for k in s1:
            np.testing.assert_array_equal(s1[k], s2[k])

    def test_divergence_names_epoch_and_batch(self):
        bundle = blob_bundle()
        model = build_fc_model(num_classes=2, seed=0)
        cfg = tiny_config(epochs=1, learning_rate=1e150)
        with pytest.raises(TrainingDivergedError, match="epoch 0, batch"):
            train(model, bundle, cfg)

    def test_oversized_batch_rejected(self):
        bundle = blob_bundle(n_train=8)
        model = build_fc_model(num_classes=2, seed=0)
        with pytest.raises(ValueError, match="no full batch"):
            train(model, bundle, tiny_config(epochs=1, batch_size=64))

    def test_weighted_loss_runs(self):
        bundle = blob_bundle()
        model = build_fc_model(num_classes=2, seed=0)
        _, history = train(model, bundle, tiny_config(weighted_loss=True, epochs=1))
        assert np.isfinite(history).all()


class TestEvaluate:
    def trained(self, final_bn=True, output="softmax", loss_kind="cce"):
        bundle = blob_bundle()
        cfg = tiny_config(
            epochs=2, final_bn=final_bn, output=output, loss_kind=loss_kind
        )
        model = build_fc_model(num_classes=2, final_bn=final_bn, output=output, seed=0)
        model, _ = train(model, bundle, cfg)
        return model, bundle

    def test_requires_infer_mode(self):
        model, bundle = self.trained()
        model.mode = Mode.TRAIN
        with pytest.raises(ValueError, match="Infer"):
            evaluate(model, bundle.test)

    def test_batch_stats_frozen(self):
        model, bundle = self.trained()
        before = {
            k: v.copy()
            for k, v in model.named_state().items()
            if "running" in k
        }
        assert before
        evaluate(model, bundle.test)
        after = model.named_state()
        for k, v in before.items():
            np.testing.assert_array_equal(v, after[k])

    def test_report_complete(self):
        model, bundle = self.trained()
        report = evaluate(model, bundle.test)
        assert report.num_classes == 2
        assert len(report.confidence_records) == len(bundle.test)
        assert report.f1[0] > 0.8  # separable blobs are easy

    def test_sigmoid_head_gives_two_columns(self):
        model, bundle = self.trained(output="sigmoid", loss_kind="bce")
        report = evaluate(model, bundle.test)
        probs = np.array([r.probs for r in report.confidence_records])
        assert probs.shape[1] == 2
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)

    def test_strip_without_bn_rejected(self):
        model, bundle = self.trained(final_bn=False)
        with pytest.raises(Exception, match="[Bb]atch"):
            evaluate(model, bundle.test, strip_bn=True)

    def test_chunked_equals_single_pass(self):
        model, bundle = self.trained()
        small = evaluate(model, bundle.test, batch_size=7)
        big = evaluate(model, bundle.test, batch_size=4096)
        np.testing.assert_array_equal(small.f1, big.f1)
        # matmul blocking differs with the row count, so only near-equality
        np.testing.assert_allclose(small.ece, big.ece, atol=1e-12)


class TestRunExperiment:
    def test_single_run_result(self):
        cfg = tiny_config(epochs=2)
        result = run_single(cfg, blob_source())
        assert result.run_id == run_id(cfg)
        assert len(result.history) == 2
        assert result.wall_seconds > 0
        assert result.parameter_count == build_model(cfg).parameter_count()
        rows = result.rows()
        assert len(rows) == 2
        assert list(rows[0]) == RESULT_COLUMNS
        assert rows[0]["class"] == 0 and rows[1]["class"] == 1
        assert rows[0]["loss"] == "cce"

    def test_strip_lowers_reported_parameter_count(self):
        source = blob_source()
        kept = run_single(tiny_config(epochs=1), source)
        stripped = run_single(
            tiny_config(epochs=1, strip_bn_at_inference=True), source
        )
        assert kept.parameter_count - stripped.parameter_count == 4 * 2

    def test_seed_ladder_and_std(self):
        source = blob_source()
        result = run_experiment(tiny_config(epochs=1), source, num_repeats=3)
        assert [r.seed for r in result.runs] == [0, 1, 2]
        summary = result.summary()
        f1s = np.array([r.test.f1[1] for r in result.runs])
        np.testing.assert_allclose(summary["classes"]["1"]["f1"]["mean"], f1s.mean())
        np.testing.assert_allclose(
            summary["classes"]["1"]["f1"]["std"], f1s.std(ddof=1)
        )

    def test_single_repeat_std_zero(self):
        result = run_experiment(tiny_config(epochs=1), blob_source(), num_repeats=1)
        summary = result.summary()
        assert summary["classes"]["1"]["f1"]["std"] == 0.0
        assert summary["num_runs"] == 1

    def test_deterministic_end_to_end(self):
        source = blob_source()
        a = run_single(tiny_config(epochs=2), source)
        b = run_single(tiny_config(epochs=2), source)
        assert a.history == b.history
        np.testing.assert_array_equal(a.test.f1, b.test.f1)
        assert a.test.ece == b.test.ece
