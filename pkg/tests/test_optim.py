"""Loss/gradient correctness, SGD mechanics, the learn/finetune loops."""

import math

import numpy as np
import pytest

import sst
import sst.optim
from sst.errors import DivergenceError, LabelRangeError, ValidationError


def blob_data(n=200, c=4, d=6, sep=8.0, seed=21):
    return sst.synthesize(sst.SynthSpec(
        kind="gaussian_mixture", num_classes=c, dim=d, num_samples=n,
        separation=sep, seed=seed,
    ))


def cfg(**over):
    base = dict(total_epochs=10, batch_size=32, seed=0)
    base.update(over)
    return sst.TrainConfig(**base)


class TestTrainConfig:
    def test_validation(self):
        with pytest.raises(ValidationError):
            cfg(total_epochs=-1)
        with pytest.raises(ValidationError):
            cfg(batch_size=0)
        with pytest.raises(ValidationError):
            cfg(initial_lr=0.0)
        with pytest.raises(ValidationError):
            cfg(momentum=1.0)
        with pytest.raises(ValidationError):
            cfg(weight_decay=-1e-4)
        with pytest.raises(ValidationError):
            cfg(decay_factor=0.0)
        with pytest.raises(ValidationError):
            cfg(decay_epochs=(12, 4))  # must be increasing
        with pytest.raises(ValidationError):
            cfg(decay_epochs=(10,))  # beyond the run

    def test_default_decay_point(self):
        # single cut at ceil(5E/6), dropped when it falls outside the run
        assert sst.default_decay_epochs(30) == (25,)
        assert sst.default_decay_epochs(20) == (17,)
        assert sst.default_decay_epochs(15) == (13,)
        assert sst.default_decay_epochs(6) == (5,)
        assert sst.default_decay_epochs(1) == ()
        assert sst.default_decay_epochs(0) == ()
        assert cfg(total_epochs=30).decay_epochs == (25,)

    def test_lr_schedule(self):
        c = cfg(total_epochs=8, initial_lr=0.1, decay_factor=10.0, decay_epochs=(2, 5))
        got = [c.lr_at(e) for e in range(8)]
        assert np.allclose(got, [0.1, 0.1, 0.01, 0.01, 0.01, 0.001, 0.001, 0.001])


class TestCrossEntropy:
    def test_uniform_logits_give_log_c(self):
        logits = np.zeros((6, 5))
        labels = np.arange(6, dtype=np.int32) % 5
        loss, _ = sst.cross_entropy(logits, labels)
        assert math.isclose(loss, math.log(5.0), abs_tol=1e-12)

    def test_two_class_literal(self):
        loss, _ = sst.cross_entropy(np.array([[0.0, 0.0]]), np.array([1], dtype=np.int32))
        assert math.isclose(loss, 0.6931471805599453, abs_tol=1e-15)

    def test_stable_under_large_shift(self):
        logits = np.array([[500.0, 0.0], [-500.0, 0.0]])
        labels = np.array([0, 1], dtype=np.int32)
        loss, grad = sst.cross_entropy(logits, labels)
        assert np.isfinite(loss) and np.all(np.isfinite(grad))
        assert loss < 1e-6

    def test_gradient_matches_finite_difference(self):
        rng = np.random.default_rng(3)
        logits = rng.normal(size=(5, 4))
        labels = rng.integers(0, 4, size=5).astype(np.int32)
        _, grad = sst.cross_entropy(logits, labels)
        step = 1e-6
        for i in (0, 2, 4):
            for j in (0, 3):
                hi = logits.copy(); hi[i, j] += step
                lo = logits.copy(); lo[i, j] -= step
                num = (sst.cross_entropy(hi, labels)[0] - sst.cross_entropy(lo, labels)[0]) / (2 * step)
                assert abs(num - grad[i, j]) < 1e-8

    def test_label_out_of_range_names_row(self):
        with pytest.raises(LabelRangeError, match="row 1"):
            sst.cross_entropy(np.zeros((3, 2)), np.array([0, 2, 1], dtype=np.int32))


class TestGradients:
    def test_linear_closed_form(self):
        ds = blob_data(n=50, c=3, d=4)
        m = sst.init_model(sst.HypothesisSpec("linear", 4, 3), seed=1)
        dws, dbs = sst.gradients(m, ds.features, ds.labels)
        p = sst.softmax(sst.forward(m, ds.features))
        onehot = np.eye(3)[ds.labels]
        resid = (p - onehot) / 50
        assert np.allclose(dws[0], ds.features.T @ resid, atol=1e-12)
        assert np.allclose(dbs[0], resid.sum(axis=0), atol=1e-12)

    def test_inactive_units_get_zero_gradient(self):
        m = sst.init_model(sst.HypothesisSpec("mlp", 3, 2, (4,)), seed=2)
        # drive one hidden unit's pre-activation hard negative for all rows
        w0 = m.weights[0].copy(); b0 = m.biases[0].copy()
        w0[:, 1] = 0.0; b0[1] = -100.0
        m = sst.Model(m.spec, (w0, m.weights[1]), (b0, m.biases[1]))
        x = np.random.default_rng(4).normal(size=(20, 3))
        y = np.random.default_rng(5).integers(0, 2, 20).astype(np.int32)
        dws, dbs = sst.gradients(m, x, y)
        assert np.all(dws[0][:, 1] == 0.0)
        assert dbs[0][1] == 0.0

    def test_mlp_matches_finite_difference(self):
        m = sst.init_model(sst.HypothesisSpec("mlp", 4, 3, (5,)), seed=6)
        x = np.random.default_rng(7).normal(size=(12, 4))
        y = np.random.default_rng(8).integers(0, 3, 12).astype(np.int32)
        assert sst.grad_check(m, x, y, step=1e-6) < 1e-5


class TestSgdStep:
    def make(self):
        m = sst.init_model(sst.HypothesisSpec("linear", 3, 2), seed=9)
        g = ((np.full((3, 2), 0.5),), (np.full(2, 0.25),))
        return m, g

    def test_momentum_accumulates(self):
        m, (gw, gb) = self.make()
        c = cfg(momentum=0.9, weight_decay=0.0, initial_lr=0.1)
        state = sst.MomentumState.zeros(m)
        m1, state = sst.sgd_step(m, (gw, gb), state, c, 0.1)
        m2, state = sst.sgd_step(m1, (gw, gb), state, c, 0.1)
        # v1 = g, v2 = 0.9 g + g; total displacement 2.9 lr g
        assert np.allclose(m.weights[0] - m2.weights[0], 2.9 * 0.1 * gw[0], atol=1e-15)
        assert np.allclose(m.biases[0] - m2.biases[0], 2.9 * 0.1 * gb[0], atol=1e-15)

    def test_decay_couples_into_velocity(self):
        m, (gw, gb) = self.make()
        zero_g = ((np.zeros((3, 2)),), (np.zeros(2),))
        c = cfg(momentum=0.9, weight_decay=1e-2, initial_lr=0.1)
        m1, _ = sst.sgd_step(m, zero_g, sst.MomentumState.zeros(m), c, 0.1)
        assert np.allclose(m1.weights[0], m.weights[0] * (1 - 0.1 * 1e-2), atol=1e-15)
        assert np.allclose(m1.biases[0], m.biases[0] * (1 - 0.1 * 1e-2), atol=1e-15)

    def test_inputs_not_mutated(self):
        m, g = self.make()
        w_before = m.weights[0].copy()
        state = sst.MomentumState.zeros(m)
        v_before = state.vel_w[0].copy()
        sst.sgd_step(m, g, state, cfg(), 0.1)
        assert np.array_equal(m.weights[0], w_before)
        assert np.array_equal(state.vel_w[0], v_before)


class TestLearn:
    def test_separable_reaches_full_accuracy(self):
        ds = blob_data(n=200, sep=10.0)
        spec = sst.HypothesisSpec("linear", ds.dim, ds.num_classes)
        model, trace = sst.learn(spec, ds, cfg(total_epochs=20))
        assert sst.evaluate(model, ds).top1 == 1.0
        assert trace.epochs_run == 20
        assert len(trace.epoch_losses) == 20
        assert trace.final_loss < trace.epoch_losses[0]

    def test_capacity_separates_xor(self):
        ds = sst.synthesize(sst.SynthSpec(
            kind="xor", num_classes=2, dim=2, num_samples=400,
            separation=6.0, seed=13,
        ))
        lin, _ = sst.learn(sst.HypothesisSpec("linear", 2, 2), ds, cfg(total_epochs=30))
        mlp, _ = sst.learn(sst.HypothesisSpec("mlp", 2, 2, (8,)), ds, cfg(total_epochs=30))
        assert sst.evaluate(lin, ds).top1 <= 0.75
        assert sst.evaluate(mlp, ds).top1 >= 0.95

    def test_zero_epochs_returns_init(self):
        ds = blob_data()
        spec = sst.HypothesisSpec("linear", ds.dim, ds.num_classes)
        model, trace = sst.learn(spec, ds, cfg(total_epochs=0), seed=5)
        init = sst.init_model(spec, sst.derive(5, 0x4C52_4E49))
        assert np.array_equal(model.weights[0], init.weights[0])
        assert trace.epochs_run == 0 and trace.epoch_losses == ()

    def test_bitwise_deterministic(self):
        ds = blob_data()
        spec = sst.HypothesisSpec("mlp", ds.dim, ds.num_classes, (8,))
        a, ta = sst.learn(spec, ds, cfg(total_epochs=5, seed=3))
        b, tb = sst.learn(spec, ds, cfg(total_epochs=5, seed=3))
        assert all(np.array_equal(x, y) for x, y in zip(a.weights, b.weights))
        assert ta.epoch_losses == tb.epoch_losses
        c, _ = sst.learn(spec, ds, cfg(total_epochs=5, seed=4))
        assert not np.array_equal(a.weights[0], c.weights[0])

    def test_divergence_reports_epoch_and_lr(self):
        ds = blob_data(n=64)
        spec = sst.HypothesisSpec("mlp", ds.dim, ds.num_classes, (8,))
        with pytest.raises(DivergenceError) as exc:
            sst.learn(spec, ds, cfg(total_epochs=50, initial_lr=1e12))
        assert exc.value.epoch >= 0
        assert exc.value.lr == 1e12
        assert "lr=" in str(exc.value)

    def test_full_batch_convex_descent(self):
        ds = blob_data(n=120, sep=4.0)
        spec = sst.HypothesisSpec("linear", ds.dim, ds.num_classes)
        _, trace = sst.learn(spec, ds, cfg(
            total_epochs=40, batch_size=120, initial_lr=0.01,
            momentum=0.0, decay_epochs=(),
        ))
        diffs = np.diff(trace.epoch_losses)
        assert np.all(diffs <= 1e-9)


class TestFinetune:
    def test_zero_epochs_is_identity(self):
        ds = blob_data()
        m, _ = sst.learn(sst.HypothesisSpec("linear", ds.dim, ds.num_classes), ds, cfg(total_epochs=2))
        m2, trace = sst.finetune(m, ds, cfg(total_epochs=0))
        assert sst.model_fingerprint(m2) == sst.model_fingerprint(m)
        assert trace.epochs_run == 0

    def test_recovers_from_mislabeled_pretraining(self):
        ds = blob_data(n=400, sep=8.0)
        wrong = sst.LabeledDataset(
            ds.features, ((ds.labels + 1) % ds.num_classes).astype(np.int32),
            ds.num_classes,
        )
        spec = sst.HypothesisSpec("linear", ds.dim, ds.num_classes)
        bad, _ = sst.learn(spec, wrong, cfg(total_epochs=10))
        assert sst.evaluate(bad, ds).top1 < 0.1
        fixed, _ = sst.finetune(bad, ds, cfg(total_epochs=15))
        assert sst.evaluate(fixed, ds).top1 > 0.9

    def test_dim_mismatch_rejected(self):
        ds = blob_data(d=6)
        other = blob_data(d=5, c=4)
        m, _ = sst.learn(sst.HypothesisSpec("linear", 6, 4), ds, cfg(total_epochs=1))
        with pytest.raises(ValidationError):
            sst.finetune(m, other, cfg(total_epochs=1))


class TestGradCheck:
    def test_detects_injected_fault(self, monkeypatch):
        m = sst.init_model(sst.HypothesisSpec("mlp", 4, 3, (5,)), seed=10)
        x = np.random.default_rng(11).normal(size=(10, 4))
        y = np.random.default_rng(12).integers(0, 3, 10).astype(np.int32)
        assert sst.grad_check(m, x, y) < 1e-5

        true_gradients = sst.optim.gradients

        def broken(model, xs, ys):
            dws, dbs = true_gradients(model, xs, ys)
            dws = list(dws)
            dws[0] = dws[0] * 2.0
            return tuple(dws), dbs

        monkeypatch.setattr(sst.optim, "gradients", broken)
        assert sst.optim.grad_check(m, x, y) > 0.3
