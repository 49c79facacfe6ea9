"""Pseudo-labeling, the stream loop, and the exact coordinate-descent mode."""

import math

import numpy as np
import pytest

import sst
from sst.errors import DivergenceError, ShapeError, ValidationError


def gauss(n, c=3, d=6, sep=6.0, seed=31):
    return sst.synthesize(sst.SynthSpec(
        kind="gaussian_mixture", num_classes=c, dim=d, num_samples=n,
        separation=sep, seed=seed,
    ))


def cfg(epochs=4, **over):
    base = dict(total_epochs=epochs, batch_size=32, seed=7)
    base.update(over)
    return sst.TrainConfig(**base)


def stream_fixture(t=2, slice_rows=300):
    labeled = sst.few_shot_sample(gauss(600, seed=40), 8, seed=41)
    pool = gauss(t * slice_rows + 50, seed=42)
    slices = sst.make_stream(pool, [slice_rows] * t, seed=43)
    names = ["linear", "mlp8", "mlp16", "mlp32"][: t + 1]
    schedule = sst.schedule_from_names(names, labeled.dim, labeled.num_classes)
    eval_set = gauss(500, seed=44)
    return labeled, slices, schedule, eval_set


class TestPseudoLabel:
    def test_matches_predict(self):
        ds = gauss(200)
        m = sst.init_model(sst.HypothesisSpec("mlp", 6, 3, (8,)), seed=1)
        sl = sst.UnlabeledSlice(ds.features, 3, "pool")
        out = sst.pseudo_label(m, sl)
        assert np.array_equal(out.pseudo_labels, sst.predict(m, ds.features))
        assert out.source_slice_index == 3
        assert out.labeler_fingerprint == sst.model_fingerprint(m)
        assert out.labels is out.pseudo_labels

    def test_constant_model_labels_class_zero(self):
        spec = sst.HypothesisSpec("linear", 4, 5)
        m = sst.Model(spec, (np.zeros((4, 5)),), (np.zeros(5),))
        sl = sst.UnlabeledSlice(np.random.default_rng(0).normal(size=(50, 4)))
        assert np.all(sst.pseudo_label(m, sl).pseudo_labels == 0)

    def test_each_label_minimizes_per_row_loss(self):
        ds = gauss(120)
        m = sst.init_model(sst.HypothesisSpec("mlp", 6, 3, (8,)), seed=2)
        out = sst.pseudo_label(m, sst.UnlabeledSlice(ds.features))
        logits = sst.forward(m, ds.features)
        for i in range(ds.num_rows):
            row_losses = [
                -math.log(sst.softmax(logits[i : i + 1])[0, c]) for c in range(3)
            ]
            assert row_losses[out.pseudo_labels[i]] == min(row_losses)

    def test_worker_count_does_not_change_labels(self, monkeypatch):
        ds = gauss(10_000)  # several chunks
        m = sst.init_model(sst.HypothesisSpec("mlp", 6, 3, (16,)), seed=3)
        sl = sst.UnlabeledSlice(ds.features)
        monkeypatch.setenv("SST_THREADS", "1")
        serial = sst.pseudo_label(m, sl).pseudo_labels
        monkeypatch.setenv("SST_THREADS", "4")
        threaded = sst.pseudo_label(m, sl).pseudo_labels
        assert np.array_equal(serial, threaded)

    def test_dim_mismatch(self):
        m = sst.init_model(sst.HypothesisSpec("linear", 6, 3), seed=0)
        with pytest.raises(ShapeError):
            sst.pseudo_label(m, sst.UnlabeledSlice(np.zeros((5, 7))))


class TestJointObjective:
    def test_uniform_model_gives_row_count_times_log_c(self):
        labeled = gauss(40)
        pseudo = sst.pseudo_label(
            sst.Model(sst.HypothesisSpec("linear", 6, 3), (np.zeros((6, 3)),), (np.zeros(3),)),
            sst.UnlabeledSlice(gauss(25, seed=9).features),
        )
        m = sst.Model(sst.HypothesisSpec("linear", 6, 3), (np.zeros((6, 3)),), (np.zeros(3),))
        got = sst.joint_objective(m, labeled, pseudo)
        assert math.isclose(got, (40 + 25) * math.log(3.0), rel_tol=1e-12)
        assert math.isclose(sst.joint_objective(m, labeled), 40 * math.log(3.0), rel_tol=1e-12)

    def test_argmax_labels_minimize_over_labelings(self):
        m = sst.init_model(sst.HypothesisSpec("linear", 6, 3), seed=5)
        labeled = gauss(30)
        sl = sst.UnlabeledSlice(gauss(80, seed=10).features)
        best = sst.pseudo_label(m, sl)
        rng = np.random.default_rng(6)
        for _ in range(5):
            other = sst.PseudoLabeledDataset(
                sl.features, rng.integers(0, 3, 80).astype(np.int32), 3, 1, 0
            )
            assert sst.joint_objective(m, labeled, best) <= sst.joint_objective(m, labeled, other) + 1e-9


class TestStreamLearning:
    def test_bookkeeping(self):
        labeled, slices, schedule, eval_set = stream_fixture(t=2)
        model, report = sst.stream_learning(
            labeled, slices, schedule, cfg(), [cfg(), cfg()], cfg(epochs=3), eval_set,
        )
        assert [r.t for r in report.records] == [0, 1, 2]
        assert report.records[0].slice_size == 0
        assert [r.slice_size for r in report.records[1:]] == [300, 300]
        assert [r.hypothesis for r in report.records] == list(schedule)
        assert all(r.wall_seconds == 0.0 for r in report.records)
        assert report.final is report.records[-1]
        assert report.seed == 7  # falls back to init config seed
        assert model.spec == schedule[2]

    def test_zero_iteration_run_is_plain_learn(self):
        labeled, _, _, eval_set = stream_fixture(t=2)
        schedule = sst.CapacitySchedule((sst.HypothesisSpec("linear", 6, 3),))
        model, report = sst.stream_learning(
            labeled, [], schedule, cfg(), [], cfg(), eval_set,
        )
        direct, _ = sst.learn(schedule[0], labeled, cfg())
        assert sst.model_fingerprint(model) == sst.model_fingerprint(direct)
        assert len(report.records) == 1

    def test_slice_count_must_match_schedule(self):
        labeled, slices, schedule, eval_set = stream_fixture(t=2)
        with pytest.raises(ValidationError, match="slices"):
            sst.stream_learning(
                labeled, slices[:1], schedule, cfg(), [cfg()], cfg(), eval_set,
            )
        with pytest.raises(ValidationError, match="pretrain"):
            sst.stream_learning(
                labeled, slices, schedule, cfg(), [cfg()], cfg(), eval_set,
            )

    def test_each_slice_labeled_by_previous_model(self):
        labeled, slices, schedule, eval_set = stream_fixture(t=2)
        seen = []
        sst.stream_learning(
            labeled, slices, schedule, cfg(), [cfg(), cfg()], cfg(epochs=3), eval_set,
            on_iteration=lambda rec, model, pseudo: seen.append(
                (rec.t, sst.model_fingerprint(model),
                 None if pseudo is None else pseudo.labeler_fingerprint)
            ),
        )
        assert [t for t, _, _ in seen] == [0, 1, 2]
        assert seen[0][2] is None
        # slice t was labeled by the model finished at t-1
        assert seen[1][2] == seen[0][1]
        assert seen[2][2] == seen[1][1]

    def test_resume_is_bit_exact(self):
        labeled, slices, schedule, eval_set = stream_fixture(t=3)
        pre = [cfg(seed=70), cfg(seed=71), cfg(seed=72)]
        snapshots = {}
        full_model, full_report = sst.stream_learning(
            labeled, slices, schedule, cfg(), pre, cfg(epochs=3), eval_set,
            on_iteration=lambda rec, model, pseudo: snapshots.__setitem__(rec.t, model),
        )
        for stop_t in (0, 1, 2):
            resumed_model, resumed_report = sst.stream_learning(
                labeled, slices, schedule, cfg(), pre, cfg(epochs=3), eval_set,
                resume=(snapshots[stop_t], full_report.records[: stop_t + 1]),
            )
            assert sst.model_fingerprint(resumed_model) == sst.model_fingerprint(full_model)
            assert resumed_report.records == full_report.records

    def test_divergence_names_iteration(self):
        labeled, slices, schedule, eval_set = stream_fixture(t=2)
        with pytest.raises(DivergenceError) as exc:
            sst.stream_learning(
                labeled, slices, schedule, cfg(),
                [cfg(initial_lr=1e12, epochs=60), cfg()], cfg(), eval_set,
            )
        assert exc.value.iteration == 1
        assert "stream iteration 1" in str(exc.value)

    def test_timing_collection_opt_in(self):
        labeled, slices, schedule, eval_set = stream_fixture(t=2)
        _, report = sst.stream_learning(
            labeled, slices, schedule, cfg(epochs=1), [cfg(epochs=1)] * 2,
            cfg(epochs=1), eval_set, collect_timing=True,
        )
        assert all(r.wall_seconds > 0.0 for r in report.records)


class TestNoStreamingRun:
    def test_pools_everything_into_one_iteration(self):
        labeled, slices, schedule, eval_set = stream_fixture(t=2)
        model, report = sst.no_streaming_run(
            labeled, slices, schedule[0], schedule[2],
            cfg(), cfg(), cfg(epochs=3), eval_set,
        )
        assert [r.t for r in report.records] == [0, 1]
        assert report.records[1].slice_size == 600
        assert report.records[1].hypothesis == schedule[2]
        assert model.spec == schedule[2]

    def test_requires_slices(self):
        labeled, _, schedule, eval_set = stream_fixture(t=2)
        with pytest.raises(ValidationError):
            sst.no_streaming_run(
                labeled, [], schedule[0], schedule[2], cfg(), cfg(), cfg(), eval_set,
            )


class TestExactCoordinateDescent:
    def run(self, iterations=6, sep=7.0):
        labeled = sst.few_shot_sample(gauss(400, sep=sep, seed=50), 10, seed=51)
        sl = sst.UnlabeledSlice(gauss(150, sep=sep, seed=52).features)
        spec = sst.HypothesisSpec("linear", 6, 3)
        return sst.exact_cd_run(labeled, sl, spec, iterations, cfg(epochs=10))

    def test_trace_shape(self):
        trace = self.run(iterations=4)
        assert len(trace.objectives) == 8  # post-z and post-F per iteration
        assert len(trace.label_changes) == 4
        assert trace.label_changes[0] == 0

    def test_monotone_descent(self):
        trace = self.run()
        obj = np.array(trace.objectives)
        rel = np.diff(obj) / np.maximum(1.0, np.abs(obj[:-1]))
        assert np.all(rel <= 1e-6)

    def test_reaches_label_fixed_point(self):
        trace = self.run(iterations=8)
        k = trace.fixed_point_iteration()
        assert k is not None and k <= 8
        # once settled, later z-steps stay settled on this data
        assert all(d == 0 for d in trace.label_changes[k - 1:])

    def test_rejects_nonlinear_and_bad_iterations(self):
        labeled = gauss(30)
        sl = sst.UnlabeledSlice(gauss(20, seed=60).features)
        with pytest.raises(ValidationError, match="linear"):
            sst.exact_cd_run(labeled, sl, sst.HypothesisSpec("mlp", 6, 3, (8,)), 3, cfg())
        with pytest.raises(ValidationError):
            sst.exact_cd_run(labeled, sl, sst.HypothesisSpec("linear", 6, 3), 0, cfg())
