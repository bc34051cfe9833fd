import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from crossreg import diffgraph as dg
from crossreg.model import ModelConfig, init_params
from crossreg.training import (CURVE_COLUMNS, N_TASKS, WEIGHT_MAX, WEIGHT_MIN, TaskWeights, TrainConfig,
                               TrainingError, curve_csv, curve_svg, gradnorm_update, smooth, steps_to_fraction,
                               total_loss, train, train_step)

positive = st.floats(1e-3, 1e3, allow_nan=False)


class TestTotalLoss:
    def test_examples(self):
        assert total_loss([1.0, 2.0, 3.0], [1.0, 1.0, 1.0]) == pytest.approx(6.0)
        assert total_loss([1.0, 2.0, 3.0], [0.5, 2.0, 0.0]) == pytest.approx(4.5)

    @given(st.lists(positive, min_size=3, max_size=3), st.lists(positive, min_size=3, max_size=3))
    def test_naive_oracle(self, losses, lambdas):
        assert total_loss(losses, lambdas) == pytest.approx(oracles.total(losses, lambdas), rel=1e-12)

    def test_inactive_tasks_weigh_zero(self):
        w = TaskWeights(active=[True, True, False])
        assert total_loss([1.0, 2.0, 100.0], w) == pytest.approx(3.0)

    def test_graph_nodes(self):
        g = dg.Graph()
        a, b, c = (g.param(n, np.array(v)) for n, v in (("a", 1.0), ("b", 2.0), ("c", 3.0)))
        out = total_loss([a, b, c], [2.0, 3.0, 4.0])
        assert float(out.value) == pytest.approx(20.0)
        grads = g.backward(out)
        assert (float(grads["a"]), float(grads["b"]), float(grads["c"])) == (2.0, 3.0, 4.0)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            total_loss([1.0, 2.0], [1.0, 1.0, 1.0])


class TestGradNorm:
    def test_balanced_tasks_are_a_fixed_point(self):
        w = TaskWeights(initial_losses=np.array([2.0, 4.0, 8.0]))
        out = gradnorm_update(w, [1.0, 1.0, 1.0], [1.0, 2.0, 4.0], 0.025)
        np.testing.assert_allclose(out.lambdas, 1.0, atol=1e-15)

    def test_dominant_gradient_loses_weight(self):
        w = TaskWeights(initial_losses=np.ones(3))
        out = gradnorm_update(w, [10.0, 1.0, 1.0], [1.0, 1.0, 1.0], 0.025)
        assert out.lambdas[0] < 1.0 and out.lambdas[1] > 1.0 and out.lambdas[2] > 1.0

    def test_slow_task_gains_weight(self):
        w = TaskWeights(initial_losses=np.ones(3))
        out = gradnorm_update(w, [1.0, 1.0, 1.0], [1.0, 0.5, 0.5], 0.025)
        assert out.lambdas[0] > out.lambdas[1] == pytest.approx(out.lambdas[2])

    def test_first_call_records_initial_losses(self):
        out = gradnorm_update(TaskWeights(), [1.0, 2.0, 3.0], [4.0, 5.0, 6.0], 0.025)
        np.testing.assert_array_equal(out.initial_losses, [4.0, 5.0, 6.0])

    def test_zero_gradients_leave_weights(self):
        w = TaskWeights(lambdas=[0.5, 1.5, 1.0], initial_losses=np.ones(3))
        out = gradnorm_update(w, [0.0, 0.0, 0.0], [1.0, 2.0, 3.0], 0.025)
        np.testing.assert_array_equal(out.lambdas, w.lambdas)

    def test_input_is_not_modified(self):
        w = TaskWeights(initial_losses=np.ones(3))
        gradnorm_update(w, [10.0, 1.0, 1.0], [1.0, 1.0, 1.0], 0.025)
        np.testing.assert_array_equal(w.lambdas, 1.0)

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.floats(0.0, 1e3), min_size=3, max_size=3), st.lists(positive, min_size=3, max_size=3),
           st.lists(positive, min_size=3, max_size=3), st.permutations(range(3)))
    def test_permutation_equivariance(self, g, losses, l0, perm):
        perm = list(perm)
        a = gradnorm_update(TaskWeights(initial_losses=np.array(l0)), g, losses, 0.025)
        b = gradnorm_update(TaskWeights(initial_losses=np.array(l0)[perm]), np.array(g)[perm],
                            np.array(losses)[perm], 0.025)
        np.testing.assert_allclose(a.lambdas[perm], b.lambdas, atol=1e-12)

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.lists(st.floats(0.0, 1e3), min_size=3, max_size=3), min_size=1, max_size=30),
           st.floats(1e-4, 1.0))
    def test_invariants_along_a_sequence(self, grads, step):
        w = TaskWeights()
        for i, g in enumerate(grads):
            w = gradnorm_update(w, g, [1.0 + 0.1 * i, 2.0, 3.0 / (i + 1)], step)
            # clipping precedes the rescale, so the floor can shrink by at most WEIGHT_MAX
            assert np.all(w.lambdas >= WEIGHT_MIN / WEIGHT_MAX) and np.all(w.lambdas > 0)
            assert w.lambdas.sum() == pytest.approx(N_TASKS, abs=1e-9)

    def test_inactive_task_keeps_unit_weight(self):
        w = TaskWeights(active=[True, True, False], initial_losses=np.ones(3))
        out = gradnorm_update(w, [10.0, 1.0, 5.0], [1.0, 1.0, 1.0], 0.5)
        assert out.lambdas[2] == 1.0
        assert out.lambdas[:2].sum() == pytest.approx(2.0)

    def test_clipping_bounds(self):
        w = TaskWeights(initial_losses=np.ones(3))
        for _ in range(500):
            w = gradnorm_update(w, [100.0, 1.0, 1.0], [1.0, 1.0, 1.0], 1.0)
        assert w.lambdas.min() >= WEIGHT_MIN / WEIGHT_MAX and w.lambdas.max() <= WEIGHT_MAX

    def test_validation(self):
        with pytest.raises(ValueError):
            gradnorm_update(TaskWeights(), [1.0, -1.0, 1.0], [1.0, 1.0, 1.0], 0.1)
        with pytest.raises(ValueError):
            TaskWeights(lambdas=[1.0, 0.0, 2.0])


@pytest.fixture(scope="module")
def setup(small_scene):
    cfg = ModelConfig()
    return small_scene, cfg, init_params(cfg, 0)


class TestTrainStep:
    def test_zero_learning_rate_keeps_params(self, setup):
        scene, cfg, params = setup
        new, _, report = train_step(scene, params, TaskWeights(), cfg, TrainConfig(lr=0.0), 0)
        for k in params:
            np.testing.assert_array_equal(new[k], params[k])
        assert np.isfinite(report.total) and report.total > 0

    def test_inputs_unchanged_and_params_move(self, setup):
        scene, cfg, params = setup
        before = {k: v.copy() for k, v in params.items()}
        new, _, _ = train_step(scene, params, TaskWeights(), cfg, TrainConfig(), 0)
        assert all(np.array_equal(before[k], params[k]) for k in params)
        assert any(not np.array_equal(new[k], params[k]) for k in params)

    def test_deterministic(self, setup):
        scene, cfg, params = setup
        a = train_step(scene, params, TaskWeights(), cfg, TrainConfig(seed=4), 3)
        b = train_step(scene, params, TaskWeights(), cfg, TrainConfig(seed=4), 3)
        assert a[2] == b[2]
        assert all(np.array_equal(a[0][k], b[0][k]) for k in params)

    def test_update_is_linear_in_learning_rate(self, setup):
        scene, cfg, params = setup
        # no clipping so the step is exactly lr times the weighted gradient
        d1, _, _ = train_step(scene, params, TaskWeights(), cfg, TrainConfig(lr=1e-3, clip_norm=0.0), 0)
        d2, _, _ = train_step(scene, params, TaskWeights(), cfg, TrainConfig(lr=2e-3, clip_norm=0.0), 0)
        for k in params:
            np.testing.assert_allclose(d2[k] - params[k], 2 * (d1[k] - params[k]), rtol=1e-9, atol=1e-15)

    def test_report_total_matches_weighted_sum(self, setup):
        scene, cfg, params = setup
        w = TaskWeights(lambdas=[0.5, 1.5, 1.0])
        _, _, r = train_step(scene, params, w, cfg, TrainConfig(), 0)
        assert r.total == pytest.approx(oracles.total([r.contrast, r.match, r.proj], [0.5, 1.5, 1.0]))
        assert r.match == pytest.approx(r.coarse + r.fine)

    def test_disabled_tasks_report_zero(self, setup):
        scene, cfg, params = setup
        _, w, r = train_step(scene, params, TaskWeights(active=[False, True, False]), cfg,
                             TrainConfig(use_contrast=False, use_dpnp=False), 0)
        assert r.contrast == 0.0 and r.proj == 0.0
        np.testing.assert_array_equal(w.lambdas, [1.0, 3.0 - 2.0, 1.0])

    def test_non_finite_parameter_names_the_term(self, setup):
        scene, cfg, params = setup
        bad = {k: v.copy() for k, v in params.items()}
        bad["point_enc.w0"][0, 0] = np.nan
        with pytest.raises(TrainingError, match="features|contrast|match|proj"):
            train_step(scene, bad, TaskWeights(), cfg, TrainConfig(), 0)


class TestTrainLoop:
    def test_zero_steps_returns_initial_params(self, small_scene):
        cfg = ModelConfig()
        res = train([small_scene], TrainConfig(steps=0, seed=2), cfg)
        init = init_params(cfg, 2)
        assert res.history == [] and all(np.array_equal(res.params[k], init[k]) for k in init)

    def test_short_run_is_reproducible(self, small_scene):
        a = train([small_scene], TrainConfig(steps=3, seed=1))
        b = train([small_scene], TrainConfig(steps=3, seed=1))
        assert a.history == b.history
        assert [r.step for r in a.history] == [0, 1, 2]

    def test_no_scenes(self):
        with pytest.raises(ValueError):
            train([], TrainConfig(steps=1))

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(lr=-1.0)
        assert TrainConfig(lr=1.0, decay=0.5, decay_every=10).rate_at(25) == pytest.approx(0.25)


class TestCurves:
    def test_csv_columns(self, small_scene):
        res = train([small_scene], TrainConfig(steps=2))
        lines = curve_csv(res.history).splitlines()
        assert lines[0].split(",") == CURVE_COLUMNS
        assert CURVE_COLUMNS[:8] == ["step", "total", "contrast", "match", "proj", "λ1", "λ2", "λ3"]
        assert len(lines) == 3 and all(len(line.split(",")) == len(CURVE_COLUMNS) for line in lines)
        svg = curve_svg(res.history)
        assert svg.startswith("<svg") and svg.count("<polyline") >= 1

    def test_smooth(self):
        np.testing.assert_allclose(smooth([1.0, 3.0, 5.0, 7.0], 2), [1.0, 2.0, 4.0, 6.0])

    def test_steps_to_fraction(self):
        assert steps_to_fraction([4.0, 4.0, 1.0, 1.0], 0.5, 1) == 2
        assert steps_to_fraction([4.0, 4.0, 4.0], 0.5, 1) is None
