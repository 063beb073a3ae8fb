import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedcarbon import model
from fedcarbon.data import SampleSet, make_dataset
from fedcarbon.errors import ConfigurationError, NumericError, ShapeError
from fedcarbon.model import (
    AdamConfig,
    AdamState,
    ModelParams,
    Sample,
    adam_step,
    evaluate,
    forward,
    init_params,
    local_train,
    loss,
    per_sample_grad,
    per_sample_grad_norms,
)

from oracles import central_differences, rel_error


class TestInitParams:
    def test_single_layer_count(self):
        assert init_params([4, 3], seed=0).param_count == 15

    def test_two_layer_count(self):
        p = init_params([8, 16, 10], seed=3)
        assert p.param_count == 8 * 16 + 16 + 16 * 10 + 10 == 314
        assert p.values.size == 314

    def test_deterministic(self):
        a = init_params([5, 7, 3], seed=11)
        b = init_params([5, 7, 3], seed=11)
        assert np.array_equal(a.values, b.values)
        assert not np.array_equal(a.values, init_params([5, 7, 3], seed=12).values)

    def test_weight_range_and_zero_bias(self):
        p = init_params([9, 4], seed=1)
        (w, b), = p.layers()
        assert np.all(np.abs(w) <= 1 / 3)
        assert np.all(b == 0)

    @pytest.mark.parametrize("dims", [[], [3], [3, 0], [-1, 2]])
    def test_rejects_bad_dims(self, dims):
        with pytest.raises(ConfigurationError):
            init_params(dims, seed=0)


class TestForward:
    def test_zero_params_zero_logits(self):
        p = ModelParams(np.zeros(init_params([6, 5, 4], 0).param_count), [(5, 6), (4, 5)])
        assert np.array_equal(forward(p, np.linspace(0, 1, 6)), np.zeros(4))

    def test_single_layer_is_affine(self):
        w = np.array([[1.0, 2.0], [0.5, -1.0], [0.0, 3.0]])
        b = np.array([0.1, 0.2, 0.3])
        p = ModelParams(np.concatenate([w.ravel(), b]), [(3, 2)])
        x = np.array([0.25, 0.75])
        assert np.allclose(forward(p, x), w @ x + b)

    def test_output_length(self):
        p = init_params([7, 11, 5], 2)
        assert forward(p, np.full(7, 0.3)).shape == (5,)

    def test_dimension_mismatch(self):
        with pytest.raises(ShapeError):
            forward(init_params([4, 3], 0), np.zeros(5))


class TestLoss:
    def test_uniform_logits(self):
        assert loss(np.zeros(10), 3) == pytest.approx(math.log(10), abs=1e-12)

    def test_stable_for_large_logits(self):
        value = loss(np.array([1000.0, 0.0]), 0)
        assert math.isfinite(value) and value == pytest.approx(0.0, abs=1e-12)

    def test_matches_arbitrary_precision(self):
        mpmath.mp.dps = 50
        z = [mpmath.mpf("0.2"), mpmath.mpf("-0.4"), mpmath.mpf("1.1")]
        expected = float(mpmath.log(sum(mpmath.e**v for v in z)) - z[2])
        assert expected == pytest.approx(0.48839583828193096, rel=1e-15)
        assert loss(np.array([0.2, -0.4, 1.1]), 2) == pytest.approx(expected, rel=1e-14)

    def test_label_out_of_range(self):
        with pytest.raises(ShapeError):
            loss(np.zeros(3), 3)

    @given(st.lists(st.floats(-1e4, 1e4), min_size=2, max_size=12), st.data())
    def test_finite_and_nonnegative(self, logits, data):
        label = data.draw(st.integers(0, len(logits) - 1))
        value = loss(np.array(logits), label)
        assert math.isfinite(value) and value >= 0


class TestPerSampleGrad:
    def test_matches_finite_differences(self):
        rng = np.random.default_rng(5)
        for trial in range(10):
            p = init_params([16, 32, 10], seed=trial)
            s = Sample(rng.random(16), int(rng.integers(10)))
            assert rel_error(per_sample_grad(p, s), central_differences(p, s)) <= 1e-4

    def test_three_layer_network(self):
        rng = np.random.default_rng(8)
        p = init_params([5, 6, 4, 3], seed=2)
        s = Sample(rng.random(5), 1)
        assert rel_error(per_sample_grad(p, s), central_differences(p, s)) <= 1e-4

    def test_saturated_correct_prediction_has_tiny_gradient(self):
        w = np.zeros((3, 2))
        b = np.array([50.0, 0.0, 0.0])
        p = ModelParams(np.concatenate([w.ravel(), b]), [(3, 2)])
        g = per_sample_grad(p, Sample(np.array([0.5, 0.5]), 0))
        assert np.linalg.norm(g) < 1e-15

    def test_duplicate_sample_identical(self):
        p = init_params([4, 6, 3], 1)
        s = Sample(np.array([0.1, 0.9, 0.4, 0.2]), 2)
        assert np.array_equal(per_sample_grad(p, s), per_sample_grad(p, s))

    def test_vectorised_norms_match_explicit(self):
        rng = np.random.default_rng(0)
        p = init_params([6, 9, 4], 4)
        x = rng.random((25, 6))
        y = rng.integers(0, 4, 25)
        explicit = [np.linalg.norm(per_sample_grad(p, Sample(x[i], int(y[i])))) for i in range(25)]
        assert np.allclose(per_sample_grad_norms(p, x, y), explicit, rtol=1e-12)

    def test_nonfinite_reports_sample_index(self):
        p = init_params([2, 3], 0)
        with pytest.raises(NumericError, match="index 7"):
            per_sample_grad(p, Sample(np.array([np.inf, 0.0]), 0), index=7)


class TestAdam:
    def test_zero_gradient_no_change(self):
        p = init_params([3, 2], 0)
        state = AdamState.fresh(p.param_count)
        _, new = adam_step(state, p, np.zeros(p.param_count))
        assert np.array_equal(new.values, p.values)

    def test_first_step_closed_form(self):
        # bias-corrected moments after one step are g and g^2
        p = init_params([3, 2], 0)
        g = np.array([0.5, -2.0, 1e-3, -1e-2, 3.0, -0.7, 0.25, 4.0])
        cfg = AdamConfig(lr=1e-3)
        state, new = adam_step(AdamState.fresh(p.param_count, cfg), p, g)
        expected = p.values - cfg.lr * g / (np.abs(g) + cfg.epsilon)
        assert np.allclose(new.values, expected, rtol=0, atol=1e-15)
        assert np.allclose(np.abs(new.values - p.values), cfg.lr, rtol=1e-4)
        assert np.array_equal(np.sign(new.values - p.values), -np.sign(g))
        assert state.step_count == 1

    def test_deterministic(self):
        p = init_params([4, 3], 2)
        rng = np.random.default_rng(1)
        grads = [rng.normal(size=p.param_count) for _ in range(5)]

        def run():
            state, cur = AdamState.fresh(p.param_count), p
            for g in grads:
                state, cur = adam_step(state, cur, g)
            return cur.values

        assert np.array_equal(run(), run())

    def test_rejects_nonfinite(self):
        p = init_params([2, 2], 0)
        g = np.zeros(p.param_count)
        g[0] = np.nan
        with pytest.raises(NumericError):
            adam_step(AdamState.fresh(p.param_count), p, g)

    def test_length_mismatch(self):
        p = init_params([2, 2], 0)
        with pytest.raises(ShapeError):
            adam_step(AdamState.fresh(p.param_count), p, np.zeros(3))


def blobs(n=200, seed=0):
    rng = np.random.default_rng(seed)
    y = np.arange(n) % 2
    x = np.where(y[:, None] == 0, 0.25, 0.75) + rng.normal(0, 0.05, (n, 4))
    return SampleSet(np.clip(x, 0, 1), y)


class TestLocalTrain:
    def test_zero_epochs_is_identity(self):
        p = init_params([4, 8, 2], 0)
        data = blobs()
        out, mean_loss, losses = local_train(p, data, 0, 32, seed=0)
        assert np.array_equal(out.values, p.values)
        assert np.array_equal(losses, model.batch_losses(p, data.features, data.labels))
        assert mean_loss == pytest.approx(losses.mean())

    def test_single_sample_single_step(self, monkeypatch):
        calls = []
        real = model.adam_step

        def counting(state, params, grad):
            calls.append(state.step_count)
            return real(state, params, grad)

        monkeypatch.setattr(model, "adam_step", counting)
        data = SampleSet(np.array([[0.2, 0.4, 0.6, 0.8]]), np.array([1]))
        local_train(init_params([4, 3, 2], 0), data, 1, 1, seed=0)
        assert calls == [0]

    def test_last_partial_batch_kept(self, monkeypatch):
        calls = []
        real = model.adam_step
        monkeypatch.setattr(model, "adam_step", lambda s, p, g: calls.append(1) or real(s, p, g))
        local_train(init_params([4, 3, 2], 0), blobs(n=70), 2, 32, seed=0)
        assert len(calls) == 2 * 3

    def test_learns_separable_blobs(self):
        p = init_params([4, 8, 2], 0)
        data = blobs()
        _, before, _ = local_train(p, data, 0, 32, seed=1)
        _, after, _ = local_train(p, data, 20, 32, seed=1)
        assert after < before

    def test_deterministic(self):
        p = init_params([4, 8, 2], 0)
        a = local_train(p, blobs(), 3, 16, seed=4)
        b = local_train(p, blobs(), 3, 16, seed=4)
        assert np.array_equal(a[0].values, b[0].values)
        assert np.array_equal(a[2], b[2])

    def test_empty_dataset(self):
        with pytest.raises(ConfigurationError):
            local_train(init_params([2, 2], 0), SampleSet(np.zeros((0, 2)), np.zeros(0)), 1, 1)


class TestEvaluate:
    def test_zero_params_predict_class_zero(self):
        data = make_dataset(1000, 16, 10, seed=3)
        p = ModelParams(np.zeros(init_params([16, 8, 10], 0).param_count), [(8, 16), (10, 8)])
        acc, mean_loss = evaluate(p, data)
        assert acc == np.mean(data.labels == 0) == 0.1
        assert mean_loss == pytest.approx(math.log(10))

    def test_memorised_single_sample(self):
        w = np.zeros((3, 2))
        b = np.array([0.0, 5.0, 0.0])
        p = ModelParams(np.concatenate([w.ravel(), b]), [(3, 2)])
        acc, _ = evaluate(p, SampleSet(np.array([[0.3, 0.3]]), np.array([1])))
        assert acc == 1.0

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_accuracy_in_unit_interval(self, seed):
        data = make_dataset(40, 5, 3, seed=seed)
        acc, _ = evaluate(init_params([5, 4, 3], seed), data)
        assert 0.0 <= acc <= 1.0

    def test_empty(self):
        with pytest.raises(ConfigurationError):
            evaluate(init_params([2, 2], 0), SampleSet(np.zeros((0, 2)), np.zeros(0)))
