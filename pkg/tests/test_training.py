import zlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from helpers import dense_layer, fd_param_grads, grad_close, lookup, scaled_orthonormal
from pbn.architecture import Head
from pbn.errors import TrainingStall
from pbn.linops import ConvMap, DenseMap
from pbn.maxent import TRUNCATED_EXPONENTIAL, TRUNCATED_GAUSSIAN
from pbn.network import SIGMOID, TG, LayerSpec, NetworkSpec
from pbn.training import (VARIANCE_FLOOR, ClassModel, ObjectiveWeights, OutputPrior, TrainConfig,
                          combined_cost, fit_output_prior, fit_output_prior_for, gradient, train)


def sum_model():
    net = NetworkSpec([LayerSpec(DenseMap([[1.0], [1.0]]))])
    return ClassModel(net, Head(np.array([[1.0]]), np.zeros(1)), OutputPrior([0.0], [2.0]), target=0)


def two_class_data(rng, n=40, dim=2, gap=2.5):
    y = np.repeat([0, 1], n // 2)
    x = rng.standard_normal((n, dim)) + gap * np.where(y == 0, -0.5, 0.5)[:, None]
    return x, y


class TestCost:
    def test_hand_computed_value(self):
        # g equals N(0, W'W), so the likelihood is the standard normal at x; the head sees z = 2
        cost = combined_cost(sum_model(), np.array([[1.0, 1.0]]), np.array([0])).cost
        assert cost == pytest.approx(-np.log(2 * np.pi) - 1.0 - np.log1p(np.exp(-2.0)), rel=1e-12)

    def test_no_target_samples_is_purely_discriminative(self):
        model = sum_model()
        x = np.array([[1.0, 0.5], [-0.3, 0.2]])
        parts = combined_cost(model, x, np.array([1, 1]))
        logits = x.sum(axis=1)
        assert parts.cost == pytest.approx(-np.mean(np.log1p(np.exp(logits))), rel=1e-12)
        np.testing.assert_array_equal(parts.generative, 0.0)

    def test_duplicating_samples(self):
        rng = np.random.default_rng(0)
        x, y = two_class_data(rng, 10)
        model = sum_model()
        a = combined_cost(model, x, y).cost
        b = combined_cost(model, np.vstack([x, x]), np.concatenate([y, y])).cost
        assert b == pytest.approx(a, rel=1e-13)

    @settings(max_examples=20, deadline=None)
    @given(seed=st.integers(0, 2**31 - 1))
    def test_reordering(self, seed):
        rng = np.random.default_rng(seed)
        x, y = two_class_data(rng, 12)
        p = rng.permutation(len(y))
        model = sum_model()
        assert combined_cost(model, x[p], y[p]).cost == pytest.approx(combined_cost(model, x, y).cost,
                                                                       rel=1e-12)

    def test_generative_weight_only_on_target(self):
        rng = np.random.default_rng(1)
        x, y = two_class_data(rng, 8)
        parts = combined_cost(sum_model(), x, y)
        assert np.all(parts.generative[y == 1] == 0.0)
        assert np.all(parts.generative[y == 0] < 0.0)

    def test_all_failing_batch_stalls(self):
        # a Gaussian layer over TG activations can back-project outside the TG range
        rng = np.random.default_rng(0)
        net = NetworkSpec([dense_layer(rng, 6, 4, activation=TG),
                           LayerSpec(DenseMap(scaled_orthonormal(rng, 4, 2)))])
        from pbn.dpbn import reconstruction_error
        x = 3 * rng.standard_normal((200, 6))
        bad = x[np.isinf(reconstruction_error(net, x))][:5]
        model = ClassModel(net, target=0, variant="dpbn")
        with pytest.raises(TrainingStall):
            combined_cost(model, bad, np.zeros(len(bad), dtype=int))

    def test_empty_batch(self):
        with pytest.raises(ValueError):
            combined_cost(sum_model(), np.zeros((0, 2)), np.zeros(0, dtype=int))


def _model(kind, rng):
    if kind == "gauss":
        net = NetworkSpec([dense_layer(rng, 4, 2)])
        return ClassModel(net, Head(rng.standard_normal((2, 1)), rng.standard_normal(1)),
                          OutputPrior([0.1, -0.2], [0.8, 1.3]), target=1), rng.standard_normal((6, 4))
    if kind == "tg":
        net = NetworkSpec([dense_layer(rng, 5, 3, activation=TG), dense_layer(rng, 3, 2, prior=TRUNCATED_GAUSSIAN)])
    elif kind == "te":
        net = NetworkSpec([dense_layer(rng, 5, 3, activation=SIGMOID),
                           dense_layer(rng, 3, 2, prior=TRUNCATED_EXPONENTIAL)])
    else:
        conv = LayerSpec(ConvMap(0.3 * rng.standard_normal((2, 1, 3, 2)), (1, 6, 5), (2, 1)),
                         bias=0.1 * rng.standard_normal(2), alpha0=0.1 * rng.standard_normal(30))
        net = NetworkSpec([conv, dense_layer(rng, conv.map.output_dim, 3, activation=TG),
                           dense_layer(rng, 3, 2, prior=TRUNCATED_GAUSSIAN, activation=TG)])
        return (ClassModel(net, Head(rng.standard_normal((2, 3)), rng.standard_normal(3)),
                           OutputPrior([0.3, 0.2], [0.5, 0.7]), target=1), rng.standard_normal((6, 30)))
    return (ClassModel(net, Head(rng.standard_normal((2, 3)), rng.standard_normal(3)),
                       OutputPrior([0.3, 0.2], [0.5, 0.7]), target=1), rng.standard_normal((6, 5)))


@pytest.mark.parametrize("variant", ["pbn", "dpbn"])
@pytest.mark.parametrize("kind", ["gauss", "tg", "te", "conv"])
def test_gradient_matches_finite_differences(kind, variant):
    rng = np.random.default_rng(zlib.crc32(f"{kind}/{variant}".encode()))
    model, x = _model(kind, rng)
    model.variant = variant
    labels = np.array([0, 1, 2, 1, 0, 1]) % model.head.units if model.head.units > 1 else np.array([0, 1, 1, 0, 1, 0])

    def f(params):
        return combined_cost(model.with_params(params), x, labels).cost

    g = gradient(model, x, labels)
    tol = 1e-8 if (kind == "gauss" and variant == "pbn") else 1e-4
    for path, fd in fd_param_grads(f, model.params()).items():
        assert grad_close(lookup(g, path), fd, tol), path


def test_zero_generative_weight_gives_cross_entropy_gradient():
    rng = np.random.default_rng(2)
    model, x = _model("tg", rng)
    labels = np.array([0, 1, 2, 1, 0, 1])
    weights = ObjectiveWeights.discriminative_only(len(x))
    headless = ClassModel(model.net, model.head, None, target=None)
    g_a = gradient(model, x, labels, weights)
    g_b = gradient(headless, x, labels, weights)
    for path in fd_param_grads(lambda p: 0.0, model.params()):
        np.testing.assert_array_equal(lookup(g_a, path), lookup(g_b, path))


class TestTrain:
    def test_ascent_on_two_gaussian_classes(self):
        rng = np.random.default_rng(3)
        x, y = two_class_data(rng, 60)
        net = NetworkSpec([dense_layer(rng, 2, 2, activation=TG), dense_layer(rng, 2, 1, prior=TRUNCATED_GAUSSIAN)])
        model = ClassModel(net, Head(0.1 * np.ones((1, 1)), np.zeros(1)), fit_output_prior_for(net, x[y == 1]),
                           target=1)
        res = train(model, x, y, TrainConfig(epochs=40, step=1e-2))
        assert res.curve[-1] > res.curve[0]
        assert np.all(np.diff(res.curve) >= -1e-12)

    def test_planted_gaussian_model_recovered(self):
        rng = np.random.default_rng(0)
        n, m = 6, 2
        q = scaled_orthonormal(rng, n, m, 1.0)
        cov = np.eye(n) + q @ np.diag([5.0, 3.0]) @ q.T
        x = rng.multivariate_normal(np.zeros(n), cov, size=2000)
        # the generating density is itself a one-layer Gaussian PBN with W = q
        ref = stats.multivariate_normal(np.zeros(n), cov).logpdf(x).mean()
        net = NetworkSpec([LayerSpec(DenseMap(scaled_orthonormal(rng, n, m, 1.0)))])
        model = ClassModel(net, None, fit_output_prior_for(net, x), target=0)
        before = model.log_likelihood(x).mean()
        assert abs(before - ref) > 0.05 * abs(ref)
        res = train(model, x, np.zeros(len(x), dtype=int), TrainConfig(epochs=200, step=1e-2))
        assert res.model.log_likelihood(x).mean() == pytest.approx(ref, rel=0.05)

    def test_full_size_minibatch_is_full_batch(self):
        rng = np.random.default_rng(4)
        x, y = two_class_data(rng, 30)
        model = sum_model()
        a = train(model, x, y, TrainConfig(epochs=15, step=1e-2, seed=5))
        b = train(model, x, y, TrainConfig(epochs=15, step=1e-2, seed=5, batch_size=len(x)))
        c = train(model, x, y, TrainConfig(epochs=15, step=1e-2, seed=5))
        assert a.curve == c.curve
        np.testing.assert_allclose(b.curve, a.curve, rtol=1e-12)

    def test_minibatch_runs_are_reproducible(self):
        rng = np.random.default_rng(5)
        x, y = two_class_data(rng, 30)
        cfg = TrainConfig(epochs=5, step=1e-2, seed=9, batch_size=8)
        a, b = train(sum_model(), x, y, cfg), train(sum_model(), x, y, cfg)
        assert a.curve == b.curve
        np.testing.assert_array_equal(a.model.net.layers[0].map.params, b.model.net.layers[0].map.params)

    def test_zero_generative_weight_matches_discriminative_net(self):
        rng = np.random.default_rng(6)
        x, y = two_class_data(rng, 30)
        model = sum_model()
        w = ObjectiveWeights(np.zeros(len(y)), np.ones(len(y)))
        cfg = TrainConfig(epochs=10, step=1e-2, refit_output_prior=False)
        a = train(model, x, y, cfg, weights=w)
        # same topology and one-vs-all target, no output density at all
        b = train(ClassModel(model.net, model.head, None, target=0), x, y, cfg,
                  weights=ObjectiveWeights.discriminative_only(len(y)))
        assert a.curve == b.curve


class TestOutputPrior:
    def test_identical_samples_hit_floor(self):
        op = fit_output_prior(np.ones((5, 3)))
        np.testing.assert_array_equal(op.var, VARIANCE_FLOOR)

    def test_standard_normal_moments(self):
        f = np.random.default_rng(7).standard_normal((10**4, 2))
        op = fit_output_prior(f)
        assert np.all(np.abs(op.mean) < 4 / np.sqrt(10**4))
        np.testing.assert_allclose(op.var, 1.0, atol=4 * np.sqrt(2 / 10**4))

    def test_single_feature(self):
        f = np.array([[1.0], [2.0], [4.0]])
        op = fit_output_prior(f)
        assert op.mean[0] == pytest.approx(7 / 3)
        assert op.var[0] == pytest.approx(np.mean((f - 7 / 3) ** 2))

    def test_needs_two_samples(self):
        with pytest.raises(ValueError):
            fit_output_prior(np.ones((1, 2)))

    def test_log_density_and_grad(self):
        op = OutputPrior([0.5], [2.0])
        assert op.log_density(np.array([1.0])) == pytest.approx(stats.norm(0.5, np.sqrt(2)).logpdf(1.0))
        np.testing.assert_allclose(op.grad(np.array([1.0])), [-0.25])
