"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line that the terminal summary prints in
criterion order (see conftest.py), then asserts.
"""
import time

import numpy as np
import pytest
from scipy import stats

from conftest import ACCEPTANCE
from helpers import dense_layer, fd_param_grads, gl_interval, gl_nodes, grad_close, integrate_likelihood, lookup
from pbn.architecture import PAPER_ARCHITECTURE, Head, build_network, parse_architecture
from pbn.data import FeatureScaler, SynthSpec, extract_features, synth_dataset
from pbn.dpbn import reconstruct
from pbn.experiment import ExperimentConfig, run_experiment
from pbn.linops import ConvMap, DenseMap
from pbn.maxent import GAUSSIAN, TRUNCATED_EXPONENTIAL, TRUNCATED_GAUSSIAN
from pbn.network import SIGMOID, TG, LayerSpec, NetworkSpec, forward_pass
from pbn.saddle import GaussianSolver, fit_direct_estimator, log_p0z, newton_batch, solve_gaussian, solve_newton
from pbn.stream import conv_stack, paper_time_field, streamed_conv_stack
from pbn.training import ClassModel, OutputPrior, combined_cost, gradient

PRIORS = [GAUSSIAN, TRUNCATED_GAUSSIAN, TRUNCATED_EXPONENTIAL]


def record(n, ok, detail):
    ACCEPTANCE[n] = (bool(ok), detail)
    print(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


# ---------------------------------------------------------------------------
# 1. saddle-point correctness


def _saddle_instance(rng, i):
    prior = PRIORS[i % 3]
    while True:
        if (i // 3) % 2 == 0:
            n = int(rng.integers(2, 65))
            m = int(rng.integers(1, min(n, 16) + 1))
            lmap = DenseMap(rng.standard_normal((n, m)) / np.sqrt(m))
        else:
            h, w = (int(v) for v in rng.integers(3, 9, size=2))
            kh, kw = (int(v) for v in rng.integers(1, 4, size=2))
            sr, sc = (int(v) for v in rng.integers(1, 3, size=2))
            k = int(rng.integers(1, 3))
            m = k * ((h - kh) // sr + 1) * ((w - kw) // sc + 1)
            if h * w > 64 or m > min(16, h * w):
                continue
            lmap = ConvMap(rng.standard_normal((k, 1, kh, kw)) / np.sqrt(kh * kw), (h, w), (sr, sc))
        # the planted point is only identifiable when W has full column rank
        if np.linalg.cond(lmap.matrix()) < 50:
            break
    alpha0 = 0.3 * rng.standard_normal(lmap.input_dim)
    h_star = 0.5 * rng.standard_normal(lmap.output_dim)
    z = lmap.forward(prior.lam(alpha0 + lmap.adjoint(h_star)))
    return prior, lmap, alpha0, h_star, z


def test_criterion_1_saddle_point_correctness():
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst_resid, worst_h, kinds = 0.0, 0.0, set()
    for i in range(500):
        prior, lmap, alpha0, h_star, z = _saddle_instance(rng, i)
        kinds.add((prior.name, type(lmap).__name__))
        sr = solve_newton(lmap, prior, z, alpha0=alpha0)
        resid = np.max(np.abs(lmap.forward(prior.lam(alpha0 + lmap.adjoint(sr.h_hat))) - z))
        worst_resid = max(worst_resid, resid)
        # a 1e-9 residual bounds the error in h only up to ||C^-1||, so polish before comparing
        tight = solve_newton(lmap, prior, z, h0=sr.h_hat, alpha0=alpha0, tol=1e-12)
        worst_h = max(worst_h, np.max(np.abs(tight.h_hat - h_star)))
    secs = time.perf_counter() - t0
    ok = worst_resid <= 1e-9 and worst_h <= 1e-8 and secs < 30 and len(kinds) == 6
    record(1, ok, f"500 instances, max residual {worst_resid:.2e}, max |h - h*| {worst_h:.2e}, {secs:.1f} s")


# ---------------------------------------------------------------------------
# 2. Gaussian exactness


def test_criterion_2_gaussian_exactness():
    rng = np.random.default_rng(7)
    worst_ll, worst_h = 0.0, 0.0
    for _ in range(100):
        n = int(rng.integers(2, 30))
        m = int(rng.integers(1, n + 1))
        w = rng.standard_normal((n, m))
        alpha0 = rng.standard_normal(n) if rng.random() < 0.5 else np.zeros(n)
        lmap = DenseMap(w)
        z = w.T @ alpha0 + rng.standard_normal(m)
        want = stats.multivariate_normal(w.T @ alpha0, w.T @ w).logpdf(z)
        sr = solve_newton(lmap, GAUSSIAN, z, alpha0=alpha0)
        worst_ll = max(worst_ll, abs(log_p0z(lmap, GAUSSIAN, sr, z, alpha0) - want),
                       abs(GaussianSolver(lmap, alpha0).log_density(z) - want))
        worst_h = max(worst_h, np.max(np.abs(solve_gaussian(lmap, z, alpha0).h_hat - sr.h_hat)))
    ok = worst_ll <= 1e-9 and worst_h <= 1e-10
    record(2, ok, f"100 cases, max |log p0(z) error| {worst_ll:.2e}, max |h_gauss - h_newton| {worst_h:.2e}")


# ---------------------------------------------------------------------------
# 3. likelihood normalization


def _dense(a):
    return DenseMap(np.array(a, dtype=float))


def normalization_cases():
    g32 = [[0.7, 0.2], [-0.3, 0.6], [0.5, -0.5]]
    return {
        "G 2-1": (NetworkSpec([LayerSpec(_dense([[0.8], [0.6]]), alpha0=np.array([0.2, -0.1]))]),
                  OutputPrior([0.3], [0.7]), gl_interval(-9, 9, 60)),
        "TG 4-1": (NetworkSpec([LayerSpec(_dense([[0.6], [0.5], [0.4], [0.5]]), prior=TRUNCATED_GAUSSIAN,
                                          alpha0=np.array([0.0, -0.2, 0.1, 0.0]))]),
                   OutputPrior([1.8], [0.3]), gl_interval(0, 7, 40)),
        "TE 4-1": (NetworkSpec([LayerSpec(_dense([[0.7], [0.5], [0.6], [0.4]]), prior=TRUNCATED_EXPONENTIAL)]),
                   OutputPrior([1.1], [0.05]), gl_nodes("unit", 30)),
        "G 3-2 / TG 2-1": (NetworkSpec([LayerSpec(_dense(g32), activation=TG),
                                        LayerSpec(_dense([[0.7], [0.6]]), prior=TRUNCATED_GAUSSIAN,
                                                  alpha0=np.array([1.0, 1.0]))]),
                           OutputPrior([2.0], [0.3]), gl_nodes("full", 50, 1.5)),
        "G 3-2 / TE 2-1": (NetworkSpec([LayerSpec(_dense(g32), activation=SIGMOID),
                                        LayerSpec(_dense([[0.7], [0.6]]), prior=TRUNCATED_EXPONENTIAL)]),
                           OutputPrior([0.65], [0.02]), gl_nodes("full", 50, 1.5)),
        "TG 4-2 / TG 2-1": (NetworkSpec([
            LayerSpec(_dense([[0.6, 0.2], [-0.5, 0.3], [0.1, -0.6], [-0.2, -0.3]]), prior=TRUNCATED_GAUSSIAN,
                      activation=TG, alpha0=np.full(4, 0.3)),
            LayerSpec(_dense([[0.7], [0.6]]), prior=TRUNCATED_GAUSSIAN, alpha0=np.array([1.0, 1.0]))]),
            OutputPrior([2.2], [0.3]), gl_nodes("half", 30, 1.5)),
        "TG 3-2 / TG 2-1": (NetworkSpec([
            LayerSpec(_dense([[0.6, 0.2], [-0.5, 0.3], [0.0, -0.6]]), prior=TRUNCATED_GAUSSIAN,
                      activation=TG, alpha0=np.full(3, 0.3)),
            LayerSpec(_dense([[0.7], [0.6]]), prior=TRUNCATED_GAUSSIAN, alpha0=np.array([1.0, 1.0]))]),
            OutputPrior([2.2], [0.3]), gl_nodes("half", 40, 1.5)),
    }


def test_criterion_3_likelihood_normalization():
    t0 = time.perf_counter()
    results = {}
    for name, (net, op, (x1, w1)) in normalization_cases().items():
        total, bad = integrate_likelihood(net, op, x1, w1)
        results[name] = (total, bad)
    secs = time.perf_counter() - t0
    inside = all(0.98 <= v <= 1.02 and bad == 0 for v, bad in results.values())
    ok = inside and len(results) >= 5 and secs < 300
    text = ", ".join(f"{k}: {v:.4f}" for k, (v, _) in results.items())
    record(3, ok, f"{len(results)} networks ({text}), {secs:.0f} s")


# ---------------------------------------------------------------------------
# 4. gradient keystone


def _keystone_model(rng):
    conv = LayerSpec(ConvMap(0.3 * rng.standard_normal((2, 1, 3, 2)), (1, 6, 5), (2, 1)), activation=TG,
                     bias=0.1 * rng.standard_normal(2), alpha0=0.1 * rng.standard_normal(30))
    net = NetworkSpec([conv,
                       dense_layer(rng, conv.map.output_dim, 4, prior=TRUNCATED_GAUSSIAN, activation=SIGMOID),
                       dense_layer(rng, 4, 2, prior=TRUNCATED_EXPONENTIAL)])
    head = Head(rng.standard_normal((2, 3)), 0.1 * rng.standard_normal(3))
    return ClassModel(net, head, OutputPrior([0.6, 0.4], [0.05, 0.08]), target=1)


def test_criterion_4_gradient_keystone():
    rng = np.random.default_rng(11)
    model = _keystone_model(rng)
    x = rng.standard_normal((6, 30))
    labels = np.array([0, 1, 2, 1, 1, 0])
    t0 = time.perf_counter()
    worst, blocks, bad = 0.0, 0, []
    for variant in ("pbn", "dpbn"):
        model.variant = variant
        g = gradient(model, x, labels)
        fd = fd_param_grads(lambda p: combined_cost(model.with_params(p), x, labels).cost, model.params(), eps=1e-5)
        for path, want in fd.items():
            got = lookup(g, path)
            blocks += 1
            rel = np.linalg.norm(np.ravel(got) - np.ravel(want)) / max(np.linalg.norm(want), 1e-12)
            if np.linalg.norm(want) > 1e-8:
                worst = max(worst, rel)
            if not grad_close(got, want, 1e-4):
                bad.append((variant,) + tuple(path))
    secs = time.perf_counter() - t0
    ok = not bad and secs < 120
    record(4, ok, f"{blocks} parameter blocks (PBN and D-PBN objectives), worst relative error {worst:.1e}, "
                  f"{secs:.1f} s" + (f", failing {bad}" if bad else ""))


# ---------------------------------------------------------------------------
# 5. D-PBN fixed point


def fixed_point_architectures(rng):
    conv = LayerSpec(ConvMap(rng.standard_normal((2, 1, 3, 3)) / 3, (1, 8, 7), (2, 2)),
                     alpha0=np.zeros(56))
    return {
        "dense TG/TE chain": NetworkSpec([
            dense_layer(rng, 8, 5, activation=TG),
            dense_layer(rng, 5, 3, prior=TRUNCATED_GAUSSIAN, activation=SIGMOID),
            dense_layer(rng, 3, 2, prior=TRUNCATED_EXPONENTIAL)]),
        "conv GLG + TG": NetworkSpec([
            conv, dense_layer(rng, conv.map.output_dim, 6, activation=TG, alpha0=np.zeros(18)),
            dense_layer(rng, 6, 3, prior=TRUNCATED_GAUSSIAN)], groups=[("glg", 0, 2)]),
        # square groups sit on top, where every feature vector is in the segment's image
        "expand-contract": NetworkSpec([
            dense_layer(rng, 6, 3, activation=TG),
            dense_layer(rng, 3, 5, prior=TRUNCATED_GAUSSIAN, activation=TG),
            dense_layer(rng, 5, 3, prior=TRUNCATED_GAUSSIAN)], groups=[("ecg", 1, 3)]),
        "one-to-one": NetworkSpec([
            dense_layer(rng, 6, 3, activation=SIGMOID),
            dense_layer(rng, 3, 3, prior=TRUNCATED_EXPONENTIAL, activation=TG),
            dense_layer(rng, 3, 3, prior=TRUNCATED_GAUSSIAN)], groups=[("onetoone", 1, 3)]),
    }


def test_criterion_5_dpbn_fixed_point():
    rng = np.random.default_rng(5)
    worst_fp = {}
    for name, net in fixed_point_architectures(rng).items():
        feats = forward_pass(net, rng.standard_normal((100, net.input_dim))).pre[-1]
        trace = reconstruct(net, feats)
        again = forward_pass(net, trace.reconstruction[trace.ok]).pre[-1]
        worst_fp[name] = np.max(np.abs(again - feats[trace.ok])) if trace.ok.all() else np.inf
    worst_pinv = 0.0
    for layers, groups in (([DenseMap(rng.standard_normal((10, 4)))], []),
                           ([DenseMap(rng.standard_normal((12, 7))), DenseMap(rng.standard_normal((7, 3)))],
                            [("glg", 0, 2)])):
        net = NetworkSpec([LayerSpec(m) for m in layers], groups=groups)
        w = layers[0].matrix()
        for m in layers[1:]:
            w = w @ m.matrix()
        z = rng.standard_normal((100, w.shape[1]))
        got = reconstruct(net, z).reconstruction
        worst_pinv = max(worst_pinv, np.max(np.abs(got - z @ np.linalg.pinv(w))))
    ok = all(v <= 1e-6 for v in worst_fp.values()) and worst_pinv <= 1e-9
    text = ", ".join(f"{k}: {v:.1e}" for k, v in worst_fp.items())
    record(5, ok, f"re-encoding error ({text}); Gaussian pseudoinverse error {worst_pinv:.1e}")


# ---------------------------------------------------------------------------
# 6. streaming equivalence


def test_criterion_6_streaming_equivalence():
    arch = parse_architecture(PAPER_ARCHITECTURE)
    net, _ = build_network(arch, seed=0)
    rng = np.random.default_rng(6)
    maps = [lay.map for lay in net.layers[:3]]
    biases = [0.1 * rng.standard_normal(m.kernel.shape[0]) for m in maps]
    event = synth_dataset(SynthSpec(classes=1, per_class=1), seed=6).signals
    feats = extract_features(event, framing="tail")
    x = FeatureScaler.fit(feats).transform(feats)[0]
    whole = conv_stack(maps, x, biases)
    streamed, plan = streamed_conv_stack(maps, x, window=paper_time_field().size + paper_time_field().stride,
                                         biases=biases)
    err = np.max(np.abs(streamed - whole))
    ok = err <= 1e-12 and streamed.shape == (96, 3, 5) and plan.segment_count > 1
    record(6, ok, f"{x.shape[0]}x{x.shape[1]} spectrogram, receptive field {plan.field.size} rows, "
                  f"{plan.segment_count} segments, max |streamed - whole| {err:.1e}")


# ---------------------------------------------------------------------------
# 7. shape goldens


def test_criterion_7_shape_goldens():
    arch = parse_architecture(PAPER_ARCHITECTURE)
    net, head = build_network(arch, seed=0)
    tr = forward_pass(net, np.random.default_rng(0).standard_normal(126 * 193))
    dims = [p.size for p in tr.post] + [head.units]
    shapes = [lay.map.out_shape for lay in net.layers[:3]]
    ok = dims == [14880, 8208, 1440, 512, 256, 128, 6] and shapes == [(6, 40, 62), (36, 12, 19), (96, 3, 5)] \
        and arch.dims() == dims[:-1]
    record(7, ok, f"dimensions {dims}, map shapes {shapes}")


# ---------------------------------------------------------------------------
# 8. desk-scale experiment


@pytest.mark.slow
def test_criterion_8_desk_experiment():
    t0 = time.perf_counter()
    fold = run_experiment(ExperimentConfig())[0]
    secs = time.perf_counter() - t0
    pbn = fold.reports["pbn"].error_rate
    dpbn = fold.reports["dpbn"].error_rate
    partner = fold.reports["partner"].error_rate
    inner, ends = fold.sweep.interior_min(), fold.sweep.endpoint_min()
    ok = pbn <= 0.15 and dpbn <= 0.20 and inner <= ends and secs < 900
    record(8, ok, f"PBN-DA error {pbn:.3f}, D-PBN-DA error {dpbn:.3f}, partner {partner:.3f}, "
                  f"sweep interior min {inner:.3f} vs endpoint min {ends:.3f}, {secs:.0f} s")


# ---------------------------------------------------------------------------
# 9. direct estimator


def test_criterion_9_direct_estimator():
    rng = np.random.default_rng(9)
    lmap = DenseMap(rng.standard_normal((12, 4)) / np.sqrt(3))
    h_train = 0.7 * rng.standard_normal((500, 4))
    z_train = lmap.forward(TRUNCATED_GAUSSIAN.lam(lmap.adjoint(h_train)))
    solved = newton_batch(lmap, TRUNCATED_GAUSSIAN, z_train)
    est = fit_direct_estimator(z_train[solved.ok], solved.h[solved.ok])
    h_test = 0.7 * rng.standard_normal((200, 4))
    z_test = lmap.forward(TRUNCATED_GAUSSIAN.lam(lmap.adjoint(h_test)))
    h0 = est.warm_start(z_test)
    cold = newton_batch(lmap, TRUNCATED_GAUSSIAN, z_test)
    warm = newton_batch(lmap, TRUNCATED_GAUSSIAN, z_test, h0=h0)
    # a residual of tol pins h only to about ||C^-1|| * tol, so agreement is read at a tighter tol
    cold_t = newton_batch(lmap, TRUNCATED_GAUSSIAN, z_test, tol=1e-10)
    warm_t = newton_batch(lmap, TRUNCATED_GAUSSIAN, z_test, h0=h0, tol=1e-10)
    both = cold.ok & warm.ok & cold_t.ok & warm_t.ok
    diff = np.max(np.abs(warm_t.h[both] - cold_t.h[both]))
    ok = both.all() and warm.iterations.mean() < cold.iterations.mean() and diff <= 1e-9
    record(9, ok, f"TG 12x4 layer, mean Newton iterations warm {warm.iterations.mean():.2f} vs cold "
                  f"{cold.iterations.mean():.2f} (tol 1e-9), max |h_warm - h_cold| {diff:.1e} (tol 1e-10)")
