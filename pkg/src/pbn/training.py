"""Discriminatively aligned training.

A class model is trained on the mean over a batch of

    w_gen * G(x) + w_disc * (-CE(x))

where ``G`` is the PBN log-likelihood (PBN-DA) or minus the D-PBN
reconstruction error (D-PBN-DA), and CE the cross-entropy of the
classifier head.  For the model of class ``c`` the generative weight is
1 on samples of class ``c`` and 0 elsewhere; the discriminative weight is
1 everywhere.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit, log_expit, logsumexp, softmax

from .dpbn import reconstruction_error, reconstruction_error_and_grad
from .errors import ConfigError, TrainingStall
from .maxent import GAUSSIAN
from .network import backward, evaluate, gaussian_logdensity
from .saddle import fit_direct_estimator

log = logging.getLogger(__name__)

VARIANCE_FLOOR = 1e-6


@dataclass
class OutputPrior:
    """Diagonal Gaussian density of the terminal features."""
    mean: np.ndarray
    var: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.var = np.maximum(np.asarray(self.var, dtype=np.float64), VARIANCE_FLOOR)

    def log_density(self, u):
        return gaussian_logdensity(self.mean, self.var, u)

    def grad(self, u):
        return -(u - self.mean) / self.var


def fit_output_prior(features):
    """Moment fit of a diagonal Gaussian to terminal features (rows are samples)."""
    f = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if f.shape[0] < 2:
        raise ValueError("need at least two samples to fit the output prior")
    return OutputPrior(f.mean(axis=0), f.var(axis=0))


def fit_output_prior_for(net, x):
    ev = evaluate(net, x, need=np.zeros(len(x), dtype=bool))
    return fit_output_prior(ev.features)


@dataclass
class ObjectiveWeights:
    generative: np.ndarray
    discriminative: np.ndarray

    def __post_init__(self):
        self.generative = np.asarray(self.generative, dtype=np.float64)
        self.discriminative = np.asarray(self.discriminative, dtype=np.float64)

    @classmethod
    def one_vs_all(cls, labels, target):
        labels = np.asarray(labels)
        return cls((labels == target).astype(float), np.ones(len(labels)))

    @classmethod
    def discriminative_only(cls, n):
        return cls(np.zeros(n), np.ones(n))


@dataclass
class ClassModel:
    """One network trained for one class (or a purely discriminative net).

    ``depth`` is the number of layers in the generative chain; the head
    always sits on the last layer's activation.  With the default
    ``recon_scale`` the D-PBN generative term is ``-||x - x_hat||^2 / 2``,
    the log-likelihood of a unit-variance Gaussian around the reconstruction,
    which puts it on the same footing as the PBN log-likelihood.
    """
    net: object
    head: object = None
    output_prior: OutputPrior | None = None
    target: int | None = None
    variant: str = "pbn"          # "pbn" or "dpbn"
    depth: int | None = None
    recon_scale: float | None = None   # D-PBN term is -recon_scale * MSE; None means N/2

    @property
    def generative_net(self):
        d = self.depth or len(self.net.layers)
        return self.net if d == len(self.net.layers) else self.net.truncated(d)

    def log_likelihood(self, x):
        ev = evaluate(self.generative_net, x, self.output_prior)
        return ev.total

    def reconstruction_error(self, x):
        return reconstruction_error(self.generative_net, x)

    def params(self):
        return {"layers": self.net.params(),
                "head": self.head.params() if self.head is not None else None}

    def with_params(self, p):
        net = self.net.with_params(p["layers"])
        head = self.head.with_params(p["head"]) if self.head is not None else None
        return replace(self, net=net, head=head)


# ---------------------------------------------------------------------------
# cost and gradient


def _targets(model, labels):
    k = model.head.units
    labels = np.asarray(labels)
    if model.head.kind == "softmax":
        return labels
    if k == 1:
        return (labels == model.target).astype(float)[:, None]
    y = np.zeros((len(labels), k))
    y[np.arange(len(labels)), labels] = 1.0
    return y


def cross_entropy(model, post, labels):
    """Per-sample cross-entropy of the head and its gradient wrt the logits."""
    logits = model.head.logits(post)
    y = _targets(model, labels)
    if model.head.kind == "softmax":
        ce = logsumexp(logits, axis=1) - logits[np.arange(len(y)), y]
        d = softmax(logits, axis=1)
        d[np.arange(len(y)), y] -= 1.0
        return ce, d
    ce = -np.sum(y * log_expit(logits) + (1.0 - y) * log_expit(-logits), axis=1)
    return ce, expit(logits) - y


@dataclass
class CostParts:
    cost: float
    generative: np.ndarray    # per-sample G (0 where failed or unweighted)
    cross_entropy: np.ndarray
    failed: int
    evaluation: object = None


def _check_stall(gen_w, gen_ok):
    wanted = gen_w > 0
    if np.any(wanted) and not np.any(gen_ok & wanted):
        raise TrainingStall("every generatively weighted sample failed its saddle-point solve")


def combined_cost(model, x, labels, weights=None, with_grad=False):
    """Mean combined objective over the batch (and optionally its gradient)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    b = x.shape[0]
    if b == 0:
        raise ValueError("empty batch")
    labels = np.asarray(labels)
    if weights is None:
        weights = ObjectiveWeights.one_vs_all(labels, model.target)
    gen_w = weights.generative
    disc_w = weights.discriminative
    net = model.net
    full = (model.depth or len(net.layers)) == len(net.layers)
    pbn = model.variant == "pbn"
    if model.variant not in ("pbn", "dpbn"):
        raise ConfigError(f"unknown variant {model.variant!r}")
    need = (gen_w > 0) if (pbn and full) else np.zeros(b, dtype=bool)
    ev = evaluate(net, x, model.output_prior if pbn else None, need=need)

    generative = np.zeros(b)
    gen_ok = np.zeros(b, dtype=bool)
    gen_grads = None
    if np.any(gen_w > 0):
        if pbn:
            gnet = model.generative_net
            gev = ev if full else evaluate(gnet, x, model.output_prior, need=gen_w > 0)
            gen_ok = gev.ok
            generative = np.where(gen_ok, gev.total, 0.0)
            _check_stall(gen_w, gen_ok)
            if with_grad:
                gen_grads = backward(gnet, gev, gen_w / b, output_prior=model.output_prior)
        else:
            gnet = model.generative_net
            scale = model.recon_scale if model.recon_scale is not None else 0.5 * x.shape[1]
            value, err, grads = reconstruction_error_and_grad(gnet, x, scale * gen_w / b)
            gen_ok = np.isfinite(err)
            generative = np.where(gen_ok, -scale * err, 0.0)
            _check_stall(gen_w, gen_ok)
            if with_grad:
                gen_grads = [{k: -v for k, v in g.items()} for g in grads]
    failed = int(np.sum((gen_w > 0) & ~gen_ok))

    ce = np.zeros(b)
    g_post = None
    head_grad = None
    if model.head is not None and np.any(disc_w > 0):
        ce, d_logits = cross_entropy(model, ev.post, labels)
        if with_grad:
            g_l = -(disc_w / b)[:, None] * d_logits
            head_grad = {"w": ev.post.T @ g_l, "b": g_l.sum(axis=0)}
            g_post = g_l @ model.head.weight.T
    cost = float(np.sum(gen_w * generative - disc_w * ce) / b)
    parts = CostParts(cost, gen_w * generative, ce, failed, ev)
    if not with_grad:
        return parts

    grads = None
    if g_post is not None:
        grads = backward(net, ev, np.zeros(b), g_post=g_post)
    if gen_grads is not None:
        if grads is None:
            grads = [{k: np.zeros_like(v) for k, v in p.items()} for p in net.params()]
        for k, g in enumerate(gen_grads):
            for key in g:
                grads[k][key] = grads[k][key] + g[key]
    if grads is None:
        grads = [{k: np.zeros_like(v) for k, v in p.items()} for p in net.params()]
    if head_grad is None and model.head is not None:
        head_grad = {k: np.zeros_like(v) for k, v in model.head.params().items()}
    for k, g in enumerate(grads):
        for key, v in g.items():
            if not np.all(np.isfinite(v)):
                raise FloatingPointError(f"non-finite gradient in layer {k} block {key!r}")
    return parts, {"layers": grads, "head": head_grad}


def gradient(model, x, labels, weights=None):
    """Analytic gradient of :func:`combined_cost` (same structure as ``model.params()``)."""
    return combined_cost(model, x, labels, weights, with_grad=True)[1]


# ---------------------------------------------------------------------------
# optimization


@dataclass
class TrainConfig:
    epochs: int = 100
    step: float = 1e-3
    momentum: float = 0.9
    l2: float = 0.0
    batch_size: int | None = None      # None: full batch
    seed: int = 0
    estimator_refresh: int = 10
    refit_output_prior: bool = True
    patience: int = 3
    min_step: float = 1e-12

    @classmethod
    def from_dict(cls, d):
        known = {f for f in cls.__dataclass_fields__}
        bad = set(d) - known
        if bad:
            raise ConfigError(f"unknown training options: {sorted(bad)}")
        return cls(**d)


@dataclass
class TrainResult:
    model: ClassModel
    curve: list = field(default_factory=list)
    steps: list = field(default_factory=list)
    failures: list = field(default_factory=list)


def _axpy(p, a, g):
    """p + a * g over the nested parameter structure."""
    if isinstance(p, dict):
        return {k: _axpy(p[k], a, g[k]) for k in p}
    if isinstance(p, list):
        return [_axpy(pi, a, gi) for pi, gi in zip(p, g)]
    if p is None:
        return None
    return p + a * g


def _scale(g, a):
    return _axpy(g, a - 1.0, g)


def _fix_gaussian_alpha0(model, g):
    """The Gaussian reference density keeps alpha0 = 0."""
    for lay, gl in zip(model.net.layers, g["layers"]):
        if lay.prior is GAUSSIAN:
            gl["alpha0"] = np.zeros_like(gl["alpha0"])
    return g


def _with_l2(model, g, l2):
    if l2 <= 0:
        return g
    for lay, gl in zip(model.net.layers, g["layers"]):
        gl["w"] = gl["w"] - l2 * lay.map.params
    if model.head is not None:
        g["head"]["w"] = g["head"]["w"] - l2 * model.head.weight
    return g


def _l2_penalty(model, l2):
    if l2 <= 0:
        return 0.0
    tot = sum(float(np.sum(lay.map.params ** 2)) for lay in model.net.layers)
    if model.head is not None:
        tot += float(np.sum(model.head.weight ** 2))
    return 0.5 * l2 * tot


def refresh_estimators(model, evaluation):
    """Refit the direct saddle-point estimators from the last solves."""
    net = model.generative_net
    layers = list(model.net.layers)
    for evaluator, cache in evaluation.caches:
        k = getattr(evaluator, "k", None)
        if k is None or k >= len(net.layers) or net.layers[k].prior is GAUSSIAN:
            continue
        if "good" not in cache or not np.any(cache["good"]):
            continue
        idx, good = cache["idx"], cache["good"]
        z = cache["z"][idx][good]
        h = cache["h"][good]
        if len(z) >= z.shape[1]:
            layers[k] = replace(layers[k], estimator=fit_direct_estimator(z, h))
    return replace(model, net=replace(model.net, layers=layers))


def _objective(model, x, labels, weights, config):
    if config.refit_output_prior and model.variant == "pbn" and np.any(weights.generative > 0):
        sel = weights.generative > 0
        if np.sum(sel) >= 2:
            model = replace(model, output_prior=fit_output_prior_for(model.generative_net, x[sel]))
    parts, g = combined_cost(model, x, labels, weights, with_grad=True)
    g = _with_l2(model, _fix_gaussian_alpha0(model, g), config.l2)
    return model, parts.cost - _l2_penalty(model, config.l2), g, parts


def train(model, x, labels, config=None, weights=None):
    """Gradient ascent with momentum on the combined objective.

    Full-batch runs reject steps that lower the objective (halving the step
    and clearing the momentum), so the recorded curve never decreases.
    """
    config = config or TrainConfig()
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    labels = np.asarray(labels)
    if weights is None:
        weights = (ObjectiveWeights.one_vs_all(labels, model.target) if model.target is not None
                   else ObjectiveWeights.discriminative_only(len(labels)))
    rng = np.random.default_rng(config.seed)
    result = TrainResult(model)
    step = config.step
    velocity = None
    full = config.batch_size is None or config.batch_size >= len(x)
    stalls = 0
    current = None
    for epoch in range(config.epochs):
        if full:
            batches = [np.arange(len(x))]
        else:
            order = rng.permutation(len(x))
            batches = [order[i:i + config.batch_size] for i in range(0, len(x), config.batch_size)]
        epoch_cost, epoch_fail = 0.0, 0
        for idx in batches:
            w = ObjectiveWeights(weights.generative[idx], weights.discriminative[idx])
            try:
                cand_model, cost, g, parts = _objective(model, x[idx], labels[idx], w, config)
                stalls = 0
            except TrainingStall:
                stalls += 1
                if stalls >= config.patience:
                    raise
                if full and current is not None:
                    model, step, velocity = current[0], 0.5 * step, None
                continue
            if full and current is not None and not cost >= current[1]:
                # reject: go back to the last accepted point with a smaller step
                model, cost, g, parts = current
                step *= 0.5
                velocity = None
                if step < config.min_step:
                    break
            else:
                model = cand_model
                if full:
                    current = (model, cost, g, parts)
            epoch_cost += cost * len(idx) / len(x)
            epoch_fail += parts.failed
            velocity = _scale(g, step) if velocity is None else \
                _axpy(_scale(velocity, config.momentum), step, g)
            if (epoch + 1) % config.estimator_refresh == 0 and parts.evaluation is not None:
                model = refresh_estimators(model, parts.evaluation)
                if full:
                    current = (model,) + current[1:]
            model = model.with_params(_axpy(model.params(), 1.0, velocity))
        result.curve.append(epoch_cost)
        result.steps.append(step)
        result.failures.append(epoch_fail)
        log.debug("epoch %d cost %.6g step %.3g failures %d", epoch, epoch_cost, step, epoch_fail)
        if step < config.min_step:
            break
    # final parameters: in full-batch mode the last step may not have been checked
    if full and current is not None:
        model_end, cost_end, _, _ = _objective(model, x, labels, weights, config)
        model = model_end if cost_end >= current[1] else current[0]
    if model.variant == "pbn" and model.target is not None:
        sel = weights.generative > 0
        if np.sum(sel) >= 2:
            model = replace(model, output_prior=fit_output_prior_for(model.generative_net, x[sel]))
    result.model = model
    return result
