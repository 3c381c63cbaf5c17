"""Projected belief networks: layer specs, grouping, likelihood.

A network is an ordered list of layers ``u = W'x + b, a = act(u)``.  Layers
are partitioned into segments:

* ``plain``: one layer, likelihood term ``log p0(x) - log p0(z)`` with the
  saddle-point density of ``z = W'x``;
* ``glg``: a Gaussian layer group, consecutive Gaussian-prior layers with
  linear activations treated as one linear map with one small Gram matrix;
* ``onetoone`` / ``ecg``: a dimension-preserving segment (possibly
  expanding internally) contributing ``log|det J|``.

The activation of each segment's last layer is a 1:1 map applied between
segments and contributes ``sum log act'(u)``.  The chain ends at the
pre-activation output of the last layer, where the feature density
``g`` is evaluated.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DomainError, GroupError, ShapeError, SingularJacobian
from .linops import ComposedMap, DenseMap
from .maxent import GAUSSIAN, TRUNCATED_GAUSSIAN, MaxEntPrior
from .saddle import (CONVERGED, DEFAULT_TOL, GaussianSolver, newton_batch,
                     saddle_density_dense)

_SUPPORT_ORDER = {
    "reals": {"reals"},
    "nonnegative": {"reals", "nonnegative"},
    "unit_interval": {"reals", "nonnegative", "unit_interval"},
}


# ---------------------------------------------------------------------------
# activations


@dataclass(frozen=True)
class Activation:
    name: str
    support: str

    def __call__(self, u):
        raise NotImplementedError

    def deriv(self, u):
        raise NotImplementedError

    def deriv2(self, u):
        raise NotImplementedError

    def inverse(self, y):
        raise NotImplementedError

    def log_deriv(self, u):
        return np.log(self.deriv(u))

    def dlog_deriv(self, u):
        return self.deriv2(u) / self.deriv(u)


class _Linear(Activation):
    def __call__(self, u):
        return np.asarray(u, dtype=np.float64)

    def deriv(self, u):
        return np.ones_like(np.asarray(u, dtype=np.float64))

    def deriv2(self, u):
        return np.zeros_like(np.asarray(u, dtype=np.float64))

    def inverse(self, y):
        return np.asarray(y, dtype=np.float64)

    def log_deriv(self, u):
        return np.zeros_like(np.asarray(u, dtype=np.float64))


class _TruncatedGaussianAct(Activation):
    """``u + phi(u)/Phi(u)``: the truncated-Gaussian conditional mean."""

    def __call__(self, u):
        return TRUNCATED_GAUSSIAN.lam(u)

    def deriv(self, u):
        return TRUNCATED_GAUSSIAN.dlam(u)

    def deriv2(self, u):
        return TRUNCATED_GAUSSIAN.d2lam(u)

    def inverse(self, y, tol=1e-12, max_iter=200):
        y = np.asarray(y, dtype=np.float64)
        if np.any(~(y > 0)):
            raise DomainError("TG activation can only be inverted on (0, inf)")
        # lam(u) ~ u for large u and ~ -1/u for very negative u
        u = np.where(y > 1.0, y, -1.0 / y + y)
        lo = np.where(y > 1.0, y - 1.0, -1.0 / y - 1.0)
        hi = y.copy()
        for _ in range(max_iter):
            f = TRUNCATED_GAUSSIAN.lam(u) - y
            lo = np.where(f < 0, u, lo)
            hi = np.where(f > 0, u, hi)
            if np.all(np.abs(f) <= tol * np.maximum(1.0, y)):
                break
            step = u - f / TRUNCATED_GAUSSIAN.dlam(u)
            inside = (step > lo) & (step < hi)
            u = np.where(inside, step, 0.5 * (lo + hi))
        return u


class _Sigmoid(Activation):
    def __call__(self, u):
        return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(u, dtype=np.float64)))

    def deriv(self, u):
        s = self(u)
        return s * (1.0 - s)

    def deriv2(self, u):
        s = self(u)
        return s * (1.0 - s) * (1.0 - 2.0 * s)

    def log_deriv(self, u):
        u = np.asarray(u, dtype=np.float64)
        return -np.abs(u) - 2.0 * np.log1p(np.exp(-np.abs(u)))

    def dlog_deriv(self, u):
        return 1.0 - 2.0 * self(u)

    def inverse(self, y):
        y = np.asarray(y, dtype=np.float64)
        if np.any((y <= 0) | (y >= 1)):
            raise DomainError("sigmoid can only be inverted on (0, 1)")
        return np.log(y) - np.log1p(-y)


LINEAR = _Linear("linear", "reals")
TG = _TruncatedGaussianAct("tg", "nonnegative")
SIGMOID = _Sigmoid("sigmoid", "unit_interval")
ACTIVATIONS = {a.name: a for a in (LINEAR, TG, SIGMOID)}


def get_activation(name):
    try:
        return ACTIVATIONS[name.lower()]
    except KeyError:
        raise ValueError(f"unknown activation {name!r}") from None


# ---------------------------------------------------------------------------
# specs


@dataclass
class LayerSpec:
    map: object
    prior: MaxEntPrior = GAUSSIAN
    activation: Activation = LINEAR
    bias: np.ndarray | None = None
    alpha0: np.ndarray | None = None
    estimator: object = None  # DirectEstimator warm start, optional

    def __post_init__(self):
        if self.bias is None:
            self.bias = np.zeros(self.map.bias_size)
        if self.alpha0 is None:
            self.alpha0 = np.zeros(self.map.input_dim)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        self.alpha0 = np.asarray(self.alpha0, dtype=np.float64)
        if self.bias.shape != (self.map.bias_size,):
            raise ShapeError(f"bias must have shape ({self.map.bias_size},)")
        if self.alpha0.shape != (self.map.input_dim,):
            raise ShapeError(f"alpha0 must have shape ({self.map.input_dim},)")

    @property
    def input_dim(self):
        return self.map.input_dim

    @property
    def output_dim(self):
        return self.map.output_dim

    def pre_activation(self, x):
        return self.map.forward(x) + self.map.expand_bias(self.bias)


@dataclass(frozen=True)
class Group:
    kind: str   # "glg", "onetoone", "ecg"
    start: int
    stop: int   # exclusive


@dataclass(frozen=True)
class Segment:
    kind: str   # "plain", "glg", "onetoone", "ecg"
    start: int
    stop: int

    @property
    def layers(self):
        return range(self.start, self.stop)


@dataclass
class NetworkSpec:
    layers: list
    groups: list = field(default_factory=list)
    correction: bool = True
    tol: float = DEFAULT_TOL
    max_iter: int = 100

    def __post_init__(self):
        self.groups = [g if isinstance(g, Group) else Group(*g) for g in self.groups]
        self.validate()

    @property
    def input_dim(self):
        return self.layers[0].input_dim

    @property
    def output_dim(self):
        return self.layers[-1].output_dim

    def segments(self):
        groups = sorted(self.groups, key=lambda g: g.start)
        out, i = [], 0
        for g in groups:
            while i < g.start:
                out.append(Segment("plain", i, i + 1))
                i += 1
            out.append(Segment(g.kind, g.start, g.stop))
            i = g.stop
        while i < len(self.layers):
            out.append(Segment("plain", i, i + 1))
            i += 1
        return out

    def validate(self):
        if not self.layers:
            raise ShapeError("network has no layers")
        for k, (a, b) in enumerate(zip(self.layers, self.layers[1:])):
            if a.output_dim != b.input_dim:
                raise ShapeError(f"layer {k} outputs {a.output_dim}, layer {k + 1} expects {b.input_dim}")
            if b.prior.support not in _SUPPORT_ORDER[a.activation.support]:
                raise GroupError(
                    f"layer {k} activation {a.activation.name!r} has range {a.activation.support}, "
                    f"not inside the support of layer {k + 1}'s {b.prior.name} prior")
        covered = set()
        for g in self.groups:
            if g.kind not in ("glg", "onetoone", "ecg"):
                raise GroupError(f"unknown group kind {g.kind!r}")
            if not 0 <= g.start < g.stop <= len(self.layers):
                raise GroupError(f"group {g} out of range")
            span = set(range(g.start, g.stop))
            if span & covered:
                raise GroupError(f"group {g} overlaps another group")
            covered |= span
            first, last = self.layers[g.start], self.layers[g.stop - 1]
            if g.kind == "glg":
                for k in span:
                    lay = self.layers[k]
                    if lay.prior is not GAUSSIAN:
                        raise GroupError(f"GLG layer {k} must use the Gaussian prior")
                    if k != g.stop - 1 and lay.activation is not LINEAR:
                        raise GroupError(f"GLG layer {k} must have a linear activation")
                    if lay.output_dim > lay.input_dim:
                        raise GroupError(f"GLG layer {k} expands dimension")
            else:
                if first.input_dim != last.output_dim:
                    raise GroupError(f"{g.kind} group {g} is not dimension preserving")
                if g.kind == "onetoone":
                    for k in span:
                        if self.layers[k].input_dim != self.layers[k].output_dim:
                            raise GroupError(f"1:1 group layer {k} is not square")
        for k, lay in enumerate(self.layers):
            if k not in covered and lay.output_dim > lay.input_dim:
                raise GroupError(f"layer {k} expands dimension outside an expand-contract group")

    # parameters -----------------------------------------------------------

    def params(self):
        return [{"w": lay.map.params.copy(), "b": lay.bias.copy(), "alpha0": lay.alpha0.copy()}
                for lay in self.layers]

    def with_params(self, params):
        layers = [replace(lay, map=lay.map.with_params(p["w"]), bias=np.array(p["b"]),
                          alpha0=np.array(p["alpha0"]))
                  for lay, p in zip(self.layers, params)]
        return replace(self, layers=layers)

    def truncated(self, depth):
        """The generative chain ending after ``depth`` layers."""
        if not 1 <= depth <= len(self.layers):
            raise ValueError(f"depth must be in 1..{len(self.layers)}")
        groups = [g for g in self.groups if g.stop <= depth]
        cut = [g for g in self.groups if g.start < depth < g.stop]
        if cut:
            raise GroupError(f"depth {depth} splits group {cut[0]}")
        return replace(self, layers=self.layers[:depth], groups=groups)


# ---------------------------------------------------------------------------
# forward pass


@dataclass
class ForwardTrace:
    inputs: list   # layer inputs x_l
    pre: list      # pre-activations u_l = W'x_l + b_l
    post: list     # activations a_l

    @property
    def features(self):
        return self.pre[-1]


def check_support(prior, x, layer_index):
    ok = prior.in_support(x)
    if not np.all(ok):
        bad = np.argwhere(~np.atleast_2d(ok))[0]
        raise DomainError(
            f"layer {layer_index} input component {int(bad[-1])} = "
            f"{float(np.atleast_2d(x)[tuple(bad)]):.4g} is outside the {prior.support} support")


def forward_pass(net, x):
    """Run ``x`` (shape (N,) or (B, N)) through all layers, recording everything."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != net.input_dim:
        raise ShapeError(f"input has dimension {x.shape[-1]}, network expects {net.input_dim}")
    check_support(net.layers[0].prior, x, 0)
    inputs, pre, post = [], [], []
    for lay in net.layers:
        inputs.append(x)
        u = lay.pre_activation(x)
        x = lay.activation(u)
        pre.append(u)
        post.append(x)
    return ForwardTrace(inputs, pre, post)


def glg_compose(net, segment):
    """Composite linear map of a Gaussian layer group."""
    if isinstance(segment, (Group, Segment)):
        start, stop = segment.start, segment.stop
        kind = segment.kind
    else:
        start, stop = segment
        kind = "glg"
    if kind != "glg":
        raise GroupError(f"segment kind {kind!r} is not a GLG")
    for k in range(start, stop):
        lay = net.layers[k]
        if lay.prior is not GAUSSIAN or (k != stop - 1 and lay.activation is not LINEAR):
            raise GroupError(f"layer {k} cannot be part of a GLG")
    maps = [net.layers[k].map for k in range(start, stop)]
    return maps[0] if len(maps) == 1 else ComposedMap(maps)


def _segment_jacobian(net, start, stop, x, include_last_activation):
    """Per-sample Jacobians (B, d, d) of the segment and per-layer cache."""
    x = np.atleast_2d(x)
    mats = [net.layers[k].map.matrix() for k in range(start, stop)]
    jac = None
    cache = []
    cur = x
    for j, k in enumerate(range(start, stop)):
        lay = net.layers[k]
        u = lay.pre_activation(cur)
        last = k == stop - 1
        if last and not include_last_activation:
            d = np.ones_like(u)
        else:
            d = lay.activation.deriv(u)
        f = d[:, :, None] * mats[j].T[None]  # (B, M, N)
        jac = f if jac is None else np.einsum("bij,bjk->bik", f, jac)
        cache.append((cur, u, d, mats[j]))
        cur = lay.activation(u)
    return jac, cache


def jacobian_logdet(net, segment, x, include_last_activation=True):
    """``log|det J|`` of a dimension-preserving segment at ``x``."""
    start, stop = (segment.start, segment.stop) if hasattr(segment, "start") else segment
    first, last = net.layers[start], net.layers[stop - 1]
    if first.input_dim != last.output_dim:
        raise GroupError("segment is not dimension preserving")
    single = np.ndim(x) == 1
    jac, _ = _segment_jacobian(net, start, stop, x, include_last_activation)
    sign, logdet = np.linalg.slogdet(jac)
    if np.any(sign == 0):
        raise SingularJacobian(f"segment {start}:{stop} has a singular Jacobian")
    return float(logdet[0]) if single else logdet


# ---------------------------------------------------------------------------
# segment evaluators (value + reverse-mode gradient)


class _PlainEval:
    """One layer with a saddle-point term."""

    def __init__(self, net, seg):
        self.net = net
        self.k = seg.start
        self.layer = net.layers[seg.start]

    def forward(self, x, need):
        lay = self.layer
        lmap, prior, alpha0 = lay.map, lay.prior, lay.alpha0
        b = x.shape[0]
        z = lmap.forward(x)
        u = z + lmap.expand_bias(lay.bias)
        log_p0_x = np.sum(prior.logpdf(x, alpha0), axis=1)
        log_p0_z = np.full(b, np.nan)
        ok = np.zeros(b, dtype=bool)
        idx = np.flatnonzero(need)
        cache = {"x": x, "idx": idx}
        if idx.size:
            if prior is GAUSSIAN:
                solver = GaussianSolver(lmap, alpha0)
                h = solver.solve(z[idx])
                log_p0_z[idx] = solver.log_density(z[idx])
                ok[idx] = True
                cache.update(solver=solver, h=h)
            else:
                w = lmap.matrix()
                dense = DenseMap(w)
                h0 = lay.estimator.warm_start(z[idx]) if lay.estimator is not None else None
                sol = newton_batch(dense, prior, z[idx], h0, alpha0, self.net.tol, self.net.max_iter)
                good = sol.status == CONVERGED
                dens = saddle_density_dense(w, prior, alpha0, z[idx], sol.h,
                                            self.net.correction, with_grad=True)
                good &= dens.ok
                log_p0_z[idx[good]] = dens.log_p0z[good]
                ok[idx[good]] = True
                cache.update(w=w, h=sol.h, dens=dens, good=good, iterations=sol.iterations)
        term = log_p0_x - log_p0_z
        cache["z"] = z
        return u, term, ok, {"log_p0_x": log_p0_x, "log_p0_z": log_p0_z}, cache

    def backward(self, cache, g_u, wts):
        lay = self.layer
        lmap, prior, alpha0 = lay.map, lay.prior, lay.alpha0
        x, idx = cache["x"], cache["idx"]
        g_b = lmap.reduce_bias(g_u)
        g_z = g_u.copy()
        g_x_extra = np.zeros_like(x)
        g_w = np.zeros_like(lmap.params)
        g_a0 = np.zeros_like(alpha0)
        if idx.size:
            wi = wts[idx]
            xi = x[idx]
            if prior is GAUSSIAN:
                solver, h = cache["solver"], cache["h"]
                x_hat = alpha0 + lmap.adjoint(h)
                g_z[idx] += wi[:, None] * h
                p = solver.factor.inverse()
                g_w += lmap.param_grad(-wi[:, None] * x_hat, h)
                g_w += wi.sum() * lmap.param_grad(lmap.adjoint(p), np.eye(lmap.output_dim))
                g_a0 += wi @ (xi - x_hat)
            else:
                good = cache["good"]
                wi = np.where(good, wi, 0.0)
                w, h, dens = cache["w"], cache["h"], cache["dens"]
                h = np.where(good[:, None], h, 0.0)
                x_hat = np.where(good[:, None], dens.x_hat, 0.0)
                s = np.where(good[:, None], dens.s, 0.0)
                lam1 = np.where(good[:, None], dens.lam1, 0.0)
                p = np.where(good[:, None, None], dens.p, 0.0)
                e = np.where(good[:, None, None], dens.e, 0.0)
                v = np.einsum("bmk,bk->bm", p, s @ w)
                lwv = lam1 * (v @ w.T)
                g_z[idx] += wi[:, None] * (h + v)
                e_sum = np.einsum("b,bnm->nm", wi, e)
                g_w += lmap.param_grad(wi[:, None] * (s - x_hat - lwv), h)
                g_w += lmap.param_grad(-wi[:, None] * x_hat, v)
                g_w += lmap.param_grad(e_sum.T, np.eye(lmap.output_dim))
                g_a0 += wi @ (xi - x_hat + s - lwv)
            g_x_extra[idx] = wi[:, None] * (alpha0 + prior.dlog_base(xi))
        g_w += lmap.param_grad(x, g_z)
        g_x = lmap.adjoint(g_z) + g_x_extra
        return g_x, {self.k: {"w": g_w, "b": g_b, "alpha0": g_a0}}


class _GLGEval:
    """Gaussian layer group: one closed-form Gaussian term for the composite map."""

    def __init__(self, net, seg):
        self.net = net
        self.seg = seg
        self.layers = [net.layers[k] for k in seg.layers]
        self.comp = ComposedMap([lay.map for lay in self.layers])

    def forward(self, x, need):
        first = self.layers[0]
        u = x
        ins = []
        for lay in self.layers:
            ins.append(u)
            u = lay.pre_activation(u)
        b = x.shape[0]
        log_p0_x = np.sum(GAUSSIAN.logpdf(x, first.alpha0), axis=1)
        log_p0_z = np.full(b, np.nan)
        idx = np.flatnonzero(need)
        ok = np.zeros(b, dtype=bool)
        cache = {"x": x, "idx": idx, "ins": ins}
        if idx.size:
            solver = GaussianSolver(self.comp, first.alpha0)
            zc = self.comp.forward(x[idx])
            log_p0_z[idx] = solver.log_density(zc)
            cache.update(solver=solver, h=solver.solve(zc))
            ok[idx] = True
        return u, log_p0_x - log_p0_z, ok, {"log_p0_x": log_p0_x, "log_p0_z": log_p0_z}, cache

    def backward(self, cache, g_u, wts):
        x, idx = cache["x"], cache["idx"]
        first = self.layers[0]
        out = {}
        # the upstream gradient flows through the biased interior layer by layer
        g = g_u
        for j in range(len(self.layers) - 1, -1, -1):
            lay = self.layers[j]
            out[self.seg.start + j] = {"b": lay.map.reduce_bias(g),
                                       "w": lay.map.param_grad(cache["ins"][j], g),
                                       "alpha0": np.zeros_like(lay.alpha0)}
            g = lay.map.adjoint(g)
        g_x = g
        # the likelihood term depends only on the composite map
        g_zc = np.zeros_like(g_u)
        pairs = []
        g_x_extra = np.zeros_like(x)
        if idx.size:
            wi = wts[idx]
            solver, h = cache["solver"], cache["h"]
            x_hat = first.alpha0 + self.comp.adjoint(h)
            g_zc[idx] += wi[:, None] * h
            p = solver.factor.inverse()
            m = self.comp.output_dim
            pairs.append((-wi[:, None] * x_hat, h))
            pairs.append((wi.sum() * self.comp.adjoint(p), np.eye(m)))
            out[self.seg.start]["alpha0"] = wi @ (x[idx] - x_hat)
            g_x_extra[idx] = wi[:, None] * (first.alpha0 - x[idx])
        pairs.append((x, g_zc))
        # the pairs enter additively, so one stacked pass covers them all
        a = np.concatenate([p[0] for p in pairs])
        bb = np.concatenate([p[1] for p in pairs])
        for j, gw in enumerate(self.comp.param_grads(a, bb)):
            out[self.seg.start + j]["w"] = out[self.seg.start + j]["w"] + gw
        g_x = g_x + self.comp.adjoint(g_zc) + g_x_extra
        return g_x, out


class _SquareEval:
    """Dimension-preserving (1:1 or expand-contract) segment."""

    def __init__(self, net, seg):
        self.net = net
        self.seg = seg
        self.layers = [net.layers[k] for k in seg.layers]

    def forward(self, x, need):
        jac, lcache = _segment_jacobian(self.net, self.seg.start, self.seg.stop, x, False)
        u = lcache[-1][1]
        sign, logdet = np.linalg.slogdet(jac)
        ok = sign != 0
        term = np.where(ok, logdet, np.nan)
        return u, term, ok, {"log_jacobian": term}, {"jac": jac, "layers": lcache, "ok": ok}

    def backward(self, cache, g_u, wts):
        jac, lcache = cache["jac"], cache["layers"]
        ok = cache["ok"]
        wts = np.where(ok, wts, 0.0)
        bsz, dim = jac.shape[0], jac.shape[1]
        jac_safe = np.where(ok[:, None, None], jac, np.eye(dim))
        jinv = np.linalg.inv(jac_safe)
        nl = len(self.layers)
        factors = [lc[2][:, :, None] * lc[3].T[None] for lc in lcache]  # F_k (B, M_k, N_k)
        # prefix products Q_k = F_{k-1}...F_1 (B, N_k, d); suffix P_k = F_m...F_{k+1} (B, d, M_k)
        prefix = [np.broadcast_to(np.eye(dim), (bsz, dim, dim))]
        for k in range(nl - 1):
            prefix.append(np.einsum("bij,bjk->bik", factors[k], prefix[-1]))
        suffix = [None] * nl
        suffix[-1] = np.broadcast_to(np.eye(dim), (bsz, dim, dim))
        for k in range(nl - 2, -1, -1):
            suffix[k] = np.einsum("bij,bjk->bik", suffix[k + 1], factors[k + 1])
        out = {}
        g_u_extra = []
        for k in range(nl):
            x_k, u_k, d_k, w_k = lcache[k]
            qjp = np.einsum("bij,bjk,bkl->bil", prefix[k], jinv, suffix[k])  # (B, N_k, M_k)
            qjp = wts[:, None, None] * qjp
            e = np.einsum("bnm,bm->nm", qjp, d_k)
            lay = self.layers[k]
            g_w = lay.map.param_grad(e.T, np.eye(lay.output_dim))
            out[self.seg.start + k] = {"w": g_w}
            if k < nl - 1:
                diag = np.einsum("bnj,nj->bj", qjp, w_k)
                g_u_extra.append(lay.activation.deriv2(u_k) * diag)
        g_x, chain = chain_backward(self.layers, [lc[0] for lc in lcache],
                                    [lc[1] for lc in lcache], g_u, g_u_extra)
        for k, d in enumerate(chain):
            d["w"] = d["w"] + out[self.seg.start + k]["w"]
            out[self.seg.start + k] = d
        return g_x, out


def chain_backward(layers, inputs, pres, g_u, extra=None):
    """Reverse pass through ``u_k = W_k'x_k + b_k``, ``x_{k+1} = act_k(u_k)``.

    ``g_u`` is the gradient at the last pre-activation; ``extra[k]`` an
    optional additional gradient at ``u_k`` for the interior layers.
    Returns the input gradient and a list of per-layer gradient dicts.
    """
    grads = [None] * len(layers)
    g = g_u
    for k in range(len(layers) - 1, -1, -1):
        lay = layers[k]
        grads[k] = {"w": lay.map.param_grad(inputs[k], g), "b": lay.map.reduce_bias(g),
                    "alpha0": np.zeros_like(lay.alpha0)}
        g_x = lay.map.adjoint(g)
        if k > 0:
            g = g_x * layers[k - 1].activation.deriv(pres[k - 1])
            if extra is not None:
                g = g + extra[k - 1]
    return g_x, grads


_EVALUATORS = {"plain": _PlainEval, "glg": _GLGEval, "onetoone": _SquareEval, "ecg": _SquareEval}


@dataclass
class LayerLogLik:
    """Per-segment likelihood contributions (arrays over the batch)."""
    segment: Segment
    log_p0_x: np.ndarray | None
    log_p0_z: np.ndarray | None
    log_jacobian: np.ndarray | None
    activation: np.ndarray   # sum log act'(u) of the segment's last layer (0 at the end)
    contribution: np.ndarray


@dataclass
class Evaluation:
    total: np.ndarray         # (B,) NaN where any solve failed
    terms: list
    features: np.ndarray      # (B, M_L) pre-activation of the last layer
    post: np.ndarray          # (B, M_L) activation of the last layer
    ok: np.ndarray            # (B,)
    caches: list
    pre: list                 # per-segment last pre-activation


def evaluate(net, x, output_prior=None, need=None):
    """Batched PBN log-likelihood with everything kept for the gradient.

    ``need`` masks the samples whose likelihood is required; the others
    only get the forward pass (they are used by the discriminative term).
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != net.input_dim:
        raise ShapeError(f"input has dimension {x.shape[1]}, network expects {net.input_dim}")
    b = x.shape[0]
    need = np.ones(b, dtype=bool) if need is None else np.asarray(need, dtype=bool)
    if np.any(need):
        check_support(net.layers[0].prior, x[need], 0)
    segs = net.segments()
    total = np.zeros(b)
    ok = need.copy()
    terms, caches, pres = [], [], []
    cur = x
    for i, seg in enumerate(segs):
        ev = _EVALUATORS[seg.kind](net, seg)
        u, term, seg_ok, parts, cache = ev.forward(cur, need)
        last = net.layers[seg.stop - 1]
        terminal = i == len(segs) - 1
        if terminal:
            act_term = np.zeros(b)
            nxt = last.activation(u)
        else:
            act_term = np.sum(last.activation.log_deriv(u), axis=1)
            nxt = last.activation(u)
        contribution = term + act_term
        ok &= seg_ok | ~need
        total = total + np.where(need, contribution, 0.0)
        terms.append(LayerLogLik(seg, parts.get("log_p0_x"), parts.get("log_p0_z"),
                                 parts.get("log_jacobian"), act_term, contribution))
        caches.append((ev, cache))
        pres.append(u)
        cur = nxt
    features = pres[-1]
    if output_prior is not None:
        total = total + output_prior.log_density(features)
    total = np.where(ok & need, total, np.nan)
    return Evaluation(total=total, terms=terms, features=features, post=cur, ok=ok & need,
                      caches=caches, pre=pres)


def backward(net, ev, gen_weights, g_features=None, g_post=None, output_prior=None):
    """Reverse pass: gradient of ``sum_b gen_weights[b] * total[b]`` plus the
    externally supplied gradients with respect to the final pre-activation
    (``g_features``) and activation (``g_post``).  Returns per-layer dicts."""
    segs = net.segments()
    b = ev.features.shape[0]
    wts = np.where(ev.ok, gen_weights, 0.0)
    g_u = np.zeros_like(ev.features)
    if output_prior is not None:
        g_u += wts[:, None] * output_prior.grad(ev.features)
    if g_features is not None:
        g_u += g_features
    last = net.layers[-1]
    if g_post is not None:
        g_u += g_post * last.activation.deriv(ev.features)
    grads = [None] * len(net.layers)
    for i in range(len(segs) - 1, -1, -1):
        evaluator, cache = ev.caches[i]
        g_x, part = evaluator.backward(cache, g_u, wts)
        for k, d in part.items():
            grads[k] = d
        if i > 0:
            prev_u = ev.pre[i - 1]
            act = net.layers[segs[i - 1].stop - 1].activation
            g_u = g_x * act.deriv(prev_u) + wts[:, None] * act.dlog_deriv(prev_u)
    del b
    return grads


def pbn_log_likelihood(net, x, output_prior):
    """Total log-likelihood of ``x`` and its per-segment terms.

    For a single sample returns ``(float, terms)``; for a batch the total is
    an array with NaN where a saddle solve failed.
    """
    single = np.ndim(x) == 1
    ev = evaluate(net, x, output_prior)
    if single:
        if not ev.ok[0]:
            _raise_failure(net, ev)
        return float(ev.total[0]), ev.terms
    return ev.total, ev.terms


def _raise_failure(net, ev):
    from .errors import NoConvergence
    for term in ev.terms:
        vals = term.log_p0_z if term.log_p0_z is not None else term.log_jacobian
        if vals is not None and not np.all(np.isfinite(vals)):
            seg = term.segment
            err = NoConvergence(float("nan"), 0) if term.log_p0_z is not None else \
                SingularJacobian("singular Jacobian")
            err.args = (f"layer {seg.start}: {err.args[0]}",)
            err.layer = seg.start
            raise err
    raise NoConvergence(float("nan"), 0)


def gaussian_logdensity(mean, var, x):
    return -0.5 * np.sum(np.log(2.0 * math.pi * var) + (x - mean) ** 2 / var, axis=-1)
