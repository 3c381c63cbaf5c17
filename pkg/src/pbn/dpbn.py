"""Deterministic back-projection (D-PBN auto-encoder).

Each layer maps its output back to the conditional mean of its input
given the output, ``x_hat = lam(alpha0 + W h)``, where ``h`` is the
saddle point for ``z``.  Chaining this from the terminal features down to
the input (inverting the activations in between) gives the reconstruction.
Dimension-preserving segments are inverted exactly by Newton's method.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError, InfeasibleTarget, NoConvergence
from .linops import ComposedMap, DenseMap, batch_cho_solve, batch_cholesky
from .maxent import GAUSSIAN
from .network import _segment_jacobian, chain_backward, evaluate
from .saddle import CONVERGED, INFEASIBLE, GaussianSolver, newton_batch


@dataclass
class ReconstructionTrace:
    x_hat: list          # reconstructed input of every layer, in layer order
    residuals: list      # per-segment forward residual ||T(x_hat) - z||_inf
    ok: np.ndarray       # (B,) samples whose back-projection succeeded
    error: np.ndarray | None = None   # (B,) mean squared error vs. the original input

    @property
    def reconstruction(self):
        return self.x_hat[0]


# ---------------------------------------------------------------------------
# single layer


def _solve_layer(lay, z, tol, max_iter):
    """Saddle points for a batch of (bias-free) outputs ``z`` of one layer."""
    lmap, prior = lay.map, lay.prior
    if prior is GAUSSIAN:
        solver = GaussianSolver(lmap, lay.alpha0)
        h = solver.solve(z)
        return h, np.ones(z.shape[0], dtype=bool), np.full(z.shape[0], CONVERGED), {"solver": solver}
    w = lmap.matrix()
    h0 = lay.estimator.warm_start(z) if lay.estimator is not None else None
    sol = newton_batch(DenseMap(w), prior, z, h0, lay.alpha0, tol, max_iter)
    return sol.h, sol.status == CONVERGED, sol.status, {"w": w}


def backproject_layer(layer, z, tol=1e-9, max_iter=100):
    """Conditional-mean input ``lam(alpha0 + W h)`` for layer output ``z``.

    ``z`` is the linear output ``W'x`` (the bias already removed).  A single
    vector raises on failure; a batch returns NaN rows instead.
    """
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    zb = np.atleast_2d(z)
    h, ok, status, _ = _solve_layer(layer, zb, tol, max_iter)
    x_hat = layer.prior.lam(layer.alpha0 + layer.map.adjoint(h))
    if single:
        if status[0] == INFEASIBLE:
            raise InfeasibleTarget("target lies outside the range of the layer")
        if not ok[0]:
            raise NoConvergence(float("nan"), max_iter)
        return x_hat[0]
    return np.where(ok[:, None], x_hat, np.nan)


# ---------------------------------------------------------------------------
# segment back-projection with caches for the reverse pass


def _bias_offset(layers):
    """Output of a linear chain at zero input, with its inputs and pre-activations."""
    x = np.zeros((1, layers[0].input_dim))
    ins, pres = [], []
    for lay in layers:
        ins.append(x)
        x = lay.pre_activation(x)
        pres.append(x)
    return x[0], (ins, pres)


class _PlainBack:
    def __init__(self, net, seg):
        self.net, self.k = net, seg.start
        self.layer = net.layers[seg.start]

    def run(self, u):
        lay = self.layer
        z = u - lay.map.expand_bias(lay.bias)
        h, ok, _, extra = _solve_layer(lay, z, self.net.tol, self.net.max_iter)
        h = np.where(ok[:, None], h, 0.0)
        alpha = lay.alpha0 + lay.map.adjoint(h)
        x_hat = lay.prior.lam(alpha)
        resid = np.max(np.abs(lay.map.forward(x_hat) - z), axis=1)
        return x_hat, ok, resid, dict(extra, h=h, alpha=alpha, x_hat=x_hat, ok=ok)

    def backward(self, cache, g):
        lay = self.layer
        lmap, prior = lay.map, lay.prior
        ok = cache["ok"]
        g = np.where(ok[:, None], g, 0.0)
        h, alpha, x_hat = cache["h"], cache["alpha"], cache["x_hat"]
        lam1 = prior.dlam(alpha)
        g_alpha = lam1 * g
        g_h = lmap.forward(g_alpha)
        if prior is GAUSSIAN:
            w_ = cache["solver"].factor.solve(g_h.T).T
        else:
            wm = cache["w"]
            c = np.einsum("nm,bn,nk->bmk", wm, lam1, wm, optimize=True)
            lower, good = batch_cholesky(c)
            w_ = batch_cho_solve(lower, g_h[:, :, None])[:, :, 0]
            w_ = np.where((good & ok)[:, None], w_, 0.0)
        lww = lam1 * lmap.adjoint(w_)
        g_w = (lmap.param_grad(g_alpha, h) + lmap.param_grad(-x_hat, w_)
               + lmap.param_grad(-lww, h))
        grads = {self.k: {"w": g_w, "b": -lmap.reduce_bias(w_),
                          "alpha0": np.sum(g_alpha - lww, axis=0)}}
        return w_, grads


class _GLGBack:
    def __init__(self, net, seg):
        self.net, self.seg = net, seg
        self.layers = [net.layers[k] for k in seg.layers]
        self.comp = ComposedMap([lay.map for lay in self.layers])

    def run(self, u):
        first = self.layers[0]
        offset, ins0 = _bias_offset(self.layers)
        solver = GaussianSolver(self.comp, first.alpha0)
        z = u - offset
        h = solver.solve(z)
        x_hat = first.alpha0 + self.comp.adjoint(h)
        resid = np.max(np.abs(self.comp.forward(x_hat) - z), axis=1)
        ok = np.ones(u.shape[0], dtype=bool)
        return x_hat, ok, resid, {"solver": solver, "h": h, "x_hat": x_hat, "ins0": ins0}

    def backward(self, cache, g):
        solver, h, x_hat = cache["solver"], cache["h"], cache["x_hat"]
        g_h = self.comp.forward(g)
        w_ = solver.factor.solve(g_h.T).T
        out = {}
        # z = u - offset(W, b): the offset gradient flows through the biased chain at zero input
        g_off = -np.sum(w_, axis=0, keepdims=True)
        ins0, pres0 = cache["ins0"]
        _, chain = chain_backward(self.layers, ins0, pres0, g_off)
        for j, d in enumerate(chain):
            out[self.seg.start + j] = d
        a = np.concatenate([g, -x_hat, -self.comp.adjoint(w_)])
        b = np.concatenate([h, w_, h])
        for j, gw in enumerate(self.comp.param_grads(a, b)):
            out[self.seg.start + j]["w"] = out[self.seg.start + j]["w"] + gw
        out[self.seg.start]["alpha0"] = np.sum(g - self.comp.adjoint(w_), axis=0)
        return w_, out


class _SquareBack:
    """Exact inversion of a dimension-preserving segment by Newton's method."""

    def __init__(self, net, seg):
        self.net, self.seg = net, seg
        self.layers = [net.layers[k] for k in seg.layers]

    def _forward(self, x):
        for lay in self.layers[:-1]:
            x = lay.activation(lay.pre_activation(x))
        return self.layers[-1].pre_activation(x)

    def run(self, u, tol=1e-12, max_iter=100):
        start, stop = self.seg.start, self.seg.stop
        x = np.zeros_like(u)
        ok = np.ones(u.shape[0], dtype=bool)
        scale = np.maximum(1.0, np.max(np.abs(u), axis=1))
        for _ in range(max_iter):
            r = self._forward(x) - u
            done = np.max(np.abs(r), axis=1) <= tol * scale
            if np.all(done):
                break
            jac, _ = _segment_jacobian(self.net, start, stop, x, False)
            try:
                step = np.linalg.solve(jac, r[:, :, None])[:, :, 0]
            except np.linalg.LinAlgError:
                # a sample sits on a singular point; least squares keeps the rest moving
                step = np.stack([np.linalg.lstsq(j, rr, rcond=None)[0] for j, rr in zip(jac, r)])
            # damp until the squared residual decreases (the Newton direction descends on it)
            merit = np.sum(r * r, axis=1)
            t = np.where(done, 0.0, 1.0)
            for _ in range(40):
                cand = x - t[:, None] * step
                new = np.sum((self._forward(cand) - u) ** 2, axis=1)
                worse = ~(new < merit) & ~done
                if not np.any(worse):
                    break
                t = np.where(worse, 0.5 * t, t)
            x = np.where(worse[:, None], x, cand)
        resid = np.max(np.abs(self._forward(x) - u), axis=1)
        ok &= resid <= max(1e-9, 1e3 * tol) * scale
        jac, lcache = _segment_jacobian(self.net, start, stop, x, False)
        return x, ok, resid, {"jac": jac, "layers": lcache, "ok": ok}

    def backward(self, cache, g):
        jac, lcache, ok = cache["jac"], cache["layers"], cache["ok"]
        g = np.where(ok[:, None], g, 0.0)
        jac = np.where(ok[:, None, None], jac, np.eye(jac.shape[1]))
        w_ = np.linalg.solve(np.swapaxes(jac, 1, 2), g[:, :, None])[:, :, 0]
        _, chain = chain_backward(self.layers, [lc[0] for lc in lcache],
                                  [lc[1] for lc in lcache], -w_)
        return w_, {self.seg.start + j: d for j, d in enumerate(chain)}


_BACK = {"plain": _PlainBack, "glg": _GLGBack, "onetoone": _SquareBack, "ecg": _SquareBack}


def _reconstruct(net, features):
    u = np.atleast_2d(np.asarray(features, dtype=np.float64))
    segs = net.segments()
    ok = np.ones(u.shape[0], dtype=bool)
    x_hats = [None] * len(net.layers)
    residuals = [None] * len(segs)
    caches = [None] * len(segs)
    for i in range(len(segs) - 1, -1, -1):
        seg = segs[i]
        back = _BACK[seg.kind](net, seg)
        x_hat, seg_ok, resid, cache = back.run(np.where(ok[:, None], u, 0.0) if i < len(segs) - 1 else u)
        ok &= seg_ok
        x_hats[seg.start] = np.where(ok[:, None], x_hat, np.nan)
        residuals[i] = resid
        caches[i] = (back, cache)
        if i > 0:
            act = net.layers[seg.start - 1].activation
            y = np.where(ok[:, None], x_hat, _safe_point(act))
            inside = _in_range(act, y)
            bad = ok & ~np.all(inside, axis=1)
            ok &= ~bad
            y = np.where(ok[:, None], y, _safe_point(act))
            u = act.inverse(y)
            caches[i] = (back, cache, u)
    for seg in segs:
        for k in range(seg.start + 1, seg.stop):
            x_hats[k] = None
    return ReconstructionTrace(x_hat=x_hats, residuals=residuals, ok=ok), caches


def _safe_point(act):
    return 0.5 if act.support == "unit_interval" else 1.0


def _in_range(act, y):
    if act.support == "nonnegative":
        return y > 0
    if act.support == "unit_interval":
        return (y > 0) & (y < 1)
    return np.isfinite(y)


def reconstruct(net, features):
    """Back-project terminal pre-activation features to the input.

    Returns a :class:`ReconstructionTrace`.  A single feature vector raises
    on failure; for a batch, failed rows are NaN and flagged in ``ok``.
    """
    single = np.ndim(features) == 1
    trace, _ = _reconstruct(net, features)
    if single and not trace.ok[0]:
        raise DomainError("back-projection failed (infeasible saddle point or activation "
                          "inversion out of range)")
    return trace


def reconstruction_error(net, x):
    """Mean squared reconstruction error per sample; +inf where back-projection fails."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xb = np.atleast_2d(x)
    ev = evaluate(net, xb, need=np.zeros(xb.shape[0], dtype=bool))
    trace, _ = _reconstruct(net, ev.features)
    err = np.mean((xb - trace.reconstruction) ** 2, axis=1)
    err = np.where(trace.ok, err, np.inf)
    trace.error = err
    return float(err[0]) if single else err


def reconstruction_error_and_grad(net, x, weights):
    """Weighted sum of reconstruction errors and its parameter gradient.

    Gradients flow through both the encoder (forward pass) and the
    back-projection; failed samples contribute nothing.
    """
    from .network import backward
    xb = np.atleast_2d(np.asarray(x, dtype=np.float64))
    n = xb.shape[1]
    ev = evaluate(net, xb, need=np.zeros(xb.shape[0], dtype=bool))
    trace, caches = _reconstruct(net, ev.features)
    ok = trace.ok
    wts = np.where(ok, weights, 0.0)
    x_hat = np.where(ok[:, None], trace.reconstruction, 0.0)
    err = np.where(ok, np.mean((xb - x_hat) ** 2, axis=1), np.inf)
    value = float(np.sum(wts[ok] * err[ok]))
    g = (2.0 / n) * wts[:, None] * (x_hat - xb)
    segs = net.segments()
    grads = [None] * len(net.layers)
    for i in range(len(segs)):
        entry = caches[i]
        back, cache = entry[0], entry[1]
        g_u, part = back.backward(cache, g)
        for k, d in part.items():
            grads[k] = d
        if i < len(segs) - 1:
            u_prev = caches[i + 1][2]
            act = net.layers[segs[i + 1].start - 1].activation
            g = np.where(ok[:, None], g_u / act.deriv(u_prev), 0.0)
        else:
            g_features = np.where(ok[:, None], g_u, 0.0)
    enc = backward(net, ev, np.zeros(xb.shape[0]), g_features=g_features)
    for k in range(len(grads)):
        for key in grads[k]:
            grads[k][key] = grads[k][key] + enc[k][key]
    return value, err, grads
