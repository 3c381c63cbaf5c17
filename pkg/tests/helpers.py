"""Shared oracles for the test suite: finite differences and tensor quadrature."""
import copy

import numpy as np

from pbn.linops import DenseMap
from pbn.network import LayerSpec, evaluate


def scaled_orthonormal(rng, n, m, scale=1.2):
    if m > n:
        return 0.6 * rng.standard_normal((n, m))
    q, _ = np.linalg.qr(rng.standard_normal((n, m)))
    return scale * q


def dense_layer(rng, n, m, **kw):
    kw.setdefault("bias", 0.1 * rng.standard_normal(m))
    kw.setdefault("alpha0", 0.2 * rng.standard_normal(n))
    return LayerSpec(DenseMap(scaled_orthonormal(rng, n, m)), **kw)


def fd_param_grads(f, params, eps=1e-5):
    """Central differences of ``f(params)`` for every array in a nested list/dict."""
    def leaves(tree, path=()):
        if isinstance(tree, dict):
            for k, v in tree.items():
                yield from leaves(v, path + (k,))
        elif isinstance(tree, list):
            for k, v in enumerate(tree):
                yield from leaves(v, path + (k,))
        elif tree is not None:
            yield path

    def get(tree, path):
        for p in path:
            tree = tree[p]
        return tree

    out = {}
    for path in leaves(params):
        base = get(params, path)
        g = np.zeros(base.size)
        for i in range(base.size):
            q = copy.deepcopy(params)
            get(q, path).ravel()[i] += eps
            fp = f(q)
            get(q, path).ravel()[i] -= 2 * eps
            fm = f(q)
            g[i] = (fp - fm) / (2 * eps)
        out[path] = g.reshape(base.shape)
    return out


def lookup(tree, path):
    for p in path:
        tree = tree[p]
    return tree


def rel_err(a, b):
    a, b = np.ravel(a), np.ravel(b)
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12)


def grad_close(a, b, rtol, atol=1e-10):
    """Relative agreement, with an absolute floor for blocks whose true gradient is zero."""
    return rel_err(a, b) < rtol or np.max(np.abs(np.ravel(a) - np.ravel(b)), initial=0.0) < atol


def gl_nodes(kind, n, s=1.0):
    """Gauss-Legendre nodes on [0,1] ('unit'), or tan-mapped onto [0,inf) ('half') / R ('full')."""
    t, w = np.polynomial.legendre.leggauss(n)
    if kind == "unit":
        return 0.5 * (t + 1), 0.5 * w
    if kind == "half":
        th = np.pi * (t + 1) / 4
        return s * np.tan(th), w * s * np.pi / 4 / np.cos(th) ** 2
    if kind == "full":
        th = np.pi * t / 2
        return s * np.tan(th), w * s * np.pi / 2 / np.cos(th) ** 2
    if kind == "interval":
        raise ValueError("use gl_interval")
    raise ValueError(kind)


def gl_interval(a, b, n):
    t, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (b - a) * (t + 1) + a, 0.5 * (b - a) * w


def integrate_likelihood(net, output_prior, x1, w1, chunk=200_000):
    """Tensor-product quadrature of exp(log-likelihood) over the input space."""
    d = net.input_dim
    grids = np.meshgrid(*[x1] * d, indexing="ij")
    x = np.stack([g.ravel() for g in grids], axis=1)
    wt = np.prod(np.stack(np.meshgrid(*[w1] * d, indexing="ij")), axis=0).ravel()
    total, bad = 0.0, 0
    for i in range(0, len(x), chunk):
        ll = evaluate(net, x[i:i + chunk], output_prior).total
        fin = np.isfinite(ll)
        bad += int(np.sum(~fin))
        total += float(np.sum(wt[i:i + chunk][fin] * np.exp(ll[fin])))
    return total, bad
