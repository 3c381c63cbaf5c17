"""Linear maps (dense and valid-mode strided convolution) and SPD solves.

Every map represents a linear transformation ``z = W'x`` from an input of
dimension N to an output of dimension M.  Vectors are flat float64 arrays;
any leading axes are treated as a batch.  Convolutional maps never build W.
"""
from __future__ import annotations

import math

import numpy as np
import scipy.linalg
from scipy.linalg import lapack

from .errors import ShapeError, SingularMatrix


def as_tensor(x, shape=None):
    """Return ``x`` as a float64 array, rejecting NaN/Inf and bad shapes."""
    arr = np.asarray(x, dtype=np.float64)
    if shape is not None and arr.shape != tuple(shape):
        raise ShapeError(f"expected shape {tuple(shape)}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor contains non-finite values")
    return arr


def conv_output_extent(n_in, k, stride):
    """Extent of a valid correlation of length ``n_in`` with kernel ``k``,
    keeping every ``stride``-th position starting at 0."""
    if n_in < k:
        raise ShapeError(f"input extent {n_in} smaller than kernel {k}")
    return -(-(n_in - k + 1) // stride)


class LinearMap:
    """Common interface.  Subclasses define ``forward`` and ``adjoint``."""

    input_dim: int
    output_dim: int

    def _check(self, x, dim, what):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1:] != (dim,):
            raise ShapeError(f"{what}: expected trailing dimension {dim}, got shape {x.shape}")
        return x

    def forward(self, x):
        raise NotImplementedError

    def adjoint(self, h):
        raise NotImplementedError

    # parameters ---------------------------------------------------------

    @property
    def params(self):
        return None

    def with_params(self, params):
        raise NotImplementedError

    def param_grad(self, x, g):
        """Gradient of ``sum <g, W'x>`` with respect to the map parameters,
        summed over any leading batch axes of ``x`` and ``g``."""
        raise NotImplementedError

    @property
    def bias_size(self):
        return self.output_dim

    def expand_bias(self, b):
        return b

    def reduce_bias(self, g):
        return g.reshape(-1, self.output_dim).sum(axis=0)

    # derived quantities ---------------------------------------------------

    def matrix(self):
        """Materialize W as an N x M array.  Only for small maps and tests."""
        return self.adjoint(np.eye(self.output_dim)).T

    def gram(self, weights=None, block=256):
        """Return ``W' diag(weights) W`` assembled from basis-vector passes.

        ``weights`` may be None (identity), shape (N,) or (B, N); the result
        is (M, M) or (B, M, M) accordingly.
        """
        m = self.output_dim
        batched = weights is not None and np.ndim(weights) == 2
        w = None if weights is None else np.asarray(weights, dtype=np.float64)
        out_shape = (w.shape[0], m, m) if batched else (m, m)
        out = np.empty(out_shape)
        for j0 in range(0, m, block):
            j1 = min(m, j0 + block)
            basis = np.zeros((j1 - j0, m))
            basis[np.arange(j1 - j0), np.arange(j0, j1)] = 1.0
            cols = self.adjoint(basis)  # (J, N)
            if w is None:
                out[j0:j1] = self.forward(cols)
            elif batched:
                out[:, j0:j1] = self.forward(w[:, None, :] * cols[None])
            else:
                out[j0:j1] = self.forward(w * cols)
        # symmetrize away round-off
        return 0.5 * (out + np.swapaxes(out, -1, -2))


class DenseMap(LinearMap):
    """``z = W'x`` with an explicit N x M weight matrix."""

    def __init__(self, weight):
        weight = as_tensor(weight)
        if weight.ndim != 2:
            raise ShapeError("dense weight must be a matrix")
        self.weight = weight
        self.input_dim, self.output_dim = weight.shape

    def forward(self, x):
        x = self._check(x, self.input_dim, "forward")
        return x @ self.weight

    def adjoint(self, h):
        h = self._check(h, self.output_dim, "adjoint")
        return h @ self.weight.T

    @property
    def params(self):
        return self.weight

    def with_params(self, params):
        return DenseMap(params)

    def param_grad(self, x, g):
        x = np.asarray(x).reshape(-1, self.input_dim)
        g = np.asarray(g).reshape(-1, self.output_dim)
        return x.T @ g

    def matrix(self):
        return self.weight

    def gram(self, weights=None, block=256):
        w = self.weight
        if weights is None:
            return w.T @ w
        weights = np.asarray(weights)
        if weights.ndim == 1:
            return w.T @ (weights[:, None] * w)
        return np.einsum("nm,bn,nk->bmk", w, weights, w, optimize=True)

    def __repr__(self):
        return f"DenseMap({self.input_dim}->{self.output_dim})"


class ConvMap(LinearMap):
    """Valid-mode multichannel correlation followed by downsampling.

    kernel has shape (K, C, kh, kw); the input is a (C, H, W) map flattened
    row-major and the output a (K, Ho, Wo) map, where output position
    (p, q) is the valid correlation at (p*sr, q*sc).
    """

    def __init__(self, kernel, in_shape, stride=(1, 1)):
        kernel = as_tensor(kernel)
        if kernel.ndim != 4:
            raise ShapeError("conv kernel must have shape (K, C, kh, kw)")
        in_shape = tuple(int(s) for s in in_shape)
        if len(in_shape) == 2:
            in_shape = (1,) + in_shape
        if kernel.shape[1] != in_shape[0]:
            raise ShapeError(f"kernel expects {kernel.shape[1]} channels, input has {in_shape[0]}")
        self.kernel = kernel
        self.in_shape = in_shape
        self.stride = (int(stride[0]), int(stride[1]))
        k, _, kh, kw = kernel.shape
        ho = conv_output_extent(in_shape[1], kh, self.stride[0])
        wo = conv_output_extent(in_shape[2], kw, self.stride[1])
        self.out_shape = (k, ho, wo)
        self.input_dim = math.prod(in_shape)
        self.output_dim = math.prod(self.out_shape)

    def _slices(self, i, j):
        sr, sc = self.stride
        _, ho, wo = self.out_shape
        return (slice(i, i + sr * (ho - 1) + 1, sr), slice(j, j + sc * (wo - 1) + 1, sc))

    def _windows(self, xs):
        """Strided view (B, C, Ho, Wo, kh, kw) of the receptive fields."""
        _, _, kh, kw = self.kernel.shape
        _, ho, wo = self.out_shape
        sr, sc = self.stride
        win = np.lib.stride_tricks.sliding_window_view(xs, (kh, kw), axis=(2, 3))
        return win[:, :, ::sr, ::sc][:, :, :ho, :wo]

    def _chunks(self, b):
        # bound the im2col copy made by tensordot to ~2**24 doubles
        _, c, kh, kw = self.kernel.shape
        per = max(1, (1 << 24) // max(1, c * kh * kw * self.out_shape[1] * self.out_shape[2]))
        return range(0, b, per), per

    def forward(self, x):
        x = self._check(x, self.input_dim, "forward")
        lead = x.shape[:-1]
        xs = x.reshape((-1,) + self.in_shape)
        out = np.empty((xs.shape[0],) + self.out_shape)
        starts, per = self._chunks(xs.shape[0])
        for b0 in starts:
            win = self._windows(xs[b0:b0 + per])
            y = np.tensordot(win, self.kernel, axes=([1, 4, 5], [1, 2, 3]))
            out[b0:b0 + per] = y.transpose(0, 3, 1, 2)
        return out.reshape(lead + (self.output_dim,))

    def adjoint(self, h):
        h = self._check(h, self.output_dim, "adjoint")
        lead = h.shape[:-1]
        hs = h.reshape((-1,) + self.out_shape)
        out = np.zeros((hs.shape[0],) + self.in_shape)
        _, _, kh, kw = self.kernel.shape
        starts, per = self._chunks(hs.shape[0])
        for b0 in starts:
            # (B, C, kh, kw, Ho, Wo): every kernel tap at once, then scatter
            y = np.tensordot(self.kernel, hs[b0:b0 + per], axes=([0], [1])).transpose(3, 0, 1, 2, 4, 5)
            dst = out[b0:b0 + per]
            for i in range(kh):
                for j in range(kw):
                    rs, cs = self._slices(i, j)
                    dst[:, :, rs, cs] += y[:, :, i, j]
        return out.reshape(lead + (self.input_dim,))

    @property
    def params(self):
        return self.kernel

    def with_params(self, params):
        return ConvMap(params, self.in_shape, self.stride)

    def param_grad(self, x, g):
        xs = np.asarray(x, dtype=np.float64).reshape((-1,) + self.in_shape)
        gs = np.asarray(g, dtype=np.float64).reshape((-1,) + self.out_shape)
        grad = np.zeros_like(self.kernel)
        starts, per = self._chunks(xs.shape[0])
        for b0 in starts:
            win = self._windows(xs[b0:b0 + per])
            grad += np.tensordot(gs[b0:b0 + per], win, axes=([0, 2, 3], [0, 2, 3]))
        return grad

    @property
    def bias_size(self):
        return self.out_shape[0]

    def expand_bias(self, b):
        return np.repeat(b, self.out_shape[1] * self.out_shape[2])

    def reduce_bias(self, g):
        return np.asarray(g).reshape((-1,) + self.out_shape).sum(axis=(0, 2, 3))

    def __repr__(self):
        return f"ConvMap({self.in_shape}->{self.out_shape}, stride={self.stride})"


class ComposedMap(LinearMap):
    """Sequential application ``z = W_k' ... W_1' x`` of several maps."""

    def __init__(self, maps):
        maps = list(maps)
        if not maps:
            raise ShapeError("cannot compose an empty list of maps")
        for a, b in zip(maps, maps[1:]):
            if a.output_dim != b.input_dim:
                raise ShapeError(f"cannot compose {a!r} with {b!r}")
        self.maps = maps
        self.input_dim = maps[0].input_dim
        self.output_dim = maps[-1].output_dim

    def forward(self, x):
        for m in self.maps:
            x = m.forward(x)
        return x

    def adjoint(self, h):
        for m in reversed(self.maps):
            h = m.adjoint(h)
        return h

    def param_grads(self, x, g):
        """Per-factor parameter gradients of ``sum <g, Wc'x>``."""
        ins = [np.asarray(x)]
        for m in self.maps[:-1]:
            ins.append(m.forward(ins[-1]))
        grads = [None] * len(self.maps)
        back = np.asarray(g)
        for k in range(len(self.maps) - 1, -1, -1):
            grads[k] = self.maps[k].param_grad(ins[k], back)
            back = self.maps[k].adjoint(back)
        return grads


# ---------------------------------------------------------------------------
# symmetric positive-definite solves


class SPDFactor:
    """Cholesky factorization of a symmetric positive-definite matrix."""

    def __init__(self, c, sym_tol=1e-10):
        c = as_tensor(c)
        if c.ndim != 2 or c.shape[0] != c.shape[1]:
            raise ShapeError(f"expected a square matrix, got {c.shape}")
        scale = max(1.0, float(np.max(np.abs(c)))) if c.size else 1.0
        if c.size and np.max(np.abs(c - c.T)) > sym_tol * scale:
            raise ValueError("matrix is not symmetric")
        chol, info = lapack.dpotrf(c, lower=1, clean=1)
        if info > 0:
            raise SingularMatrix(
                f"matrix not positive definite at pivot {info - 1}", pivot=info - 1)
        if info < 0:
            raise ValueError(f"dpotrf argument error {info}")
        self.lower = chol
        self.dim = c.shape[0]

    @property
    def logdet(self):
        return 2.0 * float(np.sum(np.log(np.diag(self.lower))))

    def solve(self, b):
        b = np.asarray(b, dtype=np.float64)
        if b.shape[0] != self.dim:
            raise ShapeError(f"rhs has leading dimension {b.shape[0]}, expected {self.dim}")
        return scipy.linalg.cho_solve((self.lower, True), b)

    def inverse(self):
        return self.solve(np.eye(self.dim))


def spd_solve(c, b):
    """Solve ``C y = b`` for symmetric positive-definite C."""
    return SPDFactor(c).solve(as_tensor(b))


def batch_cholesky(c):
    """Batched Cholesky of (B, M, M) matrices.

    Returns (L, ok) where ``ok[b]`` is False for matrices that are not
    positive definite (their L rows are left as identity).
    """
    try:
        return np.linalg.cholesky(c), np.ones(c.shape[0], dtype=bool)
    except np.linalg.LinAlgError:
        pass
    lower = np.broadcast_to(np.eye(c.shape[-1]), c.shape).copy()
    ok = np.zeros(c.shape[0], dtype=bool)
    for b in range(c.shape[0]):
        try:
            lower[b] = np.linalg.cholesky(c[b])
            ok[b] = True
        except np.linalg.LinAlgError:
            pass
    return lower, ok


def batch_cho_solve(lower, rhs):
    """Solve ``L L' y = rhs`` for batched lower factors; rhs is (B, M) or (B, M, K)."""
    vec = rhs.ndim == lower.ndim - 1
    r = rhs[..., None] if vec else rhs
    y = np.linalg.solve(lower, r)
    y = np.linalg.solve(np.swapaxes(lower, -1, -2), y)
    return y[..., 0] if vec else y


def batch_logdet(lower):
    return 2.0 * np.sum(np.log(np.diagonal(lower, axis1=-2, axis2=-1)), axis=-1)
