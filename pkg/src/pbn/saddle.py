"""Saddle point of ``W' lam(alpha0 + W h) = z`` and the saddle-point density.

For a layer with input prior p0(x) (independent components from one of the
MaxEnt families) and features ``z = W'x``, the cumulant generating function
of z is ``K(h) = sum_i kappa(alpha0_i + (W h)_i) - kappa(alpha0_i)``.  Its
gradient is ``W' lam(alpha0 + W h)`` and its Hessian ``C(h) = W' diag(lam') W``,
so the saddle point solves the equation above and

    log p0(z) ~= K(h) - h'z - (M/2) log 2pi - 1/2 log det C(h) [+ delta]

where ``delta`` is the optional second-order correction
``(3 rho4 - 3 rho13^2 - 2 rho23^2) / 24`` built from the third and fourth
cumulants at the saddle point.  For Gaussian priors all of this is exact.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg
from scipy import optimize

from .errors import InfeasibleTarget, NoConvergence, ShapeError
from .linops import SPDFactor, as_tensor, batch_cho_solve, batch_cholesky, batch_logdet
from .maxent import GAUSSIAN

_LOG2PI = math.log(2.0 * math.pi)

CONVERGED, NOT_CONVERGED, INFEASIBLE = 0, 1, 2

DEFAULT_TOL = 1e-9
DEFAULT_MAX_ITER = 100
MAX_HALVINGS = 20


@dataclass
class SaddleResult:
    h_hat: np.ndarray
    alpha: np.ndarray
    c_factor: SPDFactor
    iterations: int
    residual: float

    @property
    def logdet(self):
        return self.c_factor.logdet


@dataclass
class BatchSaddle:
    h: np.ndarray           # (B, M)
    iterations: np.ndarray  # (B,)
    residual: np.ndarray    # (B,) infinity norm
    status: np.ndarray      # (B,) CONVERGED / NOT_CONVERGED / INFEASIBLE

    @property
    def ok(self):
        return self.status == CONVERGED


def _default_alpha0(lmap, alpha0):
    if alpha0 is None:
        return np.zeros(lmap.input_dim)
    alpha0 = np.asarray(alpha0, dtype=np.float64)
    if alpha0.shape != (lmap.input_dim,):
        raise ShapeError(f"alpha0 must have shape ({lmap.input_dim},)")
    return alpha0


def newton_batch(lmap, prior, z, h0=None, alpha0=None, tol=DEFAULT_TOL,
                 max_iter=DEFAULT_MAX_ITER, check_feasibility=True):
    """Damped Newton-Raphson for a batch of targets ``z`` of shape (B, M).

    Each step solves ``C(h) dh = z - W' lam(alpha)`` and halves the step
    (at most 20 times) until the residual 2-norm decreases.  Samples whose
    iteration stalls or runs out of iterations are checked for feasibility
    and flagged INFEASIBLE or NOT_CONVERGED; nothing is raised.
    """
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    b, m = z.shape
    if m != lmap.output_dim:
        raise ShapeError(f"target has dimension {m}, map output is {lmap.output_dim}")
    alpha0 = _default_alpha0(lmap, alpha0)
    h = np.zeros((b, m)) if h0 is None else np.array(np.broadcast_to(h0, (b, m)), dtype=np.float64)

    def residual(hh, zz):
        alpha = alpha0 + lmap.adjoint(hh)
        with np.errstate(all="ignore"):
            return alpha, zz - lmap.forward(prior.lam(alpha))

    iterations = np.zeros(b, dtype=int)
    status = np.full(b, NOT_CONVERGED)
    alpha, r = residual(h, z)
    res_inf = np.max(np.abs(r), axis=1)
    stalled = np.zeros(b, dtype=bool)
    active = np.flatnonzero(np.isfinite(res_inf))
    for _ in range(max_iter + 1):
        done = res_inf[active] <= tol
        status[active[done]] = CONVERGED
        active = active[~done]
        if active.size == 0:
            break
        if np.all(iterations[active] >= max_iter):
            break
        c = lmap.gram(prior.dlam(alpha[active]))
        lower, chol_ok = batch_cholesky(c)
        stalled[active[~chol_ok]] = True
        active = active[chol_ok]
        if active.size == 0:
            break
        step = batch_cho_solve(lower[chol_ok], r[active])
        norm0 = np.linalg.norm(r[active], axis=1)
        pending = np.arange(active.size)
        t = 1.0
        for _ in range(MAX_HALVINGS + 1):
            idx = active[pending]
            h_try = h[idx] + t * step[pending]
            a_try, r_try = residual(h_try, z[idx])
            n_try = np.linalg.norm(r_try, axis=1)
            good = np.isfinite(n_try) & np.all(np.isfinite(a_try), axis=1)
            good &= (n_try < (1.0 - 1e-4 * t) * norm0[pending]) | (np.max(np.abs(r_try), axis=1) <= tol)
            acc = idx[good]
            h[acc], alpha[acc], r[acc] = h_try[good], a_try[good], r_try[good]
            pending = pending[~good]
            if pending.size == 0:
                break
            t *= 0.5
        iterations[active] += 1
        bad = active[pending]
        stalled[bad] = True
        res_inf = np.max(np.abs(r), axis=1)
        active = np.setdiff1d(active, bad, assume_unique=True)
    res_inf = np.max(np.abs(r), axis=1)
    status[res_inf <= tol] = CONVERGED
    failed = np.flatnonzero(status != CONVERGED)
    if check_feasibility and failed.size:
        for i in failed:
            if feasible(lmap, prior, z[i]) is False:
                status[i] = INFEASIBLE
    return BatchSaddle(h=h, iterations=iterations, residual=res_inf, status=status)


def feasible(lmap, prior, z, max_size=2_000_000):
    """Decide whether ``z`` lies in the open range of ``h -> W' lam(alpha0 + W h)``.

    That range is ``{W'x : x in the interior of the support}``, so the
    question is a linear program: maximize the margin ``tau`` of x from the
    support boundary subject to ``W'x = z``.  Returns None when W is too
    large to materialize.
    """
    if prior.support == "reals":
        return True
    n, m = lmap.input_dim, lmap.output_dim
    if n * m > max_size:
        return None
    w = lmap.matrix()
    # variables (x_1..x_n, tau); maximize tau
    cost = np.zeros(n + 1)
    cost[-1] = -1.0
    a_eq = np.hstack([w.T, np.zeros((m, 1))])
    rows = [np.hstack([-np.eye(n), np.ones((n, 1))])]  # tau - x <= 0
    rhs = [np.zeros(n)]
    if prior.support == "unit_interval":
        rows.append(np.hstack([np.eye(n), np.ones((n, 1))]))  # x + tau <= 1
        rhs.append(np.ones(n))
    bounds = [(None, None)] * n + [(None, 1.0)]
    res = optimize.linprog(cost, A_ub=np.vstack(rows), b_ub=np.concatenate(rhs),
                           A_eq=a_eq, b_eq=np.asarray(z, dtype=np.float64), bounds=bounds,
                           method="highs")
    if res.status == 2:
        return False
    if res.status != 0:
        return None
    return bool(-res.fun > 1e-10)


def solve_newton(lmap, prior, z, h0=None, alpha0=None, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER):
    """Solve the saddle-point equation for one feature vector ``z``."""
    z = as_tensor(z)
    if z.shape != (lmap.output_dim,):
        raise ShapeError(f"z must have shape ({lmap.output_dim},)")
    if tol <= 0:
        raise ValueError("tol must be positive")
    alpha0 = _default_alpha0(lmap, alpha0)
    out = newton_batch(lmap, prior, z[None], None if h0 is None else np.asarray(h0)[None],
                       alpha0, tol, max_iter)
    if out.status[0] == INFEASIBLE:
        raise InfeasibleTarget("target z lies outside the range of the saddle map")
    if out.status[0] != CONVERGED:
        raise NoConvergence(float(out.residual[0]), int(out.iterations[0]))
    h = out.h[0]
    alpha = alpha0 + lmap.adjoint(h)
    factor = SPDFactor(lmap.gram(prior.dlam(alpha)))
    return SaddleResult(h_hat=h, alpha=alpha, c_factor=factor,
                        iterations=int(out.iterations[0]), residual=float(out.residual[0]))


class GaussianSolver:
    """Closed-form saddle point for a Gaussian-prior layer.

    ``C = W'W`` does not depend on h, so it is assembled and factored once
    and reused for every sample: ``h = C^{-1}(z - W' alpha0)``.
    """

    def __init__(self, lmap, alpha0=None):
        self.map = lmap
        self.alpha0 = _default_alpha0(lmap, alpha0)
        self.factor = SPDFactor(lmap.gram())
        self.offset = lmap.forward(self.alpha0)

    @property
    def logdet(self):
        return self.factor.logdet

    def solve(self, z):
        z = np.asarray(z, dtype=np.float64)
        return self.factor.solve((z - self.offset).T).T

    def log_density(self, z):
        """Exact ``log N(z; W'alpha0, W'W)``; z may be batched."""
        z = np.asarray(z, dtype=np.float64)
        d = z - self.offset
        h = self.factor.solve(d.T).T
        m = self.map.output_dim
        return -0.5 * np.sum(d * h, axis=-1) - 0.5 * m * _LOG2PI - 0.5 * self.logdet


def solve_gaussian(lmap, z, alpha0=None, solver=None):
    """Closed-form saddle point ``h = (W'W)^{-1}(z - W'alpha0)`` for one sample."""
    z = as_tensor(z)
    solver = solver or GaussianSolver(lmap, alpha0)
    h = solver.solve(z)
    alpha = solver.alpha0 + lmap.adjoint(h)
    resid = float(np.max(np.abs(lmap.forward(alpha) - z))) if z.size else 0.0
    return SaddleResult(h_hat=h, alpha=alpha, c_factor=solver.factor, iterations=0, residual=resid)


# ---------------------------------------------------------------------------
# saddle-point density


def cgf(prior, alpha, alpha0):
    """``K(h) = sum(kappa(alpha) - kappa(alpha0))`` over the last axis."""
    return np.sum(prior.kappa(alpha) - prior.kappa(alpha0), axis=-1)


def log_p0z(lmap, prior, sr, z, alpha0=None, correction=True):
    """Saddle-point log-density of ``z = W'x`` under the layer's input prior."""
    alpha0 = _default_alpha0(lmap, alpha0)
    z = as_tensor(z)
    m = lmap.output_dim
    value = (cgf(prior, sr.alpha, alpha0) - float(sr.h_hat @ z)
             - 0.5 * m * _LOG2PI - 0.5 * sr.c_factor.logdet)
    if correction and prior is not GAUSSIAN:
        w = lmap.matrix()
        p = sr.c_factor.inverse()
        value += float(spa_correction(w, prior, sr.alpha[None], p[None])[0][0])
    return float(value)


def spa_correction(w, prior, alpha, p, with_grad=False):
    """Second-order saddle-point correction for features ``z = W'x``.

    ``w`` is the dense (N, M) matrix, ``alpha`` (B, N) and ``p = C^{-1}``
    (B, M, M).  Returns ``delta`` (B,) and, with ``with_grad``, the partial
    derivatives ``d delta/d alpha`` (B, N) at fixed W and
    ``d delta/d W`` (B, N, M) at fixed alpha.
    """
    a3 = prior.lam_deriv(alpha, 2)
    a4 = prior.lam_deriv(alpha, 3)
    y = np.einsum("nm,bmk->bnk", w, p)          # W P
    q_full = np.einsum("bnk,jk->bnj", y, w)     # Q = W P W'
    q = np.einsum("bnn->bn", q_full)
    u = a3 * q
    qu = np.einsum("bnj,bj->bn", q_full, u)
    q3 = q_full ** 3
    rho4 = np.sum(a4 * q * q, axis=1)
    rho13 = np.sum(u * qu, axis=1)
    rho23 = np.einsum("bn,bnj,bj->b", a3, q3, a3)
    delta = rho4 / 8.0 - rho13 / 8.0 - rho23 / 12.0
    if not with_grad:
        return delta, None, None
    lam1 = prior.lam_deriv(alpha, 1)
    a5 = prior.lam_deriv(alpha, 4)
    d_a3 = -0.25 * q * qu - np.einsum("bnj,bj->bn", q3, a3) / 6.0
    d_a4 = q * q / 8.0
    g = (-0.125 * u[:, :, None] * u[:, None, :]
         - 0.25 * a3[:, :, None] * a3[:, None, :] * q_full ** 2)
    diag = 0.25 * a4 * q - 0.25 * a3 * qu
    g[:, np.arange(g.shape[1]), np.arange(g.shape[1])] += diag
    gy = np.einsum("bnj,bjk->bnk", g, y)        # G W P
    hmat = np.einsum("bnk,bnl->bkl", y, gy)     # P W' G W P
    why = np.einsum("nm,bmk->bnk", w, hmat)     # W H
    whw = np.einsum("bnk,nk->bn", why, w)       # diag(W H W')
    d_alpha = d_a3 * a4 + d_a4 * a5 - a3 * whw
    d_w = 2.0 * gy - 2.0 * lam1[:, :, None] * why
    return delta, d_alpha, d_w


@dataclass
class SaddleDensity:
    """Batched saddle-point log-density with the intermediates the gradient
    needs (dense W only)."""
    log_p0z: np.ndarray   # (B,)
    alpha: np.ndarray     # (B, N)
    x_hat: np.ndarray     # (B, N)
    p: np.ndarray         # (B, M, M) inverse of C
    lam1: np.ndarray      # (B, N)
    s: np.ndarray         # (B, N) d(1/2 logdet C - delta)/d alpha
    e: np.ndarray         # (B, N, M) d(1/2 logdet C - delta)/dW at fixed alpha
    ok: np.ndarray        # (B,)


def saddle_density_dense(w, prior, alpha0, z, h, correction=True, with_grad=False):
    """Evaluate the saddle-point log-density at converged ``h`` for dense W."""
    n, m = w.shape
    alpha = alpha0 + h @ w.T
    lam1 = prior.dlam(alpha)
    c = np.einsum("nm,bn,nk->bmk", w, lam1, w, optimize=True)
    lower, ok = batch_cholesky(c)
    eye = np.broadcast_to(np.eye(m), c.shape)
    p = batch_cho_solve(lower, eye)
    p = 0.5 * (p + np.swapaxes(p, 1, 2))
    logdet = batch_logdet(lower)
    value = cgf(prior, alpha, alpha0) - np.sum(h * z, axis=1) - 0.5 * m * _LOG2PI - 0.5 * logdet
    s = e = None
    delta = d_alpha = d_w = 0.0
    if correction and prior is not GAUSSIAN:
        delta, d_alpha, d_w = spa_correction(w, prior, alpha, p, with_grad)
        value = value + delta
    if with_grad:
        y = np.einsum("nm,bmk->bnk", w, p)
        q = np.einsum("bnk,nk->bn", y, w)
        s = 0.5 * prior.d2lam(alpha) * q - d_alpha
        e = lam1[:, :, None] * y - d_w
    value = np.where(ok, value, np.nan)
    return SaddleDensity(log_p0z=value, alpha=alpha, x_hat=prior.lam(alpha), p=p,
                         lam1=lam1, s=s, e=e, ok=ok)


# ---------------------------------------------------------------------------
# direct estimation of the saddle point


@dataclass
class DirectEstimator:
    """Warm start ``h0 = A'A z`` for the Newton iteration."""
    a: np.ndarray  # (r, M)

    def warm_start(self, z):
        z = np.asarray(z, dtype=np.float64)
        if self.a.shape[0] == 0:
            return np.zeros_like(z)
        return (z @ self.a.T) @ self.a

    @property
    def rank(self):
        return self.a.shape[0]


def fit_direct_estimator(z, h, rank=None):
    """Fit ``A`` so that ``A'A z`` approximates ``h`` over training pairs.

    The symmetric least-squares problem ``min_P sum ||P z - h||^2`` has the
    Lyapunov normal equation ``S P + P S = Z'H + H'Z`` with ``S = Z'Z``; its
    solution is then projected onto positive semidefinite matrices of rank
    at most ``rank`` and factored as ``A'A``.
    """
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    h = np.atleast_2d(np.asarray(h, dtype=np.float64))
    m = z.shape[1]
    rank = m if rank is None else int(rank)
    if rank <= 0:
        return DirectEstimator(np.zeros((0, m)))
    s = z.T @ z
    rhs = z.T @ h + h.T @ z
    p = scipy.linalg.solve_continuous_lyapunov(s, rhs)
    p = 0.5 * (p + p.T)
    vals, vecs = np.linalg.eigh(p)
    order = np.argsort(vals)[::-1][:rank]
    vals = np.clip(vals[order], 0.0, None)
    keep = vals > 0
    a = np.sqrt(vals[keep])[:, None] * vecs[:, order[keep]].T
    if a.shape[0] == 0:
        a = np.zeros((0, m))
    return DirectEstimator(a)
