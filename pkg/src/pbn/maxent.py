"""Maximum-entropy component priors.

Each prior is a one-parameter exponential family on a support set,
``p(x; a) = exp(a x - kappa(a)) * base(x)``.  ``lam = kappa'`` is the
conditional mean (the layer activation associated with the prior) and
``dlam``/``d2lam`` its derivatives.

Families:

* Gaussian: base N(0, 1) on the reals, kappa(a) = a^2/2.
* TruncatedGaussian: base 2*phi(x) on [0, inf),
  kappa(a) = a^2/2 + log Phi(a) - log Phi(0).
* TruncatedExponential: base uniform on [0, 1], kappa(a) = log((e^a - 1)/a).
"""
import math

import numpy as np
from scipy import special, stats

_LOG2PI = math.log(2.0 * math.pi)
_ASYMPTOTIC = 30.0
_SMALL = 0.5

# alpha -> -inf expansion of the truncated-Gaussian mean, t = -alpha:
# lam = sum_j c_j t^-(2j+1)
_TG_LAM = np.array([1.0, -2.0, 10.0, -74.0, 706.0, -8162.0, 110410.0, -1708394.0])
_TG_POW = 2 * np.arange(len(_TG_LAM)) + 1
# log of the Mills ratio: log R(t) = -log t + sum d_k t^{-2k}
_TG_LOGR = np.array([0.0, -1.0, 5 / 2, -37 / 3, 353 / 4, -4081 / 5, 55205 / 6, -854197 / 7])

# Maclaurin coefficients {power: coefficient} of log((e^a - 1)/a) and of its
# derivatives 1..5 (the derivatives of the truncated-exponential mean)
_TE_KAPPA = {1: 1 / 2, 2: 1 / 24, 4: -1 / 2880, 6: 1 / 181440, 8: -1 / 9676800, 10: 1 / 479001600}
_TE_SERIES = [
    {0: 1 / 2, 1: 1 / 12, 3: -1 / 720, 5: 1 / 30240, 7: -1 / 1209600, 9: 1 / 47900160,
     11: -691 / 1307674368000},
    {0: 1 / 12, 2: -1 / 240, 4: 1 / 6048, 6: -1 / 172800, 8: 1 / 5322240,
     10: -691 / 118879488000},
    {1: -1 / 120, 3: 1 / 1512, 5: -1 / 28800, 7: 1 / 665280, 9: -691 / 11887948800,
     11: 1 / 479001600},
    {0: -1 / 120, 2: 1 / 504, 4: -1 / 5760, 6: 1 / 95040, 8: -691 / 1320883200,
     10: 1 / 43545600},
    {1: 1 / 252, 3: -1 / 1440, 5: 1 / 15840, 7: -691 / 165110400, 9: 1 / 4354560,
     11: -3617 / 325721088000},
]


def _poly(coeffs, x):
    out = np.zeros_like(x)
    for p, c in coeffs.items():
        out = out + c * x ** p
    return out


def _split(alpha, mask, fn_in, fn_out):
    alpha = np.asarray(alpha, dtype=np.float64)
    out = np.empty_like(alpha)
    if np.any(mask):
        out[mask] = fn_in(alpha[mask])
    rest = ~mask
    if np.any(rest):
        out[rest] = fn_out(alpha[rest])
    return out


class MaxEntPrior:
    name = ""
    support = ""

    def kappa(self, alpha):
        raise NotImplementedError

    def lam_deriv(self, alpha, k):
        """k-th derivative of the mean function (k = 0..4)."""
        raise NotImplementedError

    def lam(self, alpha):
        return self.lam_deriv(alpha, 0)

    def dlam(self, alpha):
        return self.lam_deriv(alpha, 1)

    def d2lam(self, alpha):
        return self.lam_deriv(alpha, 2)

    def log_base(self, x):
        raise NotImplementedError

    def dlog_base(self, x):
        raise NotImplementedError

    def in_support(self, x):
        raise NotImplementedError

    def sample(self, alpha, rng, size=None):
        raise NotImplementedError

    def logpdf(self, x, alpha0):
        """Component log-densities ``alpha0*x - kappa(alpha0) + log base(x)``."""
        x = np.asarray(x, dtype=np.float64)
        return alpha0 * x - self.kappa(alpha0) + self.log_base(x)

    def __repr__(self):
        return f"{type(self).__name__}()"

    def __eq__(self, other):
        return type(self) is type(other)

    def __hash__(self):
        return hash(type(self))


class Gaussian(MaxEntPrior):
    name = "gaussian"
    support = "reals"

    def kappa(self, alpha):
        return 0.5 * np.square(alpha)

    def lam_deriv(self, alpha, k):
        alpha = np.asarray(alpha, dtype=np.float64)
        if k == 0:
            return alpha.copy()
        return np.full_like(alpha, 1.0 if k == 1 else 0.0)

    def log_base(self, x):
        return -0.5 * np.square(x) - 0.5 * _LOG2PI

    def dlog_base(self, x):
        return -np.asarray(x, dtype=np.float64)

    def in_support(self, x):
        return np.isfinite(x)

    def sample(self, alpha, rng, size=None):
        return alpha + rng.standard_normal(size)


class TruncatedGaussian(MaxEntPrior):
    name = "truncated_gaussian"
    support = "nonnegative"

    @staticmethod
    def _ratio(alpha):
        # phi(a)/Phi(a), stable for all a via the scaled complementary error function
        with np.errstate(over="ignore"):
            return math.sqrt(2.0 / math.pi) / special.erfcx(-alpha / math.sqrt(2.0))

    def kappa(self, alpha):
        alpha = np.asarray(alpha, dtype=np.float64)

        def tail(a):
            t = -a
            u = 1.0 / (t * t)
            return math.log(2.0) - 0.5 * _LOG2PI - np.log(t) + np.polyval(_TG_LOGR[::-1], u)

        return _split(alpha, alpha < -_ASYMPTOTIC, tail,
                      lambda a: 0.5 * a * a + special.log_ndtr(a) + math.log(2.0))

    @staticmethod
    def _tail(a, k):
        # d/dalpha = -d/dt; each derivative multiplies t^-p by p and raises p by one
        t = -a
        coef = _TG_LAM.copy()
        powers = _TG_POW.copy()
        for _ in range(k):
            coef = coef * powers
            powers = powers + 1
        return np.sum(coef[:, None] * t[None, :] ** (-powers[:, None].astype(float)), axis=0)

    @staticmethod
    def _body(a, k):
        r = TruncatedGaussian._ratio(a)
        l0 = a + r
        if k == 0:
            return l0
        l1 = 1.0 - r * l0
        if k == 1:
            return l1
        f = l0 * l0 - l1
        l2 = r * f
        if k == 2:
            return l2
        g = -l0 * f + 2.0 * l0 * l1 - l2
        l3 = r * g
        if k == 3:
            return l3
        df = 2.0 * l0 * l1 - l2
        dg = -l1 * f - l0 * df + 2.0 * l1 * l1 + 2.0 * l0 * l2 - l3
        return r * (-l0 * g + dg)

    def lam_deriv(self, alpha, k):
        alpha = np.asarray(alpha, dtype=np.float64)
        # the closed forms lose digits to cancellation for very negative alpha,
        # faster for the higher derivatives
        cut = _ASYMPTOTIC if k < 2 else 15.0
        return _split(alpha, alpha < -cut,
                      lambda a: self._tail(a, k), lambda a: self._body(a, k))

    def log_base(self, x):
        x = np.asarray(x, dtype=np.float64)
        return np.where(x >= 0, math.log(2.0) - 0.5 * x * x - 0.5 * _LOG2PI, -np.inf)

    def dlog_base(self, x):
        return -np.asarray(x, dtype=np.float64)

    def in_support(self, x):
        return np.asarray(x) >= 0

    def sample(self, alpha, rng, size=None):
        alpha = np.asarray(alpha, dtype=np.float64)
        return stats.truncnorm.rvs(-alpha, np.inf, loc=alpha, size=size, random_state=rng)


def _te_positive(a, k):
    """k-th derivative of the truncated-exponential mean for a > 0, written
    with x = exp(-a) through the negative-order polylogarithms."""
    x = np.exp(-a)
    om = -np.expm1(-a)  # 1 - x
    if k == 0:
        return 1.0 / om - 1.0 / a
    if k == 1:
        return -x / om ** 2 + 1.0 / a ** 2
    if k == 2:
        return x * (1.0 + x) / om ** 3 - 2.0 / a ** 3
    if k == 3:
        return -x * (1.0 + 4.0 * x + x * x) / om ** 4 + 6.0 / a ** 4
    if k == 4:
        return x * (1.0 + 11.0 * x + 11.0 * x * x + x ** 3) / om ** 5 - 24.0 / a ** 5
    raise ValueError("derivative order must be 0..4")


class TruncatedExponential(MaxEntPrior):
    name = "truncated_exponential"
    support = "unit_interval"

    def kappa(self, alpha):
        alpha = np.asarray(alpha, dtype=np.float64)

        def body(a):
            pos = a > 0
            out = np.empty_like(a)
            ap = a[pos]
            out[pos] = ap + np.log(-np.expm1(-ap)) - np.log(ap)
            an = a[~pos]
            out[~pos] = np.log(-np.expm1(an)) - np.log(-an)
            return out

        return _split(alpha, np.abs(alpha) < _SMALL, lambda a: _poly(_TE_KAPPA, a), body)

    def lam_deriv(self, alpha, k):
        alpha = np.asarray(alpha, dtype=np.float64)

        def body(a):
            out = np.empty_like(a)
            pos = a > 0
            out[pos] = _te_positive(a[pos], k)
            neg = _te_positive(-a[~pos], k)
            # mean(-a) = 1 - mean(a), so odd/even symmetry for the derivatives
            out[~pos] = 1.0 - neg if k == 0 else (-1.0) ** (k + 1) * neg
            return out

        return _split(alpha, np.abs(alpha) < _SMALL, lambda a: _poly(_TE_SERIES[k], a), body)

    def log_base(self, x):
        x = np.asarray(x, dtype=np.float64)
        return np.where((x >= 0) & (x <= 1), 0.0, -np.inf)

    def dlog_base(self, x):
        return np.zeros_like(np.asarray(x, dtype=np.float64))

    def in_support(self, x):
        x = np.asarray(x)
        return (x >= 0) & (x <= 1)

    def sample(self, alpha, rng, size=None):
        alpha = np.asarray(alpha, dtype=np.float64)
        u = rng.random(size if size is not None else alpha.shape)
        a = np.broadcast_to(alpha, u.shape)
        out = np.empty(u.shape)
        small = np.abs(a) < 1e-12
        out[small] = u[small]
        pos = (a > 0) & ~small
        # inverse CDF, written to avoid overflow for large |a|
        out[pos] = 1.0 + np.log(u[pos] + (1.0 - u[pos]) * np.exp(-a[pos])) / a[pos]
        neg = (a < 0) & ~small
        out[neg] = np.log1p(u[neg] * np.expm1(a[neg])) / a[neg]
        return np.clip(out, 0.0, 1.0)


GAUSSIAN = Gaussian()
TRUNCATED_GAUSSIAN = TruncatedGaussian()
TRUNCATED_EXPONENTIAL = TruncatedExponential()

PRIORS = {p.name: p for p in (GAUSSIAN, TRUNCATED_GAUSSIAN, TRUNCATED_EXPONENTIAL)}
_ALIASES = {"tg": "truncated_gaussian", "te": "truncated_exponential", "gauss": "gaussian"}


def get_prior(name):
    key = _ALIASES.get(name.lower(), name.lower())
    try:
        return PRIORS[key]
    except KeyError:
        raise ValueError(f"unknown prior {name!r}; choose from {sorted(PRIORS)}") from None


def kappa(prior, alpha):
    return prior.kappa(alpha)


def lambda_eval(prior, alpha):
    return prior.lam(alpha)


def lambda_prime(prior, alpha):
    return prior.dlam(alpha)


def sample_component(prior, alpha, rng, size=None):
    return prior.sample(alpha, rng, size)
