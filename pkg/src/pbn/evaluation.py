"""Classification by per-class scores, confusion matrices and the combination sweep.

Scores are arranged as an ``(n, K)`` matrix with one column per class
model.  Likelihood-type scores are maximized, reconstruction errors are
minimized; non-finite entries mark infeasible evaluations and never win.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import log_softmax

from .errors import AlignmentError, Unclassifiable

UNCLASSIFIED = -1


def log_likelihood_matrix(models, x):
    """``(n, K)`` PBN log-likelihoods of every sample under every class model."""
    x = np.atleast_2d(x)
    return np.stack([np.asarray(m.log_likelihood(x), dtype=np.float64) for m in models], axis=1)


def reconstruction_matrix(models, x):
    """``(n, K)`` D-PBN reconstruction errors (``inf`` where back-projection failed)."""
    x = np.atleast_2d(x)
    return np.stack([np.asarray(m.reconstruction_error(x), dtype=np.float64) for m in models], axis=1)


def discriminative_scores(model, x):
    """Log class posteriors of a network with a classifier head."""
    from .network import evaluate

    ev = evaluate(model.net, np.atleast_2d(x), need=np.zeros(len(np.atleast_2d(x)), dtype=bool))
    logits = model.head.logits(ev.post)
    if model.head.kind == "softmax":
        return log_softmax(logits, axis=1)
    return -np.logaddexp(0.0, -logits)


def decide(scores, largest=True):
    """Per-row winner; ties go to the lowest class index.

    Rows without any finite score get ``UNCLASSIFIED``.
    """
    s = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    finite = np.isfinite(s)
    if largest:
        s = np.where(finite, s, -np.inf)
        pred = np.argmax(s, axis=1)
    else:
        s = np.where(finite, s, np.inf)
        pred = np.argmin(s, axis=1)
    pred[~finite.any(axis=1)] = UNCLASSIFIED
    return pred


def _single(scores, largest):
    pred = decide(np.asarray(scores)[None, :], largest)[0]
    if pred == UNCLASSIFIED:
        raise Unclassifiable("every class model is infeasible on this sample")
    return int(pred)


def classify_max_ll(models, x):
    """Class whose model gives ``x`` the largest log-likelihood."""
    return _single(log_likelihood_matrix(models, np.atleast_2d(x))[0], largest=True)


def classify_recon(models, x):
    """Class whose D-PBN reconstructs ``x`` with the smallest error."""
    return _single(reconstruction_matrix(models, np.atleast_2d(x))[0], largest=False)


@dataclass
class EvalReport:
    """Confusion counts (true class by row) and derived error rates.

    Samples that no model could score are counted in ``unclassified`` so
    that ``confusion.sum(1) + unclassified`` equals the class counts.
    """
    confusion: np.ndarray
    unclassified: np.ndarray
    sweep: tuple | None = None          # (gammas, errors)
    extra: dict = field(default_factory=dict)

    @property
    def counts(self):
        return self.confusion.sum(axis=1) + self.unclassified

    @property
    def errors(self):
        return int(self.counts.sum() - np.trace(self.confusion))

    @property
    def error_rate(self):
        total = self.counts.sum()
        return self.errors / total if total else 0.0

    @property
    def class_errors(self):
        return self.counts - np.diag(self.confusion)


def confusion_matrix(labels, pred, classes=None):
    labels = np.asarray(labels, dtype=int)
    pred = np.asarray(pred, dtype=int)
    if labels.shape != pred.shape:
        raise AlignmentError(f"{len(labels)} labels but {len(pred)} decisions")
    k = classes if classes is not None else int(max(labels.max(initial=-1), pred.max(initial=-1))) + 1
    conf = np.zeros((k, k), dtype=int)
    ok = pred != UNCLASSIFIED
    np.add.at(conf, (labels[ok], pred[ok]), 1)
    unc = np.bincount(labels[~ok], minlength=k)[:k]
    return conf, unc


def evaluate_decisions(labels, pred, classes=None):
    conf, unc = confusion_matrix(labels, pred, classes)
    return EvalReport(conf, unc)


def zscore(scores):
    """Standardize a score matrix by the mean and std of its finite entries."""
    s = np.asarray(scores, dtype=np.float64)
    finite = np.isfinite(s)
    if not finite.any():
        return s.copy()
    mu = s[finite].mean()
    sd = s[finite].std()
    out = s - mu
    if sd > 0:
        out = out / sd
    return np.where(finite, out, -np.inf)


@dataclass
class Sweep:
    gammas: np.ndarray
    errors: np.ndarray
    decisions: np.ndarray     # (len(gammas), n)

    @property
    def best(self):
        i = int(np.argmin(self.errors))
        return float(self.gammas[i]), float(self.errors[i])

    def interior_min(self):
        inner = (self.gammas > 0) & (self.gammas < 1)
        return float(self.errors[inner].min()) if inner.any() else float("nan")

    def endpoint_min(self):
        ends = [self.errors[i] for i, g in enumerate(self.gammas) if g in (0.0, 1.0)]
        return float(min(ends)) if ends else float("nan")


def combine_sweep(pbn_scores, disc_scores, gammas, labels):
    """Error of ``argmax[(1-g) z(disc) + g z(pbn)]`` for every ``g`` in ``gammas``.

    Both score matrices are z-scored over the evaluation set.  At ``g = 0``
    and ``g = 1`` the decisions are taken from the raw scores of the single
    classifier, so the endpoints coincide with the individual classifiers.
    """
    pbn = np.atleast_2d(np.asarray(pbn_scores, dtype=np.float64))
    disc = np.atleast_2d(np.asarray(disc_scores, dtype=np.float64))
    labels = np.asarray(labels)
    if pbn.shape != disc.shape or pbn.shape[0] != len(labels):
        raise AlignmentError(f"score sets are not aligned: pbn {pbn.shape}, discriminative "
                             f"{disc.shape}, {len(labels)} labels")
    gammas = np.asarray(gammas, dtype=np.float64)
    if np.any((gammas < 0) | (gammas > 1)):
        raise ValueError("combination factors must lie in [0, 1]")
    zp, zd = zscore(pbn), zscore(disc)
    decisions = np.empty((len(gammas), len(labels)), dtype=int)
    for i, g in enumerate(gammas):
        if g == 0.0:
            decisions[i] = decide(disc)
        elif g == 1.0:
            decisions[i] = decide(pbn)
        else:
            decisions[i] = decide((1.0 - g) * zd + g * zp)
    errors = np.mean(decisions != labels[None, :], axis=1)
    return Sweep(gammas, errors, decisions)
