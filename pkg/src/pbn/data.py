"""Synthetic acoustic events, dataset files, splits and feature scaling.

Each class owns a random spectral envelope (a few Gaussian bumps on a
log-frequency scale over a sloped floor).  An event is white noise shaped
by its class envelope, with per-event jitter of the bump positions and
gains, under a random attack/decay amplitude contour.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import pbnt
from .errors import FormatError
from .stream import HOP, WINDOW, spectrogram


@dataclass(frozen=True)
class SynthSpec:
    classes: int = 6
    per_class: int = 102
    length: int = 16128
    rate: int = 32000
    bumps: int = 3
    jitter: float = 0.06     # relative jitter of bump centres (in log frequency)
    gain_jitter: float = 0.3  # std of per-event bump gains (in nepers)


@dataclass
class Dataset:
    signals: np.ndarray   # (n, T)
    labels: np.ndarray    # (n,) ints
    rate: int = 32000

    def __len__(self):
        return len(self.labels)

    @property
    def classes(self):
        return int(self.labels.max()) + 1


def _envelope(freqs, centres, widths, gains, slope):
    logf = np.log1p(freqs / 100.0)
    top = np.log1p(freqs[-1] / 100.0)
    env = slope * logf / top
    for c, w, g in zip(centres, widths, gains):
        env = env + g * np.exp(-0.5 * ((logf - c * top) / (w * top)) ** 2)
    return np.exp(env)


def synth_dataset(spec=SynthSpec(), seed=0):
    """Deterministic synthetic dataset for ``spec`` and ``seed``."""
    rng = np.random.default_rng(seed)
    freqs = np.fft.rfftfreq(spec.length, 1.0 / spec.rate)
    protos = []
    for _ in range(spec.classes):
        protos.append(dict(centres=rng.uniform(0.15, 0.95, spec.bumps),
                           widths=rng.uniform(0.02, 0.08, spec.bumps),
                           gains=rng.uniform(1.0, 3.0, spec.bumps),
                           slope=rng.uniform(-2.0, 0.5),
                           attack=rng.uniform(0.01, 0.3),
                           decay=rng.uniform(0.2, 2.0)))
    t = np.arange(spec.length) / spec.length
    signals = np.empty((spec.classes * spec.per_class, spec.length))
    labels = np.repeat(np.arange(spec.classes), spec.per_class)
    for i, c in enumerate(labels):
        p = protos[c]
        centres = p["centres"] + spec.jitter * rng.standard_normal(spec.bumps) * p["widths"] / 0.05
        gains = p["gains"] * np.exp(spec.gain_jitter * rng.standard_normal(spec.bumps))
        env = _envelope(freqs, centres, p["widths"], gains, p["slope"])
        noise = np.fft.rfft(rng.standard_normal(spec.length))
        x = np.fft.irfft(noise * env, n=spec.length)
        attack = p["attack"] * np.exp(0.2 * rng.standard_normal())
        contour = (1.0 - np.exp(-t / attack)) * np.exp(-t * p["decay"])
        x = x * contour
        signals[i] = 0.25 * x / np.max(np.abs(x))
    return Dataset(signals, labels, spec.rate)


def save_dataset(path, data):
    """Write ``signals.pbnt`` and ``labels.pbnt`` into directory ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    pbnt.save(path / "signals.pbnt", data.signals)
    pbnt.save(path / "labels.pbnt", np.concatenate([[float(data.rate)], data.labels.astype(float)]))


def load_dataset(path):
    path = Path(path)
    signals = pbnt.load(path / "signals.pbnt")
    lab = pbnt.load(path / "labels.pbnt")
    if signals.ndim != 2 or lab.ndim != 1 or len(lab) != signals.shape[0] + 1:
        raise FormatError(f"dataset at {path} has inconsistent signal and label files")
    labels = lab[1:]
    if np.any(labels != np.round(labels)) or np.any(labels < 0):
        raise FormatError("labels must be non-negative integers")
    return Dataset(signals, labels.astype(int), int(lab[0]))


def two_fold_split(labels, seed=0):
    """Stratified halves ``(a, b)`` of the sample indices."""
    rng = np.random.default_rng(seed)
    labels = np.asarray(labels)
    a, b = [], []
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        half = len(idx) // 2
        a.extend(idx[:half])
        b.extend(idx[half:])
    return np.sort(np.array(a, dtype=int)), np.sort(np.array(b, dtype=int))


def extract_features(signals, window=WINDOW, hop=HOP, framing="strict"):
    """Spectrograms of every signal, shape (n, frames, bins)."""
    return np.stack([spectrogram(s, window, hop, framing) for s in np.atleast_2d(signals)])


@dataclass
class FeatureScaler:
    """Per-frequency-bin standardization of log spectra."""
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, feats):
        feats = np.asarray(feats)
        mean = feats.mean(axis=(0, 1))
        std = np.maximum(feats.std(axis=(0, 1)), 1e-6)
        return cls(mean, std)

    def transform(self, feats):
        return (np.asarray(feats) - self.mean) / self.std

    def flat(self, feats):
        z = self.transform(feats)
        return z.reshape(z.shape[0], -1)
