"""Per-class training and evaluation pipeline with the two-fold protocol.

One fold trains a PBN-DA model per class, a D-PBN-DA model per class and
a softmax partner network on the training half, then scores the test
half three ways (maximum likelihood, minimum reconstruction error,
partner posterior) and sweeps the likelihood/partner combination.
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .architecture import build_network, parse_architecture
from .bundle import FeatureSettings, ModelBundle
from .data import FeatureScaler, SynthSpec, extract_features, load_dataset, synth_dataset, two_fold_split
from .errors import ConfigError
from .evaluation import (combine_sweep, decide, discriminative_scores, evaluate_decisions,
                         log_likelihood_matrix, reconstruction_matrix)
from .training import ClassModel, TrainConfig, train

log = logging.getLogger(__name__)

DESK_ARCHITECTURE = """\
conv  kernels=4 size=5x5 stride=2x2 act=linear
dense units=32 act=tg
dense units=8 act=tg
head  units=6
group glg 1-2
"""


@dataclass
class ExperimentConfig:
    """Everything a run depends on; serializable to and from JSON."""
    classes: int = 6
    per_class: int = 40
    length: int = 2048
    rate: int = 32000
    dataset: str | None = None       # directory with signals.pbnt/labels.pbnt; synthetic if None
    window: int = 96
    hop: int = 32
    framing: str = "strict"
    architecture: str = DESK_ARCHITECTURE
    seed: int = 0
    folds: tuple = (0,)
    epochs: int = 60
    step: float = 1e-3
    momentum: float = 0.9
    l2: float = 0.0
    batch_size: int | None = None
    estimator_refresh: int = 10
    dpbn_depth: int | None = 2
    dpbn_epochs: int = 60
    partner_epochs: int = 100
    partner_step: float = 1e-2
    gammas: tuple = tuple(np.round(np.linspace(0.0, 1.0, 21), 3))
    variants: tuple = ("pbn", "dpbn", "partner")

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown configuration keys: {sorted(unknown)}")
        d = dict(d)
        for key in ("folds", "gammas", "variants"):
            if key in d:
                d[key] = tuple(d[key])
        try:
            cfg = cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None
        cfg.check()
        return cfg

    @classmethod
    def load(cls, path):
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None

    def check(self):
        if self.framing not in ("strict", "tail"):
            raise ConfigError(f"framing must be 'strict' or 'tail', not {self.framing!r}")
        if not set(self.folds) <= {0, 1}:
            raise ConfigError("folds must be drawn from 0 and 1")
        if not set(self.variants) <= {"pbn", "dpbn", "partner"}:
            raise ConfigError(f"unknown variants in {self.variants}")
        if self.hop < 1 or self.window < 2:
            raise ConfigError("window and hop must be positive")

    def to_dict(self):
        d = asdict(self)
        for key in ("folds", "gammas", "variants"):
            d[key] = [float(v) if key == "gammas" else v for v in d[key]]
        return d

    def train_config(self, seed, epochs=None, step=None):
        return TrainConfig(epochs=epochs or self.epochs, step=step or self.step,
                           momentum=self.momentum, l2=self.l2, batch_size=self.batch_size,
                           seed=seed, estimator_refresh=self.estimator_refresh)

    def synth_spec(self):
        return SynthSpec(classes=self.classes, per_class=self.per_class, length=self.length,
                         rate=self.rate)


def load_or_synth(config):
    if config.dataset:
        return load_dataset(config.dataset)
    return synth_dataset(config.synth_spec(), seed=config.seed)


def architecture_for(config, frames, bins, head_kind=None):
    """Parse the configured architecture, supplying the input line if absent."""
    text = config.architecture
    if not any(line.split("#")[0].split()[:1] == ["input"] for line in text.splitlines()):
        text = f"input {frames} {bins}\n" + text
    arch = parse_architecture(text)
    if head_kind is not None:
        arch = replace(arch, head_kind=head_kind)
    return arch


@dataclass
class FoldResult:
    fold: int
    labels: np.ndarray
    scores: dict = field(default_factory=dict)     # name -> (n, K) score matrix
    reports: dict = field(default_factory=dict)    # name -> EvalReport
    sweep: object = None
    bundles: dict = field(default_factory=dict)    # "pbn"/"dpbn" -> ModelBundle
    curves: dict = field(default_factory=dict)     # name -> list of training curves
    seconds: float = 0.0


def train_class_models(arch, x, y, config, variant, depth=None, epochs=None, classes=None):
    models, curves = [], []
    classes = classes if classes is not None else int(np.max(y)) + 1
    for c in range(classes):
        net, head = build_network(arch, seed=config.seed + c)
        model = ClassModel(net, head, target=c, variant=variant, depth=depth)
        res = train(model, x, y, config.train_config(config.seed + c, epochs))
        log.info("%s class %d: objective %.4g -> %.4g", variant, c, res.curve[0], res.curve[-1])
        models.append(res.model)
        curves.append(res.curve)
    return models, curves


def train_partner(arch, x, y, config):
    arch = replace(arch, head_kind="softmax")
    net, head = build_network(arch, seed=config.seed + 1000)
    res = train(ClassModel(net, head), x, y,
                config.train_config(config.seed + 1000, config.partner_epochs, config.partner_step))
    return res.model, res.curve


@dataclass
class FoldData:
    xa: np.ndarray
    ya: np.ndarray
    xb: np.ndarray
    yb: np.ndarray
    test_index: np.ndarray
    frames: int
    bins: int
    arch: object
    settings: FeatureSettings


def fold_data(config, data, fold, scaler=None):
    """Features of one fold: train on one half, test on the other (``fold`` 1 swaps them).

    The scaler is fitted on the training half unless one is supplied.
    """
    a, b = two_fold_split(data.labels, config.seed)
    if fold == 1:
        a, b = b, a
    feats = extract_features(data.signals, config.window, config.hop, config.framing)
    scaler = scaler or FeatureScaler.fit(feats[a])
    arch = architecture_for(config, *feats.shape[1:])
    if arch.head_units != data.classes:
        arch = replace(arch, head_units=data.classes)
    settings = FeatureSettings(config.window, config.hop, config.framing, scaler)
    return FoldData(scaler.flat(feats[a]), data.labels[a], scaler.flat(feats[b]), data.labels[b],
                    b, feats.shape[1], feats.shape[2], arch, settings)


def run_fold(config, data, fold):
    t0 = time.perf_counter()
    fd = fold_data(config, data, fold)
    xa, ya, xb, yb = fd.xa, fd.ya, fd.xb, fd.yb
    arch, settings, k = fd.arch, fd.settings, data.classes
    snapshot = dict(config.to_dict(), folds=[fold])
    out = FoldResult(fold, yb)
    partner = None
    if "partner" in config.variants:
        partner, curve = train_partner(arch, xa, ya, config)
        out.curves["partner"] = [curve]
        out.scores["partner"] = discriminative_scores(partner, xb)
        out.reports["partner"] = evaluate_decisions(yb, decide(out.scores["partner"]), k)
    if "pbn" in config.variants:
        models, curves = train_class_models(arch, xa, ya, config, "pbn", classes=k)
        out.curves["pbn"] = curves
        out.scores["pbn"] = log_likelihood_matrix(models, xb)
        out.reports["pbn"] = evaluate_decisions(yb, decide(out.scores["pbn"]), k)
        out.bundles["pbn"] = ModelBundle(arch, models, settings, partner, snapshot)
    if "dpbn" in config.variants:
        models, curves = train_class_models(arch, xa, ya, config, "dpbn", config.dpbn_depth,
                                            config.dpbn_epochs, classes=k)
        out.curves["dpbn"] = curves
        out.scores["dpbn"] = reconstruction_matrix(models, xb)
        out.reports["dpbn"] = evaluate_decisions(yb, decide(out.scores["dpbn"], largest=False), k)
        out.bundles["dpbn"] = ModelBundle(arch, models, settings, None, snapshot)
    if "pbn" in out.scores and "partner" in out.scores:
        out.sweep = combine_sweep(out.scores["pbn"], out.scores["partner"], config.gammas, yb)
        out.reports["pbn"].sweep = (out.sweep.gammas, out.sweep.errors)
    out.seconds = time.perf_counter() - t0
    return out


def run_experiment(config, data=None):
    data = data if data is not None else load_or_synth(config)
    return [run_fold(config, data, f) for f in config.folds]
