"""Persistence of trained class models.

A bundle is one ``.npz`` archive: every parameter array under a
slash-separated key plus a JSON ``meta`` entry holding the architecture
text, the feature settings and the training configuration.  Files are
written to a temporary name and renamed, so a crash never leaves a
half-written bundle behind; a damaged file fails to load as a whole.
"""
from __future__ import annotations

import json
import os
import zipfile
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .architecture import build_network, format_architecture, parse_architecture
from .data import FeatureScaler
from .errors import FormatError
from .saddle import DirectEstimator
from .training import ClassModel, OutputPrior

FORMAT_VERSION = 1


@dataclass
class FeatureSettings:
    window: int = 384
    hop: int = 128
    framing: str = "strict"
    scaler: FeatureScaler | None = None


@dataclass
class ModelBundle:
    """Per-class models of one topology, optionally with a discriminative partner."""
    arch: object
    models: list
    features: FeatureSettings = field(default_factory=FeatureSettings)
    partner: ClassModel | None = None
    config: dict = field(default_factory=dict)

    @property
    def classes(self):
        return len(self.models)

    @property
    def variant(self):
        return self.models[0].variant if self.models else "pbn"


def _model_arrays(prefix, model):
    out = {}
    for i, (lay, p) in enumerate(zip(model.net.layers, model.net.params())):
        for key, val in p.items():
            out[f"{prefix}/layer{i}/{key}"] = val
        if lay.estimator is not None:
            out[f"{prefix}/layer{i}/estimator"] = lay.estimator.a
    if model.head is not None:
        for key, val in model.head.params().items():
            out[f"{prefix}/head/{key}"] = val
    if model.output_prior is not None:
        out[f"{prefix}/prior/mean"] = model.output_prior.mean
        out[f"{prefix}/prior/var"] = model.output_prior.var
    return out


def _model_meta(model):
    return {"target": model.target, "variant": model.variant, "depth": model.depth,
            "recon_scale": model.recon_scale, "head": model.head.kind if model.head else None}


def save_bundle(path, bundle):
    path = Path(path)
    arrays = {}
    for k, m in enumerate(bundle.models):
        arrays.update(_model_arrays(f"class{k}", m))
    if bundle.partner is not None:
        arrays.update(_model_arrays("partner", bundle.partner))
    fs = bundle.features
    if fs.scaler is not None:
        arrays["scaler/mean"] = fs.scaler.mean
        arrays["scaler/std"] = fs.scaler.std
    net = bundle.models[0].net if bundle.models else bundle.partner.net
    meta = {
        "version": FORMAT_VERSION,
        "architecture": format_architecture(bundle.arch),
        "correction": bool(net.correction),
        "features": {"window": fs.window, "hop": fs.hop, "framing": fs.framing},
        "models": [_model_meta(m) for m in bundle.models],
        "partner": _model_meta(bundle.partner) if bundle.partner is not None else None,
        "config": bundle.config,
    }
    arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    tmp = path.with_name(path.name + ".part")
    with open(tmp, "wb") as fh:
        np.savez(fh, **arrays)
    os.replace(tmp, path)


def _restore(arch, arrays, prefix, meta, correction):
    net, head = build_network(arch, seed=0, correction=correction)
    if meta["head"] is None:
        head = None
    elif head is not None:
        head = replace(head, kind=meta["head"])
    try:
        params = [{key: arrays[f"{prefix}/layer{i}/{key}"] for key in ("w", "b", "alpha0")}
                  for i in range(len(net.layers))]
        net = net.with_params(params)
        layers = []
        for i, lay in enumerate(net.layers):
            key = f"{prefix}/layer{i}/estimator"
            layers.append(replace(lay, estimator=DirectEstimator(arrays[key])) if key in arrays else lay)
        net = replace(net, layers=layers)
        if head is not None:
            head = head.with_params({"w": arrays[f"{prefix}/head/w"], "b": arrays[f"{prefix}/head/b"]})
        prior = None
        if f"{prefix}/prior/mean" in arrays:
            prior = OutputPrior(arrays[f"{prefix}/prior/mean"], arrays[f"{prefix}/prior/var"])
    except KeyError as exc:
        raise FormatError(f"bundle is missing array {exc.args[0]}") from None
    return ClassModel(net, head, prior, meta["target"], meta["variant"], meta["depth"],
                      meta.get("recon_scale"))


def load_bundle(path):
    """Read a bundle; any damage or a version mismatch raises :class:`FormatError`."""
    path = Path(path)
    try:
        with np.load(path, allow_pickle=False) as npz:
            arrays = {k: npz[k] for k in npz.files}
    except FileNotFoundError:
        raise
    except (zipfile.BadZipFile, EOFError, ValueError, OSError) as exc:
        raise FormatError(f"{path} is not a readable model bundle ({exc})") from None
    if "meta" not in arrays:
        raise FormatError(f"{path} has no metadata entry")
    try:
        meta = json.loads(arrays.pop("meta").tobytes().decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path} has corrupt metadata ({exc})") from None
    if meta.get("version") != FORMAT_VERSION:
        raise FormatError(f"{path} has format version {meta.get('version')}, "
                          f"this build reads version {FORMAT_VERSION}")
    arch = parse_architecture(meta["architecture"])
    models = [_restore(arch, arrays, f"class{k}", m, meta["correction"])
              for k, m in enumerate(meta["models"])]
    partner = None
    if meta["partner"] is not None:
        partner = _restore(arch, arrays, "partner", meta["partner"], meta["correction"])
    f = meta["features"]
    scaler = None
    if "scaler/mean" in arrays:
        scaler = FeatureScaler(arrays["scaler/mean"], arrays["scaler/std"])
    feats = FeatureSettings(f["window"], f["hop"], f["framing"], scaler)
    return ModelBundle(arch, models, feats, partner, meta["config"])
