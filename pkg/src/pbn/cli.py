"""Command-line interface.

Exit status is 0 on success, 2 for configuration and input-file problems
and 3 for numerical failures (solver breakdown, stalled training,
unclassifiable samples).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import pbnt, plotting, report
from .bundle import load_bundle, save_bundle
from .data import save_dataset, synth_dataset, extract_features
from .dpbn import reconstruct
from .errors import ConfigError, FormatError, LengthError, PBNError, PlanError, ShapeError
from .evaluation import (combine_sweep, decide, discriminative_scores, evaluate_decisions,
                         log_likelihood_matrix, reconstruction_matrix)
from .experiment import (ExperimentConfig, fold_data, load_or_synth, run_experiment,
                         train_class_models, train_partner)
from .network import evaluate

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
_CONFIG_ERRORS = (ConfigError, FormatError, LengthError, PlanError, ShapeError, FileNotFoundError,
                  IsADirectoryError, NotADirectoryError)

log = logging.getLogger("pbn")


def parse_gammas(text):
    """``0,0.5,1`` or ``start:stop:count``."""
    try:
        if ":" in text:
            a, b, n = text.split(":")
            return np.linspace(float(a), float(b), int(n))
        return np.array([float(v) for v in text.split(",")])
    except ValueError:
        raise ConfigError(f"cannot parse combination factors {text!r}") from None


def _config(args):
    base = ExperimentConfig.load(args.config).to_dict() if getattr(args, "config", None) else {}
    overrides = {
        "seed": getattr(args, "seed", None),
        "dataset": getattr(args, "data", None),
        "dpbn_depth": getattr(args, "depth", None),
        "epochs": getattr(args, "epochs", None),
    }
    if getattr(args, "fold", None) is not None:
        overrides["folds"] = [args.fold]
    base.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig.from_dict(base)


def _bundle_config(bundle, args):
    cfg = dict(bundle.config)
    if getattr(args, "data", None):
        cfg["dataset"] = args.data
    return ExperimentConfig.from_dict(cfg)


def _test_half(bundle, args):
    cfg = _bundle_config(bundle, args)
    data = load_or_synth(cfg)
    return cfg, fold_data(cfg, data, cfg.folds[0], scaler=bundle.features.scaler)


def _echo(cfg):
    return cfg.to_dict() if isinstance(cfg, ExperimentConfig) else dict(cfg)


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args):
    cfg = _config(args)
    spec = cfg.synth_spec()
    if args.classes:
        spec = type(spec)(**{**spec.__dict__, "classes": args.classes})
    if args.per_class:
        spec = type(spec)(**{**spec.__dict__, "per_class": args.per_class})
    if args.length:
        spec = type(spec)(**{**spec.__dict__, "length": args.length})
    data = synth_dataset(spec, seed=cfg.seed)
    save_dataset(args.out, data)
    print(f"wrote {len(data)} events of {data.signals.shape[1]} samples ({data.classes} classes) "
          f"to {args.out}")


def cmd_features(args):
    cfg = _config(args)
    data = load_or_synth(cfg)
    feats = extract_features(data.signals, args.window or cfg.window, args.hop or cfg.hop,
                             args.framing or cfg.framing)
    pbnt.save(args.out, feats)
    print(f"wrote features {feats.shape} to {args.out}")


def cmd_train(args):
    cfg = _config(args)
    data = load_or_synth(cfg)
    fold = cfg.folds[0]
    fd = fold_data(cfg, data, fold)
    snapshot = dict(cfg.to_dict(), folds=[fold])
    partner = None
    if args.variant == "pbn" and "partner" in cfg.variants:
        partner, _ = train_partner(fd.arch, fd.xa, fd.ya, cfg)
    if args.variant == "pbn":
        models, _ = train_class_models(fd.arch, fd.xa, fd.ya, cfg, "pbn", classes=data.classes)
    else:
        models, _ = train_class_models(fd.arch, fd.xa, fd.ya, cfg, "dpbn", cfg.dpbn_depth,
                                       cfg.dpbn_epochs, classes=data.classes)
    from .bundle import ModelBundle
    save_bundle(args.out, ModelBundle(fd.arch, models, fd.settings, partner, snapshot))
    print(f"trained {len(models)} {args.variant} class models on fold {fold}; saved {args.out}")


def _scores(bundle, x):
    if bundle.variant == "dpbn":
        return reconstruction_matrix(bundle.models, x), False
    return log_likelihood_matrix(bundle.models, x), True


def cmd_eval(args):
    bundle = load_bundle(args.model)
    cfg, fd = _test_half(bundle, args)
    scores, largest = _scores(bundle, fd.xb)
    rep = evaluate_decisions(fd.yb, decide(scores, largest), bundle.classes)
    name = "dpbn" if bundle.variant == "dpbn" else "pbn"
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        report.write_confusion(out / f"confusion_{name}.tsv", rep, name, _echo(cfg))
        report.write_scores(out / f"scores_{name}.tsv", scores, fd.yb, name, _echo(cfg))
        plotting.plot_confusion(out / f"confusion_{name}.png", rep.confusion,
                                f"{name}: {100 * rep.error_rate:.1f}% error")
    print(f"{name}\terrors\t{rep.errors}\tsamples\t{int(rep.counts.sum())}\terror_rate\t{rep.error_rate:.4f}")
    for i, row in enumerate(rep.confusion):
        print("\t".join(str(v) for v in row))
    if np.any(rep.unclassified):
        print(f"unclassified per class\t{rep.unclassified.tolist()}")


def cmd_sweep(args):
    bundle = load_bundle(args.model)
    if bundle.partner is None or bundle.variant != "pbn":
        raise ConfigError("the sweep needs a PBN bundle trained with its discriminative partner")
    cfg, fd = _test_half(bundle, args)
    gammas = parse_gammas(args.gammas) if args.gammas else np.asarray(cfg.gammas)
    sw = combine_sweep(log_likelihood_matrix(bundle.models, fd.xb),
                       discriminative_scores(bundle.partner, fd.xb), gammas, fd.yb)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        report.write_sweep(out / "sweep.tsv", sw, _echo(cfg))
        plotting.plot_sweep(out / "sweep.png", sw.gammas, sw.errors)
    print("gamma\terror")
    for g, e in zip(sw.gammas, sw.errors):
        print(f"{g:.4f}\t{e:.4f}")


def cmd_reconstruct(args):
    bundle = load_bundle(args.model)
    if bundle.variant != "dpbn":
        raise ConfigError("reconstruction needs a D-PBN bundle")
    cfg, fd = _test_half(bundle, args)
    picks = np.concatenate([np.flatnonzero(fd.yb == c)[:args.count] for c in range(bundle.classes)])
    x = fd.xb[picks]
    shape = (fd.frames, fd.bins)
    sc = bundle.features.scaler
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = {}
    for k, m in enumerate(bundle.models):
        net = m.generative_net
        ev = evaluate(net, x, need=np.zeros(len(x), dtype=bool))
        rec = reconstruct(net, ev.features).reconstruction.reshape((-1,) + shape)
        rec = rec * sc.std + sc.mean
        pbnt.save(out / f"reconstruction_class{k}.pbnt", rec)
        rows[f"model {k}"] = rec
    orig = x.reshape((-1,) + shape) * sc.std + sc.mean
    pbnt.save(out / "originals.pbnt", orig)
    plotting.plot_reconstructions(out / "reconstructions.png", orig,
                                  {k: rows[k] for k in list(rows)[:args.rows]}, fd.yb[picks])
    err = reconstruction_matrix(bundle.models, x)
    print("label\t" + "\t".join(f"model{k}" for k in range(bundle.classes)))
    for y, e in zip(fd.yb[picks], err):
        print(f"{y}\t" + "\t".join(f"{v:.4f}" for v in e))


def cmd_report(args):
    cfg = _config(args)
    folds = run_experiment(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    echo = _echo(cfg)
    (out / "config.json").write_text(json.dumps(echo, indent=2) + "\n")
    for fold in folds:
        report.write_fold_report(out, fold, echo)
        if args.save_models:
            for name, b in fold.bundles.items():
                save_bundle(out / f"fold{fold.fold}_{name}.npz", b)
        for name, rep in fold.reports.items():
            print(f"fold{fold.fold}\t{name}\terror_rate\t{rep.error_rate:.4f}")
        if fold.sweep is not None:
            print(f"fold{fold.fold}\tsweep\tinterior_min\t{fold.sweep.interior_min():.4f}"
                  f"\tendpoint_min\t{fold.sweep.endpoint_min():.4f}")
    print(f"report written to {out}")


# ---------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="pbn", description="Projected belief network experiments.")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=True):
        sp.add_argument("--config", help="JSON run configuration")
        sp.add_argument("--seed", type=int)
        if data:
            sp.add_argument("--data", help="dataset directory (synthetic data if omitted)")

    sp = sub.add_parser("synth", help="generate a synthetic dataset")
    common(sp, data=False)
    sp.add_argument("--out", required=True)
    sp.add_argument("--classes", type=int)
    sp.add_argument("--per-class", type=int)
    sp.add_argument("--length", type=int)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("features", help="write log spectrogram features as a tensor file")
    common(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("--window", type=int)
    sp.add_argument("--hop", type=int)
    sp.add_argument("--framing", choices=["strict", "tail"])
    sp.set_defaults(func=cmd_features)

    sp = sub.add_parser("train", help="train one model per class on a fold")
    common(sp)
    sp.add_argument("--out", required=True, help="model bundle (.npz)")
    sp.add_argument("--variant", choices=["pbn", "dpbn"], default="pbn")
    sp.add_argument("--fold", type=int, choices=[0, 1])
    sp.add_argument("--depth", type=int, help="terminal depth of the D-PBN chain")
    sp.add_argument("--epochs", type=int)
    sp.set_defaults(func=cmd_train)

    for name, func, text in (("eval", cmd_eval, "classify the held-out half"),
                             ("sweep", cmd_sweep, "sweep the likelihood/partner combination"),
                             ("reconstruct", cmd_reconstruct, "D-PBN reconstructions of test events")):
        sp = sub.add_parser(name, help=text)
        sp.add_argument("--model", required=True)
        sp.add_argument("--data", help="dataset directory (default: the bundle's)")
        sp.add_argument("--out", required=name == "reconstruct")
        if name == "sweep":
            sp.add_argument("--gammas", help="'0,0.5,1' or 'start:stop:count'")
        if name == "reconstruct":
            sp.add_argument("--count", type=int, default=2, help="events per class")
            sp.add_argument("--rows", type=int, default=2, help="models shown in the figure")
        sp.set_defaults(func=func)

    sp = sub.add_parser("report", help="full train/evaluate run with tables and figures")
    common(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("--fold", type=int, choices=[0, 1])
    sp.add_argument("--depth", type=int)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--save-models", action="store_true")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except _CONFIG_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (PBNError, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
