"""Tab-separated report tables with the run configuration echoed in the header.

Every table starts with ``#``-prefixed lines: a title and one
``# config <key>\t<value>`` line per configuration entry, so a table
read on its own still says how it was produced.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import plotting


def _header(title, config):
    lines = [f"# {title}"]
    for key in sorted(config or {}):
        lines.append(f"# config {key}\t{json.dumps(config[key])}")
    return lines


def write_table(path, title, columns, rows, config=None):
    lines = _header(title, config)
    lines.append("\t".join(columns))
    for row in rows:
        lines.append("\t".join(_fmt(v) for v in row))
    Path(path).write_text("\n".join(lines) + "\n")
    return path


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v)) if np.isfinite(v) else str(float(v))
    return str(v)


def read_table(path):
    """(header comment lines, column names, rows as lists of strings)."""
    comments, body = [], []
    for line in Path(path).read_text().splitlines():
        (comments if line.startswith("#") else body).append(line)
    cols = body[0].split("\t")
    return comments, cols, [r.split("\t") for r in body[1:]]


def write_confusion(path, report, name, config=None):
    conf = report.confusion
    k = conf.shape[0]
    cols = ["true"] + [f"pred{j}" for j in range(k)] + ["unclassified"]
    rows = [[i] + conf[i].tolist() + [int(report.unclassified[i])] for i in range(k)]
    title = f"confusion {name}: {report.errors} errors in {int(report.counts.sum())} samples " \
            f"({100 * report.error_rate:.2f}%)"
    return write_table(path, title, cols, rows, config)


def write_sweep(path, sweep, config=None):
    rows = [[float(g), float(e)] for g, e in zip(sweep.gammas, sweep.errors)]
    g, e = sweep.best
    return write_table(path, f"combination sweep: best error {e:.4f} at {g:.3f}",
                       ["gamma", "error"], rows, config)


def write_scores(path, scores, labels, name, config=None):
    k = scores.shape[1]
    rows = [[int(y)] + s.tolist() for y, s in zip(labels, scores)]
    return write_table(path, f"{name} scores per sample", ["label"] + [f"class{j}" for j in range(k)],
                       rows, config)


def write_fold_report(out_dir, fold, config=None):
    """Tables and figures for one fold; returns the list of written paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tag = f"fold{fold.fold}"
    written = []
    summary = []
    for name, rep in fold.reports.items():
        written.append(write_confusion(out / f"{tag}_confusion_{name}.tsv", rep, name, config))
        written.append(plotting.plot_confusion(out / f"{tag}_confusion_{name}.png", rep.confusion,
                                               f"{name}: {100 * rep.error_rate:.1f}% error"))
        written.append(write_scores(out / f"{tag}_scores_{name}.tsv", fold.scores[name],
                                    fold.labels, name, config))
        summary.append([name, rep.errors, int(rep.counts.sum()), rep.error_rate])
    if fold.sweep is not None:
        sw = fold.sweep
        written.append(write_sweep(out / f"{tag}_sweep.tsv", sw, config))
        written.append(plotting.plot_sweep(out / f"{tag}_sweep.png", sw.gammas, sw.errors))
        summary.append(["sweep_interior_min", "", "", sw.interior_min()])
        summary.append(["sweep_endpoint_min", "", "", sw.endpoint_min()])
    if fold.curves:
        written.append(plotting.plot_curves(out / f"{tag}_training.png", fold.curves))
    written.append(write_table(out / f"{tag}_summary.tsv", f"summary {tag} ({fold.seconds:.1f} s)",
                               ["classifier", "errors", "samples", "error_rate"], summary, config))
    return written
