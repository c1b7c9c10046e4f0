"""Hyperparameter sweeps (frame count, compression ratio, expansion rate) with
CSV ground truth and standalone SVG charts."""
import csv
import json
import logging
import math
from dataclasses import replace
from fractions import Fraction
from html import escape
from pathlib import Path

from .eval import evaluate
from .model import RscnetModel, pin_hidden
from .train import train

log = logging.getLogger(__name__)

AXES = {"N_f": "window_frames", "eta": "compression_ratio", "rho": "expansion_rate"}
AXIS_ALIASES = {"N_f": "N_f", "nf": "N_f", "η": "eta", "eta": "eta", "ρ": "rho", "rho": "rho"}

SWEEP_COLUMNS = ("axis", "value", "accuracy", "nmse_db", "nmse_db_pooled",
                 "nmse_db_raw", "flops_encoder", "flops_recurrent", "flops_decoder",
                 "flops_classifier", "flops_total", "best_epoch")


def parse_axis_value(axis, value):
    """``"1/90"`` and ``0.0111`` are both accepted for eta; N_f and rho are ints."""
    if axis == "eta":
        return float(Fraction(str(value)))
    as_float = float(value)
    if not as_float.is_integer():
        raise ValueError(f"{axis} value must be an integer, got {value!r}")
    return int(as_float)


def run_sweep(axis, values, base_config, train_config, split, out_dir=None, seed=0,
              log_fn=None):
    """Train and test-evaluate one model per axis value, all from ``seed``.

    Invalid values are logged, listed in ``sweep_<axis>_invalid.csv`` and
    skipped, so the main CSV has one row per valid value. An N_f sweep keeps
    the base recurrent width for every value.
    Returns the list of :class:`EvalResult` for the valid values.
    """
    axis = AXIS_ALIASES.get(axis)
    if axis is None:
        raise ValueError(f"unknown sweep axis; choose from {sorted(AXIS_ALIASES)}")
    field_name = AXES[axis]
    if axis == "N_f":
        base_config = pin_hidden(base_config)
    results, rows, invalid = [], [], []
    for raw in values:
        try:
            value = parse_axis_value(axis, raw)
            cfg = replace(base_config, **{field_name: value})
        except (ValueError, ZeroDivisionError) as exc:
            log.warning("sweep %s=%s skipped: %s", axis, raw, exc)
            invalid.append({"axis": axis, "value": raw, "error": str(exc)})
            continue
        model = RscnetModel.initialize(cfg, seed=seed)
        best, report = train(model, split, replace(train_config, seed=seed), log=log_fn)
        result = evaluate(best, split.test, split.stats)
        result.extra = {"axis": axis, "value": value, "report": report.summary()}
        results.append(result)
        rows.append({"axis": axis, "value": raw, **result.row(),
                     "best_epoch": report.summary()["best_epoch"]})
    if out_dir is not None:
        write_sweep(out_dir, axis, rows, invalid)
    return results


def write_sweep(out_dir, axis, rows, invalid=()):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with (out_dir / f"sweep_{axis}.csv").open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS, extrasaction="ignore")
        writer.writeheader()
        writer.writerows(rows)
    bad = out_dir / f"sweep_{axis}_invalid.csv"
    if invalid:
        with bad.open("w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=("axis", "value", "error"))
            writer.writeheader()
            writer.writerows(invalid)
    elif bad.exists():
        bad.unlink()
    ok = rows
    if not ok:
        return
    labels = [str(r["value"]) for r in ok]
    charts = out_dir / "charts"
    charts.mkdir(exist_ok=True)
    (charts / f"sweep_{axis}_accuracy.svg").write_text(line_chart(
        labels, {"test accuracy": [r["accuracy"] for r in ok]},
        f"Accuracy vs {axis}", axis, "accuracy"))
    (charts / f"sweep_{axis}_nmse.svg").write_text(line_chart(
        labels, {"NMSE (dB)": [r["nmse_db"] for r in ok]}, f"NMSE vs {axis}", axis, "dB"))
    (charts / f"sweep_{axis}_flops.svg").write_text(bar_chart(
        labels, {k: [r[f"flops_{k}"] for r in ok]
                 for k in ("encoder", "recurrent", "decoder", "classifier")},
        f"FLOPs per sample vs {axis}", axis, "FLOPs", log_scale=True))


def write_sweep_config(path, axis, values, base_config_path):
    Path(path).write_text(json.dumps(
        {"axis": axis, "values": list(values), "base_config_path": str(base_config_path)}, indent=2))


def read_sweep_config(path):
    data = json.loads(Path(path).read_text())
    for key in ("axis", "values"):
        if key not in data:
            raise ValueError(f"sweep config {path} lacks {key!r}")
    return data


# -- SVG ----------------------------------------------------------------------

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")
_W, _H, _L, _R, _T, _B = 640, 400, 80, 150, 40, 50


def _scale(lo, hi, log_scale):
    if log_scale:
        lo, hi = math.log10(lo), math.log10(hi)
    if hi == lo:
        lo, hi = lo - 1, hi + 1
    height = _H - _T - _B

    def y(v):
        v = math.log10(v) if log_scale else v
        return _T + height * (1 - (v - lo) / (hi - lo))
    return y, lo, hi


def _frame(title, xlabel, ylabel, y, lo, hi, log_scale):
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" '
             f'font-family="sans-serif" font-size="12">',
             f'<rect width="{_W}" height="{_H}" fill="white"/>',
             f'<text x="{_W / 2}" y="22" text-anchor="middle" font-size="15">{escape(title)}</text>',
             f'<line x1="{_L}" y1="{_T}" x2="{_L}" y2="{_H - _B}" stroke="black"/>',
             f'<line x1="{_L}" y1="{_H - _B}" x2="{_W - _R}" y2="{_H - _B}" stroke="black"/>',
             f'<text x="{(_L + _W - _R) / 2}" y="{_H - 12}" text-anchor="middle">{escape(xlabel)}</text>',
             f'<text x="18" y="{_H / 2}" text-anchor="middle" '
             f'transform="rotate(-90 18 {_H / 2})">{escape(ylabel)}</text>']
    for k in range(5):
        v = lo + (hi - lo) * k / 4
        shown = 10 ** v if log_scale else v
        yy = _T + (_H - _T - _B) * (1 - k / 4)
        parts.append(f'<line x1="{_L - 4}" y1="{yy:.1f}" x2="{_L}" y2="{yy:.1f}" stroke="black"/>')
        parts.append(f'<text x="{_L - 6}" y="{yy + 4:.1f}" text-anchor="end">{shown:.3g}</text>')
    return parts


def _legend(parts, names):
    for k, name in enumerate(names):
        yy = _T + 18 * k
        parts.append(f'<rect x="{_W - _R + 12}" y="{yy}" width="10" height="10" '
                     f'fill="{PALETTE[k % len(PALETTE)]}"/>')
        parts.append(f'<text x="{_W - _R + 28}" y="{yy + 9}">{escape(name)}</text>')


def _finite(series):
    vals = [v for ys in series.values() for v in ys if v is not None and math.isfinite(v)]
    return vals or [0.0, 1.0]


def line_chart(labels, series, title, xlabel, ylabel):
    """Categorical-x line chart; non-finite points are left out."""
    vals = _finite(series)
    y, lo, hi = _scale(min(vals), max(vals), False)
    parts = _frame(title, xlabel, ylabel, y, lo, hi, False)
    n = len(labels)
    span = _W - _L - _R

    def x(i):
        return _L + span * (i + 0.5) / n
    for i, lab in enumerate(labels):
        parts.append(f'<text x="{x(i):.1f}" y="{_H - _B + 16}" text-anchor="middle">{escape(lab)}</text>')
    for k, (name, ys) in enumerate(series.items()):
        color = PALETTE[k % len(PALETTE)]
        pts = [(x(i), y(v)) for i, v in enumerate(ys) if v is not None and math.isfinite(v)]
        if len(pts) > 1:
            path = " ".join(f"{px:.1f},{py:.1f}" for px, py in pts)
            parts.append(f'<polyline points="{path}" fill="none" stroke="{color}" stroke-width="2"/>')
        parts += [f'<circle cx="{px:.1f}" cy="{py:.1f}" r="3" fill="{color}"/>' for px, py in pts]
    _legend(parts, list(series))
    return "\n".join(parts + ["</svg>"]) + "\n"


def bar_chart(labels, series, title, xlabel, ylabel, log_scale=False):
    """Grouped bars, one group per label."""
    vals = [v for v in _finite(series) if v > 0 or not log_scale] or [1.0]
    lo = min(vals) if log_scale else min(0.0, min(vals))
    y, lo_s, hi_s = _scale(lo, max(vals), log_scale)
    parts = _frame(title, xlabel, ylabel, y, lo_s, hi_s, log_scale)
    n, m = len(labels), len(series)
    group = (_W - _L - _R) / n
    width = group * 0.8 / m
    base = _H - _B
    for i, lab in enumerate(labels):
        parts.append(f'<text x="{_L + group * (i + 0.5):.1f}" y="{_H - _B + 16}" '
                     f'text-anchor="middle">{escape(lab)}</text>')
        for k, ys in enumerate(series.values()):
            v = ys[i]
            if v is None or not math.isfinite(v) or (log_scale and v <= 0):
                continue
            top = y(v)
            parts.append(f'<rect x="{_L + group * (i + 0.1) + k * width:.1f}" y="{top:.1f}" '
                         f'width="{width:.1f}" height="{max(base - top, 0):.1f}" '
                         f'fill="{PALETTE[k % len(PALETTE)]}"/>')
    _legend(parts, list(series))
    return "\n".join(parts + ["</svg>"]) + "\n"


def training_charts(report, out_dir):
    """Loss and validation curves for one training run."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    labels = [str(e) for e in report.epoch]
    charts = {
        "loss.svg": line_chart(
            labels, {"total": report.train_loss, "L_c": report.loss_c, "L_r": report.loss_r},
            "Training loss", "epoch", "loss"),
        "val_accuracy.svg": line_chart(
            labels, {"val accuracy": report.val_accuracy}, "Validation accuracy", "epoch",
            "accuracy"),
        "val_nmse.svg": line_chart(
            labels, {"val NMSE (dB)": report.val_nmse_db}, "Validation NMSE", "epoch", "dB"),
    }
    written = []
    for name, svg in charts.items():
        (out_dir / name).write_text(svg)
        written.append(out_dir / name)
    return written

