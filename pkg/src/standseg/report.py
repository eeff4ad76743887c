"""Report files: metrics JSON, confusion-matrix CSV, and a training-history SVG."""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import InputError
from .trainer import EpochRecord, best_epoch

PANELS = (
    ("loss", "train_loss", "val_loss"),
    ("mMCC", "train_mmcc", "val_mmcc"),
    ("OA", "train_oa", "val_oa"),
)
SERIES_COLORS = ("#1f77b4", "#d62728")


def _fmt(v) -> str:
    return "" if v is None else f"{v:.4f}"


def confusion_rows(metrics: dict) -> list[list[str]]:
    """Table rows: predicted classes down, reference classes across.

    Each predicted row ends with its Sum and UA; the last two rows hold the
    column sums and PA.
    """
    labels = [c["class"] for c in metrics["per_class"]]
    m = np.asarray(metrics["matrix_normalized"], dtype=np.float64)
    rows = [["predicted\\reference", *labels, "Sum", "UA"]]
    for i, name in enumerate(labels):
        rows.append([name, *(_fmt(v) for v in m[i]), _fmt(m[i].sum()), _fmt(metrics["per_class"][i]["ua"])])
    rows.append(["Sum", *(_fmt(v) for v in m.sum(axis=0)), _fmt(m.sum()), ""])
    rows.append(["PA", *(_fmt(c["pa"]) for c in metrics["per_class"]), "", _fmt(metrics["oa"])])
    return rows


def write_confusion_csv(metrics: dict, path) -> None:
    with open(path, "w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows(confusion_rows(metrics))


def history_svg(history: Sequence[EpochRecord], width: int = 900, panel_height: int = 220) -> str:
    """Three stacked panels (loss, mMCC, OA), each with a train and a val polyline.

    A dotted vertical line marks the epoch with the best val mMCC.
    """
    if not history:
        raise InputError("history is empty")
    pad_l, pad_r, pad_t, pad_b = 60, 20, 30, 30
    epochs = np.array([r.epoch for r in history], dtype=np.float64)
    e0, e1 = epochs.min(), epochs.max()
    span = (e1 - e0) or 1.0
    plot_w = width - pad_l - pad_r
    height = panel_height * len(PANELS)
    best = best_epoch(list(history))

    def sx(e: float) -> float:
        return pad_l + (e - e0) / span * plot_w

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        '<rect width="100%" height="100%" fill="white"/>',
    ]
    for k, (title, train_key, val_key) in enumerate(PANELS):
        top = k * panel_height + pad_t
        h = panel_height - pad_t - pad_b
        values = np.array([[getattr(r, train_key), getattr(r, val_key)] for r in history], dtype=np.float64)
        lo, hi = float(np.nanmin(values)), float(np.nanmax(values))
        if hi - lo < 1e-12:
            lo, hi = lo - 0.5, hi + 0.5

        def sy(v: float) -> float:
            return top + h - (v - lo) / (hi - lo) * h

        parts.append(f'<g class="panel" id="panel-{title}">')
        parts.append(f'<rect x="{pad_l}" y="{top}" width="{plot_w}" height="{h}" fill="none" stroke="#999"/>')
        parts.append(f'<text x="{pad_l}" y="{top - 8}" font-size="13">{title}</text>')
        parts.append(f'<text x="{pad_l - 6}" y="{top + 10}" font-size="10" text-anchor="end">{hi:.3g}</text>')
        parts.append(f'<text x="{pad_l - 6}" y="{top + h}" font-size="10" text-anchor="end">{lo:.3g}</text>')
        for j, (name, color) in enumerate(zip(("train", "val"), SERIES_COLORS)):
            pts = " ".join(f"{sx(e):.2f},{sy(v):.2f}" for e, v in zip(epochs, values[:, j]))
            parts.append(
                f'<polyline class="series" data-series="{name}" data-metric="{title}" points="{pts}" '
                f'fill="none" stroke="{color}" stroke-width="1.5"/>'
            )
        x = sx(best)
        parts.append(
            f'<line class="best-epoch" data-epoch="{best}" x1="{x:.2f}" y1="{top}" x2="{x:.2f}" y2="{top + h}" '
            'stroke="black" stroke-dasharray="2,3"/>'
        )
        parts.append("</g>")
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def emit_report(metrics: dict, history: Sequence[EpochRecord], outdir) -> dict[str, Path]:
    """Write metrics.json, confusion_matrix.csv and history.svg under ``outdir``."""
    if not history:
        raise InputError("cannot report an empty training history")
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "metrics": out / "metrics.json",
        "confusion": out / "confusion_matrix.csv",
        "history": out / "history.svg",
    }
    paths["metrics"].write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    write_confusion_csv(metrics, paths["confusion"])
    paths["history"].write_text(history_svg(history))
    return paths
