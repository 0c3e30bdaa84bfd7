"""CSV tables and minimal SVG line charts for run directories."""

import csv
import json
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from .bagstore import dataset_entropy
from .curriculum import CurriculumSchedule, difficulty
from .sampling import expected_balanced_counts
from .trainer import TrainConfig

IMBALANCE_RATIOS = ((1, 1, 1), (1, 1, 2), (1, 1, 4), (1, 2, 2), (1, 2, 3))
_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    return Path(path)


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _ticks(lo, hi, n=5):
    if hi == lo:
        hi = lo + 1.0
    return np.linspace(lo, hi, n)


def line_chart_svg(series, title="", xlabel="", ylabel="", width=480, height=300):
    """Render ``{label: (xs, ys)}`` as an SVG string of polylines with axis ticks.

    Non-finite points are dropped.
    """
    pad_l, pad_r, pad_t, pad_b = 56, 110, 28, 40
    pts = {k: [(float(x), float(y)) for x, y in zip(*v) if np.isfinite(x) and np.isfinite(y)]
           for k, v in series.items()}
    allx = [p[0] for v in pts.values() for p in v] or [0.0, 1.0]
    ally = [p[1] for v in pts.values() for p in v] or [0.0, 1.0]
    x0, x1, y0, y1 = min(allx), max(allx), min(ally), max(ally)
    if x1 == x0:
        x1 = x0 + 1.0
    if y1 == y0:
        y1 = y0 + 1.0
    pw, ph = width - pad_l - pad_r, height - pad_t - pad_b

    def sx(x):
        return pad_l + (x - x0) / (x1 - x0) * pw

    def sy(y):
        return pad_t + ph - (y - y0) / (y1 - y0) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'font-family="sans-serif" font-size="11">',
           f'<rect width="{width}" height="{height}" fill="white"/>',
           f'<text x="{width / 2:.1f}" y="16" text-anchor="middle" font-size="13">{escape(title)}</text>',
           f'<line x1="{pad_l}" y1="{pad_t + ph}" x2="{pad_l + pw}" y2="{pad_t + ph}" stroke="black"/>',
           f'<line x1="{pad_l}" y1="{pad_t}" x2="{pad_l}" y2="{pad_t + ph}" stroke="black"/>']
    for t in _ticks(x0, x1):
        out.append(f'<line x1="{sx(t):.1f}" y1="{pad_t + ph}" x2="{sx(t):.1f}" y2="{pad_t + ph + 4}" stroke="black"/>')
        out.append(f'<text x="{sx(t):.1f}" y="{pad_t + ph + 15}" text-anchor="middle">{t:.3g}</text>')
    for t in _ticks(y0, y1):
        out.append(f'<line x1="{pad_l - 4}" y1="{sy(t):.1f}" x2="{pad_l}" y2="{sy(t):.1f}" stroke="black"/>')
        out.append(f'<text x="{pad_l - 6}" y="{sy(t) + 4:.1f}" text-anchor="end">{t:.3g}</text>')
    out.append(f'<text x="{pad_l + pw / 2:.1f}" y="{height - 6}" text-anchor="middle">{escape(xlabel)}</text>')
    out.append(f'<text x="14" y="{pad_t + ph / 2:.1f}" text-anchor="middle" '
               f'transform="rotate(-90 14 {pad_t + ph / 2:.1f})">{escape(ylabel)}</text>')
    for i, (label, p) in enumerate(pts.items()):
        color = _PALETTE[i % len(_PALETTE)]
        if p:
            coords = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in p)
            out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{coords}"/>')
        ly = pad_t + 14 * i + 6
        out.append(f'<line x1="{pad_l + pw + 10}" y1="{ly}" x2="{pad_l + pw + 28}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{pad_l + pw + 32}" y="{ly + 4}">{escape(str(label))}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_svg(path, series, **kwargs):
    Path(path).write_text(line_chart_svg(series, **kwargs))
    return Path(path)


def schedule_rows(kind, max_epochs, seed=0):
    s = CurriculumSchedule(kind, max_epochs, seed)
    return [(e, difficulty(e, s)) for e in range(max_epochs + 1)]


def balance_rows(counts, class_names=None):
    acc = expected_balanced_counts(counts)
    names = class_names or [str(c) for c in range(len(acc.initial))]
    return [(names[c], n0, gen, n1) for c, n0, gen, n1 in acc.rows()], acc.entropies()


def entropy_rows(extra=None):
    """Entropy of the standard 3-class imbalance ratios plus any ``{name: counts}`` extras."""
    rows = [(":".join(str(r) for r in ratio), f"{dataset_entropy(ratio):.4f}")
            for ratio in IMBALANCE_RATIOS]
    for name, counts in (extra or {}).items():
        rows.append((name, f"{dataset_entropy(counts):.4f}"))
    return rows


def build_report(run_dir, train_counts, class_names, out_dir=None):
    """Write loss, schedule, balance and entropy tables and charts for a run.

    Returns the list of files written.
    """
    run_dir = Path(run_dir)
    out = Path(out_dir) if out_dir else run_dir / "report"
    out.mkdir(parents=True, exist_ok=True)
    cfg = TrainConfig.from_json(json.loads((run_dir / "config.json").read_text()))
    written = []

    losses = read_csv(run_dir / "losses.csv")
    epochs = [int(r["epoch"]) for r in losses]
    series = {c: (epochs, [float(r[c]) for r in losses]) for c in ("l1", "l2", "lc1", "lc2", "ls", "total")}
    written.append(write_svg(out / "losses.svg", series, title="Per-epoch mean losses",
                             xlabel="epoch", ylabel="loss"))

    rows = schedule_rows(cfg.schedule, cfg.epochs, cfg.seed)
    written.append(write_csv(out / "k_schedule.csv", ["epoch", "k"], rows))
    written.append(write_svg(out / "k_schedule.svg", {cfg.schedule: ([r[0] for r in rows], [r[1] for r in rows])},
                             title="Curriculum difficulty", xlabel="epoch", ylabel="k"))

    bal, _ = balance_rows(train_counts, class_names)
    bal = [(n, f"{a:.2f}", f"{g:.2f}", f"{p:.2f}") for n, a, g, p in bal]
    written.append(write_csv(out / "balance.csv", ["class", "initial", "generated", "projected"], bal))
    acc = expected_balanced_counts(train_counts)
    written.append(write_csv(out / "entropy.csv", ["dataset", "entropy"],
                             entropy_rows({"train": train_counts, "train+pseudo": acc.projected})))

    val_path = run_dir / "validation.csv"
    if val_path.exists():
        val = read_csv(val_path)
        ve = [int(r["epoch"]) for r in val]
        written.append(write_svg(out / "validation.svg",
                                 {m: (ve, [float(r[m]) for r in val]) for m in ("f1", "acc", "auc")},
                                 title="Validation metrics", xlabel="epoch", ylabel="score"))
    return written
