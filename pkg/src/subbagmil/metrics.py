"""Multi-class evaluation: confusion matrix, macro one-vs-rest rates, MCC, AUC."""

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

METRIC_NAMES = ("f1", "auc", "acc", "mcc", "sens", "spec", "ppv", "npv")


def check_scores(y_true, proba):
    y = np.asarray(y_true, dtype=np.int64)
    p = np.asarray(proba, dtype=np.float64)
    if p.ndim != 2 or y.ndim != 1 or p.shape[0] != y.shape[0]:
        raise ValueError(f"labels {y.shape} and probabilities {p.shape} are inconsistent")
    if y.size == 0:
        raise ValueError("empty score set")
    if np.any(np.abs(p.sum(axis=1) - 1.0) > 1e-9):
        raise ValueError("probability rows must sum to 1")
    if np.any((y < 0) | (y >= p.shape[1])):
        raise ValueError("label outside the probability columns")
    return y, p


def confusion(y_true, proba):
    """Rows are true classes, columns argmax predictions (ties to the lower index)."""
    y, p = check_scores(y_true, proba)
    c = p.shape[1]
    cm = np.zeros((c, c), dtype=np.int64)
    np.add.at(cm, (y, p.argmax(axis=1)), 1)
    return cm


def _ovr_counts(cm):
    cm = np.asarray(cm, dtype=np.float64)
    tp = np.diag(cm)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    tn = cm.sum() - tp - fp - fn
    return tp, fp, fn, tn


def _macro(num, den):
    defined = den > 0
    vals = np.where(defined, num / np.where(defined, den, 1.0), 0.0)
    return float(vals.mean()), int((~defined).sum())


def macro_f1(cm, diagnostics=None):
    tp, fp, fn, _ = _ovr_counts(cm)
    val, undefined = _macro(2 * tp, 2 * tp + fp + fn)
    if diagnostics is not None:
        diagnostics["f1"] = undefined
    return val


def macro_ovr_rates(cm, diagnostics=None):
    """Macro one-vs-rest ``(sens, spec, ppv, npv)``; undefined classes count as 0."""
    tp, fp, fn, tn = _ovr_counts(cm)
    out = []
    for name, num, den in (("sens", tp, tp + fn), ("spec", tn, tn + fp),
                           ("ppv", tp, tp + fp), ("npv", tn, tn + fn)):
        val, undefined = _macro(num, den)
        if diagnostics is not None:
            diagnostics[name] = undefined
        out.append(val)
    return tuple(out)


def mcc(cm):
    """Multi-class Matthews correlation (Gorodkin's R_K); 0 on a zero denominator."""
    cm = np.asarray(cm, dtype=np.float64)
    s = cm.sum()
    c = np.trace(cm)
    p = cm.sum(axis=0)
    t = cm.sum(axis=1)
    den = (s * s - p @ p) * (s * s - t @ t)
    if den <= 0:
        return 0.0
    return float((c * s - p @ t) / np.sqrt(den))


def binary_auc(positive, scores):
    """ROC AUC from the rank-sum statistic; tied pairs count one half."""
    positive = np.asarray(positive, dtype=bool)
    n_pos = int(positive.sum())
    n_neg = positive.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(scores)
    return float((ranks[positive].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def auc_macro_ovr(y_true, proba, diagnostics=None):
    y, p = check_scores(y_true, proba)
    vals = []
    skipped = 0
    for c in range(p.shape[1]):
        a = binary_auc(y == c, p[:, c])
        if a is None:
            skipped += 1
        else:
            vals.append(a)
    if diagnostics is not None:
        diagnostics["auc"] = skipped
    return float(np.mean(vals)) if vals else None


@dataclass
class MetricTable:
    f1: float
    auc: float
    acc: float
    mcc: float
    sens: float
    spec: float
    ppv: float
    npv: float
    undefined: dict = field(default_factory=dict)

    def as_dict(self):
        return {n: getattr(self, n) for n in METRIC_NAMES}

    def csv_row(self):
        """Values scaled by 100 with two decimals; an absent value is empty."""
        return ["" if getattr(self, n) is None else f"{100 * getattr(self, n):.2f}"
                for n in METRIC_NAMES]


def metric_table(y_true, proba):
    y, p = check_scores(y_true, proba)
    cm = confusion(y, p)
    diag = {}
    f1 = macro_f1(cm, diag)
    sens, spec, ppv, npv = macro_ovr_rates(cm, diag)
    auc = auc_macro_ovr(y, p, diag)
    acc = float(np.trace(cm) / cm.sum())
    return MetricTable(f1, auc, acc, mcc(cm), sens, spec, ppv, npv, diag)


def write_metric_csv(path, tables):
    """Write ``{row_name: MetricTable}`` as CSV (x100, two decimals)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["name", *METRIC_NAMES])
        for name, table in tables.items():
            w.writerow([name, *table.csv_row()])
