"""Regression, classification, ranking and hypothesis-test computations.

Undefined quantities (empty denominators, constant targets, single-class
labels) come back as NaN and are named in an ``undefined`` list rather than
raising, so one degenerate fold never sinks a whole report.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Sequence

import numpy as np
from scipy import stats

from .domain import IrClass, IrThresholds, classify_ir

NAN = float("nan")


def _ratio(num: float, den: float) -> float:
    return num / den if den > 0 else NAN


def regression_metrics(y_true, y_pred) -> Dict[str, object]:
    y = np.asarray(y_true, dtype=float)
    p = np.asarray(y_pred, dtype=float)
    if y.shape != p.shape or y.ndim != 1 or y.size == 0:
        raise ValueError("y_true and y_pred must be equal-length non-empty vectors")
    resid = y - p
    ss_res = float(resid @ resid)
    dev = y - y.mean()
    ss_tot = float(dev @ dev)
    undefined = []
    if ss_tot > 0:
        r2 = 1.0 - ss_res / ss_tot
    else:
        r2 = NAN
        undefined.append("r2")
    return {"r2": r2, "mae": float(np.mean(np.abs(resid))), "mse": ss_res / y.size,
            "undefined": undefined}


@dataclass
class ConfusionCounts:
    """3x3 matrix indexed [true class, predicted class] in IS, ImpairedIS, IR order."""

    matrix: np.ndarray = field(default_factory=lambda: np.zeros((3, 3), dtype=int))

    @classmethod
    def from_binary(cls, tp: int, fp: int, tn: int, fn: int) -> "ConfusionCounts":
        # binary counts carry no IS/ImpairedIS split; negatives are filed under IS
        m = np.zeros((3, 3), dtype=int)
        m[IrClass.IR, IrClass.IR] = tp
        m[IrClass.IR, IrClass.IS] = fn
        m[IrClass.IS, IrClass.IR] = fp
        m[IrClass.IS, IrClass.IS] = tn
        return cls(m)

    @classmethod
    def from_classes(cls, true_classes, pred_classes) -> "ConfusionCounts":
        m = np.zeros((3, 3), dtype=int)
        for t, p in zip(true_classes, pred_classes):
            m[int(t), int(p)] += 1
        return cls(m)

    @classmethod
    def from_values(cls, y_true, y_pred, thresholds: IrThresholds = IrThresholds()):
        return cls.from_classes([classify_ir(v, thresholds) for v in y_true],
                                [classify_ir(v, thresholds) for v in y_pred])

    @property
    def tp(self) -> int:
        return int(self.matrix[IrClass.IR, IrClass.IR])

    @property
    def fn(self) -> int:
        return int(self.matrix[IrClass.IR, :IrClass.IR].sum())

    @property
    def fp(self) -> int:
        return int(self.matrix[:IrClass.IR, IrClass.IR].sum())

    @property
    def tn(self) -> int:
        return int(self.matrix[:IrClass.IR, :IrClass.IR].sum())

    @property
    def fp_is(self) -> int:
        """True-IS participants predicted IR (the consequential false positives)."""
        return int(self.matrix[IrClass.IS, IrClass.IR])

    @property
    def tn_is(self) -> int:
        return int(self.matrix[IrClass.IS, :IrClass.IR].sum())

    def to_dict(self) -> dict:
        return {"tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn,
                "matrix": self.matrix.tolist()}


def classification_metrics(counts: ConfusionCounts) -> Dict[str, object]:
    out = {
        "sensitivity": _ratio(counts.tp, counts.tp + counts.fn),
        "specificity": _ratio(counts.tn, counts.tn + counts.fp),
        "precision": _ratio(counts.tp, counts.tp + counts.fp),
        "adjusted_specificity": _ratio(counts.tn_is, counts.tn_is + counts.fp_is),
    }
    out["undefined"] = [k for k, v in out.items() if math.isnan(v)]
    return out


@dataclass
class RankingResult:
    auroc: float
    auprc: float
    fpr: np.ndarray
    tpr: np.ndarray
    recall: np.ndarray
    precision: np.ndarray
    thresholds: np.ndarray


def _threshold_counts(scores, labels):
    """Cumulative (tp, fp) at each distinct score, highest score first."""
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels).astype(bool)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError("scores and labels must be equal-length vectors")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    last = np.r_[s[1:] != s[:-1], True]  # final row of each tie block
    tp = np.cumsum(y)[last]
    fp = np.cumsum(~y)[last]
    return s[last], tp.astype(float), fp.astype(float), int(y.sum()), int((~y).sum())


def ranking_curves(scores, labels) -> RankingResult:
    """ROC and precision-recall curves with tied scores grouped into one step.

    AUROC is trapezoidal under the grouped ROC curve, which equals the
    pairwise probability that a positive outranks a negative with ties
    scored 1/2. AUPRC is the step integral sum((R_k - R_{k-1}) * P_k).
    """
    thr, tp, fp, n_pos, n_neg = _threshold_counts(scores, labels)
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ranking metrics need both classes present")
    tpr = np.r_[0.0, tp / n_pos]
    fpr = np.r_[0.0, fp / n_neg]
    auroc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))
    precision = tp / (tp + fp)
    recall = tp / n_pos
    auprc = float(np.sum(np.diff(np.r_[0.0, recall]) * precision))
    return RankingResult(auroc, auprc, fpr, tpr, np.r_[0.0, recall], np.r_[1.0, precision], thr)


@dataclass
class TestResult:
    statistic: float
    p_value: float
    method: str
    flags: List[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"statistic": self.statistic, "p_value": self.p_value, "method": self.method,
                "flags": list(self.flags)}


def _rank_sum_exact(ranks2: np.ndarray, n1: int, observed2: int) -> float:
    """Two-sided exact p for the rank sum of the first sample (ranks doubled to integers)."""
    total = int(ranks2.sum())
    # counts[k][s]: subsets of size k with doubled-rank sum s
    counts = np.zeros((n1 + 1, total + 1), dtype=float)
    counts[0, 0] = 1.0
    for r in ranks2:
        r = int(r)
        counts[1:, r:] += counts[:-1, :total + 1 - r].copy()
    dist = counts[n1]
    dist = dist / dist.sum()
    sums = np.arange(total + 1)
    expected = n1 * total / len(ranks2)
    dev = abs(observed2 - expected)
    return float(min(1.0, dist[np.abs(sums - expected) >= dev - 1e-9].sum()))


def wilcoxon_rank_sum(a, b, method: str = "auto") -> TestResult:
    """Two-sided Wilcoxon rank-sum test on the rank sum of ``a``.

    ``method`` is "normal" (continuity and tie corrected), "exact" (full
    enumeration of the permutation distribution, midranks for ties) or
    "auto" (exact when both samples have at most 10 observations).
    """
    x = np.asarray(a, dtype=float)
    y = np.asarray(b, dtype=float)
    n1, n2 = len(x), len(y)
    if n1 == 0 or n2 == 0:
        raise ValueError("both samples need at least one observation")
    pooled = np.r_[x, y]
    ranks = stats.rankdata(pooled)
    W = float(ranks[:n1].sum())
    N = n1 + n2
    flags = []
    _, tie_counts = np.unique(pooled, return_counts=True)
    if len(tie_counts) == 1:
        return TestResult(W, 1.0, method, ["all_ties"])
    if method == "auto":
        method = "exact" if max(n1, n2) <= 10 else "normal"
    if method == "exact":
        ranks2 = np.rint(2 * ranks).astype(int)
        p = _rank_sum_exact(ranks2, n1, int(ranks2[:n1].sum()))
        return TestResult(W, p, "exact", flags)
    if method != "normal":
        raise ValueError(f"unknown method {method!r}")
    mean = n1 * (N + 1) / 2.0
    tie_term = float((tie_counts ** 3 - tie_counts).sum()) / (N * (N - 1))
    var = n1 * n2 / 12.0 * ((N + 1) - tie_term)
    z = max(abs(W - mean) - 0.5, 0.0) / math.sqrt(var)
    p = float(min(1.0, 2.0 * stats.norm.sf(z)))
    return TestResult(W, p, "normal", flags)


def mcnemar(b: int, c: int, exact: bool = False) -> TestResult:
    """McNemar test on discordant counts b and c.

    The default is the continuity-corrected chi-square; ``exact`` uses the
    two-sided binomial test on the discordant pairs.
    """
    if b < 0 or c < 0:
        raise ValueError("discordant counts must be >= 0")
    n = b + c
    if n == 0:
        return TestResult(0.0, 1.0, "exact" if exact else "chi2", ["no_discordant_pairs"])
    if exact:
        p = min(1.0, 2.0 * stats.binom.cdf(min(b, c), n, 0.5))
        return TestResult(float(min(b, c)), float(p), "exact")
    chi2 = (abs(b - c) - 1.0) ** 2 / n
    return TestResult(chi2, float(stats.chi2.sf(chi2, 1)), "chi2")


def mcnemar_paired(correct_a, correct_b, exact: bool = False) -> TestResult:
    a = np.asarray(correct_a, dtype=bool)
    bb = np.asarray(correct_b, dtype=bool)
    return mcnemar(int(np.sum(a & ~bb)), int(np.sum(~a & bb)), exact)


def benjamini_hochberg(p_values) -> np.ndarray:
    """BH-adjusted p-values in the input order, monotone and capped at 1."""
    p = np.asarray(p_values, dtype=float)
    m = p.size
    if m == 0:
        return p.copy()
    order = np.argsort(p, kind="stable")
    scaled = p[order] * m / np.arange(1, m + 1)
    adjusted = np.minimum.accumulate(scaled[::-1])[::-1]
    out = np.empty(m)
    out[order] = np.minimum(adjusted, 1.0)
    return out


def pearson(x, y) -> TestResult:
    """Pearson r with a two-sided p-value from the t transform."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    n = x.size
    if n != y.size or n < 3:
        raise ValueError("pearson needs two equal-length samples of size >= 3")
    dx = x - x.mean()
    dy = y - y.mean()
    den = math.sqrt(float(dx @ dx) * float(dy @ dy))
    if den == 0:
        return TestResult(NAN, NAN, "pearson", ["zero_variance"])
    r = max(-1.0, min(1.0, float(dx @ dy) / den))
    if abs(r) == 1.0:
        return TestResult(r, 0.0, "pearson")
    t = r * math.sqrt((n - 2) / (1.0 - r * r))
    return TestResult(r, float(2.0 * stats.t.sf(abs(t), n - 2)), "pearson")


def coefficient_of_variation(series) -> float:
    """100 * population std / mean; NaN when the mean is zero or the series is empty."""
    s = np.asarray(series, dtype=float)
    if s.size == 0:
        return NAN
    mean = s.mean()
    if mean == 0:
        return NAN
    return float(100.0 * s.std() / abs(mean))


RATE_KEYS = ("sensitivity", "specificity", "adjusted_specificity", "precision")
METRIC_KEYS = ("r2", "mae", "mse") + RATE_KEYS + ("auroc", "auprc")


def evaluate_block(y_true, y_pred, thresholds: IrThresholds = IrThresholds()) -> Dict[str, object]:
    """Every metric for one set of test predictions (one fold, or pooled)."""
    y_true = np.asarray(y_true, dtype=float)
    y_pred = np.asarray(y_pred, dtype=float)
    reg = regression_metrics(y_true, y_pred)
    counts = ConfusionCounts.from_values(y_true, y_pred, thresholds)
    cls = classification_metrics(counts)
    out: Dict[str, object] = {k: reg[k] for k in ("r2", "mae", "mse")}
    out.update({k: cls[k] for k in RATE_KEYS})
    undefined = list(reg["undefined"]) + list(cls["undefined"])
    labels = y_true >= thresholds.ir_lower
    if labels.all() or not labels.any():
        out["auroc"] = out["auprc"] = NAN
        undefined += ["auroc", "auprc"]
    else:
        rk = ranking_curves(y_pred, labels)
        out["auroc"], out["auprc"] = rk.auroc, rk.auprc
    out["counts"] = counts.to_dict()
    out["n"] = int(y_true.size)
    out["undefined"] = undefined
    return out


def summarize_folds(fold_blocks: Sequence[Dict[str, object]]) -> Dict[str, Dict[str, float]]:
    """Mean and sample std of each metric across folds, ignoring undefined entries."""
    out = {}
    for key in METRIC_KEYS:
        vals = np.array([b[key] for b in fold_blocks], dtype=float)
        vals = vals[~np.isnan(vals)]
        out[key] = {
            "mean": float(vals.mean()) if vals.size else NAN,
            "std": float(vals.std(ddof=1)) if vals.size > 1 else (0.0 if vals.size else NAN),
            "n_folds": int(vals.size),
        }
    return out
