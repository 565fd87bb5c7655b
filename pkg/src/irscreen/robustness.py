"""Rolling-window re-prediction, per-person variability and label consistency."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from datetime import date, timedelta
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np

from .domain import IrClass, ParticipantRecord, classify_ir
from .featureset import MissingFeature, feature_row
from .metrics import coefficient_of_variation

logger = logging.getLogger(__name__)

SWEEP_WINDOWS = (7, 14, 30, 60)
BANDS = ("100%", "75-99.9%", "50-74.9%", "<49.9%")


@dataclass
class WindowSweep:
    pid: str
    n_days: int
    window_ends: List[date] = field(default_factory=list)  # exclusive ends
    predictions: List[float] = field(default_factory=list)
    classes: List[IrClass] = field(default_factory=list)
    skipped: int = 0  # tiles lacking data for some metric
    flags: List[str] = field(default_factory=list)

    def __len__(self):
        return len(self.predictions)

    @property
    def empty(self) -> bool:
        return not self.predictions

    def rows(self):
        for end, y, c in zip(self.window_ends, self.predictions, self.classes):
            yield [self.pid, self.n_days, end.isoformat(), float(y), c.label]

    CSV_HEADER = ("id", "n_days", "window_end", "y_pred", "class_pred")


def tile_windows(first: date, last: date, n_days: int, stride: Optional[int] = None) -> List[date]:
    """Exclusive end dates of n-day windows tiled backward from ``last``.

    With the default stride (= n) the windows are contiguous and
    non-overlapping; every window lies inside [first, last].
    """
    stride = stride or n_days
    if stride < 1:
        raise ValueError("stride must be >= 1")
    ends = []
    end = last + timedelta(days=1)
    while end - timedelta(days=n_days) >= first:
        ends.append(end)
        end -= timedelta(days=stride)
    return ends[::-1]


def _window_rows(record: ParticipantRecord, feature_set, n_days: int,
                 stride: Optional[int]):
    """(sweep without predictions, feature rows) for one participant."""
    sweep = WindowSweep(record.pid, n_days)
    if not record.wearables:
        sweep.flags.append("no_wearable_data")
        return sweep, []
    first, last = record.wearables[0].date, record.wearables[-1].date
    ends = tile_windows(first, last, n_days, stride)
    if not ends:
        sweep.flags.append("span_shorter_than_window")
        return sweep, []
    rows = []
    for end in ends:
        try:
            rows.append(feature_row(record, feature_set, n_days, end, strict_window=False))
        except MissingFeature:
            sweep.skipped += 1
            continue
        sweep.window_ends.append(end)
    if not rows:
        sweep.flags.append("no_complete_window")
    return sweep, rows


def _fill(sweep: WindowSweep, preds, thresholds) -> None:
    sweep.predictions = [float(p) for p in preds]
    sweep.classes = [classify_ir(p, thresholds) for p in preds]


def rolling_window_predictions(record: ParticipantRecord, bundle, n_days: int,
                               stride: Optional[int] = None) -> WindowSweep:
    """Re-aggregate wearables per window and re-predict with a frozen bundle.

    Demographic and lab features stay fixed. The bundle should be the fold
    model in which this participant was held out.
    """
    sweep, rows = _window_rows(record, bundle.feature_set, n_days, stride)
    if rows:
        _fill(sweep, bundle.predict_raw(np.vstack(rows), bundle.input_columns), bundle.thresholds)
    return sweep


def per_individual_cv(sweep: WindowSweep) -> float:
    """CV% of the sweep's predictions; NaN (undefined) with fewer than two windows."""
    if len(sweep) < 2:
        return float("nan")
    return coefficient_of_variation(sweep.predictions)


def band(fraction: float) -> str:
    if fraction >= 1.0:
        return BANDS[0]
    if fraction >= 0.75:
        return BANDS[1]
    if fraction >= 0.5:
        return BANDS[2]
    return BANDS[3]


def majority_ir(labels: Sequence[bool]) -> bool:
    """Majority binary label; an even split resolves to non-IR."""
    return sum(labels) * 2 > len(labels)


@dataclass
class ConsistencyReport:
    n_days: int
    stability: Dict[str, float]  # agreement with the participant's own majority label
    correctness: Dict[str, float]  # agreement with the true label
    consistent_and_correct: float  # 100% stable and majority equals the truth
    participants: Dict[str, dict]
    n_participants: int
    n_empty: int

    def to_dict(self) -> dict:
        return {"n_days": self.n_days, "stability": self.stability,
                "correctness": self.correctness,
                "consistent_and_correct": self.consistent_and_correct,
                "n_participants": self.n_participants, "n_empty": self.n_empty}


def consistency_report(sweeps: Sequence[WindowSweep], true_ir: Mapping[str, bool],
                       n_days: Optional[int] = None) -> ConsistencyReport:
    """Bucket each participant by how often their window labels agree.

    Each participant's denominator is their own window count. Empty sweeps are
    counted but not bucketed.
    """
    if not sweeps:
        raise ValueError("no sweeps to summarize")
    stab = {b: 0 for b in BANDS}
    corr = {b: 0 for b in BANDS}
    both = 0
    per = {}
    empty = 0
    for s in sweeps:
        if s.empty:
            empty += 1
            continue
        labels = [c is IrClass.IR for c in s.classes]
        maj = majority_ir(labels)
        truth = bool(true_ir[s.pid])
        f_stab = sum(lab == maj for lab in labels) / len(labels)
        f_corr = sum(lab == truth for lab in labels) / len(labels)
        stab[band(f_stab)] += 1
        corr[band(f_corr)] += 1
        if f_stab >= 1.0 and maj == truth:
            both += 1
        per[s.pid] = {"majority_ir": maj, "true_ir": truth, "stability": f_stab,
                      "correctness": f_corr, "n_windows": len(labels)}
    m = len(per)
    frac = (lambda d: {b: d[b] / m for b in BANDS}) if m else (lambda d: {b: 0.0 for b in BANDS})
    days = n_days if n_days is not None else sweeps[0].n_days
    return ConsistencyReport(days, frac(stab), frac(corr), both / m if m else 0.0, per, m, empty)


@dataclass
class RobustnessSummary:
    n_days: int
    sweeps: List[WindowSweep]
    cv: Dict[str, float]
    median_cv: float
    consistency: ConsistencyReport

    def to_dict(self) -> dict:
        vals = [v for v in self.cv.values() if v == v]
        return {"n_days": self.n_days, "median_cv": self.median_cv,
                "n_defined_cv": len(vals), "consistency": self.consistency.to_dict()}


def robustness_analysis(records: Sequence[ParticipantRecord], bundle_for, windows=SWEEP_WINDOWS,
                        stride: Optional[int] = None) -> List[RobustnessSummary]:
    """Sweep every participant at each window length.

    ``bundle_for(pid)`` must return the frozen model that held ``pid`` out,
    for example `ExperimentResult.bundle_for`.
    """
    out = []
    bundles = {rec.pid: bundle_for(rec.pid) for rec in records}
    for n in windows:
        sweeps = []
        truth = {}
        pending: Dict[int, list] = {}  # one batched predict call per fold model
        for rec in records:
            b = bundles[rec.pid]
            sweep, rows = _window_rows(rec, b.feature_set, n, stride)
            sweeps.append(sweep)
            if rows:
                pending.setdefault(id(b), [b, []])[1].append((sweep, rows))
            truth[rec.pid] = rec.homa_ir is not None and classify_ir(rec.homa_ir, b.thresholds) \
                is IrClass.IR
        for b, items in pending.values():
            preds = b.predict_raw(np.vstack([r for _, rows in items for r in rows]),
                                  b.input_columns)
            k = 0
            for sweep, rows in items:
                _fill(sweep, preds[k:k + len(rows)], b.thresholds)
                k += len(rows)
        cvs = {s.pid: per_individual_cv(s) for s in sweeps}
        defined = [v for v in cvs.values() if v == v]
        med = float(np.median(defined)) if defined else float("nan")
        out.append(RobustnessSummary(n, sweeps, cvs, med, consistency_report(sweeps, truth, n)))
    return out
