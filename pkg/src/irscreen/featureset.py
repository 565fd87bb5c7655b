"""Wearable window aggregation, feature-set registry and standardization."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from datetime import date, timedelta
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .domain import ParticipantRecord, WearableDaily

logger = logging.getLogger(__name__)

ALLOWED_WINDOWS = (7, 14, 30, 60, 90, 120)
CORE_METRICS = ("rhr", "hrv_rmssd", "steps", "sleep_minutes")
STATISTICS = ("mean", "std", "median")

PANELS = ("Wearables", "Demographics", "FastingGlucose", "LipidPanel", "MetabolicPanel",
          "HbA1c", "Hypertension")
LIPID_PANEL = ("hdl", "ldl", "triglycerides", "total_cholesterol")
METABOLIC_PANEL = ("glucose", "albumin_globulin_ratio", "creatinine", "egfr", "bun",
                   "sodium", "potassium", "chloride")

# insulin is the HOMA-IR numerator and never a model input
FORBIDDEN_COLUMNS = frozenset({"insulin", "fasting_insulin"})


class MissingFeature(ValueError):
    """A participant lacks data for a column the feature set requires."""


class EmptyDesign(ValueError):
    """No participant has every column a feature set requires."""


@dataclass(frozen=True)
class AggregationWindow:
    n_days: int
    anchor: date
    strict: bool = True

    def __post_init__(self):
        if self.n_days < 1:
            raise ValueError(f"window must cover at least one day, got {self.n_days}")
        if self.strict and self.n_days not in ALLOWED_WINDOWS:
            raise ValueError(f"window {self.n_days} not in {ALLOWED_WINDOWS}")

    @property
    def start(self) -> date:
        return self.anchor - timedelta(days=self.n_days)

    def contains(self, d: date) -> bool:
        return self.start <= d < self.anchor


@dataclass(frozen=True)
class FeatureSetSpec:
    panels: Tuple[str, ...]
    name: str = ""
    wearable_metrics: Tuple[str, ...] = CORE_METRICS
    metabolic_analytes: Tuple[str, ...] = METABOLIC_PANEL

    def __post_init__(self):
        if not self.panels:
            raise ValueError("a feature set needs at least one panel")
        unknown = [p for p in self.panels if p not in PANELS]
        if unknown:
            raise ValueError(f"unknown panels {unknown}; choose from {PANELS}")
        # canonical order makes column order independent of how panels were listed
        object.__setattr__(self, "panels", tuple(p for p in PANELS if p in self.panels))
        if not self.name:
            object.__setattr__(self, "name", "+".join(self.panels))

    @property
    def has_wearables(self) -> bool:
        return "Wearables" in self.panels

    def columns(self) -> List[str]:
        cols: List[str] = []
        for panel in self.panels:
            if panel == "Wearables":
                cols += [f"{m}_{s}" for m in self.wearable_metrics for s in STATISTICS]
            elif panel == "Demographics":
                cols += ["age", "bmi"]
            elif panel == "FastingGlucose":
                cols.append("glucose")
            elif panel == "LipidPanel":
                cols += list(LIPID_PANEL)
            elif panel == "MetabolicPanel":
                cols += list(self.metabolic_analytes)
            elif panel == "HbA1c":
                cols.append("hba1c")
            elif panel == "Hypertension":
                cols.append("hypertension")
        seen = set()
        out = []
        for c in cols:
            if c in FORBIDDEN_COLUMNS:
                raise ValueError(f"{c} cannot be used as a model input")
            if c not in seen:
                seen.add(c)
                out.append(c)
        return out

    def wearable_columns(self) -> List[str]:
        if not self.has_wearables:
            return []
        return [f"{m}_{s}" for m in self.wearable_metrics for s in STATISTICS]

    def static_columns(self) -> List[str]:
        wearable = set(self.wearable_columns())
        return [c for c in self.columns() if c not in wearable]

    def to_dict(self) -> dict:
        return {"name": self.name, "panels": list(self.panels),
                "wearable_metrics": list(self.wearable_metrics),
                "metabolic_analytes": list(self.metabolic_analytes)}

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureSetSpec":
        return cls(panels=tuple(d["panels"]), name=d.get("name", ""),
                   wearable_metrics=tuple(d.get("wearable_metrics", CORE_METRICS)),
                   metabolic_analytes=tuple(d.get("metabolic_analytes", METABOLIC_PANEL)))


REGISTRY: Dict[str, FeatureSetSpec] = {
    spec.name: spec for spec in (
        FeatureSetSpec(("Demographics",), "demographics"),
        FeatureSetSpec(("Wearables",), "wearables"),
        FeatureSetSpec(("FastingGlucose",), "glucose"),
        FeatureSetSpec(("LipidPanel",), "lipid_panel"),
        FeatureSetSpec(("Wearables", "Demographics"), "wearables_demographics"),
        FeatureSetSpec(("Wearables", "Demographics", "FastingGlucose"),
                       "wearables_demographics_glucose"),
        FeatureSetSpec(("Wearables", "Demographics", "LipidPanel"),
                       "wearables_demographics_lipid"),
        FeatureSetSpec(("Wearables", "Demographics", "FastingGlucose", "LipidPanel"),
                       "wearables_demographics_glucose_lipid"),
        FeatureSetSpec(("Wearables", "Demographics", "LipidPanel", "MetabolicPanel"),
                       "wearables_demographics_lipid_metabolic"),
    )
}


def resolve_feature_set(ref) -> FeatureSetSpec:
    """Accept a registry name, a panel list or a dict and return a spec."""
    if isinstance(ref, FeatureSetSpec):
        return ref
    if isinstance(ref, str):
        try:
            return REGISTRY[ref]
        except KeyError:
            raise ValueError(f"unknown feature set {ref!r}; known: {sorted(REGISTRY)}")
    if isinstance(ref, dict):
        return FeatureSetSpec.from_dict(ref)
    return FeatureSetSpec(tuple(ref))


def aggregate_wearables_window(days: Iterable[WearableDaily], window: AggregationWindow,
                               metrics: Sequence[str] = CORE_METRICS) -> Dict[str, float]:
    """Mean, population std and median of each metric over the window.

    Missing days are skipped. A metric with no in-window value raises
    `MissingFeature`.
    """
    values: Dict[str, List[float]] = {m: [] for m in metrics}
    for d in days:
        if not window.contains(d.date):
            continue
        for m in metrics:
            v = d.metric(m)
            if v is not None:
                values[m].append(v)
    out: Dict[str, float] = {}
    for m in metrics:
        arr = np.sort(np.asarray(values[m], dtype=float))  # order-independent sums
        if arr.size == 0:
            raise MissingFeature(f"no {m} data in {window.n_days}-day window before {window.anchor}")
        out[f"{m}_mean"] = float(arr.mean())
        out[f"{m}_std"] = float(arr.std())
        out[f"{m}_median"] = float(np.median(arr))
    return out


def static_features(record: ParticipantRecord, spec: FeatureSetSpec) -> Dict[str, float]:
    """Demographic and blood-panel columns, which do not depend on the window."""
    out: Dict[str, float] = {}
    labs = record.labs
    for col in spec.static_columns():
        if col in ("age", "bmi"):
            v = record.demographics.age if col == "age" else record.demographics.bmi
        elif col == "hypertension":
            v = 1.0 if record.demographics.hypertension else 0.0
        else:
            v = labs.analyte(col) if labs is not None else None
        if v is None or v != v:
            raise MissingFeature(f"participant {record.pid} lacks {col}")
        out[col] = float(v)
    return out


def feature_row(record: ParticipantRecord, spec: FeatureSetSpec, n_days: int,
                window_end: Optional[date] = None, strict_window: bool = True) -> np.ndarray:
    """Unstandardized feature vector for one participant in column order."""
    values = static_features(record, spec)
    if spec.has_wearables:
        end = window_end if window_end is not None else record.anchor
        window = AggregationWindow(n_days, end, strict=strict_window)
        values.update(aggregate_wearables_window(record.wearables, window,
                                                 spec.wearable_metrics))
    return np.array([values[c] for c in spec.columns()], dtype=float)


@dataclass
class DesignMatrix:
    X: np.ndarray
    y: np.ndarray
    columns: List[str]
    ids: List[str]
    dropped: Dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if self.X.shape != (len(self.ids), len(self.columns)) or self.y.shape != (len(self.ids),):
            raise ValueError("design matrix shape mismatch")

    def __len__(self):
        return len(self.ids)

    def subset(self, idx) -> "DesignMatrix":
        idx = np.asarray(idx, dtype=int)
        return DesignMatrix(self.X[idx], self.y[idx], list(self.columns),
                            [self.ids[i] for i in idx])


def build_design_matrix(records: Sequence[ParticipantRecord], spec: FeatureSetSpec,
                        n_days: int) -> DesignMatrix:
    """Unstandardized rows for every participant with all required columns."""
    rows, ys, ids = [], [], []
    dropped: Dict[str, str] = {}
    for rec in records:
        homa = rec.homa_ir
        if homa is None:
            dropped[rec.pid] = "missing HOMA-IR"
            continue
        try:
            rows.append(feature_row(rec, spec, n_days))
        except MissingFeature as exc:
            dropped[rec.pid] = str(exc)
            continue
        ys.append(homa)
        ids.append(rec.pid)
    if not rows:
        raise EmptyDesign(f"no participant has every column of feature set {spec.name!r}")
    if dropped:
        logger.debug("feature set %s: dropped %d participants", spec.name, len(dropped))
    return DesignMatrix(np.vstack(rows), np.asarray(ys, dtype=float), spec.columns(), ids,
                        dropped)


@dataclass(frozen=True)
class StandardizerParams:
    columns: Tuple[str, ...]  # retained columns, in order
    mean: Tuple[float, ...]
    std: Tuple[float, ...]
    input_columns: Tuple[str, ...]
    dropped: Tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {"columns": list(self.columns), "mean": list(self.mean), "std": list(self.std),
                "input_columns": list(self.input_columns), "dropped": list(self.dropped)}

    @classmethod
    def from_dict(cls, d: dict) -> "StandardizerParams":
        return cls(tuple(d["columns"]), tuple(float(v) for v in d["mean"]),
                   tuple(float(v) for v in d["std"]), tuple(d["input_columns"]),
                   tuple(d.get("dropped", ())))


def fit_standardizer(train_rows: np.ndarray, columns: Sequence[str]) -> StandardizerParams:
    """Per-column mean and population std from training rows only.

    Zero-variance columns are dropped and listed in `dropped`.
    """
    X = np.asarray(train_rows, dtype=float)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("standardizer needs a non-empty 2-D training matrix")
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    keep, means, stds, dropped = [], [], [], []
    for j, name in enumerate(columns):
        if not std[j] > 1e-12 * max(1.0, abs(mean[j])):
            dropped.append(name)
            logger.info("dropping zero-variance column %s", name)
            continue
        keep.append(name)
        means.append(float(mean[j]))
        stds.append(float(std[j]))
    return StandardizerParams(tuple(keep), tuple(means), tuple(stds), tuple(columns),
                              tuple(dropped))


def apply_standardizer(params: StandardizerParams, rows: np.ndarray,
                       columns: Optional[Sequence[str]] = None) -> np.ndarray:
    """Transform rows laid out as `columns` (default: the fit-time input columns)."""
    X = np.atleast_2d(np.asarray(rows, dtype=float))
    columns = list(params.input_columns if columns is None else columns)
    missing = [c for c in params.columns if c not in columns]
    if missing:
        raise MissingFeature(f"rows lack standardized columns {missing}")
    idx = [columns.index(c) for c in params.columns]
    return (X[:, idx] - np.asarray(params.mean)) / np.asarray(params.std)
