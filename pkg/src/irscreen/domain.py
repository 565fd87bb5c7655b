"""Clinical value types, the HOMA-IR formula and the class/stratum cuts."""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field
from datetime import date
from typing import Dict, List, Optional, Tuple

logger = logging.getLogger(__name__)

HOMA_DENOMINATOR = 405.0
HOMA_QC_LIMIT = 15.0


class DomainError(ValueError):
    """Raised for physically meaningless inputs (negative concentrations, NaN)."""


class IrClass(enum.IntEnum):
    # integer order doubles as the severity order used by monotonicity checks
    IS = 0
    IMPAIRED_IS = 1
    IR = 2

    @property
    def label(self) -> str:
        return {0: "IS", 1: "ImpairedIS", 2: "IR"}[int(self)]

    @classmethod
    def from_label(cls, label: str) -> "IrClass":
        for member in cls:
            if member.label == label:
                return member
        raise ValueError(f"unknown IR class label {label!r}")


class BmiClass(str, enum.Enum):
    UNDERWEIGHT = "underweight"
    NORMAL = "normal"
    OVERWEIGHT = "overweight"
    OBESE = "obese"
    UNKNOWN = "unknown"


class ActivityClass(str, enum.Enum):
    SEDENTARY = "sedentary"
    LOW = "low"
    SOMEWHAT = "somewhat"
    ACTIVE = "active"
    HIGHLY = "highly"
    UNKNOWN = "unknown"


@dataclass(frozen=True)
class IrThresholds:
    is_upper: float = 1.5
    ir_lower: float = 2.9

    def __post_init__(self):
        if not (0 < self.is_upper < self.ir_lower):
            raise DomainError(
                f"thresholds must satisfy 0 < is_upper < ir_lower, got "
                f"{self.is_upper}, {self.ir_lower}"
            )


@dataclass
class BloodPanel:
    draw_date: date
    fasting_glucose: Optional[float] = None
    fasting_insulin: Optional[float] = None
    hba1c: Optional[float] = None
    hdl: Optional[float] = None
    ldl: Optional[float] = None
    triglycerides: Optional[float] = None
    total_cholesterol: Optional[float] = None
    metabolic_panel: Dict[str, float] = field(default_factory=dict)
    fasting_flag: bool = True

    def __post_init__(self):
        for name in ("fasting_glucose", "fasting_insulin", "hba1c", "hdl", "ldl",
                     "triglycerides", "total_cholesterol"):
            v = getattr(self, name)
            if v is not None and v < 0:
                raise DomainError(f"{name} must be >= 0, got {v}")
        for name, v in self.metabolic_panel.items():
            if v < 0:
                raise DomainError(f"metabolic panel analyte {name} must be >= 0, got {v}")

    def analyte(self, name: str) -> Optional[float]:
        """Look up a named analyte from the fixed fields or the metabolic panel."""
        if name in ("glucose", "fasting_glucose"):
            return self.fasting_glucose
        if name in ("insulin", "fasting_insulin"):
            return self.fasting_insulin
        if name in ("hba1c", "hdl", "ldl", "triglycerides", "total_cholesterol"):
            return getattr(self, name)
        return self.metabolic_panel.get(name)


@dataclass
class Demographics:
    age: Optional[float] = None
    height: Optional[float] = None  # metres
    weight: Optional[float] = None  # kg
    bmi_reported: Optional[float] = None
    gender: str = ""
    ethnicity: str = ""
    hypertension: bool = False
    comorbidities: Dict[str, bool] = field(default_factory=dict)

    @property
    def bmi(self) -> Optional[float]:
        return resolve_bmi(self.height, self.weight, self.bmi_reported)


@dataclass
class WearableDaily:
    date: date
    rhr: Optional[float] = None
    hrv_rmssd: Optional[float] = None
    steps: Optional[float] = None
    sleep_minutes: Optional[float] = None
    extras: Dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.rhr is not None and not (20 < self.rhr < 250):
            raise DomainError(f"rhr out of (20, 250): {self.rhr}")
        if self.steps is not None and self.steps < 0:
            raise DomainError(f"steps must be >= 0, got {self.steps}")
        if self.sleep_minutes is not None and not (0 <= self.sleep_minutes <= 1440):
            raise DomainError(f"sleep_minutes out of [0, 1440]: {self.sleep_minutes}")

    def metric(self, name: str) -> Optional[float]:
        if name in ("rhr", "hrv_rmssd", "steps", "sleep_minutes"):
            return getattr(self, name)
        return self.extras.get(name)


@dataclass
class ParticipantRecord:
    pid: str
    demographics: Demographics
    labs: Optional[BloodPanel] = None
    wearables: List[WearableDaily] = field(default_factory=list)

    @property
    def anchor(self) -> date:
        if self.labs is None:
            raise DomainError(f"participant {self.pid} has no blood draw")
        return self.labs.draw_date

    @property
    def homa_ir(self) -> Optional[float]:
        if self.labs is None:
            return None
        if self.labs.fasting_insulin is None or self.labs.fasting_glucose is None:
            return None
        return compute_homa_ir(self.labs.fasting_insulin, self.labs.fasting_glucose)


def resolve_bmi(height: Optional[float], weight: Optional[float],
                reported: Optional[float]) -> Optional[float]:
    """Weight/height^2 when both are known, otherwise the reported value.

    A derived value overrides a reported one; disagreements above 0.5 kg/m^2
    are logged.
    """
    if height and weight and height > 0:
        derived = weight / (height * height)
        if reported is not None and abs(derived - reported) > 0.5:
            logger.info("bmi mismatch: derived %.2f vs reported %.2f; using derived",
                        derived, reported)
        return derived
    return reported


def compute_homa_ir(insulin: float, glucose: float) -> float:
    """HOMA-IR from fasting insulin (uU/mL) and fasting glucose (mg/dL)."""
    if insulin is None or glucose is None:
        raise DomainError("insulin and glucose are both required")
    if math.isnan(insulin) or math.isnan(glucose):
        raise DomainError("HOMA-IR inputs must not be NaN")
    if insulin < 0 or glucose < 0:
        raise DomainError(f"negative input: insulin={insulin}, glucose={glucose}")
    return insulin * glucose / HOMA_DENOMINATOR


def insulin_for_homa(homa: float, glucose: float) -> float:
    """Inverse of `compute_homa_ir` in the insulin argument."""
    if glucose <= 0:
        raise DomainError("glucose must be positive to back-solve insulin")
    return homa * HOMA_DENOMINATOR / glucose


def classify_ir(homa: float, thresholds: IrThresholds = IrThresholds()) -> IrClass:
    if homa is None or math.isnan(homa):
        raise DomainError("cannot classify a NaN HOMA-IR value")
    if homa < thresholds.is_upper:
        return IrClass.IS
    if homa >= thresholds.ir_lower:
        return IrClass.IR
    return IrClass.IMPAIRED_IS


def is_ir(homa: float, thresholds: IrThresholds = IrThresholds()) -> bool:
    return classify_ir(homa, thresholds) is IrClass.IR


BMI_CUTS: Tuple[Tuple[float, BmiClass], ...] = (
    (18.5, BmiClass.UNDERWEIGHT),
    (25.0, BmiClass.NORMAL),
    (30.0, BmiClass.OVERWEIGHT),
)
STEP_CUTS: Tuple[Tuple[float, ActivityClass], ...] = (
    (5000, ActivityClass.SEDENTARY),
    (7500, ActivityClass.LOW),
    (10000, ActivityClass.SOMEWHAT),
    (12500, ActivityClass.ACTIVE),
)


def bmi_class(bmi: Optional[float]) -> BmiClass:
    if bmi is None or math.isnan(bmi):
        return BmiClass.UNKNOWN
    for upper, cls in BMI_CUTS:
        if bmi < upper:
            return cls
    return BmiClass.OBESE


def activity_class(median_daily_steps: Optional[float]) -> ActivityClass:
    if median_daily_steps is None or math.isnan(median_daily_steps):
        return ActivityClass.UNKNOWN
    for upper, cls in STEP_CUTS:
        if median_daily_steps < upper:
            return cls
    return ActivityClass.HIGHLY


def derive_strata(demographics: Demographics,
                  median_daily_steps: Optional[float]) -> Tuple[BmiClass, ActivityClass]:
    return bmi_class(demographics.bmi), activity_class(median_daily_steps)
