"""Cohort CSV parsing, per-participant joins and quality-control exclusions."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from datetime import date, timedelta
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Tuple

from .domain import (
    BloodPanel,
    Demographics,
    DomainError,
    ParticipantRecord,
    WearableDaily,
)

logger = logging.getLogger(__name__)

PARTICIPANT_COLUMNS = ["id", "age", "gender", "ethnicity", "height_m", "weight_kg", "bmi",
                       "hypertension", "fasting"]
WEARABLE_COLUMNS = ["id", "date", "rhr", "hrv_rmssd", "steps", "sleep_minutes"]
LAB_COLUMNS = ["id", "draw_date", "insulin", "glucose", "hba1c", "hdl", "ldl",
               "triglycerides", "total_cholesterol"]

EXCLUSION_REASONS = (
    "not_fasting",
    "bmi_out_of_range",
    "homa_outlier",
    "insufficient_wearable_days",
    "missing_required_fields",
)


class CohortParseError(ValueError):
    """A row could not be parsed; the message carries file and line."""

    def __init__(self, path, line: int, message: str):
        super().__init__(f"{path}:{line}: {message}")
        self.path = str(path)
        self.line = line


class CohortJoinError(ValueError):
    pass


@dataclass(frozen=True)
class CohortFiles:
    participants_path: Path
    wearables_path: Path
    labs_path: Path

    @classmethod
    def in_dir(cls, directory) -> "CohortFiles":
        d = Path(directory)
        return cls(d / "participants.csv", d / "wearables.csv", d / "labs.csv")


@dataclass
class QcConfig:
    min_wearable_days: int = 14
    window_days: int = 120  # longest aggregation window in use
    bmi_min: float = 12.0
    bmi_max: float = 65.0
    homa_limit: float = 15.0


@dataclass
class QcReport:
    input_n: int
    retained_n: int
    exclusions: Dict[str, int]
    reasons: Dict[str, str] = field(default_factory=dict)  # pid -> first failing reason

    def to_dict(self) -> dict:
        return {
            "input_n": self.input_n,
            "retained_n": self.retained_n,
            "exclusions": dict(self.exclusions),
            "reasons": dict(sorted(self.reasons.items())),
        }


def _num(raw: str, path, line: int, column: str) -> Optional[float]:
    raw = raw.strip()
    if raw == "":
        return None
    try:
        v = float(raw)
    except ValueError:
        raise CohortParseError(path, line, f"column {column!r}: not a number: {raw!r}")
    if v != v:
        return None
    return v


def _flag(raw: str, path, line: int, column: str) -> bool:
    raw = raw.strip().lower()
    if raw in ("1", "true", "yes", "y"):
        return True
    if raw in ("0", "false", "no", "n", ""):
        return False
    raise CohortParseError(path, line, f"column {column!r}: expected 0/1, got {raw!r}")


def _date(raw: str, path, line: int, column: str) -> date:
    try:
        return date.fromisoformat(raw.strip())
    except ValueError:
        raise CohortParseError(path, line, f"column {column!r}: not an ISO-8601 date: {raw!r}")


def _rows(path, required: List[str]) -> Iterable[Tuple[int, Dict[str, str]]]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in required if c not in header]
        if missing:
            raise CohortParseError(path, 1, f"missing columns {missing}")
        for row in reader:
            if None in row or any(v is None for v in row.values()):
                raise CohortParseError(path, reader.line_num, "wrong number of fields")
            yield reader.line_num, row


def _parse_participants(path) -> Dict[str, Tuple[Demographics, bool]]:
    out: Dict[str, Tuple[Demographics, bool]] = {}
    for line, row in _rows(path, PARTICIPANT_COLUMNS):
        pid = row["id"].strip()
        if not pid:
            raise CohortParseError(path, line, "empty id")
        if pid in out:
            raise CohortParseError(path, line, f"duplicate participant id {pid!r}")
        comorbid = {
            k: _flag(v, path, line, k)
            for k, v in row.items()
            if k not in PARTICIPANT_COLUMNS
        }
        demo = Demographics(
            age=_num(row["age"], path, line, "age"),
            height=_num(row["height_m"], path, line, "height_m"),
            weight=_num(row["weight_kg"], path, line, "weight_kg"),
            bmi_reported=_num(row["bmi"], path, line, "bmi"),
            gender=row["gender"].strip(),
            ethnicity=row["ethnicity"].strip(),
            hypertension=_flag(row["hypertension"], path, line, "hypertension"),
            comorbidities=comorbid,
        )
        out[pid] = (demo, _flag(row["fasting"], path, line, "fasting"))
    return out


def _parse_wearables(path, known: Dict[str, object]) -> Dict[str, List[WearableDaily]]:
    out: Dict[str, Dict[date, WearableDaily]] = {}
    for line, row in _rows(path, WEARABLE_COLUMNS):
        pid = row["id"].strip()
        if pid not in known:
            raise CohortJoinError(f"{path}:{line}: unknown participant id {pid!r}")
        day = _date(row["date"], path, line, "date")
        per = out.setdefault(pid, {})
        if day in per:
            raise CohortParseError(path, line, f"duplicate wearable row for ({pid}, {day})")
        extras = {}
        for k, v in row.items():
            if k in WEARABLE_COLUMNS:
                continue
            val = _num(v, path, line, k)
            if val is not None:
                extras[k] = val
        try:
            per[day] = WearableDaily(
                date=day,
                rhr=_num(row["rhr"], path, line, "rhr"),
                hrv_rmssd=_num(row["hrv_rmssd"], path, line, "hrv_rmssd"),
                steps=_num(row["steps"], path, line, "steps"),
                sleep_minutes=_num(row["sleep_minutes"], path, line, "sleep_minutes"),
                extras=extras,
            )
        except DomainError as exc:
            raise CohortParseError(path, line, str(exc))
    return {pid: [per[d] for d in sorted(per)] for pid, per in out.items()}


def _parse_labs(path, known: Dict[str, object],
                fasting: Dict[str, bool]) -> Dict[str, BloodPanel]:
    out: Dict[str, BloodPanel] = {}
    for line, row in _rows(path, LAB_COLUMNS):
        pid = row["id"].strip()
        if pid not in known:
            raise CohortJoinError(f"{path}:{line}: unknown participant id {pid!r}")
        if pid in out:
            raise CohortParseError(path, line, f"duplicate lab row for {pid!r}")
        panel = {}
        for k, v in row.items():
            if k in LAB_COLUMNS:
                continue
            val = _num(v, path, line, k)
            if val is not None:
                panel[k] = val
        try:
            out[pid] = BloodPanel(
                draw_date=_date(row["draw_date"], path, line, "draw_date"),
                fasting_insulin=_num(row["insulin"], path, line, "insulin"),
                fasting_glucose=_num(row["glucose"], path, line, "glucose"),
                hba1c=_num(row["hba1c"], path, line, "hba1c"),
                hdl=_num(row["hdl"], path, line, "hdl"),
                ldl=_num(row["ldl"], path, line, "ldl"),
                triglycerides=_num(row["triglycerides"], path, line, "triglycerides"),
                total_cholesterol=_num(row["total_cholesterol"], path, line,
                                       "total_cholesterol"),
                metabolic_panel=panel,
                fasting_flag=fasting[pid],
            )
        except DomainError as exc:
            raise CohortParseError(path, line, str(exc))
    return out


def load_cohort(files: CohortFiles) -> List[ParticipantRecord]:
    """Parse and join the three cohort files into one record per participant.

    Records come back in participant-file order with wearable days sorted by
    date. Unknown ids in the wearables or labs file raise `CohortJoinError`;
    malformed rows raise `CohortParseError` naming the file and line.
    """
    people = _parse_participants(files.participants_path)
    wear = _parse_wearables(files.wearables_path, people)
    labs = _parse_labs(files.labs_path, people, {k: v[1] for k, v in people.items()})
    records = []
    for pid, (demo, _) in people.items():
        records.append(ParticipantRecord(pid=pid, demographics=demo, labs=labs.get(pid),
                                         wearables=wear.get(pid, [])))
    return records


def count_wearable_days(record: ParticipantRecord, window_days: int) -> int:
    """Days inside [anchor - window_days, anchor) with RHR or steps present."""
    start = record.anchor - timedelta(days=window_days)
    return sum(
        1 for d in record.wearables
        if start <= d.date < record.anchor and (d.rhr is not None or d.steps is not None)
    )


def exclusion_reason(record: ParticipantRecord, config: QcConfig) -> Optional[str]:
    """First failing QC gate for a record, or None if it passes every gate."""
    labs = record.labs
    if labs is not None and not labs.fasting_flag:
        return "not_fasting"
    bmi = record.demographics.bmi
    if bmi is not None and not (config.bmi_min <= bmi <= config.bmi_max):
        return "bmi_out_of_range"
    homa = record.homa_ir
    if homa is not None and homa >= config.homa_limit:
        return "homa_outlier"
    if labs is not None and count_wearable_days(record, config.window_days) < config.min_wearable_days:
        return "insufficient_wearable_days"
    if labs is None or homa is None or bmi is None or record.demographics.age is None:
        return "missing_required_fields"
    return None


def apply_quality_control(records: List[ParticipantRecord],
                          config: Optional[QcConfig] = None
                          ) -> Tuple[List[ParticipantRecord], QcReport]:
    config = config or QcConfig()
    counts = {r: 0 for r in EXCLUSION_REASONS}
    reasons: Dict[str, str] = {}
    kept = []
    for rec in records:
        why = exclusion_reason(rec, config)
        if why is None:
            kept.append(rec)
        else:
            counts[why] += 1
            reasons[rec.pid] = why
    if reasons:
        logger.info("QC excluded %d of %d participants: %s", len(reasons), len(records),
                    {k: v for k, v in counts.items() if v})
    return kept, QcReport(input_n=len(records), retained_n=len(kept), exclusions=counts,
                          reasons=reasons)
