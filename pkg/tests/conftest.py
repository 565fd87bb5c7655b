from datetime import date, timedelta

import sys

import numpy as np
import pytest

from irscreen.domain import BloodPanel, Demographics, ParticipantRecord, WearableDaily
from irscreen.ingestion import CohortFiles, apply_quality_control, load_cohort
from irscreen.synthcohort import FunctionalSpec, generate_functional_cohort

ANCHOR = date(2023, 6, 1)


def make_record(pid="A", n_days=30, homa=2.0, glucose=90.0, bmi=25.0, age=40.0,
                rhr=60.0, steps=6000.0, hrv=40.0, sleep=420.0, fasting=True, anchor=ANCHOR,
                ldl=100.0, **labs):
    """Participant with constant daily wearables over the n_days before the draw."""
    insulin = homa * 405.0 / glucose
    panel = BloodPanel(anchor, fasting_glucose=glucose, fasting_insulin=insulin, hba1c=5.4,
                       hdl=50.0, ldl=ldl, triglycerides=100.0, total_cholesterol=180.0,
                       metabolic_panel=labs.pop("metabolic_panel", {}), fasting_flag=fasting)
    days = [WearableDaily(anchor - timedelta(days=i + 1), rhr=rhr, hrv_rmssd=hrv, steps=steps,
                          sleep_minutes=sleep) for i in range(n_days)][::-1]
    return ParticipantRecord(pid, Demographics(age=age, bmi_reported=bmi), panel, days)


@pytest.fixture
def record_factory():
    return make_record


@pytest.fixture(scope="session")
def functional_records(tmp_path_factory):
    """Small QC'd functional cohort shared by the slower pipeline tests."""
    out = tmp_path_factory.mktemp("functional")
    generate_functional_cohort(240, FunctionalSpec(sigma=0.3), seed=3, out_dir=out)
    kept, _ = apply_quality_control(load_cohort(CohortFiles.in_dir(out)))
    return kept


@pytest.fixture
def rng():
    return np.random.default_rng(20240)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for number, title, ok, detail, secs, budget in sorted(results):
        limit = f"< {budget:g}s" if budget else "no limit"
        tr.write_line(f"{'PASS' if ok else 'FAIL'}  #{number:<2} {title} [{secs:.1f}s, {limit}]"
                      f" {detail}")
    passed = sum(r[2] for r in results)
    tr.write_line(f"{passed}/{len(results)} criteria passed")
