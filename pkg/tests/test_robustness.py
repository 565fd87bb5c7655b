import math
from datetime import date, timedelta

import numpy as np
import pytest

from irscreen.domain import IrClass
from irscreen.pipeline import ExperimentSpec, fit_final_bundle, run_experiment
from irscreen.robustness import (BANDS, WindowSweep, band, consistency_report, majority_ir,
                                 per_individual_cv, robustness_analysis,
                                 rolling_window_predictions, tile_windows)


def test_tiling_28_days():
    first = date(2023, 1, 1)
    ends = tile_windows(first, first + timedelta(days=27), 7)
    assert len(ends) == 4
    assert ends[0] - timedelta(days=7) == first
    assert ends[-1] == first + timedelta(days=28)


def test_tiling_short_span_and_stride():
    first = date(2023, 1, 1)
    assert tile_windows(first, first + timedelta(days=5), 7) == []
    assert len(tile_windows(first, first + timedelta(days=27), 7, stride=1)) == 22
    with pytest.raises(ValueError):
        tile_windows(first, first, 1, stride=-1)


def _sweep(preds, pid="a"):
    s = WindowSweep(pid, 7)
    s.predictions = list(preds)
    s.classes = [IrClass.IR if p >= 2.9 else IrClass.IS for p in preds]
    return s


def test_cv_examples():
    assert per_individual_cv(_sweep([2.0, 2.0, 2.0])) == 0
    assert per_individual_cv(_sweep([2.0, 2.2])) == pytest.approx(4.761904761904762)
    assert math.isnan(per_individual_cv(_sweep([2.0])))


def test_bands():
    assert band(1.0) == "100%"
    assert band(0.75) == "75-99.9%"
    assert band(0.7499) == "50-74.9%"
    assert band(0.5) == "50-74.9%"
    assert band(0.49) == "<49.9%"
    assert not majority_ir([True, False]) and majority_ir([True, True, False])


def test_consistency_buckets():
    sweeps = [_sweep([3.0] * 4, "all"), _sweep([3.0, 3.0, 3.0, 1.0], "three"),
              _sweep([1.0, 1.0, 3.0, 3.0], "split"), WindowSweep("none", 7)]
    rep = consistency_report(sweeps, {"all": True, "three": False, "split": True, "none": True})
    assert rep.n_participants == 3 and rep.n_empty == 1
    assert rep.stability["100%"] == pytest.approx(1 / 3)
    assert rep.stability["75-99.9%"] == pytest.approx(1 / 3)
    assert rep.stability["50-74.9%"] == pytest.approx(1 / 3)
    # "three" is mostly IR but truly non-IR: 1 of 4 windows correct
    assert rep.correctness["<49.9%"] == pytest.approx(1 / 3)
    assert rep.consistent_and_correct == pytest.approx(1 / 3)
    assert sum(rep.stability.values()) == pytest.approx(1.0)
    assert set(rep.stability) == set(BANDS)


def test_constant_series_identical_predictions(functional_records, record_factory):
    b = fit_final_bundle(functional_records, ExperimentSpec("wearables_demographics"))
    s = rolling_window_predictions(record_factory(n_days=60), b, 7)
    assert len(s) == 8 and len(set(s.predictions)) == 1
    assert per_individual_cv(s) == 0


def test_empty_sweeps_flagged(functional_records, record_factory):
    b = fit_final_bundle(functional_records, ExperimentSpec("wearables_demographics"))
    assert "span_shorter_than_window" in rolling_window_predictions(
        record_factory(n_days=5), b, 7).flags
    rec = record_factory(n_days=5)
    rec.wearables = []
    assert "no_wearable_data" in rolling_window_predictions(rec, b, 7).flags


def test_analysis_uses_held_out_models(functional_records):
    r = run_experiment(functional_records, ExperimentSpec("wearables_demographics"))
    out = robustness_analysis(functional_records[:40], r.bundle_for, windows=(14, 60))
    assert [s.n_days for s in out] == [14, 60]
    for summary in out:
        assert len(summary.sweeps) == 40
        assert summary.median_cv >= 0
        # batched scoring equals one-participant-at-a-time scoring
        sw = summary.sweeps[3]
        rec = next(p for p in functional_records if p.pid == sw.pid)
        single = rolling_window_predictions(rec, r.bundle_for(sw.pid), summary.n_days)
        assert np.allclose(single.predictions, sw.predictions, rtol=0, atol=1e-12)
