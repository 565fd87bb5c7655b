from datetime import date, timedelta

import numpy as np
import pytest

from irscreen.domain import WearableDaily
from irscreen.featureset import (REGISTRY, AggregationWindow, EmptyDesign, FeatureSetSpec,
                                 MissingFeature, aggregate_wearables_window, apply_standardizer,
                                 build_design_matrix, fit_standardizer, resolve_feature_set)

END = date(2023, 1, 8)


def _days(field, values):
    return [WearableDaily(END - timedelta(days=len(values) - i), **{field: v})
            for i, v in enumerate(values)]


def test_steps_aggregate():
    out = aggregate_wearables_window(_days("steps", [1000, 2000, 3000]),
                                     AggregationWindow(7, END), ("steps",))
    assert out["steps_mean"] == 2000 and out["steps_median"] == 2000
    assert out["steps_std"] == pytest.approx(816.496580927726, abs=1e-9)


def test_singleton():
    out = aggregate_wearables_window(_days("rhr", [60]), AggregationWindow(7, END), ("rhr",))
    assert (out["rhr_mean"], out["rhr_median"], out["rhr_std"]) == (60, 60, 0)


def test_all_missing_raises():
    with pytest.raises(MissingFeature):
        aggregate_wearables_window(_days("rhr", [60, 61]), AggregationWindow(7, END), ("steps",))


def test_window_is_half_open():
    days = [WearableDaily(END, steps=99999), WearableDaily(END - timedelta(days=7), steps=10),
            WearableDaily(END - timedelta(days=8), steps=77777)]
    out = aggregate_wearables_window(days, AggregationWindow(7, END), ("steps",))
    assert out["steps_mean"] == 10


def test_window_validation():
    with pytest.raises(ValueError):
        AggregationWindow(5, END)
    assert AggregationWindow(5, END, strict=False).start == END - timedelta(days=5)


def test_aggregation_order_independent(rng):
    vals = rng.uniform(1000, 9000, 30)
    days = _days("steps", list(vals))
    w = AggregationWindow(30, END)
    a = aggregate_wearables_window(days, w, ("steps",))
    b = aggregate_wearables_window([days[i] for i in rng.permutation(30)], w, ("steps",))
    assert a == b


def test_columns():
    assert REGISTRY["demographics"].columns() == ["age", "bmi"]
    assert len(FeatureSetSpec(("Wearables",)).columns()) == 12
    cols = REGISTRY["wearables_demographics_glucose"].columns()
    assert "glucose" in cols and "insulin" not in cols


def test_panel_order_canonical():
    a = FeatureSetSpec(("Demographics", "Wearables"))
    b = FeatureSetSpec(("Wearables", "Demographics"))
    assert a.columns() == b.columns()


def test_no_insulin_anywhere():
    for spec in REGISTRY.values():
        assert not {"insulin", "fasting_insulin"} & set(spec.columns())


def test_resolve():
    assert resolve_feature_set("demographics") is REGISTRY["demographics"]
    with pytest.raises(ValueError):
        resolve_feature_set("nope")
    with pytest.raises(ValueError):
        FeatureSetSpec(("Bogus",))


def test_missing_ldl_row_omitted(record_factory):
    recs = [record_factory("a"), record_factory("b", ldl=None)]
    dm = build_design_matrix(recs, FeatureSetSpec(("LipidPanel",)), 30)
    assert dm.ids == ["a"] and "b" in dm.dropped


def test_empty_design(record_factory):
    with pytest.raises(EmptyDesign):
        build_design_matrix([record_factory(ldl=None)], FeatureSetSpec(("LipidPanel",)), 30)


def test_design_matrix_values(record_factory):
    dm = build_design_matrix([record_factory(age=33, bmi=22, homa=1.7)],
                             REGISTRY["wearables_demographics"], 30)
    row = dict(zip(dm.columns, dm.X[0]))
    assert row["age"] == 33 and row["bmi"] == 22 and row["rhr_mean"] == 60
    assert row["steps_std"] == 0
    assert dm.y[0] == pytest.approx(1.7)


def test_standardizer_examples():
    p = fit_standardizer(np.array([[1.0], [2.0], [3.0]]), ["x"])
    assert p.mean == (2.0,)
    assert p.std[0] == pytest.approx(0.816496580927726)
    assert apply_standardizer(p, [[2.0]])[0, 0] == 0
    assert apply_standardizer(p, [[4.0]])[0, 0] == pytest.approx(2 / np.sqrt(2 / 3), abs=1e-12)
    assert apply_standardizer(p, [[4.0]])[0, 0] == pytest.approx(2.449489742783178)


def test_standardizer_drops_constant():
    p = fit_standardizer(np.array([[5.0, 1.0], [5.0, 2.0], [5.0, 3.0]]), ["c", "x"])
    assert p.columns == ("x",) and p.dropped == ("c",)
    assert apply_standardizer(p, [[5.0, 2.0]]).shape == (1, 1)


def test_standardizer_column_reorder():
    p = fit_standardizer(np.array([[1.0, 10.0], [3.0, 30.0]]), ["a", "b"])
    z1 = apply_standardizer(p, [[2.0, 40.0]], ["a", "b"])
    z2 = apply_standardizer(p, [[40.0, 2.0]], ["b", "a"])
    assert np.array_equal(z1, z2)
    with pytest.raises(MissingFeature):
        apply_standardizer(p, [[1.0]], ["a"])
