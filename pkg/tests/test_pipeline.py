import copy
import json

import numpy as np
import pytest

from irscreen.autoencoder import MaeTrainConfig
from irscreen.featureset import MissingFeature, build_design_matrix
from irscreen.gbm import GbmParams
from irscreen.ingestion import CohortFiles, apply_quality_control, load_cohort
from irscreen.metrics import classification_metrics, ConfusionCounts, regression_metrics
from irscreen.pipeline import (ExperimentSpec, ModelBundle, compare_cells, evaluation_report,
                               expand_grid, fit_bundle, fit_final_bundle, make_folds,
                               predict_and_classify, run_experiment, run_experiment_grid,
                               tune_hyperparameters)
from irscreen.serialize import dumps
from irscreen.synthcohort import FunctionalSpec, generate_functional_cohort

FAST_AE = MaeTrainConfig(epochs=15, mask_prob=0.75)


def test_folds_balanced():
    f = make_folds([str(i) for i in range(10)], 5, seed=0)
    assert f.sizes() == [2] * 5
    assert make_folds(list("abcdefg"), 5, 0).sizes() in ([2, 2, 1, 1, 1], sorted([2, 2, 1, 1, 1]))


def test_folds_loocv_and_errors():
    ids = list("abcd")
    f = make_folds(ids, 4, seed=3)
    assert sorted(f.assignment.values()) == [0, 1, 2, 3]
    with pytest.raises(ValueError):
        make_folds(ids, 5, 0)
    with pytest.raises(ValueError):
        make_folds(["a", "a", "b"], 2, 0)


def test_folds_deterministic_and_seeded():
    ids = [f"p{i}" for i in range(50)]
    assert make_folds(ids, 5, 7).assignment == make_folds(ids, 5, 7).assignment
    assert make_folds(ids, 5, 7).assignment != make_folds(ids, 5, 8).assignment


def test_stratified_folds():
    ids = [str(i) for i in range(60)]
    strata = [i % 3 for i in range(60)]
    f = make_folds(ids, 5, 1, strata)
    for k in range(5):
        members = [int(i) for i in f.test_ids(k)]
        assert sorted(np.bincount([strata[i] for i in members], minlength=3)) == [4, 4, 4]


def test_spec_validation():
    with pytest.raises(ValueError):
        ExperimentSpec("demographics", model="mae_then_linear", cv="loocv")
    with pytest.raises(ValueError):
        ExperimentSpec("demographics", window=21)
    with pytest.raises(ValueError):
        ExperimentSpec("demographics", model="tree_direct", params=GbmParams(booster="linear"))
    with pytest.raises(ValueError):
        ExperimentSpec("demographics", model="ae_then_linear", ae_config=MaeTrainConfig())
    s = ExperimentSpec("wearables_demographics", model="mae_then_linear", ae_config=FAST_AE)
    assert ExperimentSpec.from_dict(json.loads(dumps(s.to_dict()))).to_dict() == s.to_dict()
    assert s.name == "wearables_demographics__w30__mae_then_linear__kfold5"


def test_demographics_coverage(functional_records):
    r = run_experiment(functional_records, ExperimentSpec("demographics"))
    assert sorted(r.predictions.ids) == sorted(x.pid for x in functional_records)
    assert np.isfinite(r.predictions.y_pred).all()
    assert sorted(set(r.predictions.fold)) == [0, 1, 2, 3, 4]
    assert [f.seed for f in r.folds] == [0, 92, 1, 2024, 12121]


def test_report_structure(functional_records):
    r = run_experiment(functional_records, ExperimentSpec("wearables_demographics_glucose"))
    rep = evaluation_report(r)
    json.loads(dumps(rep))
    assert rep["n"] == len(functional_records)
    assert len(rep["folds"]) == 5 and "fold_summary" in rep
    assert set(rep["stratified"]) == {"bmi_class", "activity_class"}
    assert rep["pooled"]["r2"] > 0.3


def test_bundle_for_returns_held_out_model(functional_records):
    r = run_experiment(functional_records, ExperimentSpec("demographics"))
    pid = r.predictions.ids[0]
    b = r.bundle_for(pid)
    x = b.feature_matrix([next(p for p in functional_records if p.pid == pid)])
    assert b.predict_raw(x, b.input_columns)[0] == r.predictions.y_pred[0]


def _mutated_design(records, spec, test_ids, rng):
    """Design matrix where every held-out participant's raw data is scrambled."""
    recs = copy.deepcopy(list(records))
    for rec in recs:
        if rec.pid in test_ids:
            rec.demographics.age = float(rng.uniform(20, 80))
            rec.labs.fasting_glucose = float(rng.uniform(60, 200))
            rec.labs.fasting_insulin = float(rng.uniform(1, 30))
            for d in rec.wearables:
                if d.steps is not None:
                    d.steps = float(rng.integers(0, 30000))
    return build_design_matrix(recs, spec.feature_set, spec.window)


@pytest.mark.parametrize("model", ["tree_direct", "linear_direct", "mae_then_linear"])
def test_leakage_invariance(functional_records, model, rng):
    spec = ExperimentSpec("wearables_demographics_glucose", model=model,
                          ae_config=FAST_AE if model == "mae_then_linear" else None)
    dm = build_design_matrix(functional_records, spec.feature_set, spec.window)
    folds = make_folds(dm.ids, 5, 0)
    test_ids = set(folds.test_ids(0))
    train = np.array([i for i, pid in enumerate(dm.ids) if pid not in test_ids])
    dm2 = _mutated_design(functional_records, spec, test_ids, rng)
    assert dm2.ids == dm.ids and not np.array_equal(dm2.X, dm.X)
    a = dumps(fit_bundle(dm, train, spec, 0).to_dict())
    b = dumps(fit_bundle(dm2, train, spec, 0).to_dict())
    assert a == b


def test_tuning_uses_only_given_rows(rng):
    X = rng.normal(size=(60, 3))
    y = X[:, 0] + rng.normal(scale=0.1, size=60)
    grid = {"max_depth": [1, 3], "learning_rate": [0.1, 0.3]}
    p = tune_hyperparameters(X, y, GbmParams(n_estimators=20), grid, seed=1)
    assert p.max_depth in (1, 3) and p.learning_rate in (0.1, 0.3)
    assert p == tune_hyperparameters(X, y, GbmParams(n_estimators=20), grid, seed=1)


def test_bundle_round_trip_and_purity(functional_records):
    spec = ExperimentSpec("wearables_demographics", model="mae_then_linear", ae_config=FAST_AE)
    b = fit_final_bundle(functional_records, spec)
    b2 = ModelBundle.from_dict(json.loads(dumps(b.to_dict())))
    X = b.feature_matrix(functional_records[:10])
    assert np.array_equal(b.predict_raw(X, b.input_columns), b2.predict_raw(X, b2.input_columns))


def test_missing_glucose_errors(functional_records):
    b = fit_final_bundle(functional_records, ExperimentSpec("wearables_demographics_glucose"))
    row = dict(zip(b.input_columns, b.feature_matrix(functional_records[:1])[0]))
    assert b.predict_features([row]).shape == (1,)
    del row["glucose"]
    with pytest.raises(MissingFeature, match="glucose"):
        b.predict_features([row])
    rec = copy.deepcopy(functional_records[0])
    rec.labs.fasting_glucose = None
    with pytest.raises(MissingFeature, match="glucose"):
        predict_and_classify(b, [rec])


def test_validation_matches_training_time_prediction(functional_records):
    spec = ExperimentSpec("wearables_demographics_glucose")
    r = run_experiment(functional_records, spec)
    pid = r.folds[0].test_ids[0]
    rec = next(p for p in functional_records if p.pid == pid)
    ps = predict_and_classify(r.bundle_for(pid), [rec])
    assert ps.y_pred[0] == r.predictions.y_pred[r.predictions.ids.index(pid)]


def _cohort(tmp_path, n, seed, **kw):
    generate_functional_cohort(n, FunctionalSpec(**kw), seed=seed, out_dir=tmp_path)
    return apply_quality_control(load_cohort(CohortFiles.in_dir(tmp_path)))[0]


@pytest.mark.slow
def test_external_validation_same_distribution(tmp_path):
    train = _cohort(tmp_path / "a", 1500, 11)
    external = _cohort(tmp_path / "b", 1500, 12)
    spec = ExperimentSpec("wearables_demographics_glucose")
    internal = run_experiment(train, spec).predictions
    ext = predict_and_classify(fit_final_bundle(train, spec), external)
    mi = classification_metrics(ConfusionCounts.from_values(internal.y_true, internal.y_pred))
    me = classification_metrics(ConfusionCounts.from_values(ext.y_true, ext.y_pred))
    assert abs(mi["sensitivity"] - me["sensitivity"]) <= 0.1
    assert abs(mi["specificity"] - me["specificity"]) <= 0.1


@pytest.mark.slow
def test_noiseless_recoverability(tmp_path):
    recs = _cohort(tmp_path, 2000, 1, sigma=0.0, jitter_scale=0.0)
    spec = ExperimentSpec("wearables_demographics_glucose_lipid",
                          params=GbmParams(n_estimators=400, learning_rate=0.1, max_depth=3))
    p = run_experiment(recs, spec).predictions
    assert regression_metrics(p.y_true, p.y_pred)["r2"] >= 0.95


def test_grid_product_order_and_determinism(functional_records):
    specs = expand_grid(["demographics", "wearables_demographics"], [7, 30], ["tree_direct"])
    assert [s.name for s in specs] == [
        "demographics__w7__tree_direct__kfold5", "demographics__w30__tree_direct__kfold5",
        "wearables_demographics__w7__tree_direct__kfold5",
        "wearables_demographics__w30__tree_direct__kfold5"]
    a = run_experiment_grid(functional_records, specs)
    b = run_experiment_grid(functional_records, specs, workers=2)
    assert len(a) == 4 and all(c.ok for c in a)
    assert [dumps(c.report) for c in a] == [dumps(c.report) for c in b]
    rows = compare_cells(a)
    assert len(rows) == 3 and all("mcnemar_ir" in r or "wilcoxon_r2" in r for r in rows)


def test_grid_records_failures(functional_records):
    bad = ExperimentSpec("lipid_panel", latent_dim=None)
    cells = run_experiment_grid(functional_records[:3], [bad])
    assert not cells[0].ok and cells[0].error
