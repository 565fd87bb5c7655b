import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from irscreen.domain import IrClass
from irscreen.metrics import (ConfusionCounts, benjamini_hochberg, classification_metrics,
                              coefficient_of_variation, evaluate_block, mcnemar, mcnemar_paired,
                              pearson, ranking_curves, regression_metrics, summarize_folds,
                              wilcoxon_rank_sum)
from oracles import brute_bh, exact_rank_sum_p, pairwise_auroc, step_auprc


def test_regression_examples():
    r = regression_metrics([1, 2, 3], [2, 2, 2])
    assert r["mae"] == pytest.approx(2 / 3) and r["mse"] == pytest.approx(2 / 3)
    assert r["r2"] == 0
    r = regression_metrics([1, 2, 3], [1, 2, 3])
    assert (r["r2"], r["mae"], r["mse"]) == (1, 0, 0)


def test_r2_undefined_for_constant_truth():
    r = regression_metrics([2, 2, 2], [1, 2, 3])
    assert math.isnan(r["r2"]) and r["undefined"] == ["r2"]


def test_binary_rates():
    m = classification_metrics(ConfusionCounts.from_binary(tp=76, fp=16, tn=84, fn=24))
    assert m["sensitivity"] == pytest.approx(0.76)
    assert m["specificity"] == pytest.approx(0.84)


def test_adjusted_specificity():
    IS, IMP, IR = IrClass.IS, IrClass.IMPAIRED_IS, IrClass.IR
    true = [IS] * 10 + [IMP] * 10
    pred = [IS] * 8 + [IR] * 2 + [IMP] * 5 + [IR] * 5
    m = classification_metrics(ConfusionCounts.from_classes(true, pred))
    assert m["adjusted_specificity"] == pytest.approx(0.8)
    assert m["specificity"] == pytest.approx(13 / 20)


def test_adjusted_specificity_one():
    IS, IR = IrClass.IS, IrClass.IR
    m = classification_metrics(ConfusionCounts.from_classes([IS, IS, IR], [IS, IS, IR]))
    assert m["adjusted_specificity"] == 1.0


def test_empty_class_flagged():
    m = classification_metrics(ConfusionCounts.from_binary(0, 0, 5, 0))
    assert "sensitivity" in m["undefined"] and math.isnan(m["sensitivity"])


def test_auroc_example():
    r = ranking_curves([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1])
    assert r.auroc == 0.75
    assert r.auprc == pytest.approx(step_auprc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]))


def test_auroc_extremes():
    r = ranking_curves([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1])
    assert r.auroc == 1.0 and r.auprc == 1.0
    assert ranking_curves([0.5] * 6, [0, 1, 0, 1, 1, 0]).auroc == 0.5
    with pytest.raises(ValueError):
        ranking_curves([0.1, 0.2], [1, 1])


def test_curves_are_monotone(rng):
    r = ranking_curves(rng.normal(size=50), rng.random(50) < 0.4)
    assert r.fpr[0] == 0 and r.tpr[0] == 0 and r.fpr[-1] == 1 and r.tpr[-1] == 1
    assert np.all(np.diff(r.fpr) >= 0) and np.all(np.diff(r.tpr) >= 0)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 5), st.booleans()), min_size=2, max_size=25))
def test_ranking_oracle_property(pairs):
    scores = [float(s) for s, _ in pairs]
    labels = [l for _, l in pairs]
    if all(labels) or not any(labels):
        return
    r = ranking_curves(scores, labels)
    assert r.auroc == pytest.approx(pairwise_auroc(scores, labels), abs=1e-12)
    assert r.auprc == pytest.approx(step_auprc(scores, labels), abs=1e-12)


def test_wilcoxon_identical_samples():
    r = wilcoxon_rank_sum([1.0, 1.0, 1.0], [1.0, 1.0])
    assert r.p_value == 1.0 and "all_ties" in r.flags


def test_wilcoxon_exact_matches_enumeration(rng):
    for _ in range(20):
        a = np.round(rng.normal(size=int(rng.integers(2, 7))), 1)
        b = np.round(rng.normal(size=int(rng.integers(2, 7))) + 0.5, 1)
        r = wilcoxon_rank_sum(a, b, method="exact")
        assert r.p_value == pytest.approx(exact_rank_sum_p(a, b), abs=1e-12)


def test_wilcoxon_auto_and_normal(rng):
    a, b = rng.normal(size=12), rng.normal(size=12) + 1
    assert wilcoxon_rank_sum(a, b).method == "normal"
    assert wilcoxon_rank_sum(a[:5], b[:5]).method == "exact"
    big = wilcoxon_rank_sum(rng.normal(size=200), rng.normal(size=200) + 1.0)
    assert big.p_value < 1e-6


def test_mcnemar():
    assert mcnemar(10, 0, exact=True).p_value == pytest.approx(2 * 0.5 ** 10)
    assert mcnemar(10, 0, exact=True).p_value < 0.01
    assert mcnemar(10, 0).p_value < 0.01
    assert "no_discordant_pairs" in mcnemar(0, 0).flags
    r = mcnemar_paired([True, True, False], [False, True, True], exact=True)
    assert r.p_value == 1.0
    assert mcnemar_paired([True, True, False], [False, True, True]).statistic == 0.5


def test_bh_example():
    assert np.allclose(benjamini_hochberg([0.01, 0.02, 0.04]), [0.03, 0.03, 0.04])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=30))
def test_bh_oracle_property(p):
    assert np.allclose(benjamini_hochberg(p), brute_bh(p), atol=1e-12)


def test_pearson():
    x = np.arange(10.0)
    assert pearson(x, 2 * x + 1).statistic == pytest.approx(1.0)
    assert "zero_variance" in pearson(x, np.ones(10)).flags


def test_cv():
    assert coefficient_of_variation([10, 10, 10]) == 0
    assert coefficient_of_variation([9, 10, 11]) == pytest.approx(100 * math.sqrt(2 / 3) / 10)
    assert coefficient_of_variation([9, 10, 11]) == pytest.approx(8.16496580927726)
    assert coefficient_of_variation([2.0, 2.2]) == pytest.approx(100 * 0.1 / 2.1)
    assert math.isnan(coefficient_of_variation([]))


def test_evaluate_block_and_summary(rng):
    y = rng.lognormal(0.6, 0.7, 100)
    blocks = [evaluate_block(y[i::4], y[i::4] * 1.1) for i in range(4)]
    s = summarize_folds(blocks)
    assert s["auroc"]["n_folds"] == 4 and s["auroc"]["mean"] == 1.0
    one_class = evaluate_block([1.0, 1.2, 1.1], [1.0, 1.0, 1.0])
    assert "auroc" in one_class["undefined"]
