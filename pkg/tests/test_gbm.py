import numpy as np
import pytest

from irscreen.gbm import (GbmModel, GbmParams, best_split, coordinate_delta, fit_gbm,
                          gbm_predict, leaf_weight, split_gain, tree_contributions)
from oracles import (brute_best_split, brute_booster, nested_tree, ridge_closed_form,
                     trees_match)


def test_two_point_split():
    g = np.array([-1.0, -3.0])
    s = best_split(g, np.ones(2), np.array([[0.0], [1.0]]), reg_lambda=0, gamma=0)
    assert s.feature == 0 and s.threshold == 0.5
    assert s.gain == pytest.approx(0.5 * (1 + 9 - 16 / 2))
    assert s.gain == pytest.approx(1.0)


def test_gamma_blocks_split():
    g = np.array([-1.0, -3.0])
    assert best_split(g, np.ones(2), np.array([[0.0], [1.0]]), 0, gamma=1.5) is None


def test_constant_feature_no_split():
    assert best_split([1.0, -1.0, 2.0], np.ones(3), np.ones((3, 1)), 1.0, 0) is None


def test_split_gain_formula():
    assert split_gain(-1.0, 1.0, -3.0, 1.0, 0.0, 0.0) == pytest.approx(1.0)


def test_split_matches_enumeration(rng):
    for _ in range(50):
        X = rng.normal(size=(6, 2))
        g = rng.normal(size=6)
        h = np.ones(6)
        ours = best_split(g, h, X, 1.0, 0.0)
        ref = brute_best_split(X, g, h, list(range(6)), 1.0, 0.0, 1.0)
        if ref is None:
            assert ours is None
            continue
        assert (ours.feature, ours.threshold) == (ref[0], ref[1])
        assert ours.gain == pytest.approx(ref[2], rel=1e-12)


def test_exact_fit_one_round():
    X = np.array([[0.0], [1.0]])
    y = np.array([1.0, 3.0])
    m = fit_gbm(X, y, GbmParams(n_estimators=1, learning_rate=1, max_depth=1, reg_lambda=0,
                                base_score=0.0))
    assert sorted(m.trees[0].value[i] for i in (1, 2)) == [1.0, 3.0]
    assert np.array_equal(gbm_predict(m, X), y)


def test_shrunk_single_leaf():
    X = np.array([[0.0], [1.0]])
    m = fit_gbm(X, np.array([1.0, 3.0]), GbmParams(n_estimators=1, learning_rate=1,
                                                   reg_lambda=2, gamma=1e9, base_score=0.0))
    assert m.trees[0].n_leaves == 1
    assert m.trees[0].value[0] == pytest.approx(1.0)
    assert leaf_weight(-4.0, 2.0, 2.0) == 1.0


def test_leaf_weight_l1():
    assert leaf_weight(-4.0, 2.0, 0.0, reg_alpha=1.0) == pytest.approx(1.5)
    assert leaf_weight(-0.5, 2.0, 0.0, reg_alpha=1.0) == 0.0


def test_matches_brute_force_booster(rng):
    for _ in range(30):
        X = np.round(rng.normal(size=(8, 2)), 1)
        y = rng.normal(size=8)
        p = GbmParams(n_estimators=3, learning_rate=0.5, max_depth=2, reg_lambda=1.0)
        m = fit_gbm(X, y, p)
        base, trees = brute_booster(X, y, 3, 0.5, 1.0, 0.0, 2)
        assert m.base_score == pytest.approx(base)
        assert all(trees_match(nested_tree(t), r) for t, r in zip(m.trees, trees))


def test_depth_limit(rng):
    X = rng.normal(size=(200, 3))
    m = fit_gbm(X, X[:, 0] ** 2 + X[:, 1], GbmParams(n_estimators=5, max_depth=2))
    assert max(t.depth() for t in m.trees) <= 2


def test_nan_rejected():
    with pytest.raises(ValueError):
        fit_gbm([[np.nan]], [1.0], GbmParams())
    with pytest.raises(ValueError):
        fit_gbm([[1.0]], [np.nan], GbmParams())


def test_params_validation():
    with pytest.raises(ValueError):
        GbmParams(booster="dart")
    with pytest.raises(ValueError):
        GbmParams(learning_rate=0)


def test_empty_ensemble_is_base():
    m = fit_gbm(np.zeros((3, 1)), np.array([1.0, 2.0, 3.0]), GbmParams(n_estimators=0))
    assert np.all(gbm_predict(m, np.ones((4, 1))) == 2.0)


def test_permutation_equivariance(rng):
    X = rng.normal(size=(50, 3))
    m = fit_gbm(X, X @ [1.0, -2.0, 0.5], GbmParams(n_estimators=20))
    perm = rng.permutation(50)
    assert np.array_equal(gbm_predict(m, X)[perm], gbm_predict(m, X[perm]))


def test_column_mismatch(rng):
    X = rng.normal(size=(20, 2))
    m = fit_gbm(X, X[:, 0], GbmParams(n_estimators=2), ["a", "b"])
    with pytest.raises(ValueError, match="column mismatch"):
        gbm_predict(m, X, ["b", "a"])
    with pytest.raises(ValueError, match="column mismatch"):
        gbm_predict(m, X[:, :1])


def test_contributions_sum(rng):
    X = rng.normal(size=(30, 2))
    m = fit_gbm(X, X[:, 0], GbmParams(n_estimators=7))
    assert np.allclose(m.base_score + tree_contributions(m, X).sum(axis=1), gbm_predict(m, X))


def test_deterministic_and_serializable(rng):
    X = rng.normal(size=(80, 4))
    y = X[:, 0] - X[:, 2] + rng.normal(scale=0.1, size=80)
    for booster in ("tree", "linear"):
        p = GbmParams(booster=booster, n_estimators=30)
        a, b = fit_gbm(X, y, p), fit_gbm(X, y, p)
        assert a.to_dict() == b.to_dict()
        c = GbmModel.from_dict(a.to_dict())
        assert np.array_equal(gbm_predict(c, X), gbm_predict(a, X))


def test_linear_least_squares(rng):
    X = rng.normal(size=(40, 3))
    y = X @ [1.5, -2.0, 0.25] + 0.7
    m = fit_gbm(X, y, GbmParams(booster="linear", n_estimators=500, learning_rate=1.0,
                                reg_lambda=0.0))
    assert np.allclose(m.weights, [1.5, -2.0, 0.25], atol=1e-6)
    assert np.allclose(gbm_predict(m, X), y, atol=1e-6)


def test_linear_ridge(rng):
    X = rng.normal(size=(60, 4)) + 1.0
    y = X @ rng.normal(size=4) + rng.normal(size=60)
    m = fit_gbm(X, y, GbmParams(booster="linear", n_estimators=2000, learning_rate=1.0,
                                reg_lambda=5.0))
    w, b = ridge_closed_form(X, y, 5.0)
    assert np.allclose(m.weights, w, atol=1e-4)
    assert m.base_score + m.bias == pytest.approx(b, abs=1e-4)


def test_linear_l1_kills_weights(rng):
    X = rng.normal(size=(30, 3))
    y = X @ [0.1, -0.1, 0.2] + 3.0
    m = fit_gbm(X, y, GbmParams(booster="linear", n_estimators=50, reg_alpha=1e6))
    assert np.all(m.weights == 0)
    assert np.allclose(gbm_predict(m, X), m.base_score + m.bias)


def test_coordinate_delta_soft_threshold():
    # target 0.5 - 0.2 stays positive, the L1-shrunk step overshoots: clip at zero
    assert coordinate_delta(0.2, 1.0, 0.5, reg_alpha=1.0, reg_lambda=0.0) == -0.5
    assert coordinate_delta(-0.2, 1.0, -0.5, reg_alpha=1.0, reg_lambda=0.0) == 0.5
    # target -9.5 is across zero: land on the soft-thresholded -8.5
    assert 0.5 + coordinate_delta(10.0, 1.0, 0.5, reg_alpha=1.0, reg_lambda=0.0) == -8.5
    assert coordinate_delta(0.5, 1.0, 0.0, reg_alpha=1.0, reg_lambda=0.0) == 0.0
    assert coordinate_delta(1.0, 0.0, 0.3, 0.0, 0.0) == 0.0
