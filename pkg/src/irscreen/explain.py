"""SHAP attributions for both booster types and linear probes of latent spaces."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy import optimize

from .gbm import GbmModel, RegressionTree, gbm_predict
from .metrics import ranking_curves


@dataclass
class ShapVector:
    base_value: float
    values: np.ndarray
    columns: List[str]

    @property
    def total(self) -> float:
        return float(self.base_value + self.values.sum())

    def as_dict(self) -> Dict[str, float]:
        return dict(zip(self.columns, (float(v) for v in self.values)))


def tree_expected_value(tree: RegressionTree) -> float:
    """Cover-weighted mean leaf value (the prediction with no feature known)."""
    root = tree.cover[0]
    if root <= 0:
        return 0.0
    return float(sum(v * c for f, v, c in zip(tree.feature, tree.value, tree.cover) if f < 0)
                 / root)


# Path elements are [feature, zero_fraction, one_fraction, weight].

def _extend(path, zero_fraction, one_fraction, feature):
    depth = len(path)
    path.append([feature, zero_fraction, one_fraction, 1.0 if depth == 0 else 0.0])
    for i in range(depth - 1, -1, -1):
        path[i + 1][3] += one_fraction * path[i][3] * (i + 1) / (depth + 1)
        path[i][3] = zero_fraction * path[i][3] * (depth - i) / (depth + 1)


def _unwind(path, index):
    depth = len(path) - 1
    one = path[index][2]
    zero = path[index][1]
    nxt = path[depth][3]
    for i in range(depth - 1, -1, -1):
        if one != 0:
            tmp = path[i][3]
            path[i][3] = nxt * (depth + 1) / ((i + 1) * one)
            nxt = tmp - path[i][3] * zero * (depth - i) / (depth + 1)
        else:
            path[i][3] = path[i][3] * (depth + 1) / (zero * (depth - i))
    for i in range(index, depth):
        path[i][0], path[i][1], path[i][2] = path[i + 1][0], path[i + 1][1], path[i + 1][2]
    path.pop()


def _unwound_sum(path, index):
    depth = len(path) - 1
    one = path[index][2]
    zero = path[index][1]
    nxt = path[depth][3]
    total = 0.0
    if one != 0:
        for i in range(depth - 1, -1, -1):
            tmp = nxt * (depth + 1) / ((i + 1) * one)
            total += tmp
            nxt = path[i][3] - tmp * zero * (depth - i) / (depth + 1)
    else:
        for i in range(depth - 1, -1, -1):
            total += path[i][3] / zero / ((depth - i) / (depth + 1))
    return total


def _tree_shap(tree: RegressionTree, x: np.ndarray, phi: np.ndarray, scale: float) -> None:
    feat, thr = tree.feature, tree.threshold
    left, right, value, cover = tree.left, tree.right, tree.value, tree.cover

    def recurse(node, parent_path, zero_fraction, one_fraction, feature):
        path = [list(e) for e in parent_path]
        _extend(path, zero_fraction, one_fraction, feature)
        f = feat[node]
        if f < 0:
            for i in range(1, len(path)):
                w = _unwound_sum(path, i)
                el = path[i]
                phi[el[0]] += scale * w * (el[2] - el[1]) * value[node]
            return
        hot, cold = (left[node], right[node]) if x[f] < thr[node] else (right[node], left[node])
        inc_zero, inc_one = 1.0, 1.0
        for k in range(1, len(path)):
            if path[k][0] == f:
                inc_zero, inc_one = path[k][1], path[k][2]
                _unwind(path, k)
                break
        if cover[node] <= 0:
            return
        recurse(hot, path, inc_zero * cover[hot] / cover[node], inc_one, f)
        recurse(cold, path, inc_zero * cover[cold] / cover[node], 0.0, f)

    recurse(0, [], 1.0, 1.0, -1)


def tree_shap_values(model: GbmModel, x, columns: Optional[Sequence[str]] = None) -> ShapVector:
    """Exact path-dependent Shapley values for one row of a tree ensemble.

    Feature expectations are taken along the training cover of each tree,
    so ``base_value + sum(values)`` reproduces the model prediction.
    """
    if model.booster != "tree":
        raise ValueError("tree_shap_values needs a tree booster")
    if columns is not None and list(columns) != list(model.columns):
        raise ValueError(f"column mismatch: model expects {model.columns}")
    x = np.asarray(x, dtype=float).ravel()
    if x.size != len(model.columns):
        raise ValueError(f"expected {len(model.columns)} features, got {x.size}")
    eta = model.params.learning_rate
    phi = np.zeros(x.size)
    base = model.base_score
    for tree in model.trees:
        base += eta * tree_expected_value(tree)
        _tree_shap(tree, x, phi, eta)
    return ShapVector(float(base), phi, list(model.columns))


def linear_shap_values(model: GbmModel, x, background_means) -> ShapVector:
    """Exact Shapley values of a linear model against background feature means."""
    if model.booster != "linear":
        raise ValueError("linear_shap_values needs a linear booster")
    x = np.asarray(x, dtype=float).ravel()
    mu = np.asarray(background_means, dtype=float).ravel()
    if x.size != len(model.columns) or mu.size != x.size:
        raise ValueError("x and background means must match the model columns")
    phi = model.weights * (x - mu)
    base = float(gbm_predict(model, mu[None, :])[0])
    return ShapVector(base, phi, list(model.columns))


def shap_matrix(model: GbmModel, X, background_means=None) -> tuple:
    """(base values, n x d attribution matrix) for many rows."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    rows = []
    bases = []
    for x in X:
        sv = (tree_shap_values(model, x) if model.booster == "tree"
              else linear_shap_values(model, x, background_means))
        rows.append(sv.values)
        bases.append(sv.base_value)
    return np.asarray(bases), np.vstack(rows) if rows else np.zeros((0, len(model.columns)))


@dataclass
class ImportanceSummary:
    columns: List[str]
    mean_abs: np.ndarray

    @property
    def ranking(self) -> List[str]:
        return [c for _, c in sorted(zip(-self.mean_abs, self.columns))]

    def to_rows(self) -> List[dict]:
        lookup = dict(zip(self.columns, self.mean_abs))
        return [{"feature": c, "mean_abs_shap": float(lookup[c]), "rank": i + 1}
                for i, c in enumerate(self.ranking)]


def importance_summary(shap_values: np.ndarray, columns: Sequence[str]) -> ImportanceSummary:
    S = np.atleast_2d(np.asarray(shap_values, dtype=float))
    return ImportanceSummary(list(columns), np.abs(S).mean(axis=0))


def sankey_triples(model_name: str, summary: ImportanceSummary, top: Optional[int] = None):
    """(model, feature, relative weight) triples with weights summing to 1."""
    total = float(summary.mean_abs.sum())
    rows = summary.to_rows()[:top] if top else summary.to_rows()
    return [{"model": model_name, "feature": r["feature"],
             "weight": r["mean_abs_shap"] / total if total > 0 else 0.0} for r in rows]


def _fit_logistic(X, y, l2: float):
    n, d = X.shape
    s = np.where(y, 1.0, -1.0)

    def objective(theta):
        w, b = theta[:d], theta[d]
        margin = s * (X @ w + b)
        loss = np.logaddexp(0.0, -margin).sum() + 0.5 * l2 * (w @ w)
        coef = -s * np.exp(-np.logaddexp(0.0, margin))  # -s * sigmoid(-margin)
        grad = np.r_[X.T @ coef + l2 * w, coef.sum()]
        return loss, grad

    res = optimize.minimize(objective, np.zeros(d + 1), jac=True, method="L-BFGS-B")
    return res.x[:d], res.x[d]


def probe_latent_space(embeddings, labels, n_folds: int = 5, seed: int = 0,
                       l2: float = 1.0) -> float:
    """Mean held-out AUROC of an L2-regularized logistic probe on embeddings."""
    from .pipeline import make_folds

    Z = np.atleast_2d(np.asarray(embeddings, dtype=float))
    y = np.asarray(labels).astype(bool)
    if y.all() or not y.any():
        raise ValueError("probe labels must contain both classes")
    folds = make_folds([str(i) for i in range(len(y))], n_folds, seed,
                       strata=y.astype(int).tolist())
    fold_of = np.array([folds.assignment[str(i)] for i in range(len(y))])
    aucs = []
    for k in range(n_folds):
        test = fold_of == k
        train = ~test
        if y[test].all() or not y[test].any() or y[train].all() or not y[train].any():
            continue
        mu = Z[train].mean(axis=0)
        sd = Z[train].std(axis=0)
        sd[sd == 0] = 1.0
        w, b = _fit_logistic((Z[train] - mu) / sd, y[train], l2)
        scores = ((Z[test] - mu) / sd) @ w + b
        aucs.append(ranking_curves(scores, y[test]).auroc)
    if not aucs:
        raise ValueError("no fold contained both classes")
    return float(np.mean(aucs))
