"""Gradient boosting for squared-error regression with tree or linear learners.

The tree learner grows each tree greedily with exact split search over
pre-sorted columns, scoring a split by the second-order gain

    0.5 * [G_L^2/(H_L+lambda) + G_R^2/(H_R+lambda) - G^2/(H+lambda)] - gamma

and setting leaf weights to -G/(H+lambda), soft-thresholded by alpha. The
linear learner runs cyclic elastic-net coordinate descent on the same
Newton objective. Rows go left when ``x < threshold``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence

import numpy as np

FORMAT_VERSION = 1

# relative gain tolerance under which two candidate splits count as tied
SPLIT_TIE_RTOL = 1e-10


@dataclass
class GbmParams:
    booster: str = "tree"
    n_estimators: int = 100
    learning_rate: float = 0.1
    reg_lambda: float = 1.0
    reg_alpha: float = 0.0
    gamma: float = 0.0
    max_depth: int = 3
    min_child_weight: float = 1.0
    base_score: Optional[float] = None  # None: mean of the training targets
    random_state: int = 0

    def __post_init__(self):
        if self.booster not in ("tree", "linear"):
            raise ValueError(f"booster must be 'tree' or 'linear', got {self.booster!r}")
        if self.n_estimators < 0:
            raise ValueError("n_estimators must be >= 0")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.reg_lambda < 0 or self.reg_alpha < 0 or self.gamma < 0:
            raise ValueError("reg_lambda, reg_alpha and gamma must be >= 0")
        if self.booster == "tree" and self.max_depth < 1:
            raise ValueError("max_depth must be >= 1 for the tree booster")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class SplitDecision:
    feature: int
    threshold: float
    gain: float


@dataclass
class RegressionTree:
    """Array-encoded binary tree; ``feature[i] == -1`` marks a leaf."""

    feature: List[int] = field(default_factory=list)
    threshold: List[float] = field(default_factory=list)
    left: List[int] = field(default_factory=list)
    right: List[int] = field(default_factory=list)
    value: List[float] = field(default_factory=list)
    cover: List[float] = field(default_factory=list)
    gain: List[float] = field(default_factory=list)

    def _add(self, cover: float) -> int:
        self.feature.append(-1)
        self.threshold.append(0.0)
        self.left.append(-1)
        self.right.append(-1)
        self.value.append(0.0)
        self.cover.append(float(cover))
        self.gain.append(0.0)
        return len(self.feature) - 1

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    @property
    def n_leaves(self) -> int:
        return sum(1 for f in self.feature if f < 0)

    def depth(self, node: int = 0) -> int:
        if self.feature[node] < 0:
            return 0
        return 1 + max(self.depth(self.left[node]), self.depth(self.right[node]))

    def leaf_index(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(X.shape[0], dtype=int)
        feat = np.asarray(self.feature)
        thr = np.asarray(self.threshold)
        left = np.asarray(self.left)
        right = np.asarray(self.right)
        rows = np.arange(X.shape[0])
        while True:
            internal = feat[node] >= 0
            if not internal.any():
                return node
            r = rows[internal]
            n = node[internal]
            go_left = X[r, feat[n]] < thr[n]
            node[r] = np.where(go_left, left[n], right[n])

    def predict(self, X: np.ndarray) -> np.ndarray:
        return np.asarray(self.value)[self.leaf_index(X)]

    def to_dict(self) -> dict:
        return {k: list(getattr(self, k)) for k in
                ("feature", "threshold", "left", "right", "value", "cover", "gain")}

    @classmethod
    def from_dict(cls, d: dict) -> "RegressionTree":
        return cls(feature=[int(v) for v in d["feature"]],
                   threshold=[float(v) for v in d["threshold"]],
                   left=[int(v) for v in d["left"]], right=[int(v) for v in d["right"]],
                   value=[float(v) for v in d["value"]], cover=[float(v) for v in d["cover"]],
                   gain=[float(v) for v in d.get("gain", [0.0] * len(d["feature"]))])


@dataclass
class GbmModel:
    params: GbmParams
    columns: List[str]
    base_score: float
    trees: List[RegressionTree] = field(default_factory=list)
    weights: Optional[np.ndarray] = None  # linear booster
    bias: float = 0.0  # linear booster, added on top of base_score

    @property
    def booster(self) -> str:
        return self.params.booster

    def to_dict(self) -> dict:
        d = {
            "format": "irscreen.gbm",
            "version": FORMAT_VERSION,
            "params": self.params.to_dict(),
            "columns": list(self.columns),
            "base_score": float(self.base_score),
        }
        if self.booster == "tree":
            d["trees"] = [t.to_dict() for t in self.trees]
        else:
            d["weights"] = {c: float(w) for c, w in zip(self.columns, self.weights)}
            d["bias"] = float(self.bias)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GbmModel":
        if d.get("format") != "irscreen.gbm":
            raise ValueError(f"not a serialized GBM model: format={d.get('format')!r}")
        if d.get("version") != FORMAT_VERSION:
            raise ValueError(f"unsupported GBM format version {d.get('version')}")
        params = GbmParams(**d["params"])
        model = cls(params=params, columns=list(d["columns"]), base_score=float(d["base_score"]))
        if params.booster == "tree":
            model.trees = [RegressionTree.from_dict(t) for t in d["trees"]]
        else:
            model.weights = np.array([float(d["weights"][c]) for c in model.columns])
            model.bias = float(d["bias"])
        return model


def split_gain(GL, HL, GR, HR, reg_lambda: float, gamma: float):
    """Second-order loss reduction of a split, minus the per-leaf penalty."""
    G, H = GL + GR, HL + HR
    return 0.5 * (_score(GL, HL, reg_lambda) + _score(GR, HR, reg_lambda)
                  - _score(G, H, reg_lambda)) - gamma


def _score(G, H, reg_lambda):
    denom = H + reg_lambda
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(denom > 0, G * G / np.where(denom > 0, denom, 1.0), 0.0)


def leaf_weight(G: float, H: float, reg_lambda: float, reg_alpha: float = 0.0) -> float:
    """Optimal leaf weight -G/(H+lambda), with L1 soft-thresholding of G."""
    denom = H + reg_lambda
    if denom <= 0:
        return 0.0
    if reg_alpha > 0:
        shrunk = max(abs(G) - reg_alpha, 0.0)
        return -math.copysign(shrunk, G) / denom if shrunk > 0 else 0.0
    return -G / denom


def _pick(gains: np.ndarray, valid: np.ndarray):
    """Best (row, feature) in a gain matrix; ties go to the lowest feature, then row."""
    if not valid.any():
        return None
    best = gains[valid].max()
    tol = SPLIT_TIE_RTOL * max(1.0, abs(best))
    tied = np.argwhere(valid & (gains >= best - tol))
    j = tied[:, 1].min()
    i = tied[tied[:, 1] == j, 0].min()
    return int(i), int(j)


def _best_split_sorted(g, h, X, order, reg_lambda, gamma, min_child_weight):
    """Split search given per-column sorted row indices ``order`` (m x d)."""
    m, d = order.shape
    if m < 2:
        return None
    cols = np.arange(d)
    xs = X[order, cols]
    gs = np.cumsum(g[order], axis=0)
    hs = np.cumsum(h[order], axis=0)
    G, H = gs[-1], hs[-1]
    GL, HL = gs[:-1], hs[:-1]
    GR, HR = G - GL, H - HL
    valid = (xs[:-1] < xs[1:]) & (HL >= min_child_weight) & (HR >= min_child_weight)
    gains = split_gain(GL, HL, GR, HR, reg_lambda, gamma)
    valid &= gains > 0
    pick = _pick(gains, valid)
    if pick is None:
        return None
    i, j = pick
    lo, hi = xs[i, j], xs[i + 1, j]
    thr = 0.5 * (lo + hi)
    if not (lo < thr <= hi):  # adjacent doubles
        thr = hi
    return SplitDecision(feature=j, threshold=float(thr), gain=float(gains[i, j]))


def best_split(g, h, X, reg_lambda: float = 1.0, gamma: float = 0.0,
               min_child_weight: float = 1.0) -> Optional[SplitDecision]:
    """Best exact split over every feature and every midpoint of distinct values.

    Returns None when no split has positive gain (this covers constant
    features and a gamma penalty that outweighs every gain).
    """
    g = np.asarray(g, dtype=float)
    h = np.asarray(h, dtype=float)
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if not (len(g) == len(h) == X.shape[0]) or len(g) < 2:
        raise ValueError("g, h and X must share n >= 2 rows")
    order = np.argsort(X, axis=0, kind="stable")
    return _best_split_sorted(g, h, X, order, reg_lambda, gamma, min_child_weight)


def _check_xy(X, y=None):
    X = np.asarray(X, dtype=float)
    if X.ndim != 2:
        raise ValueError("X must be 2-D")
    if not np.isfinite(X).all():
        raise ValueError("X contains NaN or infinite values")
    if y is not None:
        y = np.asarray(y, dtype=float)
        if y.shape != (X.shape[0],):
            raise ValueError("y must be 1-D with one entry per row of X")
        if not np.isfinite(y).all():
            raise ValueError("y contains NaN or infinite values")
        if X.shape[0] == 0:
            raise ValueError("cannot fit on zero rows")
    return X, y


def grow_tree(X, g, h, params: GbmParams, order: Optional[np.ndarray] = None) -> RegressionTree:
    """Grow one tree depth-first (left child first) on gradients g, h."""
    if order is None:
        order = np.argsort(X, axis=0, kind="stable")
    n, d = X.shape
    tree = RegressionTree()

    def build(rows, node_order, depth):
        G, H = float(g[rows].sum()), float(h[rows].sum())
        node = tree._add(H)
        split = None
        if d and depth < params.max_depth and len(rows) >= 2:
            split = _best_split_sorted(g, h, X, node_order, params.reg_lambda, params.gamma,
                                       params.min_child_weight)
        if split is None:
            tree.value[node] = leaf_weight(G, H, params.reg_lambda, params.reg_alpha)
            return node
        tree.feature[node] = split.feature
        tree.threshold[node] = split.threshold
        tree.gain[node] = split.gain
        goes_left = np.zeros(n, dtype=bool)
        goes_left[rows[X[rows, split.feature] < split.threshold]] = True
        mask = goes_left[node_order]
        n_left = int(mask[:, 0].sum())
        # stable partition keeps each child's columns sorted
        left_order = node_order.T[mask.T].reshape(d, n_left).T
        right_order = node_order.T[~mask.T].reshape(d, len(rows) - n_left).T
        tree.left[node] = build(left_order[:, 0], left_order, depth + 1)
        tree.right[node] = build(right_order[:, 0], right_order, depth + 1)
        return node

    build(np.arange(n), order, 0)
    return tree


def fit_tree_ensemble(X, y, params: GbmParams, columns: Optional[Sequence[str]] = None) -> GbmModel:
    X, y = _check_xy(X, y)
    columns = list(columns) if columns is not None else [f"f{j}" for j in range(X.shape[1])]
    base = float(np.mean(y)) if params.base_score is None else float(params.base_score)
    model = GbmModel(params=params, columns=columns, base_score=base)
    order = np.argsort(X, axis=0, kind="stable")
    pred = np.full(X.shape[0], base)
    h = np.ones(X.shape[0])
    for _ in range(params.n_estimators):
        g = pred - y
        tree = grow_tree(X, g, h, params, order)
        model.trees.append(tree)
        pred = pred + params.learning_rate * tree.predict(X)
    return model


def coordinate_delta(sum_grad: float, sum_hess: float, w: float, reg_alpha: float,
                     reg_lambda: float) -> float:
    """Elastic-net Newton step for one weight.

    Under L1 the step lands on the soft-thresholded target, clipped at zero
    when the shrunk step would overshoot it.
    """
    if sum_hess < 1e-12:
        return 0.0
    grad = sum_grad + reg_lambda * w
    hess = sum_hess + reg_lambda
    if reg_alpha == 0.0:
        return -grad / hess
    if w - grad / hess >= 0:
        return max(-(grad + reg_alpha) / hess, -w)
    return min(-(grad - reg_alpha) / hess, -w)


def fit_linear_ensemble(X, y, params: GbmParams,
                        columns: Optional[Sequence[str]] = None) -> GbmModel:
    """K rounds of cyclic coordinate descent: bias first, then each weight in order."""
    X, y = _check_xy(X, y)
    n, d = X.shape
    columns = list(columns) if columns is not None else [f"f{j}" for j in range(d)]
    base = float(np.mean(y)) if params.base_score is None else float(params.base_score)
    eta = params.learning_rate
    w = np.zeros(d)
    bias = 0.0
    pred = np.full(n, base)
    col_hess = (X * X).sum(axis=0)
    for _ in range(params.n_estimators):
        g = pred - y
        db = -eta * g.sum() / n
        bias += db
        pred += db
        for j in range(d):
            g = pred - y
            delta = coordinate_delta(float(g @ X[:, j]), float(col_hess[j]), w[j],
                                     params.reg_alpha, params.reg_lambda)
            if delta != 0.0:
                w[j] += eta * delta
                pred += eta * delta * X[:, j]
    return GbmModel(params=params, columns=columns, base_score=base, weights=w, bias=bias)


def fit_gbm(X, y, params: GbmParams, columns: Optional[Sequence[str]] = None) -> GbmModel:
    if params.booster == "tree":
        return fit_tree_ensemble(X, y, params, columns)
    return fit_linear_ensemble(X, y, params, columns)


def _check_columns(model: GbmModel, X, columns):
    X, _ = _check_xy(X)
    if columns is not None and list(columns) != list(model.columns):
        raise ValueError(f"column mismatch: model expects {model.columns}, got {list(columns)}")
    if X.shape[1] != len(model.columns):
        raise ValueError(f"column mismatch: model expects {len(model.columns)} columns, "
                         f"got {X.shape[1]}")
    return X


def tree_contributions(model: GbmModel, X, columns=None) -> np.ndarray:
    """Per-tree additive contributions (n x K), already scaled by the learning rate."""
    X = _check_columns(model, np.atleast_2d(X), columns)
    out = np.zeros((X.shape[0], len(model.trees)))
    for k, tree in enumerate(model.trees):
        out[:, k] = model.params.learning_rate * tree.predict(X)
    return out


def gbm_predict(model: GbmModel, X, columns: Optional[Sequence[str]] = None) -> np.ndarray:
    X = _check_columns(model, np.atleast_2d(X), columns)
    if model.booster == "tree":
        pred = np.full(X.shape[0], model.base_score)
        for tree in model.trees:
            pred = pred + model.params.learning_rate * tree.predict(X)
        return pred
    return model.base_score + model.bias + X @ model.weights
