"""Cross-validated experiments, frozen model bundles and experiment grids.

Per fold the order is fixed: build the unstandardized design matrix, fit the
standardizer on training rows, optionally train an (masked) autoencoder on the
standardized training rows and encode both sides, fit the booster on training
rows, predict the test rows. Nothing fitted ever sees a test row.
"""

from __future__ import annotations

import itertools
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional, Sequence

import numpy as np

from .autoencoder import Autoencoder, MaeTrainConfig, MlpSpec, encode, train_autoencoder
from .domain import IrClass, IrThresholds, ParticipantRecord, classify_ir, derive_strata
from .featureset import (
    ALLOWED_WINDOWS,
    AggregationWindow,
    DesignMatrix,
    FeatureSetSpec,
    MissingFeature,
    StandardizerParams,
    aggregate_wearables_window,
    apply_standardizer,
    build_design_matrix,
    feature_row,
    fit_standardizer,
    resolve_feature_set,
)
from .gbm import GbmModel, GbmParams, fit_gbm, gbm_predict
from .metrics import (
    benjamini_hochberg,
    evaluate_block,
    mcnemar_paired,
    summarize_folds,
    wilcoxon_rank_sum,
)

logger = logging.getLogger(__name__)

DEFAULT_SEEDS = (0, 92, 1, 2024, 12121)
MODELS = ("tree_direct", "linear_direct", "ae_then_linear", "mae_then_linear")
CV_SCHEMES = ("kfold5", "loocv")
BUNDLE_FORMAT = "irscreen.bundle"
BUNDLE_VERSION = 1

TREE_GRID = {
    "n_estimators": [50, 100, 200],
    "learning_rate": [0.01, 0.1, 0.15, 0.2, 0.3, 0.4, 0.5],
    "reg_lambda": [round(0.1 * i, 1) for i in range(11)],
    "reg_alpha": [round(0.1 * i, 1) for i in range(11)],
    "max_depth": [1, 2, 3, 5, 7],
}
LINEAR_GRID = {
    "n_estimators": [5, 10, 15, 25, 50, 85, 100, 125, 150, 200],
    "learning_rate": [0.01, 0.05, 0.09, 0.1, 0.15, 0.19, 0.21, 0.25, 0.29, 0.31, 0.35, 0.39,
                      0.41, 0.45, 0.51],
    "reg_lambda": [round(0.1 * i, 1) for i in range(11)],
    "reg_alpha": [round(0.1 * i, 1) for i in range(11)],
}


def default_params(model: str) -> GbmParams:
    if model == "tree_direct":
        return GbmParams("tree", n_estimators=100, learning_rate=0.1, max_depth=3, reg_lambda=1.0)
    return GbmParams("linear", n_estimators=100, learning_rate=0.5, reg_lambda=0.1,
                     reg_alpha=0.0)


@dataclass
class ExperimentSpec:
    feature_set: FeatureSetSpec
    window: int = 30
    model: str = "tree_direct"
    cv: str = "kfold5"
    seeds: tuple = DEFAULT_SEEDS
    thresholds: IrThresholds = IrThresholds()
    params: Optional[GbmParams] = None
    latent_dim: Optional[int] = None  # None: half the standardized input width
    ae_config: Optional[MaeTrainConfig] = None
    stratified_folds: bool = False
    tune: bool = False
    tune_max_candidates: int = 20

    def __post_init__(self):
        self.feature_set = resolve_feature_set(self.feature_set)
        if self.model not in MODELS:
            raise ValueError(f"unknown model {self.model!r}; choose from {MODELS}")
        if self.cv not in CV_SCHEMES:
            raise ValueError(f"unknown cv {self.cv!r}; choose from {CV_SCHEMES}")
        if self.cv == "loocv" and self.is_representation:
            raise ValueError("loocv is only supported for direct models")
        if self.window not in ALLOWED_WINDOWS:
            raise ValueError(f"window {self.window} not in {ALLOWED_WINDOWS}")
        if not self.seeds:
            raise ValueError("at least one seed is required")
        self.seeds = tuple(int(s) for s in self.seeds)
        if self.params is None:
            self.params = default_params(self.model)
        expected = "tree" if self.model == "tree_direct" else "linear"
        if self.params.booster != expected:
            raise ValueError(f"model {self.model} needs a {expected} booster")
        if self.is_representation and self.ae_config is None:
            self.ae_config = MaeTrainConfig(mask_prob=0.75 if self.model == "mae_then_linear"
                                            else 0.0)
        if self.model == "ae_then_linear" and self.ae_config.mask_prob != 0:
            raise ValueError("ae_then_linear trains without masking; use mae_then_linear")

    @property
    def is_representation(self) -> bool:
        return self.model in ("ae_then_linear", "mae_then_linear")

    @property
    def name(self) -> str:
        return f"{self.feature_set.name}__w{self.window}__{self.model}__{self.cv}"

    def to_dict(self) -> dict:
        return {
            "feature_set": self.feature_set.to_dict(),
            "window": self.window,
            "model": self.model,
            "cv": self.cv,
            "seeds": list(self.seeds),
            "thresholds": {"is_upper": self.thresholds.is_upper,
                           "ir_lower": self.thresholds.ir_lower},
            "params": self.params.to_dict(),
            "latent_dim": self.latent_dim,
            "ae_config": asdict(self.ae_config) if self.ae_config else None,
            "stratified_folds": self.stratified_folds,
            "tune": self.tune,
            "tune_max_candidates": self.tune_max_candidates,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentSpec":
        d = dict(d)
        kw = {"feature_set": resolve_feature_set(d.pop("feature_set"))}
        if "thresholds" in d:
            kw["thresholds"] = IrThresholds(**d.pop("thresholds"))
        if d.get("params") is not None:
            kw["params"] = GbmParams(**d.pop("params"))
        else:
            d.pop("params", None)
        if d.get("ae_config") is not None:
            kw["ae_config"] = MaeTrainConfig(**d.pop("ae_config"))
        else:
            d.pop("ae_config", None)
        if "seeds" in d:
            kw["seeds"] = tuple(d.pop("seeds"))
        kw.update(d)
        return cls(**kw)


@dataclass
class FoldAssignment:
    assignment: Dict[str, int]
    k: int

    def test_ids(self, fold: int) -> List[str]:
        return [i for i, f in self.assignment.items() if f == fold]

    def sizes(self) -> List[int]:
        counts = [0] * self.k
        for f in self.assignment.values():
            counts[f] += 1
        return counts


def make_folds(ids: Sequence[str], k: int, seed: int, strata: Optional[Sequence] = None
               ) -> FoldAssignment:
    """Seeded shuffle then contiguous chunking into k folds (k = n gives LOOCV).

    With ``strata`` each stratum is shuffled separately, the strata are
    concatenated and folds are dealt round-robin, so every fold gets a
    near-equal share of every stratum.
    """
    ids = list(ids)
    n = len(ids)
    if len(set(ids)) != n:
        raise ValueError("participant ids must be unique")
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    if n < k:
        raise ValueError(f"cannot split {n} participants into {k} folds")
    rng = np.random.default_rng(seed)
    if strata is None:
        perm = rng.permutation(n)
        chunks = np.array_split(perm, k)
        assignment = {ids[i]: f for f, chunk in enumerate(chunks) for i in chunk}
    else:
        strata = list(strata)
        if len(strata) != n:
            raise ValueError("strata must align with ids")
        order = []
        for s in sorted(set(strata), key=repr):
            members = np.array([i for i in range(n) if strata[i] == s])
            order += list(members[rng.permutation(len(members))])
        assignment = {ids[i]: pos % k for pos, i in enumerate(order)}
    return FoldAssignment({i: assignment[i] for i in ids}, k)


@dataclass
class PredictionSet:
    ids: List[str]
    y_true: np.ndarray
    y_pred: np.ndarray
    fold: np.ndarray
    thresholds: IrThresholds = IrThresholds()

    def __post_init__(self):
        self.y_true = np.asarray(self.y_true, dtype=float)
        self.y_pred = np.asarray(self.y_pred, dtype=float)
        self.fold = np.asarray(self.fold, dtype=int)
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("a participant appears more than once in a prediction set")
        if not (len(self.ids) == self.y_true.size == self.y_pred.size == self.fold.size):
            raise ValueError("prediction set fields must align")

    def __len__(self):
        return len(self.ids)

    @property
    def class_true(self) -> List[IrClass]:
        return [classify_ir(v, self.thresholds) for v in self.y_true]

    @property
    def class_pred(self) -> List[IrClass]:
        return [classify_ir(v, self.thresholds) for v in self.y_pred]

    def correct_ir(self) -> np.ndarray:
        """Whether the binary IR / non-IR call is right, per participant."""
        t = self.y_true >= self.thresholds.ir_lower
        p = self.y_pred >= self.thresholds.ir_lower
        return t == p

    def true_positive_ir(self) -> int:
        t = self.y_true >= self.thresholds.ir_lower
        p = self.y_pred >= self.thresholds.ir_lower
        return int(np.sum(t & p))

    def rows(self):
        for pid, yt, yp, f, ct, cp in zip(self.ids, self.y_true, self.y_pred, self.fold,
                                          self.class_true, self.class_pred):
            yield [pid, float(yt), float(yp), int(f), ct.label, cp.label]

    CSV_HEADER = ("id", "y_true", "y_pred", "fold", "class_true", "class_pred")

    def subset(self, mask) -> "PredictionSet":
        mask = np.asarray(mask, dtype=bool)
        return PredictionSet([i for i, m in zip(self.ids, mask) if m], self.y_true[mask],
                             self.y_pred[mask], self.fold[mask], self.thresholds)


@dataclass
class ModelBundle:
    """Everything needed to score new participants without refitting."""

    feature_set: FeatureSetSpec
    window: int
    standardizer: StandardizerParams
    booster: GbmModel
    autoencoder: Optional[Autoencoder] = None
    thresholds: IrThresholds = IrThresholds()
    model: str = "tree_direct"

    @property
    def input_columns(self) -> List[str]:
        return list(self.standardizer.input_columns)

    @property
    def required_columns(self) -> List[str]:
        return list(self.standardizer.columns)

    def to_dict(self) -> dict:
        return {
            "format": BUNDLE_FORMAT,
            "version": BUNDLE_VERSION,
            "model": self.model,
            "feature_set": self.feature_set.to_dict(),
            "window": self.window,
            "thresholds": {"is_upper": self.thresholds.is_upper,
                           "ir_lower": self.thresholds.ir_lower},
            "standardizer": self.standardizer.to_dict(),
            "booster": self.booster.to_dict(),
            "autoencoder": self.autoencoder.to_dict() if self.autoencoder else None,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelBundle":
        if d.get("format") != BUNDLE_FORMAT or d.get("version") != BUNDLE_VERSION:
            raise ValueError("not a supported model bundle")
        ae = d.get("autoencoder")
        return cls(feature_set=FeatureSetSpec.from_dict(d["feature_set"]), window=d["window"],
                   standardizer=StandardizerParams.from_dict(d["standardizer"]),
                   booster=GbmModel.from_dict(d["booster"]),
                   autoencoder=Autoencoder.from_dict(ae) if ae else None,
                   thresholds=IrThresholds(**d["thresholds"]), model=d.get("model", ""))

    def transform(self, X_raw, columns: Optional[Sequence[str]] = None) -> np.ndarray:
        """Standardize (and encode) raw feature rows into booster inputs."""
        Z = apply_standardizer(self.standardizer, X_raw, columns)
        if self.autoencoder is not None:
            Z = encode(self.autoencoder, Z)
        return Z

    def predict_raw(self, X_raw, columns: Optional[Sequence[str]] = None) -> np.ndarray:
        return gbm_predict(self.booster, self.transform(X_raw, columns))

    def predict_features(self, rows: Sequence[Dict[str, float]]) -> np.ndarray:
        """Predict from named feature maps; extra keys are ignored."""
        need = self.required_columns
        X = np.zeros((len(rows), len(need)))
        for i, row in enumerate(rows):
            missing = [c for c in need if c not in row or row[c] is None]
            if missing:
                raise MissingFeature(f"row {i} lacks required columns {missing}")
            X[i] = [float(row[c]) for c in need]
        return self.predict_raw(X, need)

    def feature_matrix(self, records: Sequence[ParticipantRecord], window_end=None,
                       n_days: Optional[int] = None) -> np.ndarray:
        n_days = n_days or self.window
        rows = []
        for rec in records:
            try:
                rows.append(feature_row(rec, self.feature_set, n_days, window_end,
                                        strict_window=False))
            except MissingFeature as exc:
                raise MissingFeature(f"{exc}; the model needs columns {self.required_columns}")
        return np.vstack(rows) if rows else np.zeros((0, len(self.input_columns)))


@dataclass
class FoldResult:
    fold: int
    seed: int
    test_ids: List[str]
    bundle: ModelBundle
    metrics: dict


@dataclass
class ExperimentResult:
    spec: ExperimentSpec
    predictions: PredictionSet
    folds: List[FoldResult]
    design_dropped: Dict[str, str]
    strata: Dict[str, Dict[str, str]] = field(default_factory=dict)

    def bundle_for(self, pid: str) -> ModelBundle:
        """The fold model in which ``pid`` was held out."""
        for f in self.folds:
            if pid in f.test_ids:
                return f.bundle
        raise KeyError(pid)


def _fold_seed(spec: ExperimentSpec, fold: int) -> int:
    return spec.seeds[fold % len(spec.seeds)]


def _latent_dim(spec: ExperimentSpec, d: int) -> int:
    if d < 2:
        raise ValueError("a representation model needs at least two standardized columns")
    z = spec.latent_dim if spec.latent_dim is not None else max(1, d // 2)
    return min(z, d - 1)


def _candidates(grid: Dict[str, list], max_candidates: int, seed: int) -> List[dict]:
    keys = sorted(grid)
    combos = [dict(zip(keys, vals)) for vals in itertools.product(*(grid[k] for k in keys))]
    if len(combos) > max_candidates:
        rng = np.random.default_rng(seed)
        pick = np.sort(rng.choice(len(combos), max_candidates, replace=False))
        combos = [combos[i] for i in pick]
    return combos


def tune_hyperparameters(X, y, base: GbmParams, grid: Dict[str, list], n_folds: int = 3,
                         seed: int = 0, max_candidates: int = 20) -> GbmParams:
    """Pick the grid point with the lowest inner-CV mean squared error.

    Only the rows passed in are used, so calling this on a training fold keeps
    the search nested. Larger grids are subsampled deterministically.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    ids = [str(i) for i in range(len(y))]
    folds = make_folds(ids, min(n_folds, len(y)), seed)
    fold_of = np.array([folds.assignment[i] for i in ids])
    best, best_mse = base, np.inf
    for cand in _candidates(grid, max_candidates, seed):
        params = replace(base, **cand)
        sq = 0.0
        for f in range(folds.k):
            test = fold_of == f
            model = fit_gbm(X[~test], y[~test], params)
            sq += float(np.sum((gbm_predict(model, X[test]) - y[test]) ** 2))
        if sq < best_mse:
            best, best_mse = params, sq
    return best


def fit_bundle(dm: DesignMatrix, train_idx, spec: ExperimentSpec, seed: int) -> ModelBundle:
    """Fit standardizer, optional autoencoder and booster on the given rows only."""
    Xtr, ytr = dm.X[train_idx], dm.y[train_idx]
    std = fit_standardizer(Xtr, dm.columns)
    Z = apply_standardizer(std, Xtr, dm.columns)
    ae = None
    cols = list(std.columns)
    if spec.is_representation:
        d = Z.shape[1]
        mlp = MlpSpec(d, _latent_dim(spec, d), seed=seed)
        ae = train_autoencoder(Z, mlp, replace(spec.ae_config, seed=seed))
        Z = encode(ae, Z)
        cols = [f"z{j}" for j in range(Z.shape[1])]
    params = replace(spec.params, random_state=seed)
    if spec.tune:
        grid = TREE_GRID if params.booster == "tree" else LINEAR_GRID
        params = tune_hyperparameters(Z, ytr, params, grid, seed=seed,
                                      max_candidates=spec.tune_max_candidates)
    booster = fit_gbm(Z, ytr, params, cols)
    return ModelBundle(spec.feature_set, spec.window, std, booster, ae, spec.thresholds,
                       spec.model)


def participant_strata(records: Sequence[ParticipantRecord], n_days: int
                       ) -> Dict[str, Dict[str, str]]:
    """BMI class and activity class (median steps over the window) per participant."""
    out = {}
    for rec in records:
        steps = None
        if rec.labs is not None:
            try:
                agg = aggregate_wearables_window(
                    rec.wearables, AggregationWindow(n_days, rec.anchor, strict=False), ("steps",))
                steps = agg["steps_median"]
            except MissingFeature:
                pass
        b, a = derive_strata(rec.demographics, steps)
        out[rec.pid] = {"bmi_class": b.value, "activity_class": a.value}
    return out


def run_experiment(records: Sequence[ParticipantRecord], spec: ExperimentSpec,
                   split_seed: Optional[int] = None, design: Optional[DesignMatrix] = None
                   ) -> ExperimentResult:
    """Cross-validate one spec and pool the held-out predictions.

    ``split_seed`` defaults to the first seed; fold f trains with seed
    ``seeds[f % len(seeds)]``.
    """
    dm = design if design is not None else build_design_matrix(records, spec.feature_set,
                                                              spec.window)
    n = len(dm)
    k = n if spec.cv == "loocv" else 5
    seed = spec.seeds[0] if split_seed is None else split_seed
    strata = None
    if spec.stratified_folds:
        strata = [int(classify_ir(v, spec.thresholds)) for v in dm.y]
    folds = make_folds(dm.ids, k, seed, strata)
    fold_of = np.array([folds.assignment[i] for i in dm.ids])
    y_pred = np.full(n, np.nan)
    results = []
    for f in range(k):
        test = np.flatnonzero(fold_of == f)
        train = np.flatnonzero(fold_of != f)
        fs = _fold_seed(spec, f)
        bundle = fit_bundle(dm, train, spec, fs)
        y_pred[test] = bundle.predict_raw(dm.X[test], dm.columns)
        block = evaluate_block(dm.y[test], y_pred[test], spec.thresholds) if spec.cv == "kfold5" \
            else {}
        results.append(FoldResult(f, fs, [dm.ids[i] for i in test], bundle, block))
    preds = PredictionSet(list(dm.ids), dm.y.copy(), y_pred, fold_of, spec.thresholds)
    by_id = {r.pid: r for r in records}
    strata_map = participant_strata([by_id[i] for i in dm.ids], spec.window)
    return ExperimentResult(spec, preds, results, dict(dm.dropped), strata_map)


def _stratified_metrics(result: ExperimentResult) -> dict:
    out = {}
    p = result.predictions
    for key in ("bmi_class", "activity_class"):
        labels = [result.strata[i][key] for i in p.ids]
        groups = {}
        for lab in sorted(set(labels)):
            mask = np.array([x == lab for x in labels])
            sub = p.subset(mask)
            block = evaluate_block(sub.y_true, sub.y_pred, p.thresholds) if len(sub) > 1 else \
                {"n": len(sub)}
            groups[lab] = block
        out[key] = groups
    return out


def evaluation_report(result: ExperimentResult) -> dict:
    """JSON-ready report: pooled metrics, per-fold metrics and their summary."""
    spec = result.spec
    p = result.predictions
    report = {
        "spec": spec.to_dict(),
        "name": spec.name,
        "n": len(p),
        "n_dropped": len(result.design_dropped),
        "pooled": evaluate_block(p.y_true, p.y_pred, spec.thresholds),
        "correct_ir": p.true_positive_ir(),
        "stratified": _stratified_metrics(result),
    }
    if spec.cv == "kfold5":
        report["folds"] = [dict(fr.metrics, fold=fr.fold, seed=fr.seed) for fr in result.folds]
        report["fold_summary"] = summarize_folds([fr.metrics for fr in result.folds])
    return report


def fit_final_bundle(records: Sequence[ParticipantRecord], spec: ExperimentSpec) -> ModelBundle:
    """Train on every participant (for external validation or the tools layer)."""
    dm = build_design_matrix(records, spec.feature_set, spec.window)
    return fit_bundle(dm, np.arange(len(dm)), spec, spec.seeds[0])


def predict_and_classify(bundle: ModelBundle, records: Sequence[ParticipantRecord]
                         ) -> PredictionSet:
    """Score a new cohort with a frozen bundle; the stored standardizer is reused."""
    X = bundle.feature_matrix(records)
    y_pred = bundle.predict_raw(X, bundle.input_columns)
    y_true = np.array([r.homa_ir if r.homa_ir is not None else np.nan for r in records])
    return PredictionSet([r.pid for r in records], y_true, y_pred,
                         np.full(len(records), -1), bundle.thresholds)


@dataclass
class GridCell:
    spec: ExperimentSpec
    report: Optional[dict] = None
    predictions: Optional[PredictionSet] = None
    error: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.error is None


def expand_grid(feature_sets: Sequence, windows: Sequence[int], models: Sequence[str],
                cvs: Sequence[str] = ("kfold5",), **kwargs) -> List[ExperimentSpec]:
    """Cartesian product in a fixed order; invalid combinations are skipped."""
    specs = []
    for fs, w, m, cv in itertools.product(feature_sets, windows, models, cvs):
        if cv == "loocv" and m in ("ae_then_linear", "mae_then_linear"):
            continue
        specs.append(ExperimentSpec(resolve_feature_set(fs), w, m, cv, **kwargs))
    return specs


def _run_cell(records, spec, split_seed):
    try:
        result = run_experiment(records, spec, split_seed)
        return GridCell(spec, evaluation_report(result), result.predictions)
    except Exception as exc:  # one failing cell must not stop the grid
        logger.warning("grid cell %s failed: %s", spec.name, exc)
        return GridCell(spec, error=f"{type(exc).__name__}: {exc}")


def run_experiment_grid(records: Sequence[ParticipantRecord], specs: Sequence[ExperimentSpec],
                        workers: int = 1, split_seed: Optional[int] = None) -> List[GridCell]:
    """One cell per spec, returned in spec order whatever the worker count."""
    if workers <= 1 or len(specs) <= 1:
        return [_run_cell(records, s, split_seed) for s in specs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(_run_cell, list(records), s, split_seed) for s in specs]
        return [f.result() for f in futures]


def compare_cells(cells: Sequence[GridCell], reference: int = 0) -> List[dict]:
    """Each successful cell against a reference cell.

    Per-fold R2 goes through a Wilcoxon rank-sum test, the per-participant
    IR/non-IR correctness through McNemar on shared participants; both sets
    of p-values are BH-adjusted across the comparisons.
    """
    ref = cells[reference]
    if not ref.ok:
        raise ValueError("reference cell failed")
    rows = []
    for i, cell in enumerate(cells):
        if i == reference or not cell.ok:
            continue
        row = {"reference": ref.spec.name, "other": cell.spec.name}
        fa = [b["r2"] for b in ref.report.get("folds", [])]
        fb = [b["r2"] for b in cell.report.get("folds", [])]
        if fa and fb:
            row["wilcoxon_r2"] = wilcoxon_rank_sum(fb, fa).to_dict()
        pa, pb = ref.predictions, cell.predictions
        shared = sorted(set(pa.ids) & set(pb.ids))
        ia = {pid: j for j, pid in enumerate(pa.ids)}
        ib = {pid: j for j, pid in enumerate(pb.ids)}
        ca = pa.correct_ir()[[ia[s] for s in shared]]
        cb = pb.correct_ir()[[ib[s] for s in shared]]
        row["mcnemar_ir"] = mcnemar_paired(cb, ca).to_dict()
        row["n_shared"] = len(shared)
        rows.append(row)
    for key in ("wilcoxon_r2", "mcnemar_ir"):
        idx = [j for j, r in enumerate(rows) if key in r]
        adj = benjamini_hochberg([rows[j][key]["p_value"] for j in idx])
        for j, a in zip(idx, adj):
            rows[j][key]["p_adjusted"] = float(a)
    return rows
