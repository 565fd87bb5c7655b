"""Command-line entry point: irscreen <command> [--config run.json] [options].

Every command validates the config first, writes its outputs under the output
directory and exits non-zero with one JSON error line on stderr on failure.
Timestamps go only to ``metadata/<command>.json`` so the other outputs are
byte-identical across reruns.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field, fields, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import __version__
from .autoencoder import MaeTrainConfig
from .domain import IrThresholds
from .explain import importance_summary, sankey_triples, shap_matrix
from .featureset import REGISTRY, build_design_matrix
from .gbm import GbmParams
from .ingestion import CohortFiles, QcConfig, apply_quality_control, load_cohort
from .metrics import ranking_curves
from .pipeline import (
    CV_SCHEMES,
    DEFAULT_SEEDS,
    MODELS,
    ExperimentSpec,
    PredictionSet,
    compare_cells,
    default_params,
    evaluation_report,
    expand_grid,
    fit_final_bundle,
    run_experiment,
    run_experiment_grid,
)
from .robustness import SWEEP_WINDOWS, WindowSweep, robustness_analysis
from .serialize import read_json, write_csv, write_json
from .synthcohort import (
    CohortCalibration,
    FunctionalSpec,
    generate_functional_cohort,
    generate_synthetic_cohort,
)
from .tools import PREDICT_TOOLS, ToolContext, serve

logger = logging.getLogger("irscreen")

OUTPUT_ENV = "IRSCREEN_OUTPUT_DIR"
DEFAULT_OUTPUT = "irscreen_out"


class ConfigError(ValueError):
    pass


SYNTH_KEYS = {"kind", "n", "seed", "sigma", "jitter_scale", "span_days", "missing_rate",
              "qc_violations", "calibration"}


@dataclass
class RunConfig:
    cohort_dir: Optional[str] = None  # default: <output_dir>/cohort
    output_dir: str = DEFAULT_OUTPUT
    feature_sets: List[str] = field(default_factory=lambda: ["wearables_demographics"])
    windows: List[int] = field(default_factory=lambda: [30])
    models: List[str] = field(default_factory=lambda: ["tree_direct"])
    cv: List[str] = field(default_factory=lambda: ["kfold5"])
    seeds: List[int] = field(default_factory=lambda: list(DEFAULT_SEEDS))
    thresholds: Dict[str, float] = field(default_factory=lambda: {"is_upper": 1.5,
                                                                  "ir_lower": 2.9})
    params: Dict[str, dict] = field(default_factory=dict)  # "tree" / "linear" overrides
    autoencoder: Dict[str, object] = field(default_factory=dict)
    latent_dim: Optional[int] = None
    qc: Dict[str, float] = field(default_factory=dict)
    robustness_windows: List[int] = field(default_factory=lambda: list(SWEEP_WINDOWS))
    workers: int = 1
    stratified_folds: bool = False
    tune: bool = False
    synth: Dict[str, object] = field(default_factory=dict)
    tool_feature_sets: List[str] = field(default_factory=lambda: list(PREDICT_TOOLS.values()))
    explain_max_rows: int = 200

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys {unknown}")
        cfg = cls(**d)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        for fs in self.feature_sets + self.tool_feature_sets:
            if fs not in REGISTRY:
                raise ConfigError(f"unknown feature set {fs!r}; known: {sorted(REGISTRY)}")
        for m in self.models:
            if m not in MODELS:
                raise ConfigError(f"unknown model {m!r}; choose from {list(MODELS)}")
        for c in self.cv:
            if c not in CV_SCHEMES:
                raise ConfigError(f"unknown cv {c!r}; choose from {list(CV_SCHEMES)}")
        for w in self.windows + self.robustness_windows:
            if not isinstance(w, int) or isinstance(w, bool) or w < 1:
                raise ConfigError(f"window lengths must be positive integers, got {w!r}")
        if not self.feature_sets or not self.windows or not self.models or not self.cv:
            raise ConfigError("feature_sets, windows, models and cv must be non-empty")
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        unknown = sorted(set(self.params) - {"tree", "linear"})
        if unknown:
            raise ConfigError(f"params keys must be 'tree' or 'linear', got {unknown}")
        unknown = sorted(set(self.synth) - SYNTH_KEYS)
        if unknown:
            raise ConfigError(f"unknown synth keys {unknown}")
        ae_fields = {f.name for f in fields(MaeTrainConfig)}
        unknown = sorted(set(self.autoencoder) - ae_fields)
        if unknown:
            raise ConfigError(f"unknown autoencoder keys {unknown}")
        qc_fields = {f.name for f in fields(QcConfig)}
        unknown = sorted(set(self.qc) - qc_fields)
        if unknown:
            raise ConfigError(f"unknown qc keys {unknown}")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        try:
            self.threshold_obj()
            for booster, over in self.params.items():
                GbmParams(booster=booster, **over)
            for spec in self.specs():
                pass
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc))

    def threshold_obj(self) -> IrThresholds:
        return IrThresholds(**self.thresholds)

    @property
    def out(self) -> Path:
        return Path(os.environ.get(OUTPUT_ENV) or self.output_dir)

    @property
    def cohort(self) -> Path:
        return Path(self.cohort_dir) if self.cohort_dir else self.out / "cohort"

    def _spec_kwargs(self, model: str) -> dict:
        base = default_params(model)
        over = self.params.get(base.booster, {})
        kw = {"seeds": tuple(self.seeds), "thresholds": self.threshold_obj(),
              "params": replace(base, **over), "latent_dim": self.latent_dim,
              "stratified_folds": self.stratified_folds, "tune": self.tune}
        if model in ("ae_then_linear", "mae_then_linear"):
            mask = 0.75 if model == "mae_then_linear" else 0.0
            ae = dict(self.autoencoder)
            if model == "ae_then_linear":
                ae["mask_prob"] = 0.0
            kw["ae_config"] = MaeTrainConfig(**{"mask_prob": mask, **ae})
        return kw

    def specs(self) -> List[ExperimentSpec]:
        out = []
        for fs in self.feature_sets:
            for w in self.windows:
                for m in self.models:
                    out += expand_grid([fs], [w], [m], self.cv, **self._spec_kwargs(m))
        return out


def load_config(path: Optional[str]) -> RunConfig:
    if not path:
        cfg = RunConfig()
        cfg.validate()
        return cfg
    try:
        data = read_json(path)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}")
    return RunConfig.from_dict(data)


def _metadata(cfg: RunConfig, command: str, extra: Optional[dict] = None) -> None:
    meta = {"command": command, "version": __version__,
            "created_at": datetime.now(timezone.utc).isoformat()}
    meta.update(extra or {})
    write_json(cfg.out / "metadata" / f"{command}.json", meta)


def _load(cfg: RunConfig):
    files = CohortFiles.in_dir(cfg.cohort)
    for p in (files.participants_path, files.wearables_path, files.labs_path):
        if not p.exists():
            raise FileNotFoundError(f"cohort file {p} not found (run `synth` or set cohort_dir)")
    records = load_cohort(files)
    kept, report = apply_quality_control(records, QcConfig(**cfg.qc))
    return records, kept, report


def cmd_synth(cfg: RunConfig, args) -> dict:
    s = dict(cfg.synth)
    for key in ("n", "seed", "kind"):
        v = getattr(args, key, None)
        if v is not None:
            s[key] = v
    out_dir = Path(args.out) if args.out else cfg.cohort
    kind = s.get("kind", "calibrated")
    n, seed = int(s.get("n", 1000)), int(s.get("seed", 0))
    violations = s.get("qc_violations")
    if kind == "calibrated":
        cal = CohortCalibration.from_dict(s["calibration"]) if s.get("calibration") \
            else CohortCalibration()
        generate_synthetic_cohort(n, cal, seed, out_dir, int(s.get("span_days", 120)),
                                  float(s.get("missing_rate", 0.05)),
                                  float(s.get("jitter_scale", 1.0)), violations)
    elif kind == "functional":
        spec = FunctionalSpec(sigma=float(s.get("sigma", 0.3)),
                              jitter_scale=float(s.get("jitter_scale", 1.0)),
                              span_days=int(s.get("span_days", 120)),
                              missing_rate=float(s.get("missing_rate", 0.05)))
        generate_functional_cohort(n, spec, seed, out_dir, violations)
    else:
        raise ConfigError(f"synth kind must be 'calibrated' or 'functional', got {kind!r}")
    return {"cohort_dir": str(out_dir), "n": n, "seed": seed, "kind": kind}


def cmd_ingest(cfg: RunConfig, args) -> dict:
    records = load_cohort(CohortFiles.in_dir(cfg.cohort))
    summary = {
        "participants": len(records),
        "with_labs": sum(r.labs is not None for r in records),
        "wearable_days": sum(len(r.wearables) for r in records),
    }
    write_json(cfg.out / "ingest_summary.json", summary)
    return summary


def cmd_qc(cfg: RunConfig, args) -> dict:
    _, _, report = _load(cfg)
    write_json(cfg.out / "qc_report.json", report.to_dict())
    return {"input_n": report.input_n, "retained_n": report.retained_n}


def _write_cell(cfg: RunConfig, name: str, report: dict, preds: PredictionSet) -> None:
    write_json(cfg.out / "reports" / f"{name}.json", report)
    write_csv(cfg.out / "predictions" / f"{name}.csv", PredictionSet.CSV_HEADER, preds.rows())
    labels = preds.y_true >= preds.thresholds.ir_lower
    if labels.any() and not labels.all():  # curves need both classes
        rk = ranking_curves(preds.y_pred, labels)
        write_csv(cfg.out / "curves" / f"{name}_roc.csv", ["fpr", "tpr"], zip(rk.fpr, rk.tpr))
        write_csv(cfg.out / "curves" / f"{name}_pr.csv", ["recall", "precision"],
                  zip(rk.recall, rk.precision))


def cmd_run(cfg: RunConfig, args) -> dict:
    _, kept, _ = _load(cfg)
    specs = cfg.specs()
    spec = specs[args.spec]
    result = run_experiment(kept, spec)
    report = evaluation_report(result)
    _write_cell(cfg, spec.name, report, result.predictions)
    bundle = fit_final_bundle(kept, spec)
    write_json(cfg.out / "bundles" / f"{spec.name}.json", bundle.to_dict())
    if bundle.autoencoder is not None:  # latent coordinates for external plotting
        dm = build_design_matrix(kept, spec.feature_set, spec.window)
        Z = bundle.transform(dm.X, dm.columns)
        write_csv(cfg.out / "embeddings" / f"{spec.name}.csv",
                  ["id", "homa_ir"] + [f"z{j}" for j in range(Z.shape[1])],
                  ([pid, float(y)] + [float(v) for v in z] for pid, y, z in zip(dm.ids, dm.y, Z)))
    return {"spec": spec.name, "r2": report["pooled"]["r2"]}


def cmd_grid(cfg: RunConfig, args) -> dict:
    _, kept, _ = _load(cfg)
    specs = cfg.specs()
    cells = run_experiment_grid(kept, specs, workers=args.workers or cfg.workers)
    summary = []
    for cell in cells:
        if cell.ok:
            _write_cell(cfg, cell.spec.name, cell.report, cell.predictions)
            summary.append({"spec": cell.spec.name, "ok": True,
                            "r2": cell.report["pooled"]["r2"],
                            "auroc": cell.report["pooled"]["auroc"]})
        else:
            summary.append({"spec": cell.spec.name, "ok": False, "error": cell.error})
    write_json(cfg.out / "grid_summary.json", summary)
    if sum(c.ok for c in cells) > 1 and cells[0].ok:
        write_json(cfg.out / "comparisons.json", compare_cells(cells))
    return {"cells": len(cells), "failed": sum(not c.ok for c in cells)}


def cmd_robustness(cfg: RunConfig, args) -> dict:
    _, kept, _ = _load(cfg)
    spec = cfg.specs()[args.spec]
    result = run_experiment(kept, spec)
    by_id = {r.pid: r for r in kept}
    records = [by_id[i] for i in result.predictions.ids]
    summaries = robustness_analysis(records, result.bundle_for, cfg.robustness_windows)
    write_json(cfg.out / "robustness" / f"{spec.name}.json",
               {"spec": spec.name, "windows": [s.to_dict() for s in summaries]})
    write_csv(cfg.out / "robustness" / f"{spec.name}_sweeps.csv", WindowSweep.CSV_HEADER,
              (row for s in summaries for sw in s.sweeps for row in sw.rows()))
    return {"spec": spec.name, "median_cv": {s.n_days: s.median_cv for s in summaries}}


def cmd_explain(cfg: RunConfig, args) -> dict:
    _, kept, _ = _load(cfg)
    spec = cfg.specs()[args.spec]
    bundle = fit_final_bundle(kept, spec)
    dm = build_design_matrix(kept, spec.feature_set, spec.window)
    Z = bundle.transform(dm.X, dm.columns)[: cfg.explain_max_rows]
    background = np.zeros(Z.shape[1]) if bundle.autoencoder is None else \
        bundle.transform(dm.X, dm.columns).mean(axis=0)
    base, S = shap_matrix(bundle.booster, Z, background)
    cols = bundle.booster.columns
    summary = importance_summary(S, cols)
    ids = dm.ids[: cfg.explain_max_rows]
    write_csv(cfg.out / "shap" / f"{spec.name}.csv", ["id", "base_value"] + cols,
              ([pid, float(b)] + [float(v) for v in row] for pid, b, row in zip(ids, base, S)))
    write_csv(cfg.out / "shap" / f"{spec.name}_importance.csv",
              ["feature", "mean_abs_shap", "rank"],
              ([r["feature"], r["mean_abs_shap"], r["rank"]] for r in summary.to_rows()))
    write_json(cfg.out / "shap" / f"{spec.name}_importance.json",
               {"importance": summary.to_rows(), "sankey": sankey_triples(spec.name, summary)})
    return {"spec": spec.name, "top": summary.ranking[:5]}


def cmd_tools(cfg: RunConfig, args) -> dict:
    models_dir = Path(args.models) if args.models else cfg.out / "models"
    if args.fit:
        _, kept, _ = _load(cfg)
        spec_kw = cfg._spec_kwargs("tree_direct")
        for fs in cfg.tool_feature_sets:
            spec = ExperimentSpec(fs, cfg.windows[0], "tree_direct", **spec_kw)
            write_json(models_dir / f"{fs}.json", fit_final_bundle(kept, spec).to_dict())
        return {"models_dir": str(models_dir), "fitted": list(cfg.tool_feature_sets)}
    ctx = ToolContext.from_dir(models_dir)
    ctx.thresholds = cfg.threshold_obj()
    n = serve(ctx, timed=not args.no_timing)
    return {"requests": n}


def cmd_report(cfg: RunConfig, args) -> dict:
    rows = []
    for path in sorted((cfg.out / "reports").glob("*.json")):
        rep = read_json(path)
        pooled = rep["pooled"]
        rows.append([rep["name"], rep["n"]] + [pooled.get(k) for k in
                                               ("r2", "mae", "mse", "sensitivity", "specificity",
                                                "adjusted_specificity", "auroc", "auprc")]
                    + [rep.get("correct_ir")])
    header = ["spec", "n", "r2", "mae", "mse", "sensitivity", "specificity",
              "adjusted_specificity", "auroc", "auprc", "correct_ir"]
    write_csv(cfg.out / "report.csv", header, rows)
    write_json(cfg.out / "report.json", [dict(zip(header, r)) for r in rows])
    return {"specs": len(rows)}


COMMANDS = {
    "synth": cmd_synth, "ingest": cmd_ingest, "qc": cmd_qc, "run": cmd_run, "grid": cmd_grid,
    "robustness": cmd_robustness, "explain": cmd_explain, "tools": cmd_tools,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="irscreen", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="RunConfig JSON file")
        sp.add_argument("--output-dir", help=f"output directory (env {OUTPUT_ENV} wins)")
        sp.add_argument("-v", "--verbose", action="store_true")
        if name == "synth":
            sp.add_argument("--n", type=int)
            sp.add_argument("--seed", type=int)
            sp.add_argument("--kind", choices=["calibrated", "functional"])
            sp.add_argument("--out", help="cohort directory (default <output>/cohort)")
        if name in ("run", "robustness", "explain"):
            sp.add_argument("--spec", type=int, default=0, help="index into the expanded grid")
        if name == "grid":
            sp.add_argument("--workers", type=int)
        if name == "tools":
            sp.add_argument("--stdin", action="store_true", help="serve JSON lines (default)")
            sp.add_argument("--models", help="directory of frozen bundles")
            sp.add_argument("--fit", action="store_true", help="fit tool bundles and exit")
            sp.add_argument("--no-timing", action="store_true", help="omit elapsed_ms")
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if args.output_dir:
            cfg.output_dir = args.output_dir
        summary = COMMANDS[args.command](cfg, args)
        _metadata(cfg, args.command, {"summary": summary})
        if args.command != "tools" or args.fit:
            print(json.dumps({"ok": True, "command": args.command, "summary": summary},
                             sort_keys=True, default=str))
        return 0
    except Exception as exc:
        err = {"ok": False, "command": args.command, "type": type(exc).__name__,
               "message": str(exc).replace("\n", " ")}
        print(json.dumps(err, sort_keys=True), file=sys.stderr)
        return 2 if isinstance(exc, ConfigError) else 1


if __name__ == "__main__":
    sys.exit(main())
