"""Deterministic tool layer: JSON request in, JSON response out, never an exception.

Request:  {"tool": name, "args": {...}, "id": optional echo value}
Response: {"ok": true, "tool": name, "result": {...}, "elapsed_ms": t}
          {"ok": false, "tool": name or null, "error": {"code", "message"}, "elapsed_ms": t}
"""

from __future__ import annotations

import json
import logging
import math
import sys
import time
from pathlib import Path
from typing import Callable, Dict, Optional

from .domain import DomainError, classify_ir, compute_homa_ir
from .featureset import MissingFeature
from .pipeline import ModelBundle
from .serialize import read_json, to_jsonable

logger = logging.getLogger(__name__)

PREDICT_TOOLS = {
    "predict_demographics_only": "demographics",
    "predict_wearables_demographics": "wearables_demographics",
    "predict_wearables_demographics_glucose": "wearables_demographics_glucose",
    "predict_wearables_demographics_lipid_metabolic": "wearables_demographics_lipid_metabolic",
}


class ToolError(Exception):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code
        self.message = message


def _number(args: dict, name: str) -> float:
    if name not in args:
        raise ToolError("missing_argument", f"missing argument {name!r}")
    v = args[name]
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ToolError("invalid_argument", f"argument {name!r} must be a number")
    v = float(v)
    if not math.isfinite(v):
        raise ToolError("invalid_argument", f"argument {name!r} must be finite")
    return v


def _only(args: dict, allowed) -> None:
    extra = sorted(set(args) - set(allowed))
    if extra:
        raise ToolError("unknown_argument", f"unexpected arguments {extra}")


def homa_ir_calculator(args: dict, ctx) -> dict:
    _only(args, ("insulin", "glucose"))
    insulin, glucose = _number(args, "insulin"), _number(args, "glucose")
    try:
        v = compute_homa_ir(insulin, glucose)
    except DomainError as exc:
        raise ToolError("invalid_argument", str(exc))
    return {"homa_ir": v, "ir_class": classify_ir(v, ctx.thresholds).label}


def comparison_arithmetic(args: dict, ctx) -> dict:
    """Relative difference of b with respect to a: (b - a) / a."""
    _only(args, ("a", "b"))
    a, b = _number(args, "a"), _number(args, "b")
    if a == 0:
        raise ToolError("invalid_argument", "relative difference is undefined for a = 0")
    return {"relative_difference": (b - a) / a, "difference": b - a}


def percent_change(args: dict, ctx) -> dict:
    _only(args, ("old", "new"))
    old, new = _number(args, "old"), _number(args, "new")
    if old == 0:
        raise ToolError("invalid_argument", "percent change is undefined for old = 0")
    return {"percent_change": 100.0 * (new - old) / old}


def _predictor(tool: str) -> Callable:
    def run(args: dict, ctx) -> dict:
        _only(args, ("features",))
        feats = args.get("features")
        if not isinstance(feats, dict):
            raise ToolError("missing_argument" if feats is None else "invalid_argument",
                            "argument 'features' must be an object of column -> number")
        bundle = ctx.bundles.get(tool)
        if bundle is None:
            raise ToolError("model_unavailable", f"no frozen model loaded for {tool}")
        row = {}
        for k, v in feats.items():
            if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
                raise ToolError("invalid_argument", f"feature {k!r} must be a finite number")
            row[k] = float(v)
        try:
            y = float(bundle.predict_features([row])[0])
        except MissingFeature as exc:
            raise ToolError("missing_feature", str(exc))
        return {"homa_ir": y, "ir_class": classify_ir(y, bundle.thresholds).label,
                "feature_set": bundle.feature_set.name, "window_days": bundle.window}
    return run


TOOLS: Dict[str, Callable] = {
    "homa_ir_calculator": homa_ir_calculator,
    "comparison_arithmetic": comparison_arithmetic,
    "percent_change": percent_change,
    **{name: _predictor(name) for name in PREDICT_TOOLS},
}


class ToolContext:
    def __init__(self, bundles: Optional[Dict[str, ModelBundle]] = None, thresholds=None):
        from .domain import IrThresholds

        self.bundles = dict(bundles or {})
        self.thresholds = thresholds or IrThresholds()

    @classmethod
    def from_dir(cls, models_dir) -> "ToolContext":
        """Load ``<feature set name>.json`` bundles for each predict tool that has one."""
        bundles = {}
        d = Path(models_dir) if models_dir else None
        for tool, fs in PREDICT_TOOLS.items():
            path = d / f"{fs}.json" if d else None
            if path is not None and path.exists():
                bundles[tool] = ModelBundle.from_dict(read_json(path))
        return cls(bundles)


def _error(tool, code, message, start, timed):
    out = {"ok": False, "tool": tool, "error": {"code": code, "message": message}}
    if timed:
        out["elapsed_ms"] = (time.perf_counter() - start) * 1000.0
    return out


def dispatch(request, ctx: ToolContext, timed: bool = True) -> dict:
    """Validate and run one request. Any failure becomes a structured error."""
    start = time.perf_counter()
    tool = None
    try:
        if not isinstance(request, dict):
            return _error(None, "invalid_request", "request must be a JSON object", start, timed)
        extra = sorted(set(request) - {"tool", "args", "id"})
        if extra:
            return _error(None, "invalid_request", f"unexpected request keys {extra}", start, timed)
        tool = request.get("tool")
        if not isinstance(tool, str):
            return _error(None, "invalid_request", "'tool' must be a string", start, timed)
        if tool not in TOOLS:
            return _error(tool, "unknown_tool", f"unknown tool {tool!r}; known: {sorted(TOOLS)}",
                          start, timed)
        args = request.get("args", {})
        if not isinstance(args, dict):
            return _error(tool, "invalid_request", "'args' must be an object", start, timed)
        result = to_jsonable(TOOLS[tool](args, ctx))
        out = {"ok": True, "tool": tool, "result": result}
        if timed:
            out["elapsed_ms"] = (time.perf_counter() - start) * 1000.0
    except ToolError as exc:
        out = _error(tool, exc.code, exc.message, start, timed)
    except Exception as exc:  # the protocol must never crash
        logger.exception("tool %s failed", tool)
        out = _error(tool if isinstance(tool, str) else None, "internal_error",
                     f"{type(exc).__name__}: {exc}", start, timed)
    if isinstance(request, dict) and "id" in request:
        out["id"] = to_jsonable(request["id"]) if _json_safe(request["id"]) else None
    return out


def _json_safe(v) -> bool:
    try:
        json.dumps(v, allow_nan=False)
        return True
    except (TypeError, ValueError):
        return False


def handle_line(line: str, ctx: ToolContext, timed: bool = True) -> str:
    start = time.perf_counter()
    try:
        req = json.loads(line)
    except (ValueError, RecursionError) as exc:
        resp = _error(None, "invalid_json", f"could not parse request: {exc}", start, timed)
    else:
        resp = dispatch(req, ctx, timed)
    return json.dumps(resp, sort_keys=True, allow_nan=False)


def serve(ctx: ToolContext, stdin=None, stdout=None, timed: bool = True) -> int:
    """Serial request/response over line-delimited JSON; returns requests handled."""
    stdin = stdin or sys.stdin
    stdout = stdout or sys.stdout
    count = 0
    for line in stdin:
        if not line.strip():
            continue
        stdout.write(handle_line(line, ctx, timed) + "\n")
        stdout.flush()
        count += 1
    return count
