import io
import json

import pytest

from irscreen.pipeline import ExperimentSpec, fit_final_bundle
from irscreen.serialize import write_json
from irscreen.tools import PREDICT_TOOLS, ToolContext, dispatch, handle_line, serve
from fuzz import malformed_lines


@pytest.fixture(scope="module")
def ctx(functional_records, tmp_path_factory):
    d = tmp_path_factory.mktemp("models")
    for fs in PREDICT_TOOLS.values():
        write_json(d / f"{fs}.json", fit_final_bundle(functional_records,
                                                      ExperimentSpec(fs)).to_dict())
    return ToolContext.from_dir(d)


def _features(ctx, tool, record):
    b = ctx.bundles[tool]
    return dict(zip(b.input_columns, b.feature_matrix([record])[0].tolist()))


def test_homa_tool():
    r = dispatch({"tool": "homa_ir_calculator", "args": {"insulin": 10, "glucose": 90}},
                 ToolContext())
    assert r["ok"] and abs(r["result"]["homa_ir"] - 900 / 405) < 1e-12
    assert r["result"]["ir_class"] == "ImpairedIS" and "elapsed_ms" in r


def test_arithmetic_tools():
    r = dispatch({"tool": "comparison_arithmetic", "args": {"a": 2.0, "b": 2.5}}, ToolContext())
    assert r["result"]["relative_difference"] == 0.25
    r = dispatch({"tool": "percent_change", "args": {"old": 9.85, "new": 6.16}}, ToolContext())
    assert r["result"]["percent_change"] == pytest.approx(100 * (6.16 - 9.85) / 9.85)


def test_predict_tools_round_trip(ctx, functional_records):
    for tool in PREDICT_TOOLS:
        req = {"tool": tool, "args": {"features": _features(ctx, tool, functional_records[0])},
               "id": 7}
        a, b = dispatch(req, ctx, timed=False), dispatch(req, ctx, timed=False)
        assert a == b and a["ok"] and a["id"] == 7
        expected = ctx.bundles[tool].feature_matrix(functional_records[:1])
        assert a["result"]["homa_ir"] == ctx.bundles[tool].predict_raw(
            expected, ctx.bundles[tool].input_columns)[0]


def test_missing_feature_error(ctx, functional_records):
    tool = "predict_wearables_demographics_glucose"
    feats = _features(ctx, tool, functional_records[0])
    del feats["glucose"]
    r = dispatch({"tool": tool, "args": {"features": feats}}, ctx)
    assert not r["ok"] and r["error"]["code"] == "missing_feature"
    assert "glucose" in r["error"]["message"]


@pytest.mark.parametrize("req, code", [
    ({"tool": "nope"}, "unknown_tool"),
    ({"args": {}}, "invalid_request"),
    ([1, 2], "invalid_request"),
    ({"tool": "homa_ir_calculator", "args": {"insulin": 10}}, "missing_argument"),
    ({"tool": "homa_ir_calculator", "args": {"insulin": "10", "glucose": 90}},
     "invalid_argument"),
    ({"tool": "homa_ir_calculator", "args": {"insulin": True, "glucose": 90}},
     "invalid_argument"),
    ({"tool": "homa_ir_calculator", "args": {"insulin": -1, "glucose": 90}}, "invalid_argument"),
    ({"tool": "homa_ir_calculator", "args": {"insulin": 1, "glucose": 9, "x": 1}},
     "unknown_argument"),
    ({"tool": "comparison_arithmetic", "args": {"a": 0, "b": 1}}, "invalid_argument"),
    ({"tool": "percent_change", "args": {"old": 0, "new": 1}}, "invalid_argument"),
    ({"tool": "predict_demographics_only", "args": {"features": {"age": 1, "bmi": 2}}},
     "model_unavailable"),
    ({"tool": "predict_demographics_only", "args": {}}, "missing_argument"),
])
def test_structured_errors(req, code):
    r = dispatch(req, ToolContext())
    assert r["ok"] is False and r["error"]["code"] == code and r["error"]["message"]


def test_invalid_json_line():
    r = json.loads(handle_line("{not json", ToolContext()))
    assert r["error"]["code"] == "invalid_json"


def test_fuzz_never_crashes(ctx):
    for line in malformed_lines(1000, seed=1):
        out = handle_line(line, ctx)
        r = json.loads(out)
        assert r["ok"] is False, line
        assert set(r["error"]) == {"code", "message"}
        assert r["error"]["code"] != "internal_error", (line, r)


def test_serve_is_serial_line_protocol(ctx):
    lines = [json.dumps({"tool": "homa_ir_calculator", "args": {"insulin": 10, "glucose": 90},
                         "id": i}) for i in range(3)]
    stdin = io.StringIO("\n".join(lines + ["", "garbage"]) + "\n")
    stdout = io.StringIO()
    assert serve(ctx, stdin, stdout, timed=False) == 4
    out = [json.loads(x) for x in stdout.getvalue().splitlines()]
    assert [o.get("id") for o in out[:3]] == [0, 1, 2]
    assert out[3]["error"]["code"] == "invalid_json"
