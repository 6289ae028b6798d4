import json

import numpy as np
import pandas as pd
import pytest

from src.reporting import canonical_json, manifest_hash, save_json_report, write_csv


def test_manifest_hash_ignores_key_order():
    a = {"seed": 1, "variants": [{"strategy": "FS", "ratio": 0.25}]}
    b = {"variants": [{"ratio": 0.25, "strategy": "FS"}], "seed": 1}
    assert manifest_hash(a) == manifest_hash(b)
    assert len(manifest_hash(a)) == 16
    assert manifest_hash(a) != manifest_hash({**a, "seed": 2})


def test_canonical_json_handles_numpy_and_nan():
    text = canonical_json({"x": np.float64(1.5), "arr": np.arange(2), "bad": float("nan")})
    assert json.loads(text) == {"arr": [0, 1], "bad": None, "x": 1.5}


def test_save_json_report_creates_parents(tmp_path):
    path = tmp_path / "out" / "manifest.json"
    save_json_report({"acc": float("inf"), "tuple": (1, 2), "where": tmp_path}, path)
    assert json.loads(path.read_text(encoding="utf-8")) == {
        "acc": None,
        "tuple": [1, 2],
        "where": str(tmp_path),
    }


def test_save_json_report_wraps_os_errors(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x", encoding="utf-8")
    with pytest.raises(RuntimeError, match="Failed to save JSON report"):
        save_json_report({"a": 1}, blocker / "manifest.json")


def test_write_csv_header_only_when_empty(tmp_path):
    path = write_csv([], ["a", "b"], tmp_path / "empty.csv")
    assert path.read_text(encoding="utf-8") == "a,b\n"


def test_write_csv_orders_columns_and_appends_manifest(tmp_path):
    rows = [{"b": 2, "a": 1, "extra": 9}, {"a": 3, "b": 4}]
    path = write_csv(rows, ["a", "b"], tmp_path / "rows.csv", manifest="deadbeef")
    frame = pd.read_csv(path)
    assert list(frame.columns) == ["a", "b", "manifest_hash"]
    assert frame["a"].tolist() == [1, 3]
    assert set(frame["manifest_hash"]) == {"deadbeef"}
