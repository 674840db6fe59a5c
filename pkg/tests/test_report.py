"""Report writers: canonical text outputs and byte-stable figures."""

from __future__ import annotations

import json

import pytest

import gapscan.report as rp
from gapscan.errors import DataError

HISTORY = [
    {"epoch": 0, "lr": 0.01, "loss": 1.5, "val_c_index": 0.52},
    {"epoch": 1, "lr": 0.01, "loss": 1.1, "val_c_index": 0.61},
    {"epoch": 2, "lr": 0.01, "loss": 0.9, "val_c_index": None},
]


def test_write_json_is_canonical(tmp_path):
    p1 = rp.write_json(tmp_path / "a.json", {"b": 1, "a": {"z": 2, "y": 3}})
    text = p1.read_text()
    assert text.endswith("\n")
    assert text.index('"a"') < text.index('"b"')
    assert json.loads(text) == {"b": 1, "a": {"z": 2, "y": 3}}
    rp.write_json(tmp_path / "b.json", {"b": 1, "a": {"z": 2, "y": 3}})
    assert (tmp_path / "b.json").read_bytes() == p1.read_bytes()


def test_write_csv_stable_columns_and_gaps(tmp_path):
    rows = [{"epoch": 0, "loss": 1.5}, {"epoch": 1, "loss": 1.2, "extra": 7}]
    path = rp.write_csv(tmp_path / "t.csv", rows)
    lines = path.read_text().strip().split("\n")
    assert lines[0] == "epoch,loss,extra"
    assert lines[1] == "0,1.5,"
    assert lines[2] == "1,1.2,7"


def test_write_csv_rejects_empty(tmp_path):
    with pytest.raises(DataError):
        rp.write_csv(tmp_path / "e.csv", [])


def _is_png(path):
    return path.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_loss_curve_png_renders_and_is_deterministic(tmp_path):
    p1 = rp.loss_curve_png(tmp_path / "l1.png", HISTORY)
    p2 = rp.loss_curve_png(tmp_path / "l2.png", HISTORY)
    assert _is_png(p1)
    assert p1.read_bytes() == p2.read_bytes()


def test_auc_bars_png_renders_multiple_variants(tmp_path):
    aucs = {"full": {12: 0.8, 24: 0.75, 36: None},
            "dt": {12: 0.7, 24: 0.66, 36: 0.6}}
    p1 = rp.auc_bars_png(tmp_path / "a1.png", aucs)
    p2 = rp.auc_bars_png(tmp_path / "a2.png", aucs)
    assert _is_png(p1)
    assert p1.read_bytes() == p2.read_bytes()


def test_scaling_png_renders(tmp_path):
    bench = {"lengths": [128, 256, 512], "seconds": [0.01, 0.02, 0.04],
             "slope": 1.0}
    assert _is_png(rp.scaling_png(tmp_path / "s.png", bench))


def test_figure_writers_validate_inputs(tmp_path):
    with pytest.raises(DataError):
        rp.loss_curve_png(tmp_path / "x.png", [])
    with pytest.raises(DataError):
        rp.auc_bars_png(tmp_path / "x.png", {})
    with pytest.raises(DataError):
        rp.scaling_png(tmp_path / "x.png", {"lengths": []})
