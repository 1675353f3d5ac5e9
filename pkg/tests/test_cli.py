import csv
import io
import json

import numpy as np
import pytest
import yaml

from dclsim.budget import marginal_gain_fit
from dclsim.cli import build_report, expand_grid, main, mean_se

TINY = {
    "n_agents": 2, "tasks_per_agent": 2, "classes_per_task": 2, "dim": 6,
    "net": {"width": 8, "depth": 1, "n_basis": 2},
    "train": {"epochs_per_task": 2, "cd_epochs": 1, "probe_epochs": 1},
    "synthetic": {"n_pool": 4, "n_train_per_class": 8, "n_test_per_class": 8},
    "data": {"q": 2, "k": 2, "f": 1}, "eval_period": 1, "seeds": [0],
}


def _write(tmp_path, doc, name="cfg.yaml"):
    p = tmp_path / name
    p.write_text(yaml.safe_dump(doc))
    return str(p)


def _rows(text):
    return list(csv.DictReader(io.StringIO(text)))


def test_minimal_run(tmp_path):
    cfg = _write(tmp_path, {**TINY, "mode": "none"})
    out = tmp_path / "out"
    assert main(["run", cfg, "--out", str(out)]) == 0
    man = json.loads((out / "manifest.json").read_text())
    assert len(man["runs"]) == 1
    assert len(list((out / "records").glob("*.jsonl"))) == 1
    assert (out / man["runs"][0]["record"]).exists()
    assert man["runs"][0]["record"] == f"records/{man['runs'][0]['hash']}.jsonl"


def test_unknown_key_exit_2(tmp_path, capsys):
    cfg = _write(tmp_path, {**TINY, "train": {"epochz": 3}})
    assert main(["run", cfg, "--out", str(tmp_path / "o")]) == 2
    assert "epochz" in capsys.readouterr().err
    assert main(["validate", cfg]) == 2


def test_missing_file_exit_nonzero(tmp_path):
    assert main(["validate", str(tmp_path / "nope.yaml")]) != 0


def test_grid_cross_product(tmp_path):
    doc = {**TINY, "mode": "fedavg", "grid": {"fed.f": [5, 10], "mode": ["fedavg"]}}
    runs = expand_grid(doc)
    assert [r["fed"]["f"] for r in runs] == [5, 10]
    out = tmp_path / "out"
    assert main(["run", _write(tmp_path, doc), "--out", str(out)]) == 0
    man = json.loads((out / "manifest.json").read_text())
    assert len(man["runs"]) == 2 and len({r["hash"] for r in man["runs"]}) == 2


def test_seeds_override(tmp_path):
    out = tmp_path / "out"
    assert main(["run", _write(tmp_path, {**TINY, "mode": "none"}), "--out", str(out), "--seeds", "2"]) == 0
    assert json.loads((out / "manifest.json").read_text())["runs"][0]["seeds"] == [0, 1]
    assert len(list((out / "ledgers").glob("*.csv"))) == 2


def test_mean_se():
    assert mean_se([0.4, 0.4, 0.4]) == (pytest.approx(0.4), 0.0)
    m, se = mean_se([1.0, 2.0, 3.0, 4.0])
    assert m == 2.5 and se == pytest.approx(np.std([1, 2, 3, 4], ddof=1) / 2)


def test_report_identical_runs_and_baseline_gain(tmp_path):
    doc = {**TINY, "mode": "none", "grid": {"name": ["a", "b"]}}
    out = tmp_path / "out"
    assert main(["run", _write(tmp_path, doc), "--out", str(out)]) == 0
    files = build_report(out)
    fin = _rows(files["final_auc.csv"])
    assert len(fin) == 2
    assert fin[0]["final_acc"] == fin[1]["final_acc"]
    assert all(float(r["relative_gain"]) == 0.0 for r in fin)
    curves = _rows(files["learning_curves.csv"])
    a = [r["acc_mean"] for r in curves if r["name"] == "a"]
    assert a == [r["acc_mean"] for r in curves if r["name"] == "b"]


def test_report_pure_and_slope_consistent(tmp_path):
    doc = {**TINY, "grid": {"mode": ["none", "data"], "data.q": [1, 2, 4]}}
    out = tmp_path / "out"
    assert main(["run", _write(tmp_path, doc), "--out", str(out)]) == 0
    assert main(["report", str(out)]) == 0
    first = {p.name: p.read_bytes() for p in (out / "report").iterdir()}
    assert main(["report", str(out)]) == 0
    assert first == {p.name: p.read_bytes() for p in (out / "report").iterdir()}
    rows = [r for r in _rows(first["gain_vs_logB.csv"].decode()) if r["family"] == "data"]
    assert len(rows) == 3
    pts = [(float(r["logB"]), float(r["relative_gain"])) for r in rows]
    assert float(rows[0]["slope"]) == pytest.approx(marginal_gain_fit(pts), rel=1e-6)
    assert all(float(r["logB"]) == pytest.approx(np.log(float(r["B"])), rel=1e-6) for r in rows)
