import json

import pytest

from satslam import cli


@pytest.fixture
def small_cfg(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps({"num_plans": 1, "num_runs_per_plan": 1, "horizons": [3], "m_candidates": 3,
                             "scene": {"num_landmarks": 40}}))
    return p


def test_run_metrics_export(tmp_path, small_cfg, capsys):
    out = tmp_path / "out"
    assert cli.main(["run", "--config", str(small_cfg), "--output-dir", str(out)]) == 0
    first = (out / "aggregate_active_L3.csv").read_bytes()
    assert len(list((out / "records").glob("*.json"))) == 3
    assert cli.main(["metrics", "--config", str(small_cfg), "--output-dir", str(out)]) == 0
    assert (out / "aggregate_active_L3.csv").read_bytes() == first
    assert cli.main(["export-plot", "--output-dir", str(out), "--error-scale", "50"]) == 0
    assert (out / "fig_pose_L3.csv").exists()
    assert "active" in capsys.readouterr().out


def test_strategy_and_seed_overrides(tmp_path, small_cfg):
    out = tmp_path / "out"
    assert cli.main(["run", "--config", str(small_cfg), "--output-dir", str(out), "--seed", "7",
                     "--strategy", "tau1"]) == 0
    meta = json.loads((out / "metadata.json").read_text())
    assert meta["config"]["master_seed"] == 7 and meta["config"]["strategies"] == ["tau1"]
    assert sorted(p.name for p in out.glob("aggregate_*.csv")) == ["aggregate_tau1_L3.csv"]


def test_plan_prints_json(small_cfg, capsys):
    assert cli.main(["plan", "--config", str(small_cfg), "--horizon", "3"]) == 0
    d = json.loads(capsys.readouterr().out)
    assert len(d["rewards"]) == 3 and d["target"] == d["candidates"][d["best_index"]]


def test_recon_writes_graph(tmp_path, small_cfg):
    from satslam.graph import FactorGraph
    assert cli.main(["recon", "--config", str(small_cfg), "--output-dir", str(tmp_path)]) == 0
    g = FactorGraph.from_json((tmp_path / "recon_graph_plan01.json").read_text())
    assert len(g.keys("pose")) == 61


def test_bad_inputs(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{"num_plans": 0}')
    assert cli.main(["run", "--config", str(bad)]) == 2
    assert cli.main(["metrics", "--output-dir", str(tmp_path / "empty")]) == 1
    with pytest.raises(SystemExit):
        cli.main(["run", "--strategy", "random"])
