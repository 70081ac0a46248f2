import csv
import json
from pathlib import Path

import numpy as np
import pytest
import yaml

from adaptcrt.cli import main
from adaptcrt.config import load_plan
from adaptcrt.sim import generate_trial

DEMOS = Path(__file__).resolve().parents[1] / "demos" / "configs"
SMALL = {
    "outcome": {"family": "gaussian", "effect": 0.25},
    "correlation": {"family": "nested-exchangeable", "icc": 0.05, "cac": 0.8},
    "stage1": {"kind": "parallel", "k1": 12, "m1": 20},
    "stage2": {"kind": "parallel", "k2": [0, 2, 4], "m2": [10, 30, 60]},
    "cost": {"rho": 30},
    "target_power": 0.75,
    "rule": {"n_z": 41},
    "simulate": {"replicates": 400, "effect": 0.25},
    "seed": 17,
}


def _cfg(tmp_path, **changes):
    path = tmp_path / "design.yaml"
    path.write_text(yaml.safe_dump({**SMALL, **changes}))
    return str(path)


@pytest.fixture()
def planned(tmp_path):
    cfg = _cfg(tmp_path)
    assert main(["rules", "--config", cfg, "--out", str(tmp_path)]) == 0
    return cfg, str(tmp_path / "plan.json")


def test_version(capsys):
    with pytest.raises(SystemExit) as e:
        main(["--version"])
    assert e.value.code == 0
    assert "adaptcrt" in capsys.readouterr().out


def test_seed_must_be_u64(tmp_path):
    with pytest.raises(SystemExit) as e:
        main(["simulate", "--config", _cfg(tmp_path), "--seed", str(2**64)])
    assert e.value.code == 2


def test_fixed_power_parallel(tmp_path, capsys):
    assert main(["power", "--config", str(DEMOS / "parallel_fixed.yaml"), "--out", str(tmp_path)]) == 0
    doc = json.loads((tmp_path / "power.json").read_text())
    assert doc["adaptive"] is False
    assert doc["power"] == pytest.approx(0.815, abs=0.005)
    assert doc["participants"] == 1200 and doc["cost"] == 2640
    assert "power" in capsys.readouterr().out


def test_alpha_one_gives_power_one(tmp_path):
    cfg = {k: v for k, v in SMALL.items() if k != "stage2"}
    path = tmp_path / "a.yaml"
    path.write_text(yaml.safe_dump({**cfg, "test": {"alpha": 1.0}}))
    assert main(["power", "--config", str(path), "--out", str(tmp_path)]) == 0
    assert json.loads((tmp_path / "power.json").read_text())["power"] == 1.0


def test_rules_outputs_and_provenance(tmp_path):
    cfg = _cfg(tmp_path)
    assert main(["rules", "--config", cfg, "--out", str(tmp_path), "--format", "csv"]) == 0
    lines = (tmp_path / "rules.csv").read_text().splitlines()
    head = [ln for ln in lines if ln.startswith("# ")]
    assert any(ln.startswith("# config_sha256: ") for ln in head)
    assert any(ln.startswith("# version: ") for ln in head)
    assert "z_lower" in lines[len(head)] or "," in lines[len(head)]
    plan = json.loads((tmp_path / "plan.json").read_text())
    assert plan["provenance"]["seed"] == 17
    assert len(plan["provenance"]["config_sha256"]) == 64


def test_reruns_are_byte_identical(tmp_path):
    cfg = _cfg(tmp_path)
    for d in ("a", "b"):
        assert main(["rules", "--config", cfg, "--out", str(tmp_path / d)]) == 0
        assert main(["simulate", "--config", cfg, "--plan", str(tmp_path / d / "plan.json"),
                     "--out", str(tmp_path / d)]) == 0
    for name in ("rules.json", "plan.json", "simulation.json", "trace.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_simulate_independent_of_threads(planned, tmp_path):
    cfg, plan = planned
    for t in ("1", "3"):
        assert main(["simulate", "--config", cfg, "--plan", plan, "--threads", t,
                     "--out", str(tmp_path / t), "--format", "csv"]) == 0
    for name in ("simulation.csv", "trace.csv"):
        assert (tmp_path / "1" / name).read_bytes() == (tmp_path / "3" / name).read_bytes()
    header = (tmp_path / "1" / "trace.csv").read_text().splitlines()[0].split(",")
    assert header == ["replicate", "z1", "action", "k2", "m2", "t2", "r", "z2c", "N", "K", "cost", "reject"]


def test_plan_hash_mismatch_exit_2(planned, tmp_path, capsys):
    _, plan = planned
    other = _cfg(tmp_path, cost={"rho": 35})
    assert main(["simulate", "--config", other, "--plan", plan, "--out", str(tmp_path)]) == 2
    assert "hash mismatch" in capsys.readouterr().err


def test_interim_efficacy_stop(planned, tmp_path, capsys):
    _, plan = planned
    boundary = json.loads(Path(plan).read_text())["weights"]["boundary"]
    assert main(["interim", "--plan", plan, "--z1", str(boundary + 0.5), "--out", str(tmp_path)]) == 0
    assert json.loads((tmp_path / "interim.json").read_text())["action"] == "stop-efficacy"
    assert "stop" in capsys.readouterr().out.lower()


def _write_data(path, rule, seed=0, drop=None):
    lay = rule.problem.stage1.layout()
    d = generate_trial(lay, rule.problem.theta, rule.problem.outcome, 0.25, np.random.default_rng(seed))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["cluster", "period", "n", "mean", "sd"])
        for i in range(d.mean.size):
            if i != drop:
                w.writerow([int(d.cluster[i]), int(d.period[i]), int(d.n[i]), float(d.mean[i]), float(d.sd[i])])


def test_interim_from_data(planned, tmp_path):
    _, plan = planned
    rule, _ = load_plan(plan)
    data = tmp_path / "stage1.csv"
    _write_data(data, rule)
    assert main(["interim", "--plan", plan, "--data", str(data), "--out", str(tmp_path)]) == 0
    doc = json.loads((tmp_path / "interim.json").read_text())
    assert np.isfinite(doc["z1"])
    assert doc["action"] in ("continue", "stop-efficacy", "stop-futility")


def test_interim_data_errors_exit_2(planned, tmp_path, capsys):
    _, plan = planned
    rule, _ = load_plan(plan)
    data = tmp_path / "stage1.csv"
    _write_data(data, rule, drop=3)
    assert main(["interim", "--plan", plan, "--data", str(data), "--out", str(tmp_path)]) == 2
    assert "cluster" in capsys.readouterr().err
    data.write_text("cluster,period,n,mean\n0,0,20,0.1\n1,zero,20,0.2\n")
    assert main(["interim", "--plan", plan, "--data", str(data), "--out", str(tmp_path)]) == 2
    assert "row 3, column 'period'" in capsys.readouterr().err


def test_interim_requires_plan(tmp_path):
    assert main(["interim", "--z1", "1.0", "--out", str(tmp_path)]) == 2


def test_unachievable_target_exit_4(tmp_path, capsys):
    assert main(["rules", "--config", _cfg(tmp_path, target_power=0.99), "--out", str(tmp_path)]) == 4
    assert "unachievable" in capsys.readouterr().err


def test_empty_feasible_set_exit_4(tmp_path):
    cfg = _cfg(tmp_path, target_power=0.99, stage1_space={"kind": "parallel", "k1": [10, 12], "m1": [10, 20]},
               pareto={"min_stage1_power": 0.0})
    assert main(["pareto", "--config", cfg, "--out", str(tmp_path)]) == 4


def test_quadrature_failure_exit_3(tmp_path, capsys):
    cfg = _cfg(tmp_path, rule={"n_z": 41, "quadrature_tolerance": 1e-300})
    assert main(["rules", "--config", cfg, "--out", str(tmp_path)]) == 3
    assert "numerical failure" in capsys.readouterr().err


def test_invalid_config_exit_2(tmp_path, capsys):
    assert main(["rules", "--config", _cfg(tmp_path, colour="red"), "--out", str(tmp_path)]) == 2
    assert "config error at <root>" in capsys.readouterr().err


def test_single_candidate_grid_gives_constant_rule(tmp_path):
    cfg = _cfg(tmp_path, stage2={"kind": "parallel", "k2": 2, "m2": 30}, target_power=0.5)
    assert main(["rules", "--config", cfg, "--out", str(tmp_path)]) == 0
    choice = json.loads((tmp_path / "plan.json").read_text())["choice"]
    assert set(choice) <= {-1, 0}


def test_pareto_outputs(tmp_path):
    cfg = _cfg(tmp_path, stage1_space={"kind": "parallel", "k1": [12, 14], "m1": [15, 20]},
               pareto={"min_stage1_power": 0.0})
    assert main(["pareto", "--config", cfg, "--out", str(tmp_path), "--format", "csv"]) == 0
    rows = [ln for ln in (tmp_path / "evaluated.csv").read_text().splitlines() if not ln.startswith("# ")]
    assert len(rows) == 5
    assert (tmp_path / "frontier.csv").exists()


def test_baseline_period_rules_boundary(tmp_path):
    assert main(["rules", "--config", str(DEMOS / "baseline_period.yaml"), "--out", str(tmp_path)]) == 0
    w = json.loads((tmp_path / "plan.json").read_text())["weights"]
    assert -w["boundary"] == pytest.approx(-2.38, abs=0.05)
