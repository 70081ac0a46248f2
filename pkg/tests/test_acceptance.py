"""Acceptance criteria, one test per criterion.

Each test records its individual checks; the terminal summary prints one
pass/fail line per criterion. Checks are evaluated in full before the
test asserts, so one failing check does not hide the others.
"""

import json
import time
from pathlib import Path

import numpy as np
import pytest

from adaptcrt import config as conf
from adaptcrt.cli import main
from adaptcrt.inference import decompose
from adaptcrt.interim import interim_decide
from adaptcrt.model import DesignError, build_covariance
from adaptcrt.optimiser import calibrate, rule_objectives
from adaptcrt.pareto import frontier_search, pareto_front
from adaptcrt.sim import SimScenario, run_scenario

from conftest import ACCEPTANCE, GAUSS, THETA4
from oracles import FAMILIES, dense_decomposition, random_layout, random_theta

DEMOS = Path(__file__).resolve().parents[1] / "demos" / "configs"
SEED = 20241016
REPS = 50_000


class Checks:
    def __init__(self, number: int):
        self.items = ACCEPTANCE.setdefault(number, [])

    def __call__(self, name: str, passed, detail: str) -> None:
        self.items.append((name, bool(passed), detail))

    def verify(self) -> None:
        failed = [f"{n} ({d})" for n, ok, d in self.items if not ok]
        assert not failed, "failed checks: " + "; ".join(failed)


def _timed(fn, *args, **kw):
    t0 = time.perf_counter()
    out = fn(*args, **kw)
    return out, time.perf_counter() - t0


def _power_cli(name, out):
    code, secs = _timed(main, ["power", "--config", str(DEMOS / name), "--out", str(out)])
    assert code == 0
    return json.loads((out / "power.json").read_text()), secs


@pytest.fixture(scope="module")
def searches():
    """Frontier searches on the three design spaces, with wall-clock time."""
    out = {}
    for name, file in (("parallel", "parallel_cost"), ("stepped-wedge", "stepped_wedge_adaptive"),
                       ("baseline-period", "baseline_period")):
        cfg = conf.load_config(DEMOS / f"{file}.yaml")
        res, secs = _timed(
            frontier_search,
            conf.stage1_space(cfg),
            lambda d, cfg=cfg: conf.design_problem(cfg, d),
            conf.target_power(cfg),
            conf.criterion(cfg),
            tuple(cfg["objectives"]),
            float(cfg.get("pareto", {}).get("min_stage1_power", 0.6)),
            tolerance=conf.calibration_tolerance(cfg),
        )
        out[name] = (res, secs)
    return out


@pytest.fixture(scope="module")
def null_runs(parallel_cost_rule, parallel_budget_rule):
    runs = {}
    for label, rule in (("cost-penalised", parallel_cost_rule), ("budget-constrained", parallel_budget_rule)):
        for reest in (False, True):
            sc = SimScenario(rule, THETA4, 0.0, REPS, seed=SEED, reestimate=reest)
            runs[(label, reest)] = _timed(run_scenario, sc)
    return runs


def test_criterion_01_parallel_fixed_benchmark(tmp_path):
    check = Checks(1)
    doc, secs = _power_cli("parallel_fixed.yaml", tmp_path)
    check("power", abs(doc["power"] - 0.815) <= 0.005, f"{doc['power']:.4f} vs 0.815 +- 0.005")
    check("N", doc["participants"] == 1440, f"{doc['participants']:.0f} vs 1440")
    check("cost", doc["cost"] == 2640, f"{doc['cost']:.0f} vs 2640")
    check("runtime", secs < 1.0, f"{secs:.2f} s")
    check.verify()


def test_criterion_02_stepped_wedge_fixed_benchmark(tmp_path):
    check = Checks(2)
    doc, secs = _power_cli("stepped_wedge_fixed.yaml", tmp_path)
    check("power", abs(doc["power"] - 0.80) <= 0.01, f"{doc['power']:.4f} vs 0.80 +- 0.01")
    check("N", doc["participants"] == 9240, f"{doc['participants']:.0f} vs 9240")
    check("runtime", secs < 1.0, f"{secs:.2f} s")
    check.verify()


@pytest.mark.slow
def test_criterion_03_parallel_adaptive_reproduction(parallel_cost_rule, parallel_budget_rule, searches):
    check = Checks(3)

    def within(name, value, ref):
        check(name, abs(value / ref - 1) <= 0.05, f"{value:.0f} vs {ref} ({value / ref - 1:+.1%})")

    cost = rule_objectives(parallel_cost_rule)
    budget = rule_objectives(parallel_budget_rule)
    within("cost-penalised E[N]", cost["expected_n"], 1162)
    within("cost-penalised max N", cost["max_n"], 2120)
    within("budget E[N]", budget["expected_n"], 1107)
    within("budget max N", budget["max_n"], 1680)
    reduction = 1 - cost["expected_cost"] / 2640
    check("cost reduction", 0.12 <= reduction <= 0.22, f"{reduction:.1%} in [12%, 22%]")
    secs = searches["parallel"][1]
    check("frontier runtime", secs < 600, f"{secs:.0f} s")
    check.verify()


@pytest.mark.slow
def test_criterion_04_type_one_error(null_runs):
    check = Checks(4)
    for (label, reest), (res, secs) in null_runs.items():
        est, se = res.summary["rejection_rate"]
        mode = "re-estimated" if reest else "planned theta"
        check(f"{label}, {mode}", abs(est - 0.05) <= 0.004, f"{est:.4f} (se {se:.4f})")
        check(f"{label}, {mode} runtime", secs < 600, f"{secs:.0f} s")
    check.verify()


def test_criterion_05_decomposition_identities():
    check = Checks(5)
    rng = np.random.default_rng(SEED)
    worst_u = worst_i = 0.0
    count = {f: 0 for f in FAMILIES}
    t0 = time.perf_counter()
    while sum(count.values()) < 150:
        family = FAMILIES[sum(count.values()) % len(FAMILIES)]
        layout = random_layout(rng)
        try:
            cov = build_covariance(layout, random_theta(rng, family), GAUSS)
            r = rng.normal(size=cov.stage.size)
            s = decompose(layout, cov, r)
        except DesignError:
            continue  # degenerate draw, e.g. no treatment contrast
        U, I, _, _ = dense_decomposition(layout, cov, r)
        worst_u = max(worst_u, abs(U - (s.u1 + s.u2c)) / max(abs(U), 1e-12))
        worst_i = max(worst_i, abs(I - (s.i1 + s.i2c)) / I)
        count[family] += 1
    secs = time.perf_counter() - t0
    check("layouts", sum(count.values()) >= 100 and all(count.values()), str(count))
    check("score", worst_u < 1e-8, f"max rel {worst_u:.1e}")
    check("information", worst_i < 1e-8, f"max rel {worst_i:.1e}")
    check("runtime", secs < 60, f"{secs:.1f} s")
    check.verify()


@pytest.mark.slow
def test_criterion_06_budget_bound(null_runs, parallel_budget_rule):
    check = Checks(6)
    bound = parallel_budget_rule.problem.stage1_cost + parallel_budget_rule.calibration
    alt = run_scenario(SimScenario(parallel_budget_rule, THETA4, 0.25, REPS, seed=SEED + 1))
    runs = [null_runs[("budget-constrained", False)][0], null_runs[("budget-constrained", True)][0], alt]
    n = sum(r.trace["cost"].size for r in runs)
    over = sum(int((r.trace["cost"] > bound).sum()) for r in runs)
    worst = max(float(r.trace["cost"].max()) for r in runs)
    check("replicates within C1 + budget", over == 0, f"{n - over}/{n}, max {worst:.0f} <= {bound:.0f}")
    check.verify()


def _frontier_matches_oracle(res) -> bool:
    feasible = [p for p in res.points if p.status in ("frontier", "dominated")]
    vecs = np.array([p.vector(res.objectives) for p in feasible])
    brute = [not any(
        np.all(vecs[j] <= vecs[i]) and np.any(vecs[j] < vecs[i]) for j in range(len(feasible)) if j != i
    ) for i in range(len(feasible))]
    return (brute == [p.status == "frontier" for p in feasible]
            and np.array_equal(np.sort(pareto_front(vecs)), np.flatnonzero(brute)))


@pytest.mark.slow
def test_criterion_07_pareto(searches):
    check = Checks(7)
    for name, (res, _) in searches.items():
        check(f"{name} oracle", _frontier_matches_oracle(res), f"{len(res.points)} designs")
    sw = searches["stepped-wedge"][0].frontier
    pts = [(p.design.t1, int(p.design.m1)) for p in sw]
    check("stepped-wedge frontier size", 8 <= len(sw) <= 12, f"{len(sw)} points {pts}")
    check("stepped-wedge contains (5, 30)", (5, 30) in pts, f"{pts}")
    bp = searches["baseline-period"][0].frontier
    check("baseline-period frontier size", len(bp) == 3, f"{len(bp)} points")
    check.verify()


def test_criterion_08_design_side_check():
    check = Checks(8)
    cfg = conf.load_config(DEMOS / "baseline_period.yaml")
    rule = calibrate(conf.design_problem(cfg), conf.target_power(cfg), conf.criterion(cfg))
    s1 = rule.problem.stage1
    check("design", (s1.k1, s1.baseline_m, s1.m1) == (32, 900, 400), f"{s1.k1}/arm, {s1.baseline_m:.0f}, {s1.m1:.0f}")
    lower = -rule.boundary
    check("boundary", abs(lower + 2.38) <= 0.05, f"{lower:.4f} vs -2.38 +- 0.05")
    action = interim_decide(-5.22, rule).action.kind
    check("z1 = -5.22", action == "stop-efficacy", action)
    check.verify()


@pytest.mark.slow
def test_criterion_09_quadrature_vs_simulation(parallel_cost_rule, parallel_budget_rule, small_rule, null_runs):
    check = Checks(9)
    cases = [
        ("cost-penalised, effect 0.25", parallel_cost_rule, 0.25, None),
        ("budget-constrained, effect 0.25", parallel_budget_rule, 0.25, None),
        ("coarse grid, effect 0.25", small_rule, 0.25, None),
        ("cost-penalised, null", parallel_cost_rule, 0.0, null_runs[("cost-penalised", False)][0]),
    ]
    for i, (label, rule, delta, res) in enumerate(cases):
        if res is None:
            res = run_scenario(SimScenario(rule, THETA4, delta, REPS, seed=SEED + 10 + i))
        est, se = res.summary["rejection_rate"]
        quad = rule_objectives(rule, delta=delta)["power"]
        check(label, abs(est - quad) <= 3 * se, f"sim {est:.4f} vs quadrature {quad:.4f} ({(est - quad) / se:+.1f} se)")
    check.verify()


@pytest.mark.slow
def test_criterion_10_determinism(tmp_path):
    check = Checks(10)
    cfg = str(DEMOS / "parallel_cost.yaml")
    runs = {"run-a": "1", "run-b": "1", "threads-3": "3"}
    for d, threads in runs.items():
        out = str(tmp_path / d)
        assert main(["rules", "--config", cfg, "--out", out]) == 0
        for extra in ([], ["--reestimate"]):
            sub = out + ("/reest" if extra else "/plain")
            assert main(["simulate", "--config", cfg, "--plan", out + "/plan.json", "--replicates", "3000",
                         "--threads", threads, "--out", sub, *extra]) == 0
    files = sorted(p.relative_to(tmp_path / "run-a") for p in (tmp_path / "run-a").rglob("*") if p.is_file())
    for other in ("run-b", "threads-3"):
        same = [f for f in files if (tmp_path / "run-a" / f).read_bytes() == (tmp_path / other / f).read_bytes()]
        check(f"run-a vs {other}", len(same) == len(files), f"{len(same)}/{len(files)} files identical")
    check.verify()
