"""Parallel cluster trial: fixed design versus two adaptive decision rules.

Run from the repository root::

    python3 demos/parallel_walkthrough.py [--replicates 20000]

Calibrates the cost-penalised and budget-constrained stage-2 rules for a
moderate effect (0.25 SD, icc 0.05, cac 0.8, one cluster costing 30
participants), prints how the chosen stage-2 design varies with the
interim statistic, and checks power and type I error by simulation.
"""

import argparse
from pathlib import Path

from adaptcrt import config as conf
from adaptcrt import SimScenario, calibrate, rule_objectives, run_scenario

CONFIGS = Path(__file__).resolve().parent / "configs"


def describe(label, rule):
    obj = rule_objectives(rule)
    print(f"\n{label}: calibration {rule.calibration:.4g}, power {obj['power']:.4f}")
    print(f"  E[N] {obj['expected_n']:.0f}  max N {obj['max_n']:.0f}  "
          f"E[cost] {obj['expected_cost']:.0f}  max cost {obj['max_cost']:.0f}")
    print("  z1      action")
    rows = rule.table()
    for row in rows[:: max(len(rows) // 12, 1)]:
        what = row["action"] if row["action"] != "continue" else f"K2={row['K2']}, m2={row['m2']:.0f}"
        print(f"  {row['z1']:+.2f}   {what}")
    return obj


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--replicates", type=int, default=20_000)
    args = ap.parse_args()

    fixed = conf.load_config(CONFIGS / "parallel_fixed.yaml")
    s1 = conf.stage1_design(fixed)
    print(f"fixed design: {s1.describe()}, N {s1.participants:.0f}, cost {s1.cost(conf.rho(fixed)):.0f}")

    rules = {}
    for name in ("parallel_cost", "parallel_budget"):
        cfg = conf.load_config(CONFIGS / f"{name}.yaml")
        rule = calibrate(conf.design_problem(cfg), conf.target_power(cfg), conf.criterion(cfg))
        obj = describe(conf.criterion(cfg), rule)
        print(f"  expected cost saving against the fixed design: {1 - obj['expected_cost'] / 2640:.1%}")
        rules[name] = (rule, cfg)

    print(f"\nsimulation, {args.replicates} trials per scenario")
    for name, (rule, cfg) in rules.items():
        for effect in (0.0, 0.25):
            res = run_scenario(SimScenario(rule, rule.problem.theta, effect, args.replicates, seed=cfg["seed"]))
            est, se = res.summary["rejection_rate"]
            quad = rule_objectives(rule, delta=effect)["power"]
            print(f"  {name:12s} effect {effect:.2f}: rejection {est:.4f} (se {se:.4f}), quadrature {quad:.4f}")


if __name__ == "__main__":
    main()
