"""Parallel trial with a baseline period and a rare binary outcome.

Run from the repository root::

    python3 demos/baseline_period_design.py

Plans a design for a 2% control event rate (icc 0.02, cac 0.97) and a
0.6 percentage-point reduction at 90% power, prints the Pareto frontier
over clusters, baseline size and post-randomisation size, and the interim
decision for an observed stage-1 statistic of -5.22.
"""

from pathlib import Path

from adaptcrt import config as conf
from adaptcrt import calibrate, frontier_search, interim_decide, rule_objectives

CONFIGS = Path(__file__).resolve().parent / "configs"


def main():
    cfg = conf.load_config(CONFIGS / "baseline_period.yaml")
    res = frontier_search(
        conf.stage1_space(cfg),
        lambda d: conf.design_problem(cfg, d),
        conf.target_power(cfg),
        conf.criterion(cfg),
        tuple(cfg["objectives"]),
        cfg["pareto"]["min_stage1_power"],
    )
    print("Pareto frontier (expected cost, maximum cost):")
    for p in res.frontier:
        d, o = p.design, p.objectives
        print(f"  {d.k1}/arm, baseline {d.baseline_m:.0f}, post {d.m1:.0f}: "
              f"{o['expected_cost']:.0f}, {o['max_cost']:.0f}")

    rule = calibrate(conf.design_problem(cfg), conf.target_power(cfg), conf.criterion(cfg))
    obj = rule_objectives(rule)
    s1 = rule.problem.stage1
    print(f"\nplanned design {s1.k1}/arm, baseline {s1.baseline_m:.0f}, post {s1.m1:.0f}: "
          f"power {obj['power']:.3f}, efficacy boundary -{rule.boundary:.2f}")
    print(interim_decide(-5.22, rule).report("binomial"))


if __name__ == "__main__":
    main()
