"""Stepped-wedge trial: Pareto search over stage 1 and interim adaptation.

Run from the repository root::

    python3 demos/stepped_wedge_interim.py

Searches interim timing (t1) and cluster-period size (m1) for an 11-cluster
stepped wedge with a binary outcome, then shows how the stage-2 choice for
one frontier design responds when the interim icc estimate differs from
the planning value.
"""

from dataclasses import replace
from pathlib import Path

from adaptcrt import config as conf
from adaptcrt import calibrate, frontier_search, interim_decide

CONFIGS = Path(__file__).resolve().parent / "configs"


def main():
    cfg = conf.load_config(CONFIGS / "stepped_wedge_adaptive.yaml")
    res = frontier_search(
        conf.stage1_space(cfg),
        lambda d: conf.design_problem(cfg, d),
        conf.target_power(cfg),
        conf.criterion(cfg),
        tuple(cfg["objectives"]),
        cfg["pareto"]["min_stage1_power"],
    )
    counts = {}
    for p in res.points:
        counts[p.status] = counts.get(p.status, 0) + 1
    print(f"{len(res.points)} stage-1 designs: {counts}")
    for p in res.frontier:
        o = p.objectives
        print(f"  t1={p.design.t1:2d} m1={p.design.m1:3.0f}  E[cost] {o['expected_cost']:8.0f}  "
              f"max cost {o['max_cost']:8.0f}")

    rule = calibrate(conf.design_problem(cfg, res.frontier[0].design), conf.target_power(cfg), conf.criterion(cfg))
    theta = rule.problem.theta
    print(f"\ninterim decisions for t1={rule.problem.stage1.t1}, m1={rule.problem.stage1.m1:.0f} "
          f"(planning icc {theta.icc})")
    print("   z1    icc=0.02            icc=0.06            icc=0.15")
    for z1 in (-2.0, -1.5, -1.0, -0.5, 0.0):
        cells = []
        for icc in (0.02, 0.06, 0.15):
            a = interim_decide(z1, rule, replace(theta, icc=icc)).action
            cells.append(a.kind if a.design is None else
                         f"t2={a.design.t2} r={a.design.r:.2f} m2={a.design.m2:.0f}")
        print(f"  {z1:+.1f}  " + "  ".join(f"{c:18s}" for c in cells))


if __name__ == "__main__":
    main()
