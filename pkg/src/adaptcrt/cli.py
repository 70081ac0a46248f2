"""Command-line interface: ``adaptcrt {power,rules,pareto,interim,simulate}``.

Exit codes: 0 success, 2 configuration or input error, 3 numerical
failure, 4 infeasible target.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from typing import Optional

import numpy as np

from . import __version__
from . import config as conf
from .inference import DegenerateDesign, layout_information
from .interim import CellData, DataError, EstimationError, estimate_theta, interim_decide
from .model import DesignError, NotPositiveDefinite
from .optimiser import TargetUnachievable, calibrate, rule_objectives
from .pareto import NoFeasibleDesign, frontier_search
from .power import QuadratureError, single_stage_power
from .sim import SimScenario, StageAnalysis, linear_predictor_scale, run_scenario

log = logging.getLogger("adaptcrt")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_INFEASIBLE = 0, 2, 3, 4


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# Output helpers
# ---------------------------------------------------------------------------


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.generic):
        x = x.item()
    if isinstance(x, float) and not math.isfinite(x):
        return None
    return x


def write_json(path: str, doc: dict) -> None:
    with open(path, "w") as fh:
        json.dump(_jsonable(doc), fh, indent=2)
        fh.write("\n")


def write_table(path: str, rows: list[dict], prov: dict) -> None:
    """CSV with ``#``-prefixed provenance lines, then a header row."""
    cols: list[str] = []
    for r in rows:
        cols += [k for k in r if k not in cols]
    with open(path, "w", newline="") as fh:
        for k, v in prov.items():
            fh.write(f"# {k}: {v}\n")
        w = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: _jsonable(v) for k, v in r.items()})


def emit(args, name: str, doc: dict, rows: Optional[list[dict]] = None) -> str:
    """Write ``doc`` (json) or ``rows`` (csv) to ``--out`` and return the path."""
    os.makedirs(args.out, exist_ok=True)
    if args.format == "csv" and rows is not None:
        path = os.path.join(args.out, f"{name}.csv")
        write_table(path, rows, doc["provenance"])
    else:
        path = os.path.join(args.out, f"{name}.json")
        write_json(path, doc)
    log.info("wrote %s", path)
    return path


def _seed(args, cfg: Optional[dict]) -> int:
    if args.seed is not None:
        return args.seed
    return int((cfg or {}).get("seed", 0))


def _config(args, required: bool = True) -> Optional[dict]:
    if args.config is None:
        if required:
            raise CliError("--config is required for this command", EXIT_CONFIG)
        return None
    return conf.load_config(args.config)


def _calibrated_rule(cfg: dict):
    problem = conf.design_problem(cfg)
    return calibrate(problem, conf.target_power(cfg), conf.criterion(cfg), tolerance=conf.calibration_tolerance(cfg))


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_power(args) -> dict:
    """Power and sample size of a fixed or adaptive design."""
    cfg = _config(args, required=args.plan is None)
    prov = conf.provenance(cfg, None, "power")
    if args.plan is not None or "stage2" in (cfg or {}):
        if args.plan is not None:
            rule, cfg = conf.load_plan(args.plan, cfg)
        else:
            rule = _calibrated_rule(cfg)
        obj = rule_objectives(rule)
        p = rule.problem
        doc = {
            "provenance": prov,
            "design": p.stage1.describe(),
            "adaptive": True,
            "power": obj["power"],
            "stage1_efficacy": p.plan_stage1_rejection,
            "boundary": rule.boundary,
            "w1": rule.weights.w1,
            **{k: v for k, v in obj.items() if k != "power"},
        }
    else:
        stage1 = conf.stage1_design(cfg)
        t = conf.test_settings(cfg)
        theta = conf.correlation_model(cfg["correlation"])
        layout = stage1.layout()
        info = layout_information(layout, theta, conf.outcome_model(cfg))
        delta = conf.effect(cfg)
        if t["alpha"] >= 1.0:
            power = 1.0
        else:
            power = single_stage_power(float(info.i1[0]), delta, int(info.df1[0]), t["alpha"], t["sided"],
                                       t["small_sample"])
        doc = {
            "provenance": prov,
            "design": stage1.describe(),
            "adaptive": False,
            "power": power,
            "information": float(info.i1[0]),
            "df": int(info.df1[0]),
            "participants": float(stage1.participants),
            "clusters": int(stage1.clusters),
            "cost": float(stage1.cost(conf.rho(cfg))),
        }
    emit(args, "power", doc, [{k: v for k, v in doc.items() if not isinstance(v, dict)}])
    for k, v in doc.items():
        if not isinstance(v, dict):
            print(f"{k:>18}: {v:.6g}" if isinstance(v, float) else f"{k:>18}: {v}")
    return doc


def cmd_rules(args) -> dict:
    """Calibrate the decision rule; write the rule table and the frozen plan."""
    cfg = _config(args)
    seed = _seed(args, cfg)
    rule = _calibrated_rule(cfg)
    obj = rule_objectives(rule)
    prov = conf.provenance(cfg, seed, "rules")
    doc = {"provenance": prov, **rule.to_dict(), "objectives": obj}
    emit(args, "rules", doc, rule.table())
    os.makedirs(args.out, exist_ok=True)
    plan_path = os.path.join(args.out, "plan.json")
    write_json(plan_path, conf.plan_document(cfg, rule, seed))
    print(f"criterion {rule.criterion}, calibration {rule.calibration:.6g}, power {rule.power:.4f}")
    print(f"efficacy boundary +/-{rule.boundary:.4f} (w1 = {rule.weights.w1:.4f})")
    print(f"E[cost] {obj['expected_cost']:.1f}, max cost {obj['max_cost']:.1f}, "
          f"E[N] {obj['expected_n']:.1f}, max N {obj['max_n']:.1f}")
    print(f"plan written to {plan_path}")
    return doc


def cmd_pareto(args) -> dict:
    """Evaluate the stage-1 design space and mark the Pareto frontier."""
    cfg = _config(args)
    designs = conf.stage1_space(cfg)
    objectives = tuple(cfg.get("objectives", ("expected_cost", "max_cost")))
    screen = float(cfg.get("pareto", {}).get("min_stage1_power", 0.6))
    target = conf.target_power(cfg)
    crit = conf.criterion(cfg)
    tol = conf.calibration_tolerance(cfg)

    def progress(i, n):
        log.info("evaluated %d/%d stage-1 designs", i, n)

    res = frontier_search(
        designs,
        lambda d: conf.design_problem(cfg, d),
        target,
        crit,
        objectives,
        screen,
        progress,
        tolerance=tol,
    )
    prov = conf.provenance(cfg, None, "pareto")
    rows = res.rows()
    front = [p.as_row() for p in res.frontier]
    emit(args, "evaluated", {"provenance": prov, "objectives": list(objectives), "designs": rows}, rows)
    emit(args, "frontier", {"provenance": prov, "objectives": list(objectives), "designs": front}, front)
    print(f"{len(rows)} designs evaluated, {len(front)} on the frontier ({', '.join(objectives)})")
    for row in front:
        print("  " + ", ".join(f"{k}={row[k]:.6g}" if isinstance(row[k], float) else f"{k}={row[k]}"
                               for k in list(row)[:5] + list(objectives)))
    return {"frontier": front, "evaluated": rows}


def cmd_interim(args) -> dict:
    """Interim decision from stage-1 data (or a supplied z1 and estimates)."""
    if args.plan is None:
        raise CliError("interim needs --plan (written by the rules command)", EXIT_CONFIG)
    cfg = _config(args, required=False)
    rule, plan_cfg = conf.load_plan(args.plan, cfg)
    p = rule.problem
    settings = (cfg or {}).get("interim", {})
    conservative = bool(args.conservative or settings.get("conservative", False))
    level = float(settings.get("level", 0.95))
    estimate = None
    theta_hat = None
    z1 = args.z1
    if args.data is not None:
        layout1 = p.stage1.layout()
        data = CellData.from_csv(args.data, layout1, p.outcome.family)
        estimate = estimate_theta(data, p.outcome, p.theta, level=level)
        theta_hat = estimate.theta
        if z1 is None:
            z1 = stage1_statistic(rule, data)
    overrides = {k: getattr(args, k) for k in ("icc", "cac", "decay", "dispersion") if getattr(args, k) is not None}
    if overrides:
        theta_hat = conf.correlation_model(overrides, theta_hat or p.theta)
    if z1 is None:
        raise CliError("interim needs --data or --z1", EXIT_CONFIG)
    res = interim_decide(float(z1), rule, theta_hat, conservative, estimate)
    doc = {"provenance": conf.provenance(plan_cfg, None, "interim"), **res.to_dict()}
    emit(args, "interim", doc, [{k: v for k, v in doc.items() if not isinstance(v, (dict, list))}])
    print(res.report(p.outcome.family))
    return doc


def stage1_statistic(rule, data: CellData) -> float:
    """Stage-1 z statistic of observed data under the planning working model."""
    p = rule.problem
    layout1 = p.stage1.layout()
    an = StageAnalysis(layout1, p.theta, p.outcome, p.small_sample)
    cl, pe = an.cells
    lookup = {(int(c), int(t)): i for i, (c, t) in enumerate(zip(data.cluster, data.period))}
    missing = [(int(c), int(t)) for c, t in zip(cl, pe) if (int(c), int(t)) not in lookup]
    if missing:
        raise DataError(f"stage-1 data lack planned cells, e.g. cluster {missing[0][0]}, period {missing[0][1]}")
    rows = np.array([lookup[(int(c), int(t))] for c, t in zip(cl, pe)])
    y = linear_predictor_scale(np.asarray(data.mean)[rows], np.asarray(data.n, float)[rows], p.outcome.family)
    return float(an.z1(y[None, :])[0])


def cmd_simulate(args) -> dict:
    """Monte Carlo operating characteristics of a frozen plan."""
    cfg = _config(args, required=args.plan is None)
    if args.plan is not None:
        rule, plan_cfg = conf.load_plan(args.plan, cfg)
    else:
        rule, plan_cfg = _calibrated_rule(cfg), cfg
    sim_cfg = (cfg or {}).get("simulate", {})
    p = rule.problem
    truth = conf.correlation_model(sim_cfg.get("truth", {}), p.theta)
    seed = _seed(args, cfg)
    scenario = SimScenario(
        rule,
        truth,
        float(sim_cfg.get("effect", 0.0)),
        int(args.replicates or sim_cfg.get("replicates", 1000)),
        seed,
        bool(args.reestimate or sim_cfg.get("reestimate", False)),
        bool(sim_cfg.get("conservative", False)),
    )
    res = run_scenario(scenario, threads=args.threads)
    prov = conf.provenance(plan_cfg, seed, "simulate")
    doc = {"provenance": prov, **res.to_dict()}
    rows = [{"metric": k, "estimate": v[0], "se": v[1]} for k, v in res.summary.items()]
    emit(args, "simulation", doc, rows)
    if sim_cfg.get("trace", True):
        os.makedirs(args.out, exist_ok=True)
        res.write_trace(os.path.join(args.out, "trace.csv"))
    for k, (est, se) in res.summary.items():
        print(f"{k:>20}: {est:.6g}" + ("" if math.isnan(se) else f"  (MC se {se:.2g})"))
    return doc


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def _u64(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML/JSON design configuration")
    common.add_argument("--out", default=".", help="output directory (default: current)")
    common.add_argument("--seed", type=_u64, default=None, help="master seed (unsigned 64-bit)")
    common.add_argument("--threads", type=int, default=1, help="worker threads for simulation")
    common.add_argument("--format", choices=("csv", "json"), default="json", help="table output format")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="adaptcrt", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"adaptcrt {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    s = sub.add_parser("power", parents=[common], help="power and sample size of a design")
    s.add_argument("--plan", help="plan file from the rules command")
    s.set_defaults(func=cmd_power)

    s = sub.add_parser("rules", parents=[common], help="calibrate and write the decision rule and plan")
    s.set_defaults(func=cmd_rules)

    s = sub.add_parser("pareto", parents=[common], help="Pareto search over stage-1 designs")
    s.set_defaults(func=cmd_pareto)

    s = sub.add_parser("interim", parents=[common], help="interim re-estimation and stage-2 decision")
    s.add_argument("--plan", help="plan file from the rules command")
    s.add_argument("--data", help="stage-1 cell summaries (CSV: cluster, period, n, mean or sum[, sd, treatment])")
    s.add_argument("--z1", type=float, help="observed stage-1 z statistic")
    for name in ("icc", "cac", "decay", "dispersion"):
        s.add_argument(f"--{name}", type=float, help=f"estimated {name} (overrides the data-based estimate)")
    s.add_argument("--conservative", action="store_true", help="use the larger of the planned and estimated icc")
    s.set_defaults(func=cmd_interim)

    s = sub.add_parser("simulate", parents=[common], help="Monte Carlo operating characteristics")
    s.add_argument("--plan", help="plan file from the rules command")
    s.add_argument("--replicates", type=int, help="number of simulated trials")
    s.add_argument("--reestimate", action="store_true", help="re-estimate correlation parameters at the interim")
    s.set_defaults(func=cmd_simulate)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except (conf.ConfigError, DataError, CliError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return getattr(exc, "code", EXIT_CONFIG)
    except (TargetUnachievable, NoFeasibleDesign) as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (QuadratureError, NotPositiveDefinite, DegenerateDesign, EstimationError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except DesignError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
