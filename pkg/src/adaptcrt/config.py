"""Design configuration files and frozen plan files.

A configuration is a YAML (or JSON) document validated against
``config.schema.json``. A plan file freezes a calibrated decision rule
together with the planning sections of the configuration it came from, so
interim decisions and simulations can be replayed without re-specifying
anything.
"""

from __future__ import annotations

import copy
import hashlib
import itertools
import json
import re
from importlib import resources
from typing import Any, Optional

import jsonschema
import numpy as np
import yaml

from . import __version__
from .designs import ParallelStage1, ParallelStage2, Stage2Grid, StaggeredStage1, StaggeredStage2
from .model import CorrelationModel, DesignError, OutcomeModel, logit_effect
from .optimiser import DecisionRule, DesignProblem

# sections that determine the plan; changing any of them invalidates a plan file
PLANNING_SECTIONS = ("outcome", "correlation", "stage1", "stage2", "cost", "test", "target_power", "criterion", "rule")
PLAN_FORMAT = "adaptcrt-plan/1"


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending location."""


class PlanMismatch(ConfigError):
    """A plan file does not match the configuration or its own frozen weights."""


class _Loader(yaml.SafeLoader):
    """Safe loader that also reads exponent-only numbers such as ``1e-6`` as floats."""


_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"^[-+]?(?:[0-9][0-9_]*(?:\.[0-9_]*)?|\.[0-9_]+)[eE][-+]?[0-9]+$"),
    list("-+0123456789."),
)


def schema() -> dict:
    return json.loads(resources.files("adaptcrt").joinpath("config.schema.json").read_text())


def validate(cfg: Any) -> dict:
    """Validate ``cfg`` against the schema; raise :class:`ConfigError` with the location."""
    if not isinstance(cfg, dict):
        raise ConfigError("configuration must be a mapping")
    validator = jsonschema.Draft7Validator(schema())
    errors = sorted(validator.iter_errors(cfg), key=lambda e: list(e.absolute_path))
    if errors:
        e = errors[0]
        where = ".".join(str(p) for p in e.absolute_path) or "<root>"
        raise ConfigError(f"config error at {where}: {e.message}")
    return cfg


def load_config(path) -> dict:
    try:
        with open(path) as fh:
            cfg = yaml.load(fh, Loader=_Loader)  # noqa: S506 (safe loader subclass)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML: {exc}") from None
    return validate(cfg)


def planning_part(cfg: dict) -> dict:
    return {k: cfg[k] for k in PLANNING_SECTIONS if k in cfg}


def config_hash(cfg: dict) -> str:
    """SHA-256 of the canonical JSON of the planning sections."""
    blob = json.dumps(planning_part(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def provenance(cfg: Optional[dict], seed=None, command: str = "") -> dict:
    return {
        "tool": "adaptcrt",
        "version": __version__,
        "command": command,
        "config_sha256": None if cfg is None else config_hash(cfg),
        "seed": seed,
    }


# ---------------------------------------------------------------------------
# Builders
# ---------------------------------------------------------------------------


def expand_range(spec) -> list:
    """Values of a range spec: number, list, or inclusive ``{from, to, step}``."""
    if isinstance(spec, dict):
        step = spec.get("step", 1)
        lo, hi = spec["from"], spec["to"]
        if hi < lo:
            raise ConfigError(f"empty range {spec}")
        n = int(np.floor((hi - lo) / step + 1e-9)) + 1
        vals = [lo + i * step for i in range(n)]
        return [int(v) if float(v).is_integer() and all(isinstance(x, int) for x in (lo, step)) else float(v)
                for v in vals]
    if isinstance(spec, list):
        return list(spec)
    return [spec]


def _section(cfg: dict, name: str) -> dict:
    if name not in cfg:
        raise ConfigError(f"config error at {name}: section is required for this command")
    return cfg[name]


def effect(cfg: dict) -> float:
    """Target effect on the linear-predictor scale."""
    o = cfg["outcome"]
    if "effect" in o and "risk_difference" in o:
        raise ConfigError("config error at outcome: give either effect or risk_difference, not both")
    if "risk_difference" in o:
        if o["family"] != "binomial":
            raise ConfigError("config error at outcome.risk_difference: only for binomial outcomes")
        return logit_effect(o.get("baseline", 0.5), o["risk_difference"])
    if "effect" not in o:
        raise ConfigError("config error at outcome: effect (or risk_difference) is required")
    return float(o["effect"])


def outcome_model(cfg: dict) -> OutcomeModel:
    o = cfg["outcome"]
    base = o.get("baseline", 0.5 if o["family"] == "binomial" else 0.0)
    try:
        return OutcomeModel(o["family"], base, tuple(o.get("period_effects", ())), effect(cfg))
    except DesignError as exc:
        raise ConfigError(f"config error at outcome: {exc}") from None


def correlation_model(section: dict, base: Optional[CorrelationModel] = None) -> CorrelationModel:
    fields = {k: section[k] for k in ("family", "icc", "cac", "decay", "dispersion") if k in section}
    try:
        if base is not None:
            return CorrelationModel(**{**base.__dict__, **fields})
        return CorrelationModel(**fields)
    except DesignError as exc:
        raise ConfigError(f"config error at correlation: {exc}") from None


def _stage1(kind: str, values: dict):
    try:
        if kind == "parallel":
            return ParallelStage1(int(values["k1"]), float(values["m1"]), float(values.get("baseline_m", 0)))
        return StaggeredStage1(int(values["k"]), int(values["t1"]), float(values["m1"]),
                               int(values.get("planned_periods", 0)))
    except KeyError as exc:
        raise ConfigError(f"config error at stage1: missing {exc.args[0]!r} for kind {kind!r}") from None
    except DesignError as exc:
        raise ConfigError(f"config error at stage1: {exc}") from None


def stage1_design(cfg: dict):
    s = _section(cfg, "stage1")
    return _stage1(s["kind"], s)


def stage1_space(cfg: dict) -> list:
    s = _section(cfg, "stage1_space")
    kind = s["kind"]
    if kind == "parallel":
        names = ("k1", "m1", "baseline_m")
        ranges = [expand_range(s.get("k1", 1)), expand_range(s.get("m1", 1)), expand_range(s.get("baseline_m", 0))]
        fixed = {}
    else:
        if "k" not in s:
            raise ConfigError("config error at stage1_space.k: required for staggered designs")
        names = ("t1", "m1")
        ranges = [expand_range(s.get("t1", 1)), expand_range(s.get("m1", 1))]
        fixed = {"k": s["k"], "planned_periods": s.get("planned_periods", 0)}
    return [_stage1(kind, {**fixed, **dict(zip(names, combo))}) for combo in itertools.product(*ranges)]


def stage2_grid(cfg: dict) -> Stage2Grid:
    s = _section(cfg, "stage2")
    try:
        if s["kind"] == "parallel":
            return Stage2Grid.parallel(expand_range(s.get("k2", 0)), expand_range(s["m2"]))
        return Stage2Grid.staggered(expand_range(s.get("t2", 1)), expand_range(s.get("r", 1.0)), expand_range(s["m2"]))
    except DesignError as exc:
        raise ConfigError(f"config error at stage2: {exc}") from None


def reference_design(cfg: dict, stage1, grid: Stage2Grid):
    ref = cfg["stage2"].get("reference", "continuation")
    if ref == "continuation":
        return None
    if ref == "maximal":
        cands = grid.candidates
        if isinstance(cands[0], ParallelStage2):
            return ParallelStage2(max(g.k2 for g in cands), max(g.m2 for g in cands))
        return StaggeredStage2(max(g.t2 for g in cands), 1.0, max(g.m2 for g in cands))
    default = stage1.reference_stage2()
    if isinstance(default, ParallelStage2):
        return ParallelStage2(int(ref.get("k2", default.k2)), float(ref.get("m2", default.m2)))
    return StaggeredStage2(int(ref.get("t2", default.t2)), float(ref.get("r", default.r)), float(ref.get("m2", default.m2)))


def test_settings(cfg: dict) -> dict:
    t = cfg.get("test", {})
    small = bool(t.get("small_sample", False))
    return {
        "alpha": float(t.get("alpha", 0.05)),
        "sided": int(t.get("sided", 2)),
        "small_sample": small,
        "stage1_density": t.get("stage1_density", "noncentral-t" if small else "normal"),
    }


def rho(cfg: dict) -> float:
    return float(cfg.get("cost", {}).get("rho", 0.0))


def design_problem(cfg: dict, stage1=None) -> DesignProblem:
    stage1 = stage1_design(cfg) if stage1 is None else stage1
    grid = stage2_grid(cfg)
    r = cfg.get("rule", {})
    try:
        return DesignProblem(
            stage1=stage1,
            grid=grid,
            theta=correlation_model(cfg["correlation"]),
            outcome=outcome_model(cfg),
            delta=effect(cfg),
            rho=rho(cfg),
            reference=reference_design(cfg, stage1, grid),
            n_z=int(r.get("n_z", 201)),
            futility_floor=float(r.get("futility_floor", 0.10)),
            tol=float(r.get("quadrature_tolerance", 1e-6)),
            **test_settings(cfg),
        )
    except DesignError as exc:
        raise ConfigError(f"config error: {exc}") from None


def target_power(cfg: dict) -> float:
    if "target_power" not in cfg:
        raise ConfigError("config error at target_power: required for this command")
    return float(cfg["target_power"])


def criterion(cfg: dict) -> str:
    return cfg.get("criterion", "cost-penalised")


def calibration_tolerance(cfg: dict) -> float:
    return float(cfg.get("rule", {}).get("tolerance", 0.0005))


# ---------------------------------------------------------------------------
# Plan files
# ---------------------------------------------------------------------------


def plan_document(cfg: dict, rule: DecisionRule, seed=None) -> dict:
    w = rule.weights
    return {
        "format": PLAN_FORMAT,
        "provenance": provenance(cfg, seed, "rules"),
        "config_sha256": config_hash(cfg),
        "config": copy.deepcopy(planning_part(cfg)),
        "weights": {"w1": w.w1, "w2": w.w2, "boundary": w.boundary, "alpha": w.alpha, "sided": w.sided},
        "criterion": rule.criterion,
        "calibration": rule.calibration,
        "power": rule.power,
        "target": rule.target,
        "choice": [int(c) for c in rule.choice],
    }


def load_plan(path, cfg: Optional[dict] = None) -> tuple[DecisionRule, dict]:
    """Rebuild the frozen rule stored in a plan file.

    Raises:
        PlanMismatch: ``cfg`` hashes differently from the plan, or the
            rebuilt weights or rule differ from the frozen ones.
    """
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read plan {path}: {exc}") from None
    if doc.get("format") != PLAN_FORMAT:
        raise ConfigError(f"{path} is not a plan file (format {doc.get('format')!r})")
    plan_cfg = validate(doc["config"])
    if config_hash(plan_cfg) != doc["config_sha256"]:
        raise PlanMismatch(f"{path}: embedded configuration does not match its recorded hash")
    if cfg is not None and config_hash(cfg) != doc["config_sha256"]:
        raise PlanMismatch("plan/config hash mismatch: the configuration's planning sections differ from the plan")
    problem = design_problem(plan_cfg)
    w = problem.weights
    frozen = doc["weights"]
    if (w.w1, w.w2, w.boundary) != (frozen["w1"], frozen["w2"], frozen["boundary"]):
        raise PlanMismatch(f"{path}: recomputed combination weights differ from the frozen plan")
    choice = np.asarray(doc["choice"], int)
    rule = DecisionRule(problem, doc["criterion"], float(doc["calibration"]), choice, float(doc["power"]),
                        float(doc["target"]))
    if not np.array_equal(problem.select(problem.plan_cp, rule.criterion, rule.calibration), choice):
        raise PlanMismatch(f"{path}: recomputed decision rule differs from the frozen plan")
    return rule, plan_cfg
