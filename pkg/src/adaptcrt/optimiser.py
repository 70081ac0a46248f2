"""Stage-2 design selection, calibration of the decision rule and its objectives.

A :class:`DesignProblem` bundles a stage-1 design, a stage-2 grid and the
planning assumptions. It caches the quantities that do not depend on the
calibration constant (information, conditional power at the z1 grid, and
per-cell power integrals), so every bisection step only re-selects actions.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional

import numpy as np

from .designs import Stage1Design, Stage2Design, Stage2Grid, grid_attributes
from .inference import CombinationWeights, StageInformation, planning_weights, stage_information
from .model import CorrelationModel, DesignError, OutcomeModel
from .power import (
    PowerQuery,
    cell_power_integrals,
    cell_probabilities,
    conditional_power,
    rule_power,
    stage1_density,
    stage1_rejection,
    total_power,
)

CRITERIA = ("cost-penalised", "budget-constrained")


class TargetUnachievable(DesignError):
    """The target power cannot be reached with the given grid."""

    def __init__(self, max_power: float, target: float):
        super().__init__(f"target power {target:.4f} unachievable; maximum attainable power is {max_power:.4f}")
        self.max_power = max_power
        self.target = target


class CalibrationWarning(UserWarning):
    pass


@dataclass(frozen=True)
class CostModel:
    """Proportionate cost: one new cluster costs ``rho`` participants."""

    rho: float = 0.0

    def __post_init__(self):
        if not self.rho >= 0:
            raise DesignError("rho must be >= 0")

    def stage1(self, design: Stage1Design) -> float:
        return design.cost(self.rho)

    def stage2(self, design: Stage1Design, g: Stage2Design) -> float:
        return design.stage2_cost(g, self.rho)


@dataclass(frozen=True)
class Action:
    kind: str  # "stop-efficacy", "stop-futility" or "continue"
    design: Optional[Stage2Design] = None
    index: int = -1
    cp: float = float("nan")
    cost: float = 0.0


@dataclass(eq=False)
class DesignProblem:
    """A stage-1 design together with its stage-2 grid and planning model.

    Args:
        stage1: Stage-1 design.
        grid: Candidate stage-2 designs.
        theta: Planning correlation model.
        outcome: Outcome model (link and period effects).
        delta: Target effect on the linear-predictor scale.
        rho: Cluster-to-participant cost ratio.
        alpha: Test level.
        sided: 1 or 2.
        small_sample: Use between-within t tails in conditional power.
        stage1_density: ``"normal"`` or ``"noncentral-t"``.
        reference: Planning reference stage-2 design used to fix the
            weights. Defaults to ``stage1.reference_stage2()``.
        n_z: Number of z1 breakpoints on ``[-c, c]``.
        futility_floor: Minimum conditional power for continuing under the
            budget-constrained criterion.
        tol: Quadrature tolerance.
        fixed_weights: Use these combination weights instead of deriving
            them from ``reference`` (e.g. ``w1 = 1`` for a single-stage plan).
    """

    stage1: Stage1Design
    grid: Stage2Grid
    theta: CorrelationModel
    outcome: OutcomeModel
    delta: float
    rho: float = 0.0
    alpha: float = 0.05
    sided: int = 2
    small_sample: bool = False
    stage1_density: str = "normal"
    reference: Optional[Stage2Design] = None
    n_z: int = 201
    futility_floor: float = 0.10
    tol: float = 1e-6
    fixed_weights: Optional[CombinationWeights] = None

    def __post_init__(self):
        if self.n_z < 2:
            raise DesignError("n_z must be >= 2")
        if self.reference is None:
            self.reference = self.stage1.reference_stage2()
        self.cost_model = CostModel(self.rho)

    # -- planning quantities -------------------------------------------------

    @cached_property
    def weights(self) -> CombinationWeights:
        if self.fixed_weights is not None:
            return self.fixed_weights
        layout = self.stage1.layout(self.reference)
        return planning_weights(layout, self.theta, self.outcome, self.alpha, self.sided)

    @property
    def boundary(self) -> float:
        return self.weights.boundary

    def information(self, theta: Optional[CorrelationModel] = None) -> StageInformation:
        """Stage-1 and conditional stage-2 information of every grid candidate."""
        theta = self.theta if theta is None else theta
        if theta == self.theta and "_plan_info" in self.__dict__:
            return self.__dict__["_plan_info"]
        G = len(self.grid)
        i1 = np.zeros(G)
        i2c = np.zeros(G)
        df1 = np.zeros(G, int)
        df2c = np.zeros(G, int)
        for idx, slots in self.stage1.slots(self.grid.candidates):
            info = stage_information(slots, theta, self.outcome)
            i1[idx], i2c[idx], df1[idx], df2c[idx] = info.i1, info.i2c, info.df1, info.df2c
        out = StageInformation(i1, i2c, df1, df2c)
        if theta == self.theta:
            self.__dict__["_plan_info"] = out
        return out

    @cached_property
    def stage1_information(self) -> tuple[float, int]:
        info = stage_information(self.stage1.stage1_slots(), self.theta, self.outcome)
        return float(info.i1[0]), int(info.df1[0])

    def query(self, theta: Optional[CorrelationModel] = None, delta: Optional[float] = None) -> PowerQuery:
        """Power query under ``theta`` (default: planning) and effect ``delta``."""
        if theta is None or theta == self.theta:
            i1, df1 = self.stage1_information
        else:
            info = stage_information(self.stage1.stage1_slots(), theta, self.outcome)
            i1, df1 = float(info.i1[0]), int(info.df1[0])
        return PowerQuery(
            self.delta if delta is None else delta,
            self.weights,
            i1,
            df1,
            self.small_sample,
            self.stage1_density,
        )

    @cached_property
    def attributes(self) -> dict[str, np.ndarray]:
        return grid_attributes(self.stage1, self.grid, self.rho)

    @property
    def cost(self) -> np.ndarray:
        return self.attributes["cost"]

    @cached_property
    def stage1_cost(self) -> float:
        return self.cost_model.stage1(self.stage1)

    @cached_property
    def order(self) -> np.ndarray:
        """Candidate order used for tie-breaking: cost, new clusters, m2, grid index."""
        a = self.attributes
        return np.lexsort((np.arange(len(self.grid)), a["m2"], a["k2"], a["cost"]))

    @cached_property
    def z_grid(self) -> np.ndarray:
        c = self.boundary
        return np.linspace(-c, c, self.n_z)

    # -- cached tables -------------------------------------------------------

    def cp_table(self, theta: Optional[CorrelationModel] = None, z=None) -> np.ndarray:
        """Conditional power at each z1 (rows) for each candidate (columns)."""
        info = self.information(theta)
        q = self.query()
        z = self.z_grid[:-1] if z is None else np.atleast_1d(np.asarray(z, float))
        return conditional_power(z[:, None], info.i2c[None, :], q, info.df2c[None, :])

    @cached_property
    def plan_cp(self) -> np.ndarray:
        return self.cp_table()

    def integrals(self, columns) -> np.ndarray:
        """Per-cell power integrals (n_z - 1, len(columns)) under the plan.

        Columns are computed on first use and cached; values do not depend
        on which columns are requested together.
        """
        cache = self.__dict__.setdefault("_integrals", {})
        columns = np.asarray(columns, int)
        missing = [int(c) for c in np.unique(columns) if int(c) not in cache]
        if missing:
            info = self.information()
            J = cell_power_integrals(self.z_grid, info.i2c[missing], self.query(), info.df2c[missing], self.tol)
            for j, c in enumerate(missing):
                cache[c] = J[:, j]
        if columns.size == 0:
            return np.zeros((self.n_z - 1, 0))
        return np.stack([cache[int(c)] for c in columns], axis=1)

    @cached_property
    def plan_stage1_rejection(self) -> float:
        return stage1_rejection(self.query(), self.boundary)

    @cached_property
    def plan_cell_probabilities(self) -> np.ndarray:
        return cell_probabilities(self.z_grid, self.query())

    # -- selection -----------------------------------------------------------

    def select(self, cp: np.ndarray, criterion: str, value: float) -> np.ndarray:
        """Index of the chosen candidate per row of ``cp`` (-1 = futility)."""
        order = self.order
        cost = self.cost[order]
        cps = np.atleast_2d(cp)[:, order]
        if criterion == "cost-penalised":
            if value < 0:
                raise ValueError("lambda must be >= 0")
            score = cps - value * cost[None, :]
            best = np.argmax(score, axis=1)
            keep = score[np.arange(score.shape[0]), best] >= 0
        elif criterion == "budget-constrained":
            if value < 0:
                raise ValueError("cost cap must be >= 0")
            feasible = cost <= value
            if not np.any(feasible):
                return np.full(cps.shape[0], -1)
            score = np.where(feasible[None, :], cps, -np.inf)
            best = np.argmax(score, axis=1)
            keep = score[np.arange(score.shape[0]), best] >= self.futility_floor
        else:
            raise ValueError(f"criterion must be one of {CRITERIA}")
        return np.where(keep, order[best], -1)

    def power_of_choice(self, choice: np.ndarray) -> float:
        used, local = np.unique(choice[choice >= 0], return_inverse=True)
        compact = np.full(choice.shape, -1)
        compact[choice >= 0] = local
        return rule_power(self.plan_stage1_rejection, self.integrals(used), compact)

    def rule(self, criterion: str, value: float, target: float = float("nan"), diagnostics=None) -> "DecisionRule":
        choice = self.select(self.plan_cp, criterion, value)
        return DecisionRule(
            problem=self,
            criterion=criterion,
            calibration=float(value),
            choice=choice,
            power=self.power_of_choice(choice),
            target=target,
            diagnostics=diagnostics or {},
        )


def _action(problem: DesignProblem, z1: float, idx: int, cp_row: np.ndarray) -> Action:
    if idx < 0:
        return Action("stop-futility")
    return Action("continue", problem.grid[idx], int(idx), float(cp_row[idx]), float(problem.cost[idx]))


def optimise_cost_penalised(problem: DesignProblem, z1: float, lam: float,
                            theta: Optional[CorrelationModel] = None) -> Action:
    """Choose the stage-2 design maximising ``CP - lam * C`` at ``z1``.

    Stops for efficacy outside the boundary and for futility when no design
    has a non-negative net benefit.
    """
    if abs(z1) > problem.boundary:
        return Action("stop-efficacy")
    cp = problem.cp_table(theta, z1)
    return _action(problem, z1, int(problem.select(cp, "cost-penalised", lam)[0]), cp[0])


def optimise_budget_constrained(problem: DesignProblem, z1: float, cap: float,
                                theta: Optional[CorrelationModel] = None) -> Action:
    """Choose the stage-2 design with the highest CP among those costing at most ``cap``."""
    if abs(z1) > problem.boundary:
        return Action("stop-efficacy")
    cp = problem.cp_table(theta, z1)
    return _action(problem, z1, int(problem.select(cp, "budget-constrained", cap)[0]), cp[0])


@dataclass(eq=False)
class DecisionRule:
    """Step-function rule over the z1 grid.

    ``choice[i]`` is the grid index selected on ``[z_i, z_{i+1})`` or -1 for
    a futility stop. Values outside ``[-c, c]`` stop for efficacy.
    """

    problem: DesignProblem
    criterion: str
    calibration: float
    choice: np.ndarray
    power: float
    target: float = float("nan")
    diagnostics: dict = field(default_factory=dict)

    @property
    def z_grid(self) -> np.ndarray:
        return self.problem.z_grid

    @property
    def boundary(self) -> float:
        return self.problem.boundary

    @property
    def weights(self) -> CombinationWeights:
        return self.problem.weights

    def cell_index(self, z1: float) -> int:
        """Cell of ``z1`` (nearest lower breakpoint); -1 outside ``[-c, c]``."""
        if abs(z1) > self.boundary:
            return -1
        i = int(np.searchsorted(self.z_grid, z1, side="right")) - 1
        return min(max(i, 0), len(self.choice) - 1)

    def action(self, z1: float) -> Action:
        i = self.cell_index(z1)
        if i < 0:
            return Action("stop-efficacy")
        g = int(self.choice[i])
        return _action(self.problem, z1, g, self.problem.plan_cp[i])

    def table(self) -> list[dict]:
        """Rows of the rule (one per z1 cell) with the stage-1 density under H1."""
        p = self.problem
        dens = stage1_density(self.z_grid[:-1], p.query())
        rows = []
        for i, z in enumerate(self.z_grid[:-1]):
            g = int(self.choice[i])
            row = {"z1": float(z), "action": "continue" if g >= 0 else "stop-futility",
                   "K2": None, "m2": None, "t2": None, "r": None, "cp": 0.0, "cost": 0.0,
                   "density": float(dens[i])}
            if g >= 0:
                d = p.grid[g].as_dict()
                row.update(K2=d["k2"], m2=d["m2"], t2=d["t2"], r=d["r"],
                           cp=float(p.plan_cp[i, g]), cost=float(p.cost[g]))
            rows.append(row)
        return rows

    def to_dict(self) -> dict:
        w = self.weights
        return {
            "criterion": self.criterion,
            "calibration": self.calibration,
            "target_power": None if math.isnan(self.target) else self.target,
            "power": self.power,
            "boundary": self.boundary,
            "w1": w.w1,
            "w2": w.w2,
            "alpha": w.alpha,
            "sided": w.sided,
            "stage1": self.problem.stage1.describe(),
            "choice": [int(c) for c in self.choice],
            "diagnostics": self.diagnostics,
            "rows": self.table(),
        }


def calibrate(problem: DesignProblem, target: float, criterion: str,
              max_iter: int = 60, tolerance: float = 0.0005) -> DecisionRule:
    """Find the calibration constant whose rule attains ``target`` power.

    Cost-penalised rules bisect ``lambda`` on ``[0, 1/min cost]``;
    budget-constrained rules bisect the cap over the distinct grid costs in
    ``[0, max cost]`` (the rule only changes at those values). The returned
    rule always has power at least ``target``.

    Raises:
        TargetUnachievable: The most generous rule falls short of ``target``.
    """
    if criterion not in CRITERIA:
        raise ValueError(f"criterion must be one of {CRITERIA}")
    history: list[tuple[float, float]] = []

    def evaluate(v):
        pw = problem.power_of_choice(problem.select(problem.plan_cp, criterion, v))
        history.append((float(v), pw))
        return pw

    if criterion == "cost-penalised":
        positive = problem.cost[problem.cost > 0]
        hi = 1.0 / positive.min() if positive.size else 1.0
        lo = 0.0
        p_lo = evaluate(lo)
        if p_lo < target:
            raise TargetUnachievable(p_lo, target)
        p_hi = evaluate(hi)
        if p_hi >= target:
            return problem.rule(criterion, hi, target, _diagnostics(history, criterion))
        for _ in range(max_iter):
            if p_lo - target < tolerance:
                break
            mid = 0.5 * (lo + hi)
            if mid <= lo or mid >= hi:
                break
            p_mid = evaluate(mid)
            if p_mid >= target:
                lo, p_lo = mid, p_mid
            else:
                hi = mid
        return problem.rule(criterion, lo, target, _diagnostics(history, criterion))

    caps = np.unique(problem.cost)
    lo_i, hi_i = -1, caps.size - 1  # lo_i: infeasible (cap below every cost)
    p_hi = evaluate(caps[hi_i])
    if p_hi < target:
        raise TargetUnachievable(p_hi, target)
    if stage1_rejection(problem.query(), problem.boundary) >= target:
        return problem.rule(criterion, 0.0, target, _diagnostics(history, criterion))
    for _ in range(max_iter):
        if hi_i - lo_i <= 1:
            break
        mid = (lo_i + hi_i) // 2
        if evaluate(caps[mid]) >= target:
            hi_i = mid
        else:
            lo_i = mid
    return problem.rule(criterion, float(caps[hi_i]), target, _diagnostics(history, criterion))


def _diagnostics(history, criterion) -> dict:
    pts = sorted(history)
    vals = np.array([p for _, p in pts])
    # power should fall as lambda grows and rise as the cap grows
    steps = np.diff(vals) if criterion == "budget-constrained" else -np.diff(vals)
    monotone = bool(np.all(steps >= -1e-12))
    if not monotone:
        warnings.warn("total power is not monotone in the calibration constant", CalibrationWarning, stacklevel=3)
    return {"evaluations": len(history), "monotone": monotone}


# ---------------------------------------------------------------------------
# Objectives
# ---------------------------------------------------------------------------

OBJECTIVES = (
    "expected_cost",
    "max_cost",
    "expected_n",
    "max_n",
    "expected_k",
    "max_k",
    "early_stop",
    "power",
)


def rule_objectives(rule: DecisionRule, theta: Optional[CorrelationModel] = None,
                    delta: Optional[float] = None) -> dict[str, float]:
    """Expected and maximum cost, participants and clusters, early-stop probability and power.

    Expectations are over the stage-1 statistic under ``delta`` (default:
    the target effect) and ``theta`` (default: planning values).
    """
    p = rule.problem
    if theta is None and delta is None:
        probs = p.plan_cell_probabilities
        p_eff = p.plan_stage1_rejection
        power = rule.power
    else:
        q = p.query(theta, delta)
        probs = cell_probabilities(p.z_grid, q)
        p_eff = stage1_rejection(q, p.boundary)
        info = p.information(theta)
        power = total_power(rule, q, info.i2c, info.df2c, p.tol)
    a = p.attributes
    go = rule.choice >= 0
    sel = np.where(go, rule.choice, 0)
    c1 = p.stage1_cost
    n1 = float(p.stage1.participants)
    k1 = float(p.stage1.clusters)

    def expect(stage2):
        return float(np.sum(probs[go] * stage2[sel[go]]))

    def worst(stage2):
        return float(stage2[sel[go]].max()) if np.any(go) else 0.0

    return {
        "expected_cost": c1 + expect(a["cost"]),
        "max_cost": c1 + worst(a["cost"]),
        "expected_n": n1 + expect(a["participants"]),
        "max_n": n1 + worst(a["participants"]),
        "expected_k": k1 + expect(a["clusters"]),
        "max_k": k1 + worst(a["clusters"]),
        "early_stop": float(p_eff + probs[~go].sum()),
        "power": float(power),
    }
