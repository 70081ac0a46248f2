"""Pareto search over stage-1 designs."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .designs import Stage1Design
from .model import DesignError
from .optimiser import DecisionRule, DesignProblem, TargetUnachievable, calibrate, rule_objectives
from .power import single_stage_power

DEFAULT_OBJECTIVES = ("expected_cost", "max_cost")
_MAXIMISE = {"early_stop", "power"}


class NoFeasibleDesign(DesignError):
    pass


def dominates(a: Sequence[float], b: Sequence[float]) -> bool:
    """True iff ``a`` is no worse than ``b`` everywhere and strictly better somewhere."""
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    if a.shape != b.shape:
        raise ValueError("objective vectors differ in length")
    return bool(np.all(a <= b) and np.any(a < b))


def pareto_front(vectors: np.ndarray) -> np.ndarray:
    """Indices of non-dominated rows of ``vectors`` (to be minimised).

    Among identical rows only the first is kept, so callers should order
    rows by their tie-break preference.
    """
    v = np.asarray(vectors, float)
    if v.ndim != 2:
        raise ValueError("vectors must be a 2-D array")
    n = v.shape[0]
    keep = []
    for i in range(n):
        le = np.all(v <= v[i], axis=1)
        lt = np.any(v < v[i], axis=1)
        if np.any(le & lt):
            continue
        if np.any(np.all(v[:i] == v[i], axis=1)):
            continue
        keep.append(i)
    return np.asarray(keep, int)


def design_key(design: Stage1Design) -> tuple:
    """Tie-break order: clusters, then stage-1 size, then stage-1 periods."""
    d = design.describe()
    k = d.get("k1", d.get("k"))
    return (k, d["m1"], d["t1"], d.get("baseline_m", 0.0))


@dataclass(eq=False)
class ParetoPoint:
    """One evaluated stage-1 design.

    ``status`` is ``"frontier"``, ``"dominated"``, ``"infeasible"`` (target
    power unreachable) or ``"screened"`` (stage-1 power below the screen).
    """

    design: Stage1Design
    objectives: dict
    status: str
    stage1_power: float
    rule: Optional[DecisionRule] = None
    message: str = ""

    def vector(self, names: Sequence[str]) -> np.ndarray:
        return np.array([(-1.0 if n in _MAXIMISE else 1.0) * self.objectives[n] for n in names])

    def as_row(self) -> dict:
        row = dict(self.design.describe())
        row.update({"status": self.status, "stage1_power": self.stage1_power})
        if self.rule is not None:
            row.update({"criterion": self.rule.criterion, "calibration": self.rule.calibration,
                        "boundary": self.rule.boundary, "w1": self.rule.weights.w1})
        row.update(self.objectives)
        return row


@dataclass
class FrontierResult:
    points: list
    objectives: tuple

    @property
    def frontier(self) -> list:
        return [p for p in self.points if p.status == "frontier"]

    def rows(self) -> list[dict]:
        return [p.as_row() for p in self.points]


def stage1_power(problem: DesignProblem) -> float:
    """Power of the stage-1 data analysed alone at the full level alpha."""
    i1, df1 = problem.stage1_information
    return single_stage_power(i1, problem.delta, df1, problem.alpha, problem.sided,
                              small_sample=problem.stage1_density == "noncentral-t")


def frontier_search(
    designs: Iterable[Stage1Design],
    make_problem: Callable[[Stage1Design], DesignProblem],
    target: float,
    criterion: str,
    objectives: Sequence[str] = DEFAULT_OBJECTIVES,
    min_stage1_power: float = 0.6,
    progress: Optional[Callable[[int, int], None]] = None,
    tolerance: float = 0.0005,
) -> FrontierResult:
    """Calibrate a rule for every stage-1 design and mark the Pareto frontier.

    Designs whose stage-1 power does not exceed ``min_stage1_power`` are
    screened out before calibration; ``tolerance`` is passed to
    :func:`calibrate`. Objectives listed in ``_MAXIMISE``
    (early-stop probability, power) are maximised, all others minimised.

    Raises:
        NoFeasibleDesign: No design reaches ``target``.
    """
    objectives = tuple(objectives)
    unique = {}
    for d in designs:
        unique.setdefault(design_key(d), d)
    ordered = [unique[k] for k in sorted(unique)]
    if not ordered:
        raise NoFeasibleDesign("empty stage-1 design space")
    points = []
    for n, design in enumerate(ordered):
        problem = make_problem(design)
        s1 = stage1_power(problem)
        if not s1 > min_stage1_power:
            points.append(ParetoPoint(design, {}, "screened", s1))
        else:
            try:
                rule = calibrate(problem, target, criterion, tolerance=tolerance)
            except TargetUnachievable as exc:
                points.append(ParetoPoint(design, {}, "infeasible", s1, message=str(exc)))
            else:
                points.append(ParetoPoint(design, rule_objectives(rule), "dominated", s1, rule))
        if progress is not None:
            progress(n + 1, len(ordered))
    feasible = [p for p in points if p.status == "dominated"]
    if not feasible:
        raise NoFeasibleDesign("no stage-1 design reaches the target power")
    front = pareto_front(np.array([p.vector(objectives) for p in feasible]))
    for i in front:
        feasible[i].status = "frontier"
    return FrontierResult(points, objectives)
