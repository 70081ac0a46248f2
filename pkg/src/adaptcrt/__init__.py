"""Two-stage adaptive designs for cluster randomised trials.

The package computes combination score tests that account for correlation
between trial stages, calibrates stage-2 decision rules under cost
criteria, searches for Pareto-optimal stage-1 designs, re-estimates
correlation parameters at the interim and checks operating
characteristics by simulation.
"""

__version__ = "0.1.0"

from .designs import ParallelStage1, ParallelStage2, Stage2Grid, StaggeredStage1, StaggeredStage2  # noqa: E402
from .inference import CombinationWeights, StageStatistics, decompose, planning_weights  # noqa: E402
from .interim import CellData, InterimResult, ThetaEstimate, estimate_theta, interim_decide  # noqa: E402
from .model import CorrelationModel, DesignError, OutcomeModel, TrialLayout, build_covariance, build_layout  # noqa: E402
from .optimiser import (  # noqa: E402
    DecisionRule,
    DesignProblem,
    TargetUnachievable,
    calibrate,
    optimise_budget_constrained,
    optimise_cost_penalised,
    rule_objectives,
)
from .pareto import FrontierResult, NoFeasibleDesign, ParetoPoint, frontier_search  # noqa: E402
from .power import PowerQuery, conditional_power, single_stage_power, total_power  # noqa: E402
from .sim import SimResult, SimScenario, generate_trial, run_scenario  # noqa: E402

__all__ = [
    "CellData",
    "CombinationWeights",
    "CorrelationModel",
    "DecisionRule",
    "DesignError",
    "DesignProblem",
    "FrontierResult",
    "InterimResult",
    "NoFeasibleDesign",
    "OutcomeModel",
    "ParallelStage1",
    "ParallelStage2",
    "ParetoPoint",
    "PowerQuery",
    "SimResult",
    "SimScenario",
    "Stage2Grid",
    "StageStatistics",
    "StaggeredStage1",
    "StaggeredStage2",
    "TargetUnachievable",
    "ThetaEstimate",
    "TrialLayout",
    "build_covariance",
    "build_layout",
    "calibrate",
    "conditional_power",
    "decompose",
    "estimate_theta",
    "frontier_search",
    "generate_trial",
    "interim_decide",
    "optimise_budget_constrained",
    "optimise_cost_penalised",
    "planning_weights",
    "rule_objectives",
    "run_scenario",
    "single_stage_power",
    "total_power",
]
