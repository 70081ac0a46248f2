"""Cluster-period layouts, correlation models and working covariance matrices.

Everything here works at cluster-period resolution: a cell is one cluster in
one period, summarised by its mean (or event count) over ``m`` participants.
For the compound-symmetric families used here this aggregation is exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
from scipy import linalg
from scipy.special import expit, logit

FAMILIES = ("exchangeable", "nested-exchangeable", "exponential-decay")
OUTCOMES = ("gaussian", "binomial")
LAYOUT_KINDS = ("parallel", "parallel-baseline", "stepped-wedge", "staggered")


class DesignError(ValueError):
    """Invalid layout or model parameters."""


class NotPositiveDefinite(DesignError):
    pass


@dataclass(frozen=True)
class CorrelationModel:
    """Variance and correlation parameters of the cluster random effects.

    ``dispersion`` is the participant-level residual variance for Gaussian
    outcomes and a multiplicative over-dispersion scale for binomial
    outcomes. In both cases the cluster random-effect variance is
    ``icc / (1 - icc)`` times the residual variance.
    """

    family: str = "nested-exchangeable"
    icc: float = 0.05
    cac: float = 1.0
    decay: float = 1.0
    dispersion: float = 1.0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise DesignError(f"unknown correlation family {self.family!r}")
        if not 0.0 <= self.icc < 1.0:
            raise DesignError(f"icc must lie in [0, 1), got {self.icc}")
        if not 0.0 < self.cac <= 1.0:
            raise DesignError(f"cac must lie in (0, 1], got {self.cac}")
        if not 0.0 < self.decay <= 1.0:
            raise DesignError(f"decay must lie in (0, 1], got {self.decay}")
        if not self.dispersion > 0.0:
            raise DesignError(f"dispersion must be positive, got {self.dispersion}")

    @property
    def period_parameter(self) -> float:
        """The between-period parameter in use (cac or decay), 1 if none."""
        if self.family == "nested-exchangeable":
            return self.cac
        if self.family == "exponential-decay":
            return self.decay
        return 1.0

    def with_period_parameter(self, value: float) -> "CorrelationModel":
        if self.family == "nested-exchangeable":
            return replace(self, cac=value)
        if self.family == "exponential-decay":
            return replace(self, decay=value)
        return self

    def period_correlation(self, periods: np.ndarray) -> np.ndarray:
        """Correlation of cluster-period random effects between ``periods``."""
        p = np.asarray(periods)
        lag = np.abs(p[:, None] - p[None, :])
        if self.family == "exchangeable":
            return np.ones(lag.shape)
        if self.family == "nested-exchangeable":
            return np.where(lag == 0, 1.0, self.cac)
        return self.decay ** lag.astype(float)


@dataclass(frozen=True)
class OutcomeModel:
    """Outcome family, baseline and per-period nuisance effects.

    For binomial outcomes the GLM iterated weight is evaluated at the pooled
    probability of the two arms, ``(p_control + p_treated) / 2``, where the
    treated probability uses ``planning_effect`` on the logit scale.
    """

    family: str = "gaussian"
    baseline: float = 0.0
    period_effects: tuple = ()
    planning_effect: float = 0.0

    def __post_init__(self):
        if self.family not in OUTCOMES:
            raise DesignError(f"unknown outcome family {self.family!r}")
        if self.family == "binomial" and not 0.0 < self.baseline < 1.0:
            raise DesignError("binomial baseline probability must lie in (0, 1)")
        object.__setattr__(self, "period_effects", tuple(float(v) for v in self.period_effects))

    def period_effect_vector(self, n_periods: int) -> np.ndarray:
        if not self.period_effects:
            return np.zeros(n_periods)
        if len(self.period_effects) < n_periods:
            raise DesignError(
                f"period_effects has {len(self.period_effects)} entries, layout needs {n_periods}"
            )
        return np.asarray(self.period_effects[:n_periods])

    def null_linear_predictor(self, n_periods: int) -> np.ndarray:
        base = logit(self.baseline) if self.family == "binomial" else self.baseline
        return base + self.period_effect_vector(n_periods)

    def pooled_probability(self, eta: np.ndarray | float) -> np.ndarray:
        eta = np.asarray(eta, dtype=float)
        return 0.5 * (expit(eta) + expit(eta + self.planning_effect))


def residual_variance(corr: CorrelationModel, outcome: OutcomeModel, n_periods: int) -> np.ndarray:
    """Per-participant residual variance on the linear predictor scale, by period.

    This is ``1/w`` with ``w`` the GLM iterated weight.
    """
    if outcome.family == "gaussian":
        return np.full(n_periods, corr.dispersion)
    p = outcome.pooled_probability(outcome.null_linear_predictor(n_periods))
    return corr.dispersion / (p * (1.0 - p))


def random_effect_variance(corr: CorrelationModel, outcome: OutcomeModel) -> float:
    """Variance of the cluster(-period) random effect, tau^2."""
    within = float(residual_variance(corr, outcome, 1)[0])
    return corr.icc / (1.0 - corr.icc) * within


def icc_from_variances(tau2: float, within: float) -> float:
    return tau2 / (tau2 + within)


def logit_effect(baseline: float, risk_difference: float) -> float:
    """Treatment effect on the logit scale for an absolute risk difference."""
    return float(logit(baseline + risk_difference) - logit(baseline))


# ---------------------------------------------------------------------------
# Layouts
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class TrialLayout:
    """Cluster x period grid with per-cell sizes and treatment indicators.

    ``stage_boundary`` is the number of stage-1 periods: period indices
    ``< stage_boundary`` (0-based) belong to stage 1.
    """

    cell_sizes: np.ndarray
    treatment: np.ndarray
    stage_boundary: int

    def __post_init__(self):
        sizes = np.asarray(self.cell_sizes, dtype=float)
        treat = np.asarray(self.treatment, dtype=float)
        if sizes.ndim != 2 or treat.shape != sizes.shape:
            raise DesignError("treatment and cell_sizes must be matching (clusters, periods) arrays")
        if sizes.shape[0] < 1 or sizes.shape[1] < 1:
            raise DesignError("layout needs at least one cluster and one period")
        if np.any(sizes < 0):
            raise DesignError("cell sizes must be non-negative")
        if not np.all((treat == 0) | (treat == 1)):
            raise DesignError("treatment must be binary")
        if not 1 <= self.stage_boundary <= sizes.shape[1]:
            raise DesignError("stage_boundary must lie in [1, n_periods]")
        sizes.setflags(write=False)
        treat.setflags(write=False)
        object.__setattr__(self, "cell_sizes", sizes)
        object.__setattr__(self, "treatment", treat)

    @property
    def n_clusters(self) -> int:
        return self.cell_sizes.shape[0]

    @property
    def n_periods(self) -> int:
        return self.cell_sizes.shape[1]

    @property
    def total_participants(self) -> float:
        return float(self.cell_sizes.sum())

    def observed(self) -> np.ndarray:
        return self.cell_sizes > 0

    def cells(self) -> tuple[np.ndarray, np.ndarray]:
        """(cluster, period) indices of observed cells, stage 1 first, cluster-major."""
        obs = self.observed()
        cl, pe = np.nonzero(obs)
        stage2 = pe >= self.stage_boundary
        order = np.lexsort((pe, cl, stage2))
        return cl[order], pe[order]

    def stage_of_cells(self) -> np.ndarray:
        _, pe = self.cells()
        return np.where(pe < self.stage_boundary, 1, 2)

    def with_stage_boundary(self, t1: int) -> "TrialLayout":
        return TrialLayout(self.cell_sizes, self.treatment, t1)

    def stage1(self) -> "TrialLayout":
        """The stage-1 part of the layout alone."""
        t1 = self.stage_boundary
        keep = self.cell_sizes[:, :t1].sum(axis=1) > 0
        return TrialLayout(self.cell_sizes[keep, :t1], self.treatment[keep, :t1], t1)

    def to_slots(self) -> "SlotLayout":
        rows = np.concatenate([self.cell_sizes, self.treatment], axis=1)
        uniq, counts = np.unique(rows, axis=0, return_counts=True)
        T = self.n_periods
        sizes = uniq[:, :T]
        return SlotLayout(sizes > 0, uniq[:, T:], sizes, counts.astype(float), self.stage_boundary)

    def __eq__(self, other):
        if not isinstance(other, TrialLayout):
            return NotImplemented
        return (
            self.stage_boundary == other.stage_boundary
            and self.cell_sizes.shape == other.cell_sizes.shape
            and np.array_equal(self.cell_sizes, other.cell_sizes)
            and np.array_equal(self.treatment, other.treatment)
        )

    def __hash__(self):
        return hash((self.stage_boundary, self.cell_sizes.tobytes(), self.treatment.tobytes()))


@dataclass(frozen=True, eq=False)
class SlotLayout:
    """Layout stored as groups ("slots") of identical clusters.

    ``mask`` and ``treat`` are (J, T); ``sizes`` is (J, T) or batched
    (G, J, T) and ``counts`` is (J,) or (G, J). All clusters in a slot share
    observed cells, treatment pattern and sizes, so their covariance blocks
    are identical.
    """

    mask: np.ndarray
    treat: np.ndarray
    sizes: np.ndarray
    counts: np.ndarray
    stage_boundary: int

    @property
    def n_slots(self) -> int:
        return self.mask.shape[0]

    @property
    def n_periods(self) -> int:
        return self.mask.shape[1]

    def to_layout(self) -> TrialLayout:
        if np.ndim(self.sizes) != 2:
            raise DesignError("only unbatched slot layouts expand to a TrialLayout")
        rep = np.asarray(self.counts, dtype=int)
        sizes = np.repeat(np.where(self.mask, self.sizes, 0.0), rep, axis=0)
        treat = np.repeat(np.where(self.mask, self.treat, 0.0), rep, axis=0)
        return TrialLayout(sizes, treat, self.stage_boundary)


def _sw_switch_periods(k: int, t: int) -> np.ndarray:
    """0-based first treated period for each of ``k`` stepped-wedge clusters."""
    j = np.arange(k)
    return 1 + (j * (t - 1)) // k


def staggered_switch_periods(
    k: int, t1: int, t: int, r: float, planned_periods: Optional[int] = None
) -> np.ndarray:
    """Switch periods (0-based; ``t`` means never) for a staggered stage-2 roll-out.

    Stage 1 follows a stepped-wedge schedule planned over ``planned_periods``.
    Clusters still in control after stage 1 are re-scheduled over stage-2
    periods ``t1 .. t-1``: ``r = 1`` maps the remaining planned roll-out
    linearly onto the stage-2 periods, ``r = 0`` switches just enough clusters
    at the first stage-2 period to reach a 1:1 treated:control split and
    leaves the rest in control; intermediate ``r`` interpolates each switch
    time and rounds half up.
    """
    tp = t if planned_periods is None else planned_periods
    planned = _sw_switch_periods(k, tp)
    switch = planned.astype(float).copy()
    remaining = np.flatnonzero(planned >= t1)
    if remaining.size == 0:
        return switch.astype(int)
    span_planned = max(tp - t1 - 1, 1)
    span_new = t - t1 - 1
    s1 = t1 + np.floor((planned[remaining] - t1) * span_new / span_planned + 0.5)
    s1 = np.minimum(s1, t - 1)
    already = k - remaining.size
    need = max(math.ceil(k / 2) - already, 0)
    s0 = np.full(remaining.size, float(t))
    s0[:need] = t1
    s = np.floor((1.0 - r) * s0 + r * s1 + 0.5)
    switch[remaining] = np.minimum(s, t)
    return switch.astype(int)


def build_layout(
    kind: str,
    k: int,
    t: int,
    m: float,
    r: float = 0.0,
    stage_boundary: Optional[int] = None,
    m2: Optional[float] = None,
    planned_periods: Optional[int] = None,
) -> TrialLayout:
    """Build a named layout.

    Args:
        kind: one of ``parallel``, ``parallel-baseline``, ``stepped-wedge``,
            ``staggered``.
        k: clusters per arm (parallel kinds) or total clusters (stepped-wedge
            and staggered, one cluster per sequence).
        t: number of periods.
        m: cell size in stage-1 periods.
        r: staggering of the stage-2 roll-out (``staggered`` only).
        stage_boundary: number of stage-1 periods; defaults to ``t``.
        m2: cell size in stage-2 periods; defaults to ``m``.
        planned_periods: periods of the stepped-wedge plan followed in stage 1
            (``staggered`` only); defaults to ``t``.
    """
    if kind not in LAYOUT_KINDS:
        raise DesignError(f"unknown layout kind {kind!r}")
    if k < 1 or t < 1 or m <= 0:
        raise DesignError("k, t and m must be positive")
    if kind in ("stepped-wedge", "staggered", "parallel-baseline") and t < 2:
        raise DesignError(f"{kind} layout needs at least 2 periods")
    t1 = t if stage_boundary is None else stage_boundary
    if not 1 <= t1 <= t:
        raise DesignError("stage_boundary must lie in [1, t]")
    m2 = m if m2 is None else m2
    period = np.arange(t)
    if kind in ("parallel", "parallel-baseline"):
        arm = np.repeat([1.0, 0.0], k)[:, None]
        treat = np.broadcast_to(arm, (2 * k, t)).copy()
        if kind == "parallel-baseline":
            treat[:, 0] = 0.0
        n_cl = 2 * k
    else:
        if kind == "stepped-wedge":
            switch = _sw_switch_periods(k, t)
        else:
            switch = staggered_switch_periods(k, t1, t, r, planned_periods)
        treat = (period[None, :] >= switch[:, None]).astype(float)
        n_cl = k
    sizes = np.where(period[None, :] < t1, float(m), float(m2)) * np.ones((n_cl, 1))
    return TrialLayout(sizes, treat, t1)


# ---------------------------------------------------------------------------
# Working covariance
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class WorkingCovariance:
    """Cluster-period working covariance, ordered stage-1 cells first."""

    sigma: np.ndarray
    weights: np.ndarray
    stage: np.ndarray
    clusters: np.ndarray
    periods: np.ndarray

    @property
    def idx1(self) -> np.ndarray:
        return np.flatnonzero(self.stage == 1)

    @property
    def idx2(self) -> np.ndarray:
        return np.flatnonzero(self.stage == 2)

    @property
    def sigma11(self) -> np.ndarray:
        return self.sigma[np.ix_(self.idx1, self.idx1)]

    @property
    def sigma12(self) -> np.ndarray:
        return self.sigma[np.ix_(self.idx1, self.idx2)]

    @property
    def sigma22(self) -> np.ndarray:
        return self.sigma[np.ix_(self.idx2, self.idx2)]


def cell_covariance_block(
    periods: np.ndarray, sizes: np.ndarray, tau2: float, within: np.ndarray, corr: CorrelationModel
) -> np.ndarray:
    """Covariance of one cluster's cell means over its observed ``periods``."""
    block = tau2 * corr.period_correlation(periods)
    block[np.diag_indices_from(block)] += within[periods] / sizes
    return block


def build_covariance(layout: TrialLayout, corr: CorrelationModel, outcome: OutcomeModel) -> WorkingCovariance:
    """Dense working covariance of the observed cell means of ``layout``."""
    T = layout.n_periods
    outcome.period_effect_vector(T)  # validates the length
    within = residual_variance(corr, outcome, T)
    tau2 = random_effect_variance(corr, outcome)
    cl, pe = layout.cells()
    sizes = layout.cell_sizes[cl, pe]
    n = cl.size
    sigma = np.zeros((n, n))
    for c in np.unique(cl):
        rows = np.flatnonzero(cl == c)
        sigma[np.ix_(rows, rows)] = cell_covariance_block(pe[rows], sizes[rows], tau2, within, corr)
    try:
        np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite("working covariance is not positive definite") from exc
    weights = sizes / within[pe]
    stage = np.where(pe < layout.stage_boundary, 1, 2)
    return WorkingCovariance(sigma, weights, stage, cl, pe)


def individual_covariance(
    layout: TrialLayout, corr: CorrelationModel, outcome: OutcomeModel
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Participant-level covariance (for small aggregation checks only).

    Returns ``(sigma, cluster, period)`` with one row per participant.
    """
    T = layout.n_periods
    within = residual_variance(corr, outcome, T)
    tau2 = random_effect_variance(corr, outcome)
    cl_list, pe_list = [], []
    for c in range(layout.n_clusters):
        for p in range(T):
            n = int(round(layout.cell_sizes[c, p]))
            cl_list += [c] * n
            pe_list += [p] * n
    cl = np.asarray(cl_list)
    pe = np.asarray(pe_list)
    same = cl[:, None] == cl[None, :]
    psi = corr.period_correlation(pe)
    sigma = np.where(same, tau2 * psi, 0.0)
    sigma[np.diag_indices_from(sigma)] += within[pe]
    return sigma, cl, pe


def cholesky_solve(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve ``a x = b`` for symmetric positive definite ``a``."""
    try:
        factor = linalg.cho_factor(a, lower=True, check_finite=False)
    except linalg.LinAlgError as exc:
        raise NotPositiveDefinite("matrix is not positive definite") from exc
    return linalg.cho_solve(factor, b, check_finite=False)
