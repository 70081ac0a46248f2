"""Marginal and conditional score statistics for a two-stage cluster trial.

Two computational paths are provided:

* dense operations on a :class:`~adaptcrt.model.WorkingCovariance`
  (``project_treatment``, ``decompose``), used for analysing data;
* :func:`stage_information`, a batched engine that works on groups of
  identical clusters and evaluates the stage-1 and conditional stage-2
  information for many candidate stage-2 designs at once.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import ndtr, ndtri, stdtr, stdtrit

from .model import (
    CorrelationModel,
    DesignError,
    NotPositiveDefinite,
    OutcomeModel,
    SlotLayout,
    TrialLayout,
    WorkingCovariance,
    cholesky_solve,
    random_effect_variance,
    residual_variance,
)


class DegenerateDesign(DesignError):
    """Singular information, unidentifiable treatment effect or similar."""


@dataclass(frozen=True)
class StageStatistics:
    u1: float
    u2c: float
    i1: float
    i2c: float
    z1: float
    z2c: float
    df1: int
    df2c: int
    df_total: int

    @property
    def u(self) -> float:
        return self.u1 + self.u2c

    @property
    def information(self) -> float:
        return self.i1 + self.i2c


@dataclass(frozen=True)
class CombinationWeights:
    """Pre-specified combination weights and the implied efficacy boundary.

    Instances are immutable; weights are fixed once at planning time.
    """

    w1: float
    w2: float
    alpha: float = 0.05
    sided: int = 2
    planning_theta: Optional[CorrelationModel] = None
    planning_layout: Optional[TrialLayout] = None

    def __post_init__(self):
        if not (0.0 < self.w1 <= 1.0 and 0.0 <= self.w2 < 1.0):
            raise DesignError("weights must satisfy 0 < w1 <= 1, 0 <= w2 < 1")
        if abs(self.w1**2 + self.w2**2 - 1.0) > 1e-12:
            raise DesignError("weights must satisfy w1^2 + w2^2 = 1")
        if not 0.0 < self.alpha <= 1.0:
            raise DesignError("alpha must lie in (0, 1]")
        if self.sided not in (1, 2):
            raise DesignError("sided must be 1 or 2")

    @property
    def critical_value(self) -> float:
        """z_{alpha/2} (two-sided) or z_alpha (one-sided)."""
        return float(-ndtri(self.alpha / self.sided))

    @property
    def boundary(self) -> float:
        """Stage-1 efficacy boundary c on the |z1| scale."""
        return self.critical_value / self.w1


def combination_statistic(z1, z2c, weights: CombinationWeights):
    return weights.w1 * np.asarray(z1) + weights.w2 * np.asarray(z2c)


def t_to_z(t, df):
    """Map a t statistic with ``df`` degrees of freedom onto the z scale.

    Computed on the lower tail for both signs so that extreme statistics keep
    full relative precision.
    """
    t = np.asarray(t, dtype=float)
    df = np.asarray(df, dtype=float)
    if not np.all(np.isfinite(t)):
        raise ValueError("t_to_z requires finite input")
    if np.any(df < 1):
        raise ValueError("degrees of freedom must be >= 1")
    lower = ndtri(stdtr(df, -np.abs(t)))
    out = np.where(t < 0, lower, -lower)
    return out if out.ndim else float(out)


def z_to_t(z, df):
    """Inverse of :func:`t_to_z`."""
    z = np.asarray(z, dtype=float)
    lower = stdtrit(df, ndtr(-np.abs(z)))
    out = np.where(z < 0, lower, -lower)
    return out if out.ndim else float(out)


# ---------------------------------------------------------------------------
# Dense path
# ---------------------------------------------------------------------------


def _nuisance_matrix(periods: np.ndarray) -> np.ndarray:
    """Period indicators (intercept absorbed) for the given cell periods."""
    levels = np.unique(periods)
    return (periods[:, None] == levels[None, :]).astype(float)


def _gls_project(x: np.ndarray, X: np.ndarray, sigma: np.ndarray) -> np.ndarray:
    sx = cholesky_solve(sigma, np.column_stack([X, x]))
    A = X.T @ sx[:, :-1]
    b = X.T @ sx[:, -1]
    if np.linalg.matrix_rank(A) < A.shape[0]:
        raise DegenerateDesign("nuisance design matrix is rank deficient")
    return x - X @ np.linalg.solve(A, b)


def project_treatment(layout: TrialLayout, cov: WorkingCovariance, stage="full") -> np.ndarray:
    """GLS residual of the treatment column on the period effects.

    ``stage`` is 1, 2 or ``"full"``. Returns the projected vector over the
    cells of that stage (ordered as in ``cov``).
    """
    x = layout.treatment[cov.clusters, cov.periods]
    if stage == "full":
        idx = np.arange(cov.stage.size)
    elif stage in (1, 2):
        idx = np.flatnonzero(cov.stage == stage)
    else:
        raise ValueError("stage must be 1, 2 or 'full'")
    if idx.size == 0:
        return np.zeros(0)
    X = _nuisance_matrix(cov.periods[idx])
    return _gls_project(x[idx], X, cov.sigma[np.ix_(idx, idx)])


# information below this fraction of the unprojected x' S^-1 x is rounding noise
ZERO_INFO = 1e-10


def _df(n_cells: int, n_periods: int) -> int:
    return max(n_cells - n_periods - 1, 0)


def decompose(layout: TrialLayout, cov: WorkingCovariance, residuals: np.ndarray) -> StageStatistics:
    """Split the score and information into stage-1 and conditional stage-2 parts.

    ``residuals`` are cell-level residuals ordered as the cells of ``cov``.
    """
    r = np.asarray(residuals, dtype=float)
    if r.shape != cov.stage.shape:
        raise ValueError("residuals must align with the layout cells")
    i1_idx, i2_idx = cov.idx1, cov.idx2
    s11 = cov.sigma11
    xt1 = project_treatment(layout, cov, 1)
    r1 = r[i1_idx]
    sol1 = cholesky_solve(s11, np.column_stack([xt1, r1]))
    u1 = float(xt1 @ sol1[:, 1])
    i1 = float(xt1 @ sol1[:, 0])
    x = layout.treatment[cov.clusters, cov.periods]
    if i1 <= ZERO_INFO * float(x[i1_idx] @ cholesky_solve(s11, x[i1_idx])):
        raise DegenerateDesign("no stage-1 information about the treatment effect")
    df1 = _df(i1_idx.size, np.unique(cov.periods[i1_idx]).size)
    u2c = i2c = 0.0
    df2 = 0
    if i2_idx.size:
        xt2 = project_treatment(layout, cov, 2)
        s12 = cov.sigma12
        s22 = cov.sigma22
        b = cholesky_solve(s11, np.column_stack([s12, xt1, r1]))
        n2 = i2_idx.size
        schur = s22 - s12.T @ b[:, :n2]
        x2c = xt2 - s12.T @ b[:, n2]
        r2c = r[i2_idx] - s12.T @ b[:, n2 + 1]
        sol2 = cholesky_solve(schur, np.column_stack([x2c, r2c]))
        i2c = float(x2c @ sol2[:, 0])
        u2c = float(x2c @ sol2[:, 1])
        if i2c <= ZERO_INFO * float(x[i2_idx] @ cholesky_solve(s22, x[i2_idx])):
            i2c = u2c = 0.0  # treatment confounded with period in stage 2
        df2 = _df(n2, np.unique(cov.periods[i2_idx]).size)
    z1 = u1 / math.sqrt(i1)
    z2c = u2c / math.sqrt(i2c) if i2c > 0 else 0.0
    df_total = _df(cov.stage.size, np.unique(cov.periods).size)
    return StageStatistics(u1, u2c, i1, i2c, z1, z2c, df1, df2, df_total)


# ---------------------------------------------------------------------------
# Batched slot engine
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StageInformation:
    i1: np.ndarray
    i2c: np.ndarray
    df1: np.ndarray
    df2c: np.ndarray

    @property
    def total(self) -> np.ndarray:
        return self.i1 + self.i2c


def _bsolve(a, b):
    return np.linalg.solve(a, b)


def stage_information(slots: SlotLayout, corr: CorrelationModel, outcome: OutcomeModel) -> StageInformation:
    """Stage-1 and conditional stage-2 information for a (batched) slot layout.

    ``slots.sizes`` may be (G, J, T) with ``slots.counts`` (G, J); results
    are then arrays of length G. Identical to :func:`decompose` applied to
    the expanded layout.
    """
    mask = np.asarray(slots.mask, dtype=bool)
    treat = np.asarray(slots.treat, dtype=float)
    sizes = np.asarray(slots.sizes, dtype=float)
    counts = np.asarray(slots.counts, dtype=float)
    if sizes.ndim == 2:
        sizes = sizes[None]
        counts = counts[None]
    G, J, T = sizes.shape
    t1 = slots.stage_boundary
    p2n = T - t1
    within = residual_variance(corr, outcome, T)
    tau2 = random_effect_variance(corr, outcome)

    A1 = np.zeros((G, t1, t1))
    b1 = np.zeros((G, t1))
    c1 = np.zeros(G)
    A2 = np.zeros((G, p2n, p2n))
    b2 = np.zeros((G, p2n))
    c2 = np.zeros(G)
    ncell1 = np.zeros(G)
    ncell2 = np.zeros(G)
    w1_period = np.zeros((G, t1))
    w2_period = np.zeros((G, p2n))
    per_slot = []

    for j in range(J):
        obs = np.flatnonzero(mask[j])
        if obs.size == 0:
            per_slot.append(None)
            continue
        o1 = obs[obs < t1]
        o2 = obs[obs >= t1]
        n1, n2 = o1.size, o2.size
        cnt = counts[:, j]
        V = np.broadcast_to(tau2 * corr.period_correlation(obs), (G, obs.size, obs.size)).copy()
        V[:, np.arange(obs.size), np.arange(obs.size)] += within[obs][None, :] / sizes[:, j, obs]
        try:
            np.linalg.cholesky(V)
        except np.linalg.LinAlgError as exc:
            raise NotPositiveDefinite("cluster covariance block is not positive definite") from exc
        x = treat[j, obs]
        entry = {"V": V, "o1": o1, "o2": o2, "x1": x[:n1], "x2": x[n1:], "cnt": cnt}
        if n1:
            X1 = (o1[:, None] == np.arange(t1)[None, :]).astype(float)
            M = np.concatenate([np.broadcast_to(X1, (G, n1, t1)), np.broadcast_to(x[:n1, None], (G, n1, 1))], axis=2)
            sol = _bsolve(V[:, :n1, :n1], M)
            G1 = np.einsum("ia,gib->gab", X1, sol)
            A1 += cnt[:, None, None] * G1[:, :, :t1]
            b1 += cnt[:, None] * G1[:, :, t1]
            c1 += cnt * np.einsum("i,gi->g", x[:n1], sol[:, :, t1])
            ncell1 += cnt * n1
            w1_period += cnt[:, None] * X1.sum(axis=0)[None, :]
            entry["X1"] = X1
        if n2:
            X2 = (o2[:, None] == np.arange(t1, T)[None, :]).astype(float)
            V22 = V[:, n1:, n1:]
            M = np.concatenate([np.broadcast_to(X2, (G, n2, p2n)), np.broadcast_to(x[n1:, None], (G, n2, 1))], axis=2)
            sol = _bsolve(V22, M)
            G2 = np.einsum("ia,gib->gab", X2, sol)
            A2 += cnt[:, None, None] * G2[:, :, :p2n]
            b2 += cnt[:, None] * G2[:, :, p2n]
            c2 += cnt * np.einsum("i,gi->g", x[n1:], sol[:, :, p2n])
            ncell2 += cnt * n2
            w2_period += cnt[:, None] * X2.sum(axis=0)[None, :]
            entry["X2"] = X2
        per_slot.append(entry)

    present1 = w1_period > 0
    A1 = A1 + np.einsum("gp,pq->gpq", (~present1).astype(float), np.eye(t1))
    a1 = np.linalg.solve(A1, b1[..., None])[..., 0]
    i1 = c1 - np.einsum("gp,gp->g", b1, a1)
    i1 = np.where(i1 <= ZERO_INFO * c1, 0.0, i1)

    i2c = np.zeros(G)
    present2 = w2_period > 0
    if p2n:
        A2 = A2 + np.einsum("gp,pq->gpq", (~present2).astype(float), np.eye(p2n))
        a2 = np.linalg.solve(A2, b2[..., None])[..., 0]
        for entry in per_slot:
            if entry is None or entry["o2"].size == 0:
                continue
            n1 = entry["o1"].size
            V = entry["V"]
            xt2 = entry["x2"][None, :] - np.einsum("ia,ga->gi", entry["X2"], a2)
            S = V[:, n1:, n1:]
            if n1:
                xt1 = entry["x1"][None, :] - np.einsum("ia,ga->gi", entry["X1"], a1)
                B = _bsolve(V[:, :n1, :n1], V[:, :n1, n1:])  # V11^-1 V12
                xt2 = xt2 - np.einsum("gij,gi->gj", B, xt1)
                S = S - np.einsum("gij,gik->gjk", V[:, :n1, n1:], B)
            q = _bsolve(S, xt2[..., None])[..., 0]
            i2c += entry["cnt"] * np.einsum("gi,gi->g", xt2, q)
    df1 = np.maximum(ncell1 - present1.sum(axis=1) - 1, 0)
    df2 = np.where(ncell2 > 0, np.maximum(ncell2 - present2.sum(axis=1) - 1, 0), 0)
    i2c = np.where(i2c <= ZERO_INFO * c2, 0.0, i2c)
    return StageInformation(i1, i2c, df1.astype(int), df2.astype(int))


def layout_information(layout: TrialLayout, corr: CorrelationModel, outcome: OutcomeModel) -> StageInformation:
    """Scalar convenience wrapper of :func:`stage_information` for one layout."""
    return stage_information(layout.to_slots(), corr, outcome)


def planning_weights(
    layout: TrialLayout,
    corr: CorrelationModel,
    outcome: OutcomeModel,
    alpha: float = 0.05,
    sided: int = 2,
) -> CombinationWeights:
    """Combination weights fixed from a planning reference design.

    ``layout`` is the stage-1 layout extended by the planning reference
    stage-2 design; ``layout.stage_boundary`` separates the two stages.
    """
    info = layout_information(layout, corr, outcome)
    i1 = float(info.i1[0])
    i2 = float(info.i2c[0])
    if i1 <= 0:
        raise DegenerateDesign("zero stage-1 information")
    w1 = math.sqrt(i1 / (i1 + i2))
    w2 = math.sqrt(max(1.0 - w1 * w1, 0.0))
    return CombinationWeights(w1, w2, alpha, sided, corr, layout)
