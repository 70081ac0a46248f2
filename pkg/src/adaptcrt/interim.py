"""Interim re-estimation of correlation parameters and the stage-2 decision.

Estimation works on cluster-period summaries. Gaussian outcomes use the
restricted likelihood of the cell means (plus the within-cell sums of
squares when cell standard deviations are supplied), with the residual
variance profiled out analytically. Binomial outcomes use empirical logits
with their binomial sampling variances as known cell-level noise.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
from scipy import optimize, stats
from scipy.special import logit

from .designs import ParallelStage2
from .model import CorrelationModel, DesignError, OutcomeModel, TrialLayout
from .optimiser import Action, DecisionRule

_ICC_MAX = 0.99
_PSI_MIN = 0.01


class DataError(DesignError):
    """Malformed stage-1 data; the message names the offending row/column."""


class EstimationError(DesignError):
    pass


@dataclass(frozen=True)
class CellData:
    """Cluster-period summaries of the stage-1 data.

    ``mean`` is the cell mean (a proportion for binomial outcomes), ``sd``
    the optional within-cell standard deviation (Gaussian only).
    """

    cluster: np.ndarray
    period: np.ndarray
    n: np.ndarray
    mean: np.ndarray
    treatment: np.ndarray
    sd: Optional[np.ndarray] = None

    def __post_init__(self):
        size = np.asarray(self.cluster).size
        for name in ("period", "n", "mean", "treatment"):
            if np.asarray(getattr(self, name)).size != size:
                raise DataError(f"column {name!r} has a different length from 'cluster'")
        if np.any(np.asarray(self.n) < 1):
            raise DataError("cell sizes must be >= 1")

    @property
    def n_clusters(self) -> int:
        return np.unique(self.cluster).size

    @classmethod
    def from_layout(cls, layout: TrialLayout, mean, sd=None) -> "CellData":
        """Wrap cell values ordered as ``layout.cells()`` (stage-1 cells only)."""
        cl, pe = layout.cells()
        keep = pe < layout.stage_boundary
        cl, pe = cl[keep], pe[keep]
        return cls(cl, pe, layout.cell_sizes[cl, pe], np.asarray(mean, float), layout.treatment[cl, pe],
                   None if sd is None else np.asarray(sd, float))

    @classmethod
    def from_csv(cls, path, layout: Optional[TrialLayout] = None, family: str = "gaussian") -> "CellData":
        """Read ``cluster, period, n`` and ``mean`` or ``sum`` (optional ``sd``, ``treatment``).

        Clusters and periods are 0-based indices into ``layout``, which
        supplies treatment when the file has no ``treatment`` column.
        """
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            cols = reader.fieldnames or []
            for need in ("cluster", "period", "n"):
                if need not in cols:
                    raise DataError(f"{path}: missing column {need!r}")
            if "mean" not in cols and "sum" not in cols:
                raise DataError(f"{path}: need a 'mean' or 'sum' column")
            rows = list(reader)
        if not rows:
            raise DataError(f"{path}: no data rows")
        out = {k: [] for k in ("cluster", "period", "n", "mean", "sd", "treatment")}
        for i, row in enumerate(rows, start=2):
            try:
                c, p, n = int(row["cluster"]), int(row["period"]), float(row["n"])
                val = float(row["mean"]) if "mean" in cols and row["mean"] != "" else float(row["sum"]) / n
                sd = float(row["sd"]) if "sd" in cols and row.get("sd", "") != "" else math.nan
                tr = float(row["treatment"]) if "treatment" in cols and row.get("treatment", "") != "" else math.nan
            except (TypeError, ValueError, ZeroDivisionError) as exc:
                bad = next((k for k in ("cluster", "period", "n", "mean", "sum", "sd", "treatment")
                            if k in row and not _is_number(row[k])), "?")
                raise DataError(f"{path}: row {i}, column {bad!r}: {exc}") from None
            if n < 1 or c < 0 or p < 0:
                raise DataError(f"{path}: row {i}: cluster/period must be >= 0 and n >= 1")
            if family == "binomial" and not 0.0 <= val <= 1.0:
                raise DataError(f"{path}: row {i}, column 'mean': proportion outside [0, 1]")
            if math.isnan(tr):
                if layout is None:
                    raise DataError(f"{path}: row {i}: no treatment column and no layout to supply it")
                if c >= layout.n_clusters or p >= layout.n_periods:
                    raise DataError(f"{path}: row {i}: cluster/period outside the planned layout")
                tr = float(layout.treatment[c, p])
            for k, v in zip(out, (c, p, n, val, sd, tr)):
                out[k].append(v)
        sd = np.asarray(out["sd"])
        return cls(
            np.asarray(out["cluster"], int),
            np.asarray(out["period"], int),
            np.asarray(out["n"], float),
            np.asarray(out["mean"], float),
            np.asarray(out["treatment"], float),
            None if np.all(np.isnan(sd)) else sd,
        )


def _is_number(s) -> bool:
    try:
        float(s)
        return True
    except (TypeError, ValueError):
        return False


@dataclass(frozen=True)
class ThetaEstimate:
    """Estimated correlation model with profile-likelihood intervals.

    ``flags`` may contain ``"icc-boundary"`` (estimate clamped at 0),
    ``"period-parameter-fixed"`` (not identifiable from the data; planning
    value kept), ``"period-parameter-boundary"`` and ``"fallback"``.
    """

    theta: CorrelationModel
    icc_ci: tuple
    period_ci: Optional[tuple]
    effect: float
    effect_se: float
    loglik: float
    flags: tuple = ()
    level: float = 0.95


class _Reml:
    """Restricted log-likelihood of cell summaries, grouped by cluster pattern."""

    def __init__(self, data: CellData, outcome: OutcomeModel, family: str):
        self.family = family
        cl = np.asarray(data.cluster)
        pe = np.asarray(data.period)
        m = np.asarray(data.n, float)
        if outcome.family == "binomial":
            p = np.clip(np.asarray(data.mean, float), 0.5 / m, 1.0 - 0.5 / m)
            y = logit(p)
            noise = 1.0 / (m * p * (1.0 - p))
            pbar = float(np.sum(m * data.mean) / np.sum(m))
            pbar = min(max(pbar, 0.5 / m.sum()), 1.0 - 0.5 / m.sum())
            self.re_scale = 1.0 / (pbar * (1.0 - pbar))
            self.gaussian = False
        else:
            y = np.asarray(data.mean, float)
            noise = 1.0 / m
            self.re_scale = 1.0
            self.gaussian = True
        levels = np.unique(pe)
        x = np.asarray(data.treatment, float)
        X = (pe[:, None] == levels[None, :]).astype(float)
        A = np.column_stack([X, x])
        if np.linalg.matrix_rank(A) < A.shape[1]:
            A = X
            self.has_treatment = False
        else:
            self.has_treatment = True
        self.p = A.shape[1]
        self.n = y.size
        self.ss = 0.0
        self.n_within = 0.0
        if self.gaussian and data.sd is not None:
            sd = np.asarray(data.sd, float)
            ok = np.isfinite(sd) & (m > 1)
            self.ss = float(np.sum((m[ok] - 1.0) * sd[ok] ** 2))
            self.n_within = float(np.sum(m[ok] - 1.0))
        clusters, counts = np.unique(cl, return_counts=True)
        if clusters.size < 2:
            raise EstimationError("need at least two clusters to estimate the correlation")
        order = np.lexsort((pe, cl))
        starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
        patterns: dict = {}
        for s0, n in zip(starts, counts):
            rows = order[s0 : s0 + n]
            patterns.setdefault(tuple(pe[rows]), []).append(rows)
        self.groups = []
        for key, rows_list in patterns.items():
            R = np.stack(rows_list)  # (g, t)
            self.groups.append((np.asarray(key), noise[R], y[R], A[R]))
        self.multi_period = any(len(k) > 1 for k, *_ in self.groups)

    def evaluate(self, icc, psi: float, corr: CorrelationModel):
        """Log-likelihood at each icc in ``icc`` (array) and period parameter ``psi``.

        Returns ``(loglik, beta, M, sigma2)`` with a leading axis over ``icc``;
        ``M`` is the GLS information of the fixed effects at unit scale.
        """
        icc = np.atleast_1d(np.asarray(icc, float))
        a = icc / (1.0 - icc) * self.re_scale
        K, p = a.size, self.p
        M = np.zeros((K, p, p))
        b = np.zeros((K, p))
        yy = np.zeros(K)
        logdet = np.zeros(K)
        corr_psi = corr.with_period_parameter(psi)
        for periods, noise, y, A in self.groups:
            t = periods.size
            if t == 1:
                wv = 1.0 / (a[:, None] + noise[None, :, 0])
                logdet -= np.log(wv).sum(axis=1)
                A1, y1 = A[:, 0, :], y[:, 0]
                M += np.einsum("kg,ga,gb->kab", wv, A1, A1)
                b += wv @ (A1 * y1[:, None])
                yy += wv @ (y1 * y1)
                continue
            R = corr_psi.period_correlation(periods)
            V = a[:, None, None, None] * R + noise[None, :, :, None] * np.eye(t)
            L = np.linalg.cholesky(V)
            logdet += 2.0 * np.log(np.diagonal(L, axis1=2, axis2=3)).sum(axis=(1, 2))
            rhs = np.broadcast_to(np.concatenate([A, y[..., None]], axis=2), (K,) + A.shape[:2] + (p + 1,))
            W = np.linalg.solve(V, rhs)
            M += np.einsum("gia,kgib->kab", A, W[..., :-1])
            b += np.einsum("gia,kgi->ka", A, W[..., -1])
            yy += np.einsum("gi,kgi->k", y, W[..., -1])
        _, logdet_m = np.linalg.slogdet(M)
        beta = np.linalg.solve(M, b[..., None])[..., 0]
        q = yy - np.sum(b * beta, axis=1)
        if self.gaussian:
            dof = self.n - self.p + self.n_within
            sigma2 = np.maximum((q + self.ss) / dof, 1e-300)
            ll = -0.5 * (dof * np.log(sigma2) + logdet + logdet_m + dof)
        else:
            sigma2 = np.ones(K)
            ll = -0.5 * (logdet + logdet_m + q)
        return ll, beta, M, sigma2


_ICC_GRID = np.concatenate([[0.0], np.geomspace(1e-4, 0.9, 30)])
_PSI_GRID = np.linspace(0.05, 1.0, 20)


def estimate_theta(
    data: CellData,
    outcome: OutcomeModel,
    plan: CorrelationModel,
    level: float = 0.95,
    intervals: bool = True,
) -> ThetaEstimate:
    """Restricted-likelihood estimate of the icc and period parameter from stage-1 data.

    The period parameter (cac or decay) is estimated only when some cluster
    is observed in more than one period and the family has one; otherwise
    the planning value is kept and flagged. For Gaussian outcomes the
    residual variance is profiled out and returned as ``dispersion``.

    Raises:
        EstimationError: Fewer than two clusters.
    """
    reml = _Reml(data, outcome, plan.family)
    flags = []
    fit_psi = reml.multi_period and plan.family != "exchangeable"
    if not fit_psi and plan.family != "exchangeable":
        flags.append("period-parameter-fixed")
    psi_plan = plan.period_parameter

    def nll(icc, psi):
        return -float(reml.evaluate(icc, psi, plan)[0][0])

    def profile_icc(icc):
        """(-loglik, psi) maximised over psi at fixed icc."""
        if not fit_psi:
            return nll(icc, psi_plan), psi_plan
        res = optimize.minimize_scalar(lambda s: nll(icc, s), bounds=(_PSI_MIN, 1.0), method="bounded",
                                       options={"xatol": 1e-6})
        edge = nll(icc, 1.0)
        return (edge, 1.0) if edge <= res.fun else (res.fun, res.x)

    # coarse grid, then polish
    if fit_psi:
        table = np.stack([-reml.evaluate(_ICC_GRID, s, plan)[0] for s in _PSI_GRID])
        j, k = np.unravel_index(int(np.argmin(table)), table.shape)
        start = np.array([max(_ICC_GRID[k], 1e-4), _PSI_GRID[j]])
        res = optimize.minimize(lambda v: nll(v[0], v[1]), start, method="L-BFGS-B",
                                bounds=[(0.0, _ICC_MAX), (_PSI_MIN, 1.0)])
        icc_hat, psi_hat = (float(res.x[0]), float(res.x[1])) if res.fun <= table[j, k] else (_ICC_GRID[k], _PSI_GRID[j])
        f_hat = min(float(res.fun), float(table[j, k]))
    else:
        vals = -reml.evaluate(_ICC_GRID, psi_plan, plan)[0]
        k = int(np.argmin(vals))
        lo, hi = _ICC_GRID[max(k - 1, 0)], _ICC_GRID[min(k + 1, _ICC_GRID.size - 1)]
        res = optimize.minimize_scalar(lambda g: nll(g, psi_plan), bounds=(lo, hi), method="bounded",
                                       options={"xatol": 1e-8})
        icc_hat, f_hat = (float(res.x), float(res.fun)) if res.fun <= vals[k] else (_ICC_GRID[k], float(vals[k]))
        psi_hat = psi_plan
    f0, psi0 = profile_icc(0.0)
    if f_hat >= f0 - 1e-10 or icc_hat < 1e-7:
        icc_hat, f_hat, psi_hat = 0.0, f0, psi0
        flags.append("icc-boundary")
    if fit_psi and psi_hat >= 1.0 - 1e-6:
        flags.append("period-parameter-boundary")
    ll_hat, beta, M, sigma2 = (v[0] for v in reml.evaluate(icc_hat, psi_hat, plan))
    icc_ci = (math.nan, math.nan)
    period_ci = None
    if intervals:
        cut = 0.5 * stats.chi2.ppf(level, 1)
        drop = lambda g: profile_icc(g)[0] - f_hat - cut
        lo_ci = 0.0 if icc_hat == 0.0 or drop(0.0) <= 0 else optimize.brentq(drop, 0.0, icc_hat, xtol=1e-10)
        hi_ci = _ICC_MAX if drop(_ICC_MAX) <= 0 else optimize.brentq(drop, icc_hat, _ICC_MAX, xtol=1e-10)
        icc_ci = (float(lo_ci), float(hi_ci))
        if fit_psi:
            def prof_psi(s):
                r = optimize.minimize_scalar(lambda g: nll(g, s), bounds=(0.0, _ICC_MAX), method="bounded",
                                             options={"xatol": 1e-8})
                return min(r.fun, nll(0.0, s)) - f_hat - cut
            plo = _PSI_MIN if prof_psi(_PSI_MIN) <= 0 else optimize.brentq(prof_psi, _PSI_MIN, psi_hat, xtol=1e-8)
            phi = 1.0 if psi_hat >= 1.0 or prof_psi(1.0) <= 0 else optimize.brentq(prof_psi, psi_hat, 1.0, xtol=1e-8)
            period_ci = (float(plo), float(phi))

    theta = replace(plan, icc=float(min(icc_hat, _ICC_MAX)))
    if fit_psi:
        theta = theta.with_period_parameter(float(psi_hat))
    if reml.gaussian:
        theta = replace(theta, dispersion=float(sigma2))
    effect, se = math.nan, math.nan
    if reml.has_treatment:
        effect = float(beta[-1])
        se = float(math.sqrt(sigma2 * np.linalg.inv(M)[-1, -1]))
    return ThetaEstimate(theta, icc_ci, period_ci, effect, se, float(ll_hat), tuple(flags), level)


# ---------------------------------------------------------------------------
# Decision
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class InterimResult:
    z1: float
    theta_hat: Optional[CorrelationModel]
    theta_used: CorrelationModel
    action: Action
    boundary: float
    w1: float
    w2: float
    estimate: Optional[ThetaEstimate] = None
    flags: tuple = ()

    def to_dict(self) -> dict:
        a = self.action
        out = {
            "z1": self.z1,
            "boundary": self.boundary,
            "w1": self.w1,
            "w2": self.w2,
            "action": a.kind,
            "stage2": None if a.design is None else a.design.as_dict(),
            "cp": None if math.isnan(a.cp) else a.cp,
            "stage2_cost": a.cost,
            "theta_used": _theta_dict(self.theta_used),
            "theta_hat": None if self.theta_hat is None else _theta_dict(self.theta_hat),
            "flags": list(self.flags),
        }
        e = self.estimate
        if e is not None:
            out["icc_ci"] = list(e.icc_ci)
            out["period_parameter_ci"] = None if e.period_ci is None else list(e.period_ci)
            out["effect"] = e.effect
            out["effect_se"] = e.effect_se
            out["ci_level"] = e.level
        return out

    def report(self, outcome_family: str = "gaussian") -> str:
        """Plain-text summary in the layout of an interim results table."""
        lines = ["Stage 1 statistic            Value"]
        e = self.estimate
        if e is not None and not math.isnan(e.effect):
            zq = stats.norm.ppf(0.5 + e.level / 2)
            lo, hi = e.effect - zq * e.effect_se, e.effect + zq * e.effect_se
            if outcome_family == "binomial":
                lines.append(f"Odds ratio ({e.level:.0%} CI)      {math.exp(e.effect):.2f} ({math.exp(lo):.2f}, {math.exp(hi):.2f})")
            else:
                lines.append(f"Mean difference ({e.level:.0%} CI) {e.effect:.3f} ({lo:.3f}, {hi:.3f})")
        lines.append(f"z-statistic                  {self.z1:.2f}")
        if e is not None:
            lines.append(f"ICC ({e.level:.0%} CI)                {self.theta_hat.icc:.3f} ({e.icc_ci[0]:.3f}, {e.icc_ci[1]:.3f})")
            if self.theta_hat.family != "exchangeable":
                name = "CAC" if self.theta_hat.family == "nested-exchangeable" else "Decay"
                lines.append(f"{name:<29}{self.theta_hat.period_parameter:.2f}")
        lines.append(f"Efficacy boundary            +/-{self.boundary:.2f}")
        a = self.action
        desc = a.kind
        if a.design is not None:
            shown = ("k2", "m2") if isinstance(a.design, ParallelStage2) else ("t2", "r", "m2")
            desc += " " + ", ".join(f"{k}={a.design.as_dict()[k]}" for k in shown)
        lines.append(f"Decision                     {desc}")
        if self.flags:
            lines.append("Flags                        " + ", ".join(self.flags))
        return "\n".join(lines)


def _theta_dict(t: CorrelationModel) -> dict:
    return {"family": t.family, "icc": t.icc, "cac": t.cac, "decay": t.decay, "dispersion": t.dispersion}


def conservative_theta(plan: CorrelationModel, estimate: CorrelationModel) -> CorrelationModel:
    """Planning model with the larger of the planned and estimated icc."""
    return replace(plan, icc=max(plan.icc, estimate.icc))


def interim_decide(
    z1: float,
    rule: DecisionRule,
    theta_hat: Optional[CorrelationModel] = None,
    conservative: bool = False,
    estimate: Optional[ThetaEstimate] = None,
) -> InterimResult:
    """Stage-2 decision at the interim with weights and calibration frozen.

    Conditional information is re-evaluated under ``theta_hat`` (or, with
    ``conservative``, under the planning model with the larger icc). The
    conditional power is evaluated at the rule's breakpoint for ``z1`` so
    that ``theta_hat`` equal to the plan reproduces the planned rule.
    """
    p = rule.problem
    w = rule.weights
    flags = list(estimate.flags) if estimate is not None else []
    if theta_hat is None:
        used = p.theta
    else:
        used = conservative_theta(p.theta, theta_hat) if conservative else theta_hat
        if used.family != p.theta.family:
            raise DesignError("estimated correlation family differs from the plan")
    i = rule.cell_index(z1)
    if i < 0:
        action = Action("stop-efficacy")
    elif used == p.theta:
        action = rule.action(z1)
    else:
        try:
            cp = p.cp_table(used, p.z_grid[i])
        except DesignError as exc:
            warnings.warn(f"re-estimated parameters unusable ({exc}); using planning values")
            flags.append("fallback")
            used = p.theta
            action = rule.action(z1)
        else:
            g = int(p.select(cp, rule.criterion, rule.calibration)[0])
            action = Action("stop-futility") if g < 0 else Action(
                "continue", p.grid[g], g, float(cp[0, g]), float(p.cost[g]))
    return InterimResult(float(z1), theta_hat, used, action, w.boundary, w.w1, w.w2, estimate, tuple(flags))
