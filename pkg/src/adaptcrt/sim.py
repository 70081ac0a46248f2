"""Monte Carlo replay of the two-stage procedure.

Data are generated at cluster-period resolution: Gaussian cell means (and
within-cell standard deviations) or binomial cell counts, with cluster and
cluster-period random effects following the correlation family. Each
replicate draws everything it could need for the largest stage-2 design up
front from its own stream, so the realised data never depend on which
design the interim rule picks or on how replicates are batched.
"""

from __future__ import annotations

import csv
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy import stats
from scipy.interpolate import CubicSpline
from scipy.special import expit, logit

from .designs import ParallelStage1, ParallelStage2, StaggeredStage2
from .inference import _nuisance_matrix, project_treatment, t_to_z
from .interim import CellData, estimate_theta, interim_decide
from .model import (
    CorrelationModel,
    DesignError,
    OutcomeModel,
    TrialLayout,
    build_covariance,
    cholesky_solve,
    random_effect_variance,
    residual_variance,
)
from .optimiser import DecisionRule
from .power import conditional_power

CHUNK = 1000


def replicate_stream(seed: int, replicate: int) -> np.random.Generator:
    """Independent generator for replicate ``replicate`` of master ``seed``."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(replicate)]))


@dataclass
class _Draws:
    """Standardised draws for a batch of replicates over a (C, T) cell array."""

    re: np.ndarray  # (R, C, T) standard normal, correlated later
    eps: np.ndarray  # (R, C, T) standard normal
    chi: Optional[np.ndarray]  # (R, C, T) chi-square(m - 1) where sizes allow, else nan
    unif: Optional[np.ndarray]  # (R, C, T) uniforms for binomial counts


def _draw(streams, shape, family: str, ss_sizes: Optional[np.ndarray]) -> _Draws:
    R = len(streams)
    re = np.empty((R,) + shape)
    eps = np.empty((R,) + shape)
    chi = unif = None
    ss_mask = None
    if family == "gaussian" and ss_sizes is not None:
        ss_mask = ss_sizes > 1
        chi = np.full((R,) + shape, np.nan)
        dfs = ss_sizes[ss_mask] - 1.0
    if family == "binomial":
        unif = np.empty((R,) + shape)
    for i, g in enumerate(streams):
        re[i] = g.standard_normal(shape)
        eps[i] = g.standard_normal(shape)
        if chi is not None:
            chi[i][ss_mask] = g.chisquare(dfs)
        if unif is not None:
            unif[i] = g.random(shape)
    return _Draws(re, eps, chi, unif)


def _random_effects(draws: _Draws, truth: CorrelationModel, outcome: OutcomeModel) -> np.ndarray:
    T = draws.re.shape[-1]
    tau2 = random_effect_variance(truth, outcome)
    if tau2 == 0.0:
        return np.zeros_like(draws.re)
    L = np.linalg.cholesky(tau2 * truth.period_correlation(np.arange(T)) + 1e-300 * np.eye(T))
    return draws.re @ L.T


def _cell_values(layout: TrialLayout, cmap: np.ndarray, draws: _Draws, re: np.ndarray,
                 truth: CorrelationModel, outcome: OutcomeModel, delta: float):
    """Cell outcomes of ``layout`` for all replicates.

    ``cmap[c]`` is the row of the draw arrays that layout cluster ``c`` uses.
    Returns ``(cells, mean, sd)`` with ``mean``/``sd`` shaped (R, n_cells).
    """
    cl, pe = layout.cells()
    rows = cmap[cl]
    m = layout.cell_sizes[cl, pe]
    x = layout.treatment[cl, pe]
    eta = outcome.null_linear_predictor(layout.n_periods)[pe] + delta * x + re[:, rows, pe]
    sd = None
    if outcome.family == "gaussian":
        sigma2 = residual_variance(truth, outcome, layout.n_periods)[pe]
        mean = eta + np.sqrt(sigma2 / m) * draws.eps[:, rows, pe]
        if draws.chi is not None:
            sd = np.sqrt(sigma2 * draws.chi[:, rows, pe] / np.maximum(m - 1.0, 1.0))
    else:
        mean = stats.binom.ppf(draws.unif[:, rows, pe], m, expit(eta)) / m
    return (cl, pe), mean, sd


def generate_trial(layout: TrialLayout, truth: CorrelationModel, outcome: OutcomeModel, delta: float,
                   stream: np.random.Generator) -> CellData:
    """One trial's cell summaries under ``truth`` with effect ``delta``.

    Gaussian cells carry a mean and a within-cell standard deviation;
    binomial cells carry the observed proportion.
    """
    shape = (layout.n_clusters, layout.n_periods)
    draws = _draw([stream], shape, outcome.family, layout.cell_sizes)
    re = _random_effects(draws, truth, outcome)
    (cl, pe), mean, sd = _cell_values(layout, np.arange(layout.n_clusters), draws, re, truth, outcome, delta)
    return CellData(cl, pe, layout.cell_sizes[cl, pe], mean[0], layout.treatment[cl, pe],
                    None if sd is None else sd[0])


# ---------------------------------------------------------------------------
# Analysis
# ---------------------------------------------------------------------------


def _residual_maker(F: np.ndarray, sigma: np.ndarray) -> tuple[np.ndarray, int]:
    """``M`` with ``y' M y`` the GLS residual sum of squares of ``y`` on ``F``; and its df."""
    si = cholesky_solve(sigma, np.eye(sigma.shape[0]))
    sf = si @ F
    M = si - sf @ np.linalg.pinv(F.T @ sf) @ sf.T
    return M, sigma.shape[0] - np.linalg.matrix_rank(F)


def linear_predictor_scale(mean: np.ndarray, sizes: np.ndarray, family: str) -> np.ndarray:
    """Cell summaries on the working-model scale (empirical logits for binomial)."""
    if family == "binomial":
        p = np.clip(mean, 0.5 / sizes, 1.0 - 0.5 / sizes)
        return logit(p)
    return np.asarray(mean, float)


class StageAnalysis:
    """Stage-wise score statistics of a layout under the working covariance.

    Stage 1 uses the GLS score of the projected treatment column. Stage 2
    uses the conditional regression of the stage-2 cells on the stage-1
    cells: the residual ``y2 - S21 S11^-1 y1`` is regressed on the stage-2
    period effects, the carried-through stage-1 period effects and the
    conditional treatment column, so its score is independent of stage 1
    whenever the working model holds.

    With ``small_sample`` Gaussian statistics are studentised by the GLS
    residual mean square and mapped to the z scale through the t
    distribution on the residual degrees of freedom; binomial statistics
    keep their model-based variance and are referred to the same t
    distribution.
    """

    def __init__(self, layout: TrialLayout, theta: CorrelationModel, outcome: OutcomeModel,
                 small_sample: bool = False):
        self.layout = layout
        self.family = outcome.family
        self.small_sample = small_sample
        cov = build_covariance(layout, theta, outcome)
        self.cells = (cov.clusters, cov.periods)
        self.sizes = layout.cell_sizes[cov.clusters, cov.periods]
        self.idx1, self.idx2 = cov.idx1, cov.idx2
        x = layout.treatment[cov.clusters, cov.periods]
        s11 = cov.sigma11
        xt1 = project_treatment(layout, cov, 1)
        self.a1 = cholesky_solve(s11, xt1)
        self.i1 = float(xt1 @ self.a1)
        if self.i1 <= 0:
            raise DesignError("no stage-1 information about the treatment effect")
        X1 = _nuisance_matrix(cov.periods[self.idx1])
        self.M1, self.df1 = _residual_maker(np.column_stack([X1, x[self.idx1]]), s11)
        self.i2c = 0.0
        if self.idx2.size:
            s12 = cov.sigma12
            B = cholesky_solve(s11, s12)
            self.Bt = B.T
            S = cov.sigma22 - s12.T @ B
            N = np.column_stack([_nuisance_matrix(cov.periods[self.idx2]), self.Bt @ X1])
            xc = x[self.idx2] - self.Bt @ x[self.idx1]
            sn = cholesky_solve(S, np.column_stack([N, xc]))
            xc = xc - N @ (np.linalg.pinv(N.T @ sn[:, :-1]) @ (N.T @ sn[:, -1]))
            self.a2 = cholesky_solve(S, xc)
            self.i2c = float(xc @ self.a2)
            self.M2, self.df2 = _residual_maker(np.column_stack([N, xc]), S)

    def _z(self, u, info, y, M, df):
        if not self.small_sample or df < 1:
            return u / math.sqrt(info)
        if self.family == "gaussian":
            s2 = np.einsum("ri,ij,rj->r", y, M, y) / df
            with np.errstate(divide="ignore", invalid="ignore"):
                t = u / np.sqrt(info * s2)
        else:
            t = u / math.sqrt(info)
        return t_to_z(t, df)

    def z1(self, y: np.ndarray) -> np.ndarray:
        """Stage-1 z statistics for cell values ``y`` (R, n_cells) or (R, n1)."""
        y1 = y[:, self.idx1] if y.shape[1] != self.idx1.size else y
        return self._z(y1 @ self.a1, self.i1, y1, self.M1, self.df1)

    def z2c(self, y: np.ndarray) -> np.ndarray:
        """Conditional stage-2 z statistics for full-layout cell values ``y``."""
        if self.i2c <= 0:
            return np.zeros(y.shape[0])
        yc = y[:, self.idx2] - y[:, self.idx1] @ self.Bt.T
        return self._z(yc @ self.a2, self.i2c, yc, self.M2, self.df2)


# ---------------------------------------------------------------------------
# Scenario replay
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SimScenario:
    """A frozen plan replayed under an assumed truth.

    ``reestimate`` re-estimates the correlation model from each replicate's
    stage-1 data before choosing the stage-2 design (``conservative`` takes
    the larger of the planned and estimated icc).
    """

    rule: DecisionRule
    truth_theta: CorrelationModel
    delta_true: float
    n_replicates: int
    seed: int = 0
    reestimate: bool = False
    conservative: bool = False

    def __post_init__(self):
        if self.n_replicates < 1:
            raise ValueError("n_replicates must be >= 1")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")


@dataclass
class SimResult:
    """Operating characteristics with Monte Carlo standard errors.

    ``summary`` maps each metric to ``(estimate, standard error)``; ``trace``
    holds the per-replicate columns.
    """

    scenario: SimScenario
    summary: dict
    distribution: dict
    trace: dict = field(repr=False)
    failures: int = 0

    def to_dict(self) -> dict:
        s = self.scenario
        return {
            "n_replicates": s.n_replicates,
            "seed": int(s.seed),
            "delta_true": s.delta_true,
            "reestimate": s.reestimate,
            "truth_theta": {"family": s.truth_theta.family, "icc": s.truth_theta.icc, "cac": s.truth_theta.cac,
                            "decay": s.truth_theta.decay, "dispersion": s.truth_theta.dispersion},
            "metrics": {k: {"estimate": v[0], "se": v[1]} for k, v in self.summary.items()},
            "distribution": self.distribution,
            "estimation_failures": self.failures,
        }

    def write_trace(self, path) -> None:
        cols = ["replicate", "z1", "action", "k2", "m2", "t2", "r", "z2c", "N", "K", "cost", "reject"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for row in zip(*(self.trace[c] for c in cols)):
                w.writerow(row)


def _max_stage2(rule: DecisionRule):
    grid = rule.problem.grid.candidates
    if isinstance(grid[0], ParallelStage2):
        return ParallelStage2(max(g.k2 for g in grid), max(g.m2 for g in grid))
    return StaggeredStage2(max(g.t2 for g in grid), 1.0, max(g.m2 for g in grid))


def _cluster_map(stage1, g, gmax) -> np.ndarray:
    """Row of the maximal layout used by each cluster of ``stage1.layout(g)``."""
    if isinstance(stage1, ParallelStage1):
        k1 = stage1.k1
        new = np.arange(g.k2)
        return np.concatenate([np.arange(2 * k1), 2 * k1 + new, 2 * k1 + gmax.k2 + new]).astype(int)
    return np.arange(stage1.clusters)


class _Replay:
    def __init__(self, sc: SimScenario):
        self.sc = sc
        self.rule = sc.rule
        p = sc.rule.problem
        self.problem = p
        self.outcome = p.outcome
        self.stage1 = p.stage1
        self.gmax = _max_stage2(sc.rule)
        self.max_layout = self.stage1.layout(self.gmax)
        self.layout1 = self.stage1.layout()
        ss = np.zeros(self.max_layout.cell_sizes.shape)
        T1 = self.layout1.n_periods
        ss[: self.layout1.n_clusters, :T1] = self.layout1.cell_sizes
        self.ss_sizes = ss
        self.an1 = StageAnalysis(self.layout1, p.theta, self.outcome, p.small_sample)
        self.cmap1 = np.arange(self.layout1.n_clusters)
        self._an2: dict = {}
        w = p.weights
        self.crit = w.critical_value
        self.direction = -1.0 if p.delta < 0 else 1.0
        self.attrs = p.attributes

    def analysis2(self, g_idx: int):
        if g_idx not in self._an2:
            g = self.problem.grid[g_idx]
            layout = self.stage1.layout(g)
            self._an2[g_idx] = (layout, _cluster_map(self.stage1, g, self.gmax),
                                StageAnalysis(layout, self.problem.theta, self.outcome, self.problem.small_sample))
        return self._an2[g_idx]

    @property
    def _fits_period_parameter(self) -> bool:
        return self.problem.theta.family != "exchangeable" and self.layout1.n_periods > 1

    def _information_spline(self):
        """Conditional information of every candidate as a smooth function of the icc.

        Information scales as ``1 / dispersion`` for both outcome families, so
        one table at unit dispersion covers every re-estimated scale.
        """
        if "_spline" not in self.__dict__:
            p = self.problem
            grid = np.concatenate([np.linspace(0.0, 0.2, 401), np.linspace(0.2, 0.99, 317)[1:]])
            base = replace(p.theta, dispersion=1.0)
            table = np.stack([p.information(replace(base, icc=float(g))).i2c for g in grid])
            self._spline = CubicSpline(grid, table, axis=0)
        return self._spline

    def _estimate(self, i, cells, mean, sd):
        cl, pe = cells
        lay = self.layout1
        data = CellData(cl, pe, lay.cell_sizes[cl, pe], mean[i], lay.treatment[cl, pe],
                        None if sd is None else sd[i])
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            return estimate_theta(data, self.outcome, self.problem.theta, intervals=False)

    def choose(self, z1, data1_mean, data1_sd):
        """Grid index (-1 futility, -2 efficacy) and failure flag per replicate."""
        rule = self.rule
        p = self.problem
        choice = np.full(z1.size, -1, int)
        failed = np.zeros(z1.size, bool)
        w = rule.weights
        eff = (self.direction * z1 > rule.boundary) if w.sided == 1 else (np.abs(z1) > rule.boundary)
        choice[eff] = -2
        cont = np.flatnonzero(~eff)
        cells = np.clip(np.searchsorted(rule.z_grid, z1[cont], side="right") - 1, 0, rule.choice.size - 1)
        choice[cont] = rule.choice[cells]
        if not self.sc.reestimate or cont.size == 0:
            return choice, failed
        if self._fits_period_parameter:
            # exact replay of interim_decide, one replicate at a time
            for i in cont:
                try:
                    est = self._estimate(i, self.an1.cells, data1_mean, data1_sd)
                    res = interim_decide(float(z1[i]), rule, est.theta, self.sc.conservative, est)
                    failed[i] = "fallback" in res.flags
                except (DesignError, np.linalg.LinAlgError, ValueError):
                    failed[i] = True
                    continue
                choice[i] = -2 if res.action.kind == "stop-efficacy" else res.action.index
            return choice, failed
        icc = np.full(cont.size, p.theta.icc)
        disp = np.full(cont.size, p.theta.dispersion)
        ok = np.ones(cont.size, bool)
        for j, i in enumerate(cont):
            try:
                th = self._estimate(i, self.an1.cells, data1_mean, data1_sd).theta
            except (DesignError, np.linalg.LinAlgError, ValueError):
                ok[j] = False
                failed[i] = True
                continue
            if self.sc.conservative:
                icc[j] = max(p.theta.icc, th.icc)
            else:
                icc[j], disp[j] = th.icc, th.dispersion
        idx = np.flatnonzero(ok)
        i2c = self._information_spline()(icc[idx]) / disp[idx, None]
        info = p.information()
        cp = conditional_power(rule.z_grid[cells[idx], None], np.maximum(i2c, 0.0), p.query(), info.df2c[None, :])
        choice[cont[idx]] = p.select(cp, rule.criterion, rule.calibration)
        return choice, failed

    def run_chunk(self, start: int, stop: int) -> dict:
        sc = self.sc
        streams = [replicate_stream(sc.seed, r) for r in range(start, stop)]
        draws = _draw(streams, self.max_layout.cell_sizes.shape, self.outcome.family, self.ss_sizes)
        re = _random_effects(draws, sc.truth_theta, self.outcome)
        (cl, pe), mean1, sd1 = _cell_values(self.layout1, self.cmap1, draws, re, sc.truth_theta,
                                            self.outcome, sc.delta_true)
        y1 = linear_predictor_scale(mean1, self.an1.sizes, self.outcome.family)
        z1 = self.an1.z1(y1)
        choice, failed = self.choose(z1, mean1, sd1)
        R = stop - start
        z2c = np.full(R, np.nan)
        reject = choice == -2
        for g in np.unique(choice[choice >= 0]):
            rows = np.flatnonzero(choice == g)
            layout, cmap, an = self.analysis2(int(g))
            sub = _Draws(draws.re[rows], draws.eps[rows], None, None if draws.unif is None else draws.unif[rows])
            _, mean, _ = _cell_values(layout, cmap, sub, re[rows], sc.truth_theta, self.outcome, sc.delta_true)
            y = linear_predictor_scale(mean, an.sizes, self.outcome.family)
            z2 = an.z2c(y)
            z2c[rows] = z2
            w = self.rule.weights
            zc = w.w1 * z1[rows] + w.w2 * z2
            reject[rows] = (self.direction * zc > self.crit) if w.sided == 1 else (np.abs(zc) > self.crit)
        go = choice >= 0
        gi = np.where(go, choice, 0)
        p = self.problem
        N = self.stage1.participants + np.where(go, self.attrs["participants"][gi], 0.0)
        K = self.stage1.clusters + np.where(go, self.attrs["clusters"][gi], 0.0)
        cost = p.stage1_cost + np.where(go, p.cost[gi], 0.0)
        return {"replicate": np.arange(start, stop), "z1": z1, "choice": choice, "z2c": z2c, "N": N, "K": K,
                "cost": cost, "reject": reject, "failed": failed}


def _rate(x: np.ndarray) -> tuple[float, float]:
    p = float(np.mean(x))
    return p, math.sqrt(p * (1.0 - p) / x.size)


def _mean(x: np.ndarray) -> tuple[float, float]:
    return float(np.mean(x)), float(np.std(x, ddof=1) / math.sqrt(x.size)) if x.size > 1 else math.nan


def run_scenario(scenario: SimScenario, threads: int = 1, chunk: int = CHUNK) -> SimResult:
    """Replay the frozen plan on ``scenario.n_replicates`` simulated trials.

    Replicates are processed in fixed blocks of ``chunk`` on up to
    ``threads`` workers; results are reduced in replicate order, so outputs
    do not depend on the number of workers.
    """
    rep = _Replay(scenario)
    bounds = [(s, min(s + chunk, scenario.n_replicates)) for s in range(0, scenario.n_replicates, chunk)]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            parts = list(ex.map(lambda b: rep.run_chunk(*b), bounds))
    else:
        parts = [rep.run_chunk(*b) for b in bounds]
    tr = {k: np.concatenate([p[k] for p in parts]) for k in parts[0]}
    ch = tr["choice"]
    summary = {
        "rejection_rate": _rate(tr["reject"]),
        "early_efficacy_rate": _rate(ch == -2),
        "futility_rate": _rate(ch == -1),
        "continuation_rate": _rate(ch >= 0),
        "mean_N": _mean(tr["N"]),
        "mean_K": _mean(tr["K"]),
        "mean_cost": _mean(tr["cost"]),
        "max_N": (float(tr["N"].max()), math.nan),
        "max_K": (float(tr["K"].max()), math.nan),
        "max_cost": (float(tr["cost"].max()), math.nan),
    }
    qs = [0.05, 0.25, 0.5, 0.75, 0.95]
    distribution = {
        name: {f"q{int(q * 100):02d}": float(v) for q, v in zip(qs, np.quantile(tr[name], qs))}
        for name in ("N", "cost")
    }
    grid = scenario.rule.problem.grid
    kinds = np.where(ch == -2, "stop-efficacy", np.where(ch == -1, "stop-futility", "continue"))
    attrs = [grid[int(c)].as_dict() if c >= 0 else {} for c in ch]
    trace = {
        "replicate": tr["replicate"],
        "z1": tr["z1"],
        "action": kinds,
        "k2": [a.get("k2") for a in attrs],
        "m2": [a.get("m2") for a in attrs],
        "t2": [a.get("t2") for a in attrs],
        "r": [a.get("r") for a in attrs],
        "z2c": tr["z2c"],
        "N": tr["N"],
        "K": tr["K"],
        "cost": tr["cost"],
        "reject": tr["reject"].astype(int),
    }
    return SimResult(scenario, summary, distribution, trace, int(tr["failed"].sum()))
