"""Conditional and total power of the two-stage combination test."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy import stats
from scipy.special import nctdtr, ndtr

from .inference import CombinationWeights, z_to_t

DENSITIES = ("normal", "noncentral-t")


class QuadratureError(RuntimeError):
    pass


@dataclass(frozen=True)
class PowerQuery:
    """Target effect, test level and frozen weights for power calculations.

    ``small_sample`` switches stage-wise tail probabilities to the
    between-within t distribution; ``stage1_density`` selects the
    distribution of the stage-1 statistic used when integrating over it.
    """

    delta: float
    weights: CombinationWeights
    i1: float
    df1: int = 0
    small_sample: bool = False
    stage1_density: str = "normal"

    def __post_init__(self):
        if not math.isfinite(self.delta):
            raise ValueError("delta must be finite")
        if self.i1 <= 0:
            raise ValueError("stage-1 information must be positive")
        if self.stage1_density not in DENSITIES:
            raise ValueError(f"stage1_density must be one of {DENSITIES}")
        if self.stage1_density == "noncentral-t" and self.df1 < 1:
            raise ValueError("noncentral-t stage-1 density needs df1 >= 1")

    @property
    def alpha(self) -> float:
        return self.weights.alpha

    @property
    def mu1(self) -> float:
        return self.delta * math.sqrt(self.i1)

    @property
    def direction(self) -> float:
        return -1.0 if self.delta < 0 else 1.0


def _z_to_t_grouped(z: np.ndarray, df: np.ndarray) -> np.ndarray:
    """:func:`z_to_t` evaluated once per distinct (z, df) pair.

    The t quantile dominates the cost of conditional power tables, where z
    varies only with z1 and df takes a handful of values.
    """
    out = np.empty(z.shape)
    for d in np.unique(df):
        m = df == d
        uz, inv = np.unique(z[m], return_inverse=True)
        out[m] = np.asarray(z_to_t(uz, d))[inv]
    return out


def _tail(x, ncp, df, upper: bool):
    """Pr(Z > x) (or Pr(Z < x)) for Z = t_to_z(T), T ~ noncentral t(df, ncp).

    Entries with ``df == 0`` (or a zero noncentrality, where both laws are
    standard normal after the mapping) use the normal distribution.
    """
    x, ncp, df = np.broadcast_arrays(np.asarray(x, float), np.asarray(ncp, float), np.asarray(df, float))
    out = ndtr(ncp - x) if upper else ndtr(x - ncp)
    use_t = (df >= 1) & (ncp != 0)
    if np.any(use_t):
        t = _z_to_t_grouped(x[use_t], df[use_t])
        lower = nctdtr(df[use_t], ncp[use_t], t)
        out = np.array(out)
        out[use_t] = 1.0 - lower if upper else lower
    return out


def conditional_power(z1, i2c, query: PowerQuery, df2c=None):
    """Probability of final rejection given the stage-1 statistic.

    Broadcasts over ``z1`` and ``i2c``. With ``query.small_sample`` the
    stage-2 statistic is a t statistic with ``df2c`` degrees of freedom
    mapped onto the z scale.
    """
    w = query.weights
    z1 = np.asarray(z1, float)
    i2c = np.asarray(i2c, float)
    if np.any(i2c < 0):
        raise ValueError("conditional information must be non-negative")
    crit = w.critical_value
    ncp = query.delta * np.sqrt(i2c)
    if w.w2 == 0.0:
        # stage-2 data carry no weight: the final test is the stage-1 test
        z = w.w1 * z1
        hit = (z * query.direction > crit) if w.sided == 1 else (np.abs(z) > crit)
        return np.broadcast_to(hit, np.broadcast(z1, i2c).shape).astype(float)
    df = np.zeros_like(ncp) if (not query.small_sample or df2c is None) else np.asarray(df2c, float)
    if w.sided == 1:
        d = query.direction
        a = (crit - d * w.w1 * z1) / w.w2
        return _tail(a, d * ncp, df, upper=True)
    a = (crit - w.w1 * z1) / w.w2
    b = (-crit - w.w1 * z1) / w.w2
    return _tail(a, ncp, df, upper=True) + _tail(b, ncp, df, upper=False)


# ---------------------------------------------------------------------------
# Stage-1 distribution
# ---------------------------------------------------------------------------


def stage1_density(z, query: PowerQuery):
    """Density of the stage-1 z statistic under the target effect."""
    z = np.asarray(z, float)
    if query.stage1_density == "normal":
        return np.exp(-0.5 * (z - query.mu1) ** 2) / math.sqrt(2 * math.pi)
    nu = query.df1
    t = z_to_t(z, nu)
    phi = np.exp(-0.5 * z * z) / math.sqrt(2 * math.pi)
    return stats.nct.pdf(t, nu, query.mu1) * phi / stats.t.pdf(t, nu)


def stage1_cdf(z, query: PowerQuery):
    z = np.asarray(z, float)
    if query.stage1_density == "normal":
        return ndtr(z - query.mu1)
    t = z_to_t(z, query.df1)
    return nctdtr(query.df1, query.mu1, t)


def stage1_rejection(query: PowerQuery, boundary: Optional[float] = None) -> float:
    """Pr(|Z1| > c) (or the one-sided analogue) under the target effect."""
    c = query.weights.boundary if boundary is None else boundary
    upper = 1.0 - float(stage1_cdf(c, query))
    lower = float(stage1_cdf(-c, query))
    if query.weights.sided == 1:
        return upper if query.direction > 0 else lower
    return upper + lower


# ---------------------------------------------------------------------------
# Quadrature
# ---------------------------------------------------------------------------


def adaptive_simpson(
    f: Callable[[np.ndarray, np.ndarray], np.ndarray],
    lower: np.ndarray,
    upper: np.ndarray,
    tol: np.ndarray | float,
    key: Optional[np.ndarray] = None,
    max_depth: int = 40,
    max_intervals: int = 1_000_000,
) -> np.ndarray:
    """Integrate many scalar integrands, one per interval, by adaptive Simpson.

    Interval ``i`` spans ``[lower[i], upper[i]]`` and carries the integrand
    label ``key[i]``; ``f(x, key)`` evaluates the labelled integrands
    elementwise. Each interval is refined on its own until the Richardson
    error estimate is below ``tol[i]``, so a result never depends on which
    other intervals are integrated in the same call.

    Raises:
        QuadratureError: ``max_depth`` bisections, or ``max_intervals``
            simultaneously active intervals, did not reach the tolerance.
    """
    a = np.asarray(lower, float).ravel()
    b = np.asarray(upper, float).ravel()
    key = np.zeros(a.size, int) if key is None else np.asarray(key).ravel()
    tols = np.broadcast_to(np.asarray(tol, float), a.shape).copy()
    out = np.zeros(a.size)
    ids = np.arange(a.size)
    m = 0.5 * (a + b)
    fa, fm, fb = f(a, key), f(m, key), f(b, key)
    for _ in range(max_depth + 1):
        lm, rm = 0.5 * (a + m), 0.5 * (m + b)
        flm, frm = f(lm, key), f(rm, key)
        h = b - a
        whole = h / 6.0 * (fa + 4.0 * fm + fb)
        halves = h / 12.0 * (fa + 4.0 * flm + 2.0 * fm + 4.0 * frm + fb)
        err = halves - whole
        ok = np.abs(err) <= 15.0 * tols
        np.add.at(out, ids[ok], halves[ok] + err[ok] / 15.0)  # ids repeat once intervals split
        bad = ~ok
        if not bad.any():
            return out
        if 2 * bad.sum() > max_intervals:
            raise QuadratureError(f"adaptive Simpson needs more than {max_intervals} intervals; "
                                  "the quadrature tolerance is too small")
        two = lambda x, y: np.concatenate([x[bad], y[bad]])
        ids, key, tols = two(ids, ids), two(key, key), two(tols, tols) / 2.0
        a, m, b, fa, fm, fb = two(a, m), two(lm, rm), two(m, b), two(fa, fm), two(flm, frm), two(fm, fb)
    raise QuadratureError("adaptive Simpson did not reach the requested tolerance")


def cell_probabilities(edges, query: PowerQuery) -> np.ndarray:
    """Exact stage-1 probability mass in each interval of ``edges``."""
    return np.diff(stage1_cdf(np.asarray(edges, float), query))


def cell_power_integrals(edges, i2c, query: PowerQuery, df2c=None, tol: float = 1e-6) -> np.ndarray:
    """``J[i, g] = integral over cell i of CP(z; g) f(z) dz`` for every candidate g.

    The tolerance ``tol`` applies to each candidate's integral over the whole
    of ``edges``; it is shared between cells in proportion to their width.
    """
    edges = np.asarray(edges, float)
    i2c = np.atleast_1d(np.asarray(i2c, float))
    df = np.zeros_like(i2c) if df2c is None else np.broadcast_to(np.asarray(df2c, float), i2c.shape)
    n, G = edges.size - 1, i2c.size
    width = edges[-1] - edges[0]
    if n < 1 or G == 0 or width <= 0:
        return np.zeros((max(n, 0), G))

    def integrand(z, g):
        return conditional_power(z, i2c[g], query, df[g]) * stage1_density(z, query)

    lo = np.repeat(edges[:-1], G)
    hi = np.repeat(edges[1:], G)
    key = np.tile(np.arange(G), n)
    J = adaptive_simpson(integrand, lo, hi, tol * (hi - lo) / width, key)
    return J.reshape(n, G)


def rule_power(stage1_reject: float, integrals: np.ndarray, choice: np.ndarray) -> float:
    """Total power of a step-function rule from precomputed cell integrals.

    ``choice[i]`` is the candidate used on cell ``i`` or -1 for a futility
    stop (which contributes no power).
    """
    go = choice >= 0
    cells = np.flatnonzero(go)
    return float(stage1_reject + integrals[cells, choice[go]].sum())


def total_power(rule, query: PowerQuery, i2c: np.ndarray, df2c=None, tol: float = 1e-6) -> float:
    """Power of a step-function rule: stage-1 rejection plus continuation.

    Each continuation cell is integrated separately by adaptive Simpson, so
    the rule's jumps never fall inside an integration panel. ``i2c`` (and
    ``df2c``) hold the conditional information of every candidate in the
    rule's grid under the assumed truth.
    """
    edges = np.asarray(rule.z_grid, float)
    choice = np.asarray(rule.choice)
    p = stage1_rejection(query, rule.boundary)
    cells = np.flatnonzero(choice >= 0)
    if cells.size == 0:
        return p
    i2c = np.asarray(i2c, float)
    df = np.zeros_like(i2c) if df2c is None else np.asarray(df2c, float)

    def integrand(z, g):
        return conditional_power(z, i2c[g], query, df[g]) * stage1_density(z, query)

    lo, hi = edges[cells], edges[cells + 1]
    width = edges[-1] - edges[0]
    return float(p + adaptive_simpson(integrand, lo, hi, tol * (hi - lo) / width, choice[cells]).sum())


def single_stage_power(info: float, delta: float, df: int = 0, alpha: float = 0.05, sided: int = 2,
                       small_sample: bool = False) -> float:
    """Power of a non-adaptive design with treatment information ``info``.

    With ``small_sample`` the test statistic is noncentral t with ``df``
    degrees of freedom.
    """
    w = CombinationWeights(1.0, 0.0, alpha, sided)
    q = PowerQuery(delta, w, info, df, small_sample, "noncentral-t" if small_sample else "normal")
    return stage1_rejection(q)
