"""Independent reference computations built from explicit dense inverses."""

import numpy as np

from adaptcrt.model import CorrelationModel, TrialLayout

FAMILIES = ("exchangeable", "nested-exchangeable", "exponential-decay")


def dense_projection(x, periods, sigma):
    """GLS residual of ``x`` on period indicators using an explicit inverse."""
    X = (periods[:, None] == np.unique(periods)[None, :]).astype(float)
    si = np.linalg.inv(sigma)
    return x - X @ np.linalg.inv(X.T @ si @ X) @ (X.T @ si @ x)


def dense_decomposition(layout, cov, r):
    """Stacked stage-wise score and information from one full inverse.

    Returns ``(U, I, u1, i1)`` with ``U = x' S^-1 r`` and ``I = x' S^-1 x``
    for the stacked projected treatment ``x = [x1~; x2~]``.
    """
    x = layout.treatment[cov.clusters, cov.periods]
    i1, i2 = cov.idx1, cov.idx2
    xt = np.zeros_like(x)
    xt[i1] = dense_projection(x[i1], cov.periods[i1], cov.sigma[np.ix_(i1, i1)])
    if i2.size:
        xt[i2] = dense_projection(x[i2], cov.periods[i2], cov.sigma[np.ix_(i2, i2)])
    si = np.linalg.inv(cov.sigma)
    s11i = np.linalg.inv(cov.sigma[np.ix_(i1, i1)])
    return float(xt @ si @ r), float(xt @ si @ xt), float(xt[i1] @ s11i @ r[i1]), float(xt[i1] @ s11i @ xt[i1])


def random_layout(rng, max_clusters=8, max_periods=6):
    """Random cluster x period layout with some empty cells and a random stage boundary."""
    k = int(rng.integers(2, max_clusters + 1))
    t = int(rng.integers(1, max_periods + 1))
    sizes = rng.integers(1, 30, size=(k, t)).astype(float)
    sizes[rng.random((k, t)) < 0.1] = 0.0
    treat = (rng.random((k, t)) < 0.5).astype(float)
    return TrialLayout(sizes, treat, int(rng.integers(1, t + 1)))


def random_theta(rng, family):
    return CorrelationModel(family, float(rng.uniform(0, 0.4)), cac=float(rng.uniform(0.2, 1.0)),
                            decay=float(rng.uniform(0.2, 1.0)), dispersion=float(rng.uniform(0.5, 2.0)))
