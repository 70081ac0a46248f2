"""Stage-1 design families, stage-2 candidates and their costs.

Two families are supported:

``ParallelStage1`` / ``ParallelStage2``
    Parallel trial (optionally with a baseline period). Stage 2 observes
    every stage-1 cluster again for one more period and may add ``k2`` new
    clusters per arm.

``StaggeredStage1`` / ``StaggeredStage2``
    A stepped-wedge roll-out over a fixed set of clusters, re-planned at the
    interim: number of remaining periods ``t2``, staggering ``r`` and
    cluster-period size ``m2``.

Costs are proportionate (participant equivalents); one cluster costs
``rho`` participants.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from .model import DesignError, SlotLayout, TrialLayout, _sw_switch_periods, staggered_switch_periods


@dataclass(frozen=True)
class ParallelStage2:
    k2: int
    m2: float

    def __post_init__(self):
        if self.k2 < 0 or self.m2 <= 0:
            raise DesignError("parallel stage 2 needs k2 >= 0 and m2 > 0")

    def as_dict(self) -> dict:
        return {"k2": self.k2, "m2": self.m2, "t2": 1, "r": None}


@dataclass(frozen=True)
class StaggeredStage2:
    t2: int
    r: float
    m2: float
    k2: int = 0

    def __post_init__(self):
        if self.t2 < 1 or self.m2 <= 0 or not 0.0 <= self.r <= 1.0:
            raise DesignError("staggered stage 2 needs t2 >= 1, m2 > 0, r in [0, 1]")
        if self.k2 != 0:
            raise DesignError("staggered designs do not recruit new clusters")

    def as_dict(self) -> dict:
        return {"k2": 0, "m2": self.m2, "t2": self.t2, "r": self.r}


Stage2Design = Union[ParallelStage2, StaggeredStage2]


@dataclass(frozen=True)
class ParallelStage1:
    """Parallel stage 1: ``k1`` clusters per arm of size ``m1``.

    ``baseline_m > 0`` adds a preceding all-control baseline period.
    """

    k1: int
    m1: float
    baseline_m: float = 0.0
    arms: int = 2

    kind = "parallel"

    def __post_init__(self):
        if self.k1 < 1 or self.m1 <= 0 or self.baseline_m < 0:
            raise DesignError("parallel stage 1 needs k1 >= 1, m1 > 0, baseline_m >= 0")

    @property
    def t1(self) -> int:
        return 2 if self.baseline_m > 0 else 1

    @property
    def participants(self) -> float:
        return self.arms * self.k1 * (self.baseline_m + self.m1)

    @property
    def clusters(self) -> int:
        return self.arms * self.k1

    def cost(self, rho: float) -> float:
        return self.arms * (self.k1 * (self.baseline_m + self.m1) + rho * self.k1)

    def stage2_participants(self, g: ParallelStage2) -> float:
        return self.arms * (self.k1 + g.k2) * g.m2

    def stage2_clusters(self, g: ParallelStage2) -> int:
        return self.arms * g.k2

    def stage2_cost(self, g: ParallelStage2, rho: float) -> float:
        return self.arms * ((self.k1 + g.k2) * g.m2 + rho * g.k2)

    def reference_stage2(self) -> ParallelStage2:
        """Planning reference: continue all clusters at the stage-1 size."""
        return ParallelStage2(0, self.m1)

    def describe(self) -> dict:
        return {"kind": self.kind, "k1": self.k1, "m1": self.m1, "baseline_m": self.baseline_m, "t1": self.t1}

    def _rows(self, with_stage2: bool):
        t1 = self.t1
        T = t1 + (1 if with_stage2 else 0)
        mask = np.zeros((4, T), bool)
        treat = np.zeros((4, T))
        mask[:2, :t1] = True
        treat[0, t1 - 1 :] = 1.0
        treat[2, :] = 1.0
        if with_stage2:
            mask[:, t1] = True
        return mask, treat

    def stage1_slots(self) -> SlotLayout:
        mask, treat = self._rows(False)
        sizes = np.zeros(mask.shape)
        sizes[:2, -1] = self.m1
        if self.baseline_m > 0:
            sizes[:2, 0] = self.baseline_m
        counts = np.array([self.k1, self.k1, 0, 0], float)
        return SlotLayout(mask[:2], treat[:2], sizes[:2], counts[:2], self.t1)

    def slots(self, candidates: Sequence[ParallelStage2]) -> list[tuple[np.ndarray, SlotLayout]]:
        """Batched combined layouts for ``candidates`` (one batch)."""
        mask, treat = self._rows(True)
        t1 = self.t1
        G = len(candidates)
        sizes = np.zeros((G, 4, t1 + 1))
        counts = np.zeros((G, 4))
        m2 = np.array([g.m2 for g in candidates], float)
        k2 = np.array([g.k2 for g in candidates], float)
        sizes[:, :2, t1 - 1] = self.m1
        if self.baseline_m > 0:
            sizes[:, :2, 0] = self.baseline_m
        sizes[:, :, t1] = m2[:, None]
        counts[:, 0] = counts[:, 1] = self.k1
        counts[:, 2] = counts[:, 3] = k2
        return [(np.arange(G), SlotLayout(mask, treat, sizes, counts, t1))]

    def layout(self, g: Stage2Design | None = None) -> TrialLayout:
        if g is None:
            return self.stage1_slots().to_layout()
        _, batch = self.slots([g])[0]
        keep = batch.counts[0] > 0
        return SlotLayout(batch.mask[keep], batch.treat[keep], batch.sizes[0][keep], batch.counts[0][keep], batch.stage_boundary).to_layout()


@dataclass(frozen=True)
class StaggeredStage1:
    """Stepped-wedge start: ``k`` clusters, ``t1`` periods of size ``m1``.

    Stage 1 follows a stepped-wedge schedule planned over ``planned_periods``
    (default ``k + 1``).
    """

    k: int
    t1: int
    m1: float
    planned_periods: int = 0

    kind = "staggered"

    def __post_init__(self):
        if self.k < 2 or self.t1 < 1 or self.m1 <= 0:
            raise DesignError("staggered stage 1 needs k >= 2, t1 >= 1, m1 > 0")
        if self.planned_periods == 0:
            object.__setattr__(self, "planned_periods", self.k + 1)
        if self.planned_periods < 2:
            raise DesignError("planned stepped wedge needs at least 2 periods")

    @property
    def participants(self) -> float:
        return self.k * self.t1 * self.m1

    @property
    def clusters(self) -> int:
        return self.k

    def cost(self, rho: float) -> float:
        return self.participants + rho * self.k

    def stage2_participants(self, g: StaggeredStage2) -> float:
        return self.k * g.t2 * g.m2

    def stage2_clusters(self, g: StaggeredStage2) -> int:
        return 0

    def stage2_cost(self, g: StaggeredStage2, rho: float) -> float:
        return self.stage2_participants(g)

    def reference_stage2(self) -> StaggeredStage2:
        """Planning reference: finish the planned stepped wedge at size ``m1``."""
        return StaggeredStage2(max(self.planned_periods - self.t1, 1), 1.0, self.m1)

    def describe(self) -> dict:
        return {"kind": self.kind, "k": self.k, "t1": self.t1, "m1": self.m1, "planned_periods": self.planned_periods}

    def stage1_slots(self) -> SlotLayout:
        switch = _sw_switch_periods(self.k, self.planned_periods)
        period = np.arange(self.t1)
        treat = (period[None, :] >= switch[:, None]).astype(float)
        mask = np.ones((self.k, self.t1), bool)
        sizes = np.full((self.k, self.t1), float(self.m1))
        return SlotLayout(mask, treat, sizes, np.ones(self.k), self.t1)

    def slots(self, candidates: Sequence[StaggeredStage2]) -> list[tuple[np.ndarray, SlotLayout]]:
        groups: dict[tuple, list[int]] = {}
        for i, g in enumerate(candidates):
            groups.setdefault((g.t2, g.r), []).append(i)
        out = []
        for (t2, r), idx in groups.items():
            T = self.t1 + t2
            switch = staggered_switch_periods(self.k, self.t1, T, r, self.planned_periods)
            period = np.arange(T)
            treat = (period[None, :] >= switch[:, None]).astype(float)
            mask = np.ones((self.k, T), bool)
            m2 = np.array([candidates[i].m2 for i in idx], float)
            sizes = np.where(period[None, None, :] < self.t1, float(self.m1), m2[:, None, None])
            sizes = np.broadcast_to(sizes, (len(idx), self.k, T)).copy()
            counts = np.ones((len(idx), self.k))
            out.append((np.asarray(idx), SlotLayout(mask, treat, sizes, counts, self.t1)))
        return out

    def layout(self, g: Stage2Design | None = None) -> TrialLayout:
        if g is None:
            return self.stage1_slots().to_layout()
        _, batch = self.slots([g])[0]
        return SlotLayout(batch.mask, batch.treat, batch.sizes[0], batch.counts[0], batch.stage_boundary).to_layout()


Stage1Design = Union[ParallelStage1, StaggeredStage1]


@dataclass(frozen=True)
class Stage2Grid:
    """Candidate stage-2 designs, in grid order."""

    candidates: tuple

    def __post_init__(self):
        object.__setattr__(self, "candidates", tuple(self.candidates))
        if not self.candidates:
            raise DesignError("stage-2 grid is empty")

    def __len__(self) -> int:
        return len(self.candidates)

    def __getitem__(self, i):
        return self.candidates[i]

    @classmethod
    def parallel(cls, k2_values: Sequence[int], m2_values: Sequence[float]) -> "Stage2Grid":
        return cls(tuple(ParallelStage2(int(k), float(m)) for k, m in itertools.product(k2_values, m2_values)))

    @classmethod
    def staggered(cls, t2_values, r_values, m2_values) -> "Stage2Grid":
        return cls(
            tuple(
                StaggeredStage2(int(t), float(r), float(m))
                for t, r, m in itertools.product(t2_values, r_values, m2_values)
            )
        )


def grid_attributes(stage1: Stage1Design, grid: Stage2Grid, rho: float) -> dict[str, np.ndarray]:
    """Cost, participants and clusters of every candidate (stage 2 only)."""
    cand = grid.candidates
    return {
        "cost": np.array([stage1.stage2_cost(g, rho) for g in cand], float),
        "participants": np.array([stage1.stage2_participants(g) for g in cand], float),
        "clusters": np.array([stage1.stage2_clusters(g) for g in cand], float),
        "k2": np.array([g.k2 for g in cand], float),
        "m2": np.array([g.m2 for g in cand], float),
    }
