"""Exhaustive discrete-search baseline planner.

Enumerates every feasible lattice trajectory over the plan horizon and picks
the one with minimal weighted cost.  Plain enumeration is used rather than
dynamic programming: jerk and curvature couple three consecutive layers, and
the candidate count at the configured horizons is small anyway.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .cost import CostFrame, CostReport, CostWeights, evaluate_terms, weighted_total
from .errors import NoPathException
from .safety import FeasibleSet, SafetyConfig, enumerate_free_set, lexicographic_min

__all__ = ["SearchConfig", "PlanResult", "plan_exhaustive", "query_latency", "LatencyReport"]


@dataclass(frozen=True)
class SearchConfig:
    """Discrete action set searched by the baseline.

    ``speed_levels`` of None means integer speeds 0 .. v_max; lateral moves
    are every lane center within dn_max, as for the safety gate.
    """

    speed_levels: Optional[tuple[float, ...]] = None

    def safety_view(self, safety_config: Optional[SafetyConfig]) -> SafetyConfig:
        base = safety_config or SafetyConfig()
        if self.speed_levels is None:
            return base
        return SafetyConfig(tau=base.tau, c_max=base.c_max, speed_levels=self.speed_levels)


@dataclass(frozen=True)
class PlanResult:
    n: np.ndarray      # (H_p,) lane-offset units
    v: np.ndarray      # (H_p,) cells/step
    flat: np.ndarray   # (2 H_p,)
    report: CostReport


def plan_exhaustive(
    scene,
    weights: CostWeights,
    config,
    search_config: SearchConfig = SearchConfig(),
    safety_config: Optional[SafetyConfig] = None,
    frame: CostFrame = CostFrame(),
) -> PlanResult:
    """Minimal-cost collision-free trajectory over the full enumeration.

    Cost ties are broken by the lexicographically smallest flattened
    candidate, which keeps replays byte-stable.
    """
    scfg = search_config.safety_view(safety_config)
    free_set = enumerate_free_set(scene, config, scfg)
    if free_set.is_empty:
        raise NoPathException("no collision-free candidate exists")

    layers = evaluate_terms(free_set.traj, scene.speed_limits, frame)
    sums = {kind: vals.sum(axis=1) for kind, vals in layers.items()}
    totals = weighted_total(sums, weights)

    ties = np.flatnonzero(totals == totals.min())
    best = ties[lexicographic_min(free_set.flat[ties])] if len(ties) > 1 else ties[0]

    h = free_set.traj.horizon
    report = CostReport(
        f_r=float(sums["speed_error"][best]), f_a=float(sums["acceleration"][best]),
        f_j=float(sums["jerk"][best]), f_d=float(sums["extra_distance"][best]),
        f_k=float(sums["curvature"][best]), f_l=float(sums["lane_crossing"][best]),
        f_c=float(sums["centripetal"][best]), total=float(totals[best]),
    )
    flat = free_set.flat[best].copy()
    return PlanResult(n=flat[:h].copy(), v=flat[h:].copy(), flat=flat, report=report)


@dataclass(frozen=True)
class LatencyReport:
    mean_s: float
    stderr_s: float
    queries: int


def query_latency(
    planner: Callable,
    scenes: Sequence,
    min_queries: int = 100,
    warmup: int = 5,
) -> LatencyReport:
    """Mean wall-clock seconds per planner query over the scene set.

    Scenes are cycled until at least ``min_queries`` timed calls have run;
    a few untimed warmup calls absorb lazy allocations.
    """
    if not scenes:
        raise ValueError("need at least one scene")
    for i in range(warmup):
        planner(scenes[i % len(scenes)])
    samples = []
    i = 0
    while len(samples) < min_queries:
        scene = scenes[i % len(scenes)]
        t0 = time.perf_counter()
        planner(scene)
        samples.append(time.perf_counter() - t0)
        i += 1
    arr = np.asarray(samples)
    stderr = float(arr.std(ddof=1) / np.sqrt(len(arr))) if len(arr) > 1 else 0.0
    return LatencyReport(mean_s=float(arr.mean()), stderr_s=stderr, queries=len(arr))
