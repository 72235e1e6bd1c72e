"""Safety gate: feasible-set enumeration, projection, tolerance test.

A proposed trajectory is compared against the finite set of lattice
trajectories over the plan horizon that (a) enter no occupied cell, (b) obey
the per-layer motion bounds and (c) stay under the centripetal-acceleration
bound.  If the set is empty the gate raises ``NoPathException`` for the
caller's emergency-stop path; otherwise the proposal is either accepted as is
(when its projection is within tolerance in every component) or replaced by
the projection.

Candidate vectors and proposals live in the same flattened coordinates
``(n_1 .. n_H, v_1 .. v_H)`` in lattice units.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .cost import STOP_SPEED, TrajectoryArrays, lane_index
from .errors import EmptyFeasibleSet, LengthMismatch, NoPathException

__all__ = [
    "SafetyConfig",
    "FeasibleSet",
    "enumerate_free_set",
    "project",
    "constrain",
    "lexicographic_min",
]


@dataclass(frozen=True)
class SafetyConfig:
    tau: float = 0.5
    c_max: float = 2.0
    # None means integer speeds 0 .. v_max.
    speed_levels: Optional[tuple[float, ...]] = None

    def __post_init__(self) -> None:
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.c_max <= 0:
            raise ValueError("c_max must be positive")
        if self.speed_levels is not None and len(self.speed_levels) == 0:
            raise ValueError("speed_levels must be nonempty when given")

    def resolved_levels(self, v_max: int) -> np.ndarray:
        if self.speed_levels is None:
            return np.arange(v_max + 1, dtype=float)
        return np.asarray(sorted(self.speed_levels), dtype=float)


@dataclass
class FeasibleSet:
    """All feasible lattice trajectories, plus their flattened vectors."""

    traj: TrajectoryArrays
    flat: np.ndarray  # (k, 2 H)

    @property
    def count(self) -> int:
        return self.flat.shape[0]

    @property
    def is_empty(self) -> bool:
        return self.count == 0


def enumerate_free_set(scene, config, safety_config: SafetyConfig) -> FeasibleSet:
    """Layer-by-layer expansion of every feasible candidate.

    Partial trajectories are expanded one layer at a time and pruned as soon
    as they enter an occupied cell or break a motion bound; a held slot
    (speed level below the stop threshold) keeps the lateral position frozen.
    The centripetal bound is applied once full candidates exist.

    Motion bounds are measured on the lattice: lateral reach counts lane
    indices and the first speed step is taken from the level nearest the
    (possibly continuous) current speed.  Sub-cell drift left behind by an
    accepted continuous action therefore never shrinks the feasible set,
    which is what keeps the gate's no-collision argument alive between
    replans.
    """
    occ = np.asarray(scene.occupancy)
    h = config.H_p
    if occ.shape[0] < h:
        raise ValueError(f"scene window depth {occ.shape[0]} is below the plan horizon {h}")
    w = occ.shape[1]
    centers = np.arange(w) - (w - 1) / 2.0
    levels = safety_config.resolved_levels(config.v_max)
    mov_levels = levels[levels >= STOP_SPEED]
    stay_levels = levels[levels < STOP_SPEED]

    # Option table for advancing slots: every (lane center, moving level).
    adv_n = np.repeat(centers, len(mov_levels))
    adv_lane = np.repeat(np.arange(w), len(mov_levels))
    adv_v = np.tile(mov_levels, w)

    n_cols = np.full((1, 1), float(scene.n0))
    v_cols = np.full((1, 1), float(scene.v0))
    adv_flags = np.zeros((1, 0), dtype=bool)
    rows = np.zeros((1, 0), dtype=int)
    adv_count = np.zeros(1, dtype=int)
    # lattice references for the bound checks
    lane_ref = np.array([int(lane_index(scene.n0, w))])
    v_ref = np.array([float(levels[np.argmin(np.abs(levels - scene.v0))])])

    for _ in range(h):
        parts = []

        if len(adv_v):
            ok = (np.abs(adv_lane[None, :] - lane_ref[:, None]) <= config.dn_max) \
                & (np.abs(adv_v[None, :] - v_ref[:, None]) <= config.dv_max) \
                & (occ[adv_count[:, None], adv_lane[None, :]] == 0)
            si, oi = np.nonzero(ok)
            if len(si):
                parts.append((
                    np.concatenate([n_cols[si], adv_n[oi, None]], axis=1),
                    np.concatenate([v_cols[si], adv_v[oi, None]], axis=1),
                    np.concatenate([adv_flags[si], np.ones((len(si), 1), bool)], axis=1),
                    np.concatenate([rows[si], adv_count[si, None]], axis=1),
                    adv_count[si] + 1,
                    adv_lane[oi],
                    adv_v[oi],
                ))

        if len(stay_levels):
            ok = np.abs(stay_levels[None, :] - v_ref[:, None]) <= config.dv_max
            si, oi = np.nonzero(ok)
            if len(si):
                parts.append((
                    np.concatenate([n_cols[si], n_cols[si, -1:]], axis=1),
                    np.concatenate([v_cols[si], stay_levels[oi, None]], axis=1),
                    np.concatenate([adv_flags[si], np.zeros((len(si), 1), bool)], axis=1),
                    np.concatenate([rows[si], np.full((len(si), 1), -1)], axis=1),
                    adv_count[si],
                    lane_ref[si],
                    stay_levels[oi],
                ))

        if not parts:
            n_cols = np.zeros((0, h + 1))
            v_cols = np.zeros((0, h + 1))
            adv_flags = np.zeros((0, h), dtype=bool)
            rows = np.zeros((0, h), dtype=int)
            break
        n_cols = np.concatenate([p[0] for p in parts])
        v_cols = np.concatenate([p[1] for p in parts])
        adv_flags = np.concatenate([p[2] for p in parts])
        rows = np.concatenate([p[3] for p in parts])
        adv_count = np.concatenate([p[4] for p in parts])
        lane_ref = np.concatenate([p[5] for p in parts]).astype(int)
        v_ref = np.concatenate([p[6] for p in parts]).astype(float)

    if n_cols.shape[0] and h >= 2:
        curvature = n_cols[:, 2:] - 2.0 * n_cols[:, 1:-1] + n_cols[:, :-2]
        centripetal = curvature * v_cols[:, 1:-1]
        keep = np.max(np.abs(centripetal), axis=1) <= safety_config.c_max
        n_cols, v_cols = n_cols[keep], v_cols[keep]
        adv_flags, rows = adv_flags[keep], rows[keep]

    traj = TrajectoryArrays(n_full=n_cols.reshape(-1, h + 1),
                            v_full=v_cols.reshape(-1, h + 1),
                            advanced=adv_flags.reshape(-1, h),
                            rows=rows.reshape(-1, h))
    flat = np.concatenate([traj.n_full[:, 1:], traj.v_full[:, 1:]], axis=1)
    return FeasibleSet(traj=traj, flat=flat)


def lexicographic_min(rows: np.ndarray) -> int:
    """Index of the lexicographically smallest row (first column primary)."""
    return int(np.lexsort(rows.T[::-1])[0])


def project(a: Sequence[float], free_set: FeasibleSet) -> np.ndarray:
    """Closest feasible vector to ``a`` in squared Euclidean distance."""
    if free_set.is_empty:
        raise EmptyFeasibleSet("cannot project onto an empty feasible set")
    a = np.asarray(a, dtype=float).ravel()
    if a.shape[0] != free_set.flat.shape[1]:
        raise LengthMismatch(
            f"proposal has {a.shape[0]} components, candidates have {free_set.flat.shape[1]}")
    d2 = np.sum((free_set.flat - a) ** 2, axis=1)
    ties = np.flatnonzero(d2 == d2.min())
    if len(ties) > 1:
        pick = ties[lexicographic_min(free_set.flat[ties])]
    else:
        pick = ties[0]
    return free_set.flat[pick].copy()


def constrain(a: Sequence[float], scene, config, safety_config: SafetyConfig) -> np.ndarray:
    """Gate a proposed trajectory against the feasible set.

    Returns ``a`` itself when the projection is within tolerance in every
    flattened component, otherwise the projection.  Raises NoPathException
    when nothing is feasible.
    """
    a = np.asarray(a, dtype=float).ravel()
    free_set = enumerate_free_set(scene, config, safety_config)
    if free_set.is_empty:
        raise NoPathException("feasible set is empty")
    u = project(a, free_set)
    if np.max(np.abs(u - a)) < safety_config.tau:
        return a
    return u
