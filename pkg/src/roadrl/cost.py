"""Trajectory cost terms, step rewards and episode metric aggregation.

Terms are evaluated per layer over a trajectory described by its state
sequence (start state at index 0, then one state per planned layer).  A layer
slot either advances the car one layer or holds it in place (speed below the
stop threshold); held slots travel zero distance, so the distance-based terms
(acceleration, extra distance) contribute nothing there, while the speed
error keeps charging for sitting below the reference speed.

Everything here is pure and operates on batches: a single trajectory is a
batch of one, an exhaustive planner evaluates thousands of candidates in one
call.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DegenerateTrajectory, LengthMismatch

__all__ = [
    "CostFrame",
    "CostWeights",
    "CostReport",
    "TrajectoryArrays",
    "EpisodeMetrics",
    "METRIC_ROWS",
    "TERM_KINDS",
    "STOP_SPEED",
    "evaluate_terms",
    "term",
    "trajectory_cost",
    "step_reward",
    "aggregate_metrics",
    "episode_path_metrics",
    "compare_planners",
    "lane_index",
    "reference_speeds",
]

TERM_KINDS = ("speed_error", "acceleration", "jerk", "extra_distance",
              "curvature", "lane_crossing", "centripetal")

# Speeds below half a lattice level hold the car at its current layer instead
# of advancing it.  Matching the default projection tolerance (tau = 0.5)
# means an accepted proposal and its projection share one advance pattern.
STOP_SPEED = 0.5

# (metric name, aggregation within an episode)
METRIC_ROWS = (
    ("step_reward", "mean"),
    ("speed_track_err", "mean"),
    ("acceleration", "max"),
    ("jerk", "max"),
    ("extra_distance", "mean"),
    ("curvature", "max"),
    ("lane_changes", "sum"),
    ("centripetal_acc", "max"),
)


@dataclass(frozen=True)
class CostFrame:
    """Geometric scale for the cost formulas.

    The lattice environment works in cell units (layer spacing and lane width
    both 1), which is also the scale of the reported driving metrics.  A
    metric frame can be supplied to cost trajectories in meters instead.
    """

    L: float = 1.0
    lane_width: float = 1.0

    # Table interpretation switches; see module notes in the README.
    curvature_verbatim: bool = False
    centripetal_squares_speed: bool = False


@dataclass(frozen=True)
class CostWeights:
    w_r: float = 0.2
    w_a: float = 0.5
    w_j: float = 0.5
    w_d: float = 0.5
    w_k: float = 0.5
    w_l: float = 0.3
    w_c: float = 0.5

    def __post_init__(self) -> None:
        for name, val in self.as_dict().items():
            if val < 0:
                raise ValueError(f"cost weight {name} must be nonnegative, got {val}")

    def as_dict(self) -> dict[str, float]:
        return {"w_r": self.w_r, "w_a": self.w_a, "w_j": self.w_j, "w_d": self.w_d,
                "w_k": self.w_k, "w_l": self.w_l, "w_c": self.w_c}


@dataclass(frozen=True)
class CostReport:
    """Per-term sums along a trajectory plus their weighted combination."""

    f_r: float
    f_a: float
    f_j: float
    f_d: float
    f_k: float
    f_l: float
    f_c: float
    total: float

    def as_dict(self) -> dict[str, float]:
        return {"f_r": self.f_r, "f_a": self.f_a, "f_j": self.f_j, "f_d": self.f_d,
                "f_k": self.f_k, "f_l": self.f_l, "f_c": self.f_c, "total": self.total}


@dataclass
class TrajectoryArrays:
    """Batched lattice trajectories in executable form.

    Shapes for a batch of k trajectories over H layer slots:
      n_full   (k, H+1)  lateral position in lane-offset units, col 0 = start
      v_full   (k, H+1)  speed in cells/step, col 0 = start
      advanced (k, H)    True where the slot moved the car one layer forward
      rows     (k, H)    window row entered at the slot, -1 for held slots
    """

    n_full: np.ndarray
    v_full: np.ndarray
    advanced: np.ndarray
    rows: np.ndarray

    def __post_init__(self) -> None:
        self.n_full = np.atleast_2d(np.asarray(self.n_full, dtype=float))
        self.v_full = np.atleast_2d(np.asarray(self.v_full, dtype=float))
        self.advanced = np.atleast_2d(np.asarray(self.advanced, dtype=bool))
        self.rows = np.atleast_2d(np.asarray(self.rows, dtype=int))
        k, h1 = self.n_full.shape
        if self.v_full.shape != (k, h1) or self.advanced.shape != (k, h1 - 1) \
                or self.rows.shape != (k, h1 - 1):
            raise LengthMismatch("inconsistent trajectory array shapes")

    @property
    def horizon(self) -> int:
        return self.n_full.shape[1] - 1

    @property
    def batch(self) -> int:
        return self.n_full.shape[0]


def lane_index(n, num_lanes: int):
    """Cell column containing lateral position ``n`` (lane-offset units)."""
    return np.clip(np.floor(np.asarray(n, dtype=float) + num_lanes / 2.0), 0, num_lanes - 1).astype(int)


def reference_speeds(traj: TrajectoryArrays, speed_limits: np.ndarray) -> np.ndarray:
    """Per-slot reference speed: the limit of the cell holding the car.

    Advancing slots read the entered cell; held slots keep the limit of the
    cell the car last occupied (row 0 ahead for a car that has not advanced
    yet, the nearest regulatory information available in the window).
    """
    k, h = traj.rows.shape
    lanes = lane_index(traj.n_full[:, 1:], speed_limits.shape[1])
    eff_rows = np.empty_like(traj.rows)
    prev = np.zeros(k, dtype=int)
    for j in range(h):
        adv = traj.advanced[:, j]
        eff_rows[:, j] = np.where(adv, traj.rows[:, j], prev)
        prev = eff_rows[:, j]
    return speed_limits[eff_rows, lanes].astype(float)


def evaluate_terms(
    traj: TrajectoryArrays,
    speed_limits: np.ndarray,
    frame: CostFrame = CostFrame(),
    vref: np.ndarray | None = None,
) -> dict[str, np.ndarray]:
    """Per-layer values of all seven terms, each shaped (k, H).

    Terms that need a neighbor on both sides (jerk, curvature, centripetal)
    are zero at the boundary slots where the neighbor does not exist.  When
    ``vref`` is given it overrides the window lookup (used for stitched
    whole-episode paths whose windows are long gone).
    """
    if traj.horizon < 1:
        raise DegenerateTrajectory("trajectory must contain at least one layer")
    n, v, adv = traj.n_full, traj.v_full, traj.advanced
    k, h = adv.shape
    num_lanes = speed_limits.shape[1]
    L, lw = frame.L, frame.lane_width

    if vref is None:
        vref = reference_speeds(traj, speed_limits)
    f_r = (vref - v[:, 1:]) ** 2

    dn = np.diff(n, axis=1) * lw
    dist = np.where(adv, np.sqrt(L * L + dn * dn), 0.0)
    dv = np.diff(v, axis=1)
    f_a = np.where(adv, dv * dv / np.maximum(2.0 * dist, 1e-300), 0.0)

    f_j = np.zeros((k, h))
    if h >= 2:
        f_j[:, :-1] = f_a[:, 1:] - f_a[:, :-1]

    f_d = np.where(adv, dist - L, 0.0)

    f_k = np.zeros((k, h))
    if frame.curvature_verbatim:
        # Second difference written with n_{i-2}, defined only where both
        # n_{i+1} and n_{i-2} exist (i = 2 .. H-1).
        if h >= 3:
            f_k[:, 1:h - 1] = (n[:, 3:h + 1] - 2.0 * n[:, 2:h] + n[:, 0:h - 2]) * lw / L
    elif h >= 2:
        f_k[:, :-1] = (n[:, 2:] - 2.0 * n[:, 1:-1] + n[:, :-2]) * lw / L

    lanes_full = lane_index(n, num_lanes)
    f_l = (lanes_full[:, 1:] != lanes_full[:, :-1]).astype(float)

    speed_factor = v[:, 1:] ** 2 if frame.centripetal_squares_speed else v[:, 1:]
    f_c = f_k * speed_factor

    return {"speed_error": f_r, "acceleration": f_a, "jerk": f_j,
            "extra_distance": f_d, "curvature": f_k, "lane_crossing": f_l,
            "centripetal": f_c}


_MIN_HORIZON = {"jerk": 2, "curvature": 2, "centripetal": 2}


def term(
    kind: str,
    traj: TrajectoryArrays,
    speed_limits: np.ndarray,
    frame: CostFrame = CostFrame(),
) -> np.ndarray:
    """Per-layer values of one named term for a single trajectory."""
    if kind not in TERM_KINDS:
        raise ValueError(f"unknown cost term {kind!r}")
    needed = _MIN_HORIZON.get(kind, 1)
    if traj.horizon < needed:
        raise DegenerateTrajectory(
            f"{kind} needs at least {needed} planned layers, got {traj.horizon}")
    return evaluate_terms(traj, speed_limits, frame)[kind][0]


def trajectory_cost(
    traj: TrajectoryArrays,
    speed_limits: np.ndarray,
    weights: CostWeights,
    frame: CostFrame = CostFrame(),
) -> CostReport:
    """Weighted Table-style cost report for a single trajectory."""
    totals = cost_batch(traj, speed_limits, weights, frame)
    return totals[0]


def cost_batch(
    traj: TrajectoryArrays,
    speed_limits: np.ndarray,
    weights: CostWeights,
    frame: CostFrame = CostFrame(),
) -> list[CostReport]:
    layers = evaluate_terms(traj, speed_limits, frame)
    sums = {kind: vals.sum(axis=1) for kind, vals in layers.items()}
    total = weighted_total(sums, weights)
    return [
        CostReport(
            f_r=float(sums["speed_error"][i]),
            f_a=float(sums["acceleration"][i]),
            f_j=float(sums["jerk"][i]),
            f_d=float(sums["extra_distance"][i]),
            f_k=float(sums["curvature"][i]),
            f_l=float(sums["lane_crossing"][i]),
            f_c=float(sums["centripetal"][i]),
            total=float(total[i]),
        )
        for i in range(traj.batch)
    ]


def weighted_total(sums: dict[str, np.ndarray], weights: CostWeights) -> np.ndarray:
    """Weighted combination, batched; order fixed for bit-stable ties."""
    return (weights.w_r * sums["speed_error"]
            + weights.w_a * sums["acceleration"]
            + weights.w_j * sums["jerk"]
            + weights.w_d * sums["extra_distance"]
            + weights.w_k * sums["curvature"]
            + weights.w_l * sums["lane_crossing"]
            + weights.w_c * sums["centripetal"])


def step_reward(outcome_kind: str, report: CostReport, weights: CostWeights) -> float:
    """Per-step reward: 1 per step minus cost, plus the terminal bonus.

    Success earns +10 and a collision -20; a no-path emergency stop ends the
    episode with no bonus either way.
    """
    base = 1.0 - report.total
    if outcome_kind == "success":
        return base + 10.0
    if outcome_kind == "collision":
        return base - 20.0
    if outcome_kind in ("running", "no_path"):
        return base
    raise ValueError(f"unknown outcome kind {outcome_kind!r}")


@dataclass(frozen=True)
class EpisodeMetrics:
    """One episode's driving metrics, aggregated as in the results tables."""

    step_reward: float
    speed_track_err: float
    acceleration: float
    jerk: float
    extra_distance: float
    curvature: float
    lane_changes: float
    centripetal_acc: float

    def as_dict(self) -> dict[str, float]:
        return {name: getattr(self, name) for name, _ in METRIC_ROWS}


def _abs_max(values: np.ndarray) -> float:
    return float(np.max(np.abs(values))) if values.size else 0.0


def aggregate_metrics(step_rewards: Sequence[float],
                      term_layers: dict[str, np.ndarray]) -> EpisodeMetrics:
    """Aggregate an episode trace into the metric table rows.

    ``term_layers`` maps each term kind to the concatenated per-layer values
    of every executed step.  Signed terms are aggregated by the magnitude of
    their extreme value.
    """
    rewards = np.asarray(step_rewards, dtype=float)
    fr = term_layers["speed_error"]
    fd = term_layers["extra_distance"]
    return EpisodeMetrics(
        step_reward=float(rewards.mean()) if rewards.size else 0.0,
        speed_track_err=float(fr.mean()) if fr.size else 0.0,
        acceleration=_abs_max(term_layers["acceleration"]),
        jerk=_abs_max(term_layers["jerk"]),
        extra_distance=float(fd.mean()) if fd.size else 0.0,
        curvature=_abs_max(term_layers["curvature"]),
        lane_changes=float(np.sum(term_layers["lane_crossing"])),
        centripetal_acc=_abs_max(term_layers["centripetal"]),
    )


def episode_path_metrics(n0: float, v0: float, steps: Sequence[dict],
                         num_lanes: int,
                         frame: CostFrame = CostFrame()) -> EpisodeMetrics:
    """Metrics over the stitched whole-episode path.

    Jerk and curvature need neighbors on both sides, so per-step windows
    (often a single executed layer) cannot see them; the episode path can.
    Each step dict carries executed_n, executed_v, advanced, vref and reward
    as recorded by the environment.
    """
    n_full = [n0]
    v_full = [v0]
    advanced: list[bool] = []
    vref: list[float] = []
    rewards: list[float] = []
    for step in steps:
        n_full.extend(float(x) for x in step["executed_n"])
        v_full.extend(float(x) for x in step["executed_v"])
        advanced.extend(bool(x) for x in step["advanced"])
        vref.extend(float(x) for x in step["vref"])
        rewards.append(float(step["reward"]))
    if not advanced:
        return aggregate_metrics(rewards, {k: np.zeros(0) for k in TERM_KINDS})
    traj = TrajectoryArrays(
        n_full=np.array([n_full]), v_full=np.array([v_full]),
        advanced=np.array([advanced]), rows=np.zeros((1, len(advanced)), dtype=int))
    layers = evaluate_terms(traj, np.zeros((1, num_lanes)), frame,
                            vref=np.array([vref]))
    return aggregate_metrics(rewards, {k: v[0] for k, v in layers.items()})


def compare_planners(metrics_a: Sequence[EpisodeMetrics],
                     metrics_b: Sequence[EpisodeMetrics],
                     label_a: str = "exhaustive",
                     label_b: str = "rl") -> list[dict]:
    """Mean +/- standard error per metric for two matched episode sets."""
    if len(metrics_a) != len(metrics_b):
        raise LengthMismatch(
            f"episode counts differ: {len(metrics_a)} vs {len(metrics_b)}")
    if not metrics_a:
        raise LengthMismatch("need at least one episode to compare")
    rows = []
    for name, agg in METRIC_ROWS:
        col_a = np.array([m.as_dict()[name] for m in metrics_a], dtype=float)
        col_b = np.array([m.as_dict()[name] for m in metrics_b], dtype=float)
        rows.append({
            "measure": name,
            "aggregation": agg,
            f"{label_a}_mean": float(col_a.mean()),
            f"{label_a}_stderr": _stderr(col_a),
            f"{label_b}_mean": float(col_b.mean()),
            f"{label_b}_stderr": _stderr(col_b),
        })
    return rows


def _stderr(col: np.ndarray) -> float:
    if len(col) < 2:
        return 0.0
    return float(col.std(ddof=1) / np.sqrt(len(col)))
