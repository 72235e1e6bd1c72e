"""Lattice driving world with a gym-style reset/step API.

The world is a W-lane road discretized into layers.  A scene window of depth
``H_s`` always covers the layers ahead of the car: window row ``r`` is the
layer the car would reach after ``r + 1`` forward moves.  Episodes advance in
planning steps: the agent proposes a trajectory over ``H_p`` layers, the
first ``move_layers`` slots are executed, and the window shifts by however
many layers the car actually moved.

A slot whose speed is below the stop threshold (half a speed level) holds
the car in place instead of advancing it, which is what makes safety stops
in front of the wall representable at all.  A wall of fully occupied rows is
placed ``max_steps`` layers from the start.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import safety as safety_mod
from .cost import (STOP_SPEED, CostFrame, CostReport, CostWeights,
                   TrajectoryArrays, evaluate_terms, lane_index,
                   reference_speeds, step_reward, weighted_total)
from .errors import ConfigError, EpisodeFinished, NoPathException, ShapeMismatch

__all__ = [
    "EpisodeConfig",
    "Scene",
    "TrajectoryAction",
    "StepOutcome",
    "LatticeEnv",
    "generate_scene",
    "decode_action",
    "encode_observation",
    "is_blocked_row",
    "save_scene",
    "load_scene",
    "STOP_SPEED",
]

# Mean geometric length (layers) of one regulatory speed zone.
_PATCH_CONTINUE = 0.25


@dataclass
class EpisodeConfig:
    W: int = 3
    H_s: int = 10
    H_p: int = 3
    p_obstacle: float = 0.5
    max_steps: int = 60
    v_max: int = 5
    dn_max: int = 1
    dv_max: int = 1
    move_layers: int = 3
    v_init: float = 2.0
    rng_seed: int = 0
    gating: bool = False
    # "row": only the no-full-blockage repair.  "path": additionally keep an
    # admissible lane path from the ego through the window.  "no_dead_end":
    # additionally give every free cell a free successor (strongest).
    scene_connectivity: str = "path"

    def __post_init__(self) -> None:
        if self.W < 1 or self.H_s < 1 or self.H_p < 1:
            raise ConfigError("W, H_s and H_p must be positive")
        if self.H_p > self.H_s:
            raise ConfigError("plan horizon H_p cannot exceed sensor depth H_s")
        if not 0.0 <= self.p_obstacle <= 1.0:
            raise ConfigError("p_obstacle must lie in [0, 1]")
        if self.dn_max < 1 or self.dv_max < 1 or self.v_max < 1:
            raise ConfigError("dn_max, dv_max and v_max must be at least 1")
        if not 1 <= self.move_layers <= self.H_p:
            raise ConfigError("move_layers must lie in [1, H_p]")
        if self.max_steps < 1:
            raise ConfigError("max_steps must be positive")
        if self.scene_connectivity not in ("row", "path", "no_dead_end"):
            raise ConfigError(f"unknown scene_connectivity {self.scene_connectivity!r}")

    @property
    def obs_dim(self) -> int:
        return 2 * self.H_s * self.W + 2

    @property
    def action_dim(self) -> int:
        return 2 * self.H_p


@dataclass
class Scene:
    """Observation payload: occupancy and regulatory grids plus ego state."""

    occupancy: np.ndarray      # (H_s, W) of {0, 1}
    speed_limits: np.ndarray   # (H_s, W), cells/step
    n0: float                  # lateral position, lane-offset units
    v0: float                  # current speed, cells/step

    def copy(self) -> "Scene":
        return Scene(self.occupancy.copy(), self.speed_limits.copy(), self.n0, self.v0)


@dataclass(frozen=True)
class TrajectoryAction:
    """Raw policy output and its decoded lattice trajectory."""

    raw: np.ndarray   # (2 H_p,) in [-1, 1]
    n: np.ndarray     # (H_p,) lane-offset units, clamped to the road
    v: np.ndarray     # (H_p,) cells/step, clamped to [0, v_max]


@dataclass(frozen=True)
class StepOutcome:
    observation: np.ndarray
    reward: float
    done: bool
    info: dict


def is_blocked_row(scene: Scene, row: int) -> bool:
    """True when every cell of the window row is occupied."""
    return bool(np.all(scene.occupancy[row] == 1))


def decode_action(raw: np.ndarray, n0: float, v0: float, config: EpisodeConfig) -> TrajectoryAction:
    """Cumulative-sum decoding of a [-1, 1]^(2 H_p) action.

    Lateral deltas are scaled by dn_max and clamped to the road edges; speed
    deltas are scaled by dv_max and clamped to [0, v_max].  Clamping is
    applied sequentially so each delta acts on the clamped previous state.
    """
    raw = np.asarray(raw, dtype=float)
    if raw.shape != (2 * config.H_p,):
        raise ShapeMismatch(f"action must have shape ({2 * config.H_p},), got {raw.shape}")
    if np.any(np.abs(raw) > 1.0 + 1e-12):
        raise ValueError("raw action components must lie in [-1, 1]")
    half = config.W / 2.0
    n = np.empty(config.H_p)
    v = np.empty(config.H_p)
    prev_n, prev_v = n0, v0
    for j in range(config.H_p):
        prev_n = min(max(prev_n + config.dn_max * raw[j], -half), half)
        prev_v = min(max(prev_v + config.dv_max * raw[config.H_p + j], 0.0), float(config.v_max))
        n[j], v[j] = prev_n, prev_v
    return TrajectoryAction(raw=raw.copy(), n=n, v=v)


def encode_observation(scene: Scene, config: EpisodeConfig) -> np.ndarray:
    """Flatten to [occupancy, speed/v_max, n0/(W/2), v0/v_max], all in [-1, 1]."""
    return np.concatenate([
        scene.occupancy.astype(float).ravel(),
        (scene.speed_limits / config.v_max).ravel(),
        [scene.n0 / (config.W / 2.0), scene.v0 / config.v_max],
    ])


class _SpeedPatches:
    """Full-width regulatory zones of geometric length, mean four layers."""

    def __init__(self, rng: np.random.Generator, v_max: int):
        self._rng = rng
        self._v_max = v_max
        self._left = 0
        self._limit = 1.0

    def next_row(self, width: int) -> np.ndarray:
        if self._left == 0:
            self._left = int(self._rng.geometric(_PATCH_CONTINUE))
            self._limit = float(self._rng.integers(1, self._v_max + 1))
        self._left -= 1
        return np.full(width, self._limit)


def _raw_row(config: EpisodeConfig, rng: np.random.Generator, abs_layer: int) -> np.ndarray:
    """One occupancy row: Bernoulli obstacles, or the wall past max_steps.

    Fully blocked pre-wall rows get one uniformly chosen cell cleared so the
    road itself never disappears.
    """
    if abs_layer >= config.max_steps:
        return np.ones(config.W, dtype=np.int8)
    row = (rng.random(config.W) < config.p_obstacle).astype(np.int8)
    if row.all():
        row[rng.integers(config.W)] = 0
    return row


def generate_scene(config: EpisodeConfig, rng: np.random.Generator) -> Scene:
    """Fresh scene window covering layers 1 .. H_s for a car at layer 0."""
    patches = _SpeedPatches(rng, config.v_max)
    occ = np.empty((config.H_s, config.W), dtype=np.int8)
    lim = np.empty((config.H_s, config.W))
    for r in range(config.H_s):
        occ[r] = _raw_row(config, rng, r + 1)
        lim[r] = patches.next_row(config.W)
    return Scene(occupancy=occ, speed_limits=lim, n0=0.0, v0=config.v_init)


def _ensure_path(occ: np.ndarray, wall_mask: np.ndarray, ego_lane: int,
                 dn_max: int, rng: np.random.Generator) -> None:
    """Clear cells until an admissible lane path from the ego exists.

    Forward reachability with |lane step| <= dn_max; whenever a pre-wall row
    becomes unreachable, one uniformly chosen cell adjacent to the reachable
    set is cleared.  Mutates ``occ`` in place.
    """
    w = occ.shape[1]
    reach = np.zeros(w, dtype=bool)
    reach[ego_lane] = True
    for r in range(occ.shape[0]):
        if wall_mask[r]:
            break
        step_reach = np.zeros(w, dtype=bool)
        for l in np.flatnonzero(reach):
            step_reach[max(0, l - dn_max):min(w, l + dn_max + 1)] = True
        new_reach = step_reach & (occ[r] == 0)
        if not new_reach.any():
            pick = rng.choice(np.flatnonzero(step_reach))
            occ[r, pick] = 0
            new_reach[pick] = True
        reach = new_reach


def _ensure_no_dead_ends(occ: np.ndarray, wall_mask: np.ndarray, start_row: int,
                         dn_max: int, rng: np.random.Generator) -> None:
    """Give every free pre-wall cell at least one free successor.

    Only rows from ``start_row`` on are repaired, so already observed rows
    are never touched when the window slides.
    """
    h, w = occ.shape
    for r in range(max(start_row, 1), h):
        if wall_mask[r]:
            continue
        for l in np.flatnonzero(occ[r - 1] == 0):
            if wall_mask[r - 1]:
                continue
            lo, hi = max(0, l - dn_max), min(w, l + dn_max + 1)
            if occ[r, lo:hi].all():
                occ[r, int(rng.integers(lo, hi))] = 0


class LatticeEnv:
    """Episode state machine over the lattice road."""

    def __init__(self, config: EpisodeConfig, weights: CostWeights = CostWeights(),
                 safety_config: Optional["safety_mod.SafetyConfig"] = None,
                 frame: CostFrame = CostFrame()):
        self.config = config
        self.weights = weights
        self.safety_config = safety_config or safety_mod.SafetyConfig(
            speed_levels=tuple(range(config.v_max + 1)))
        self.frame = frame
        self.rng: np.random.Generator = np.random.default_rng(config.rng_seed)
        self._patches: _SpeedPatches | None = None
        self.done = True
        self.terminal_kind = "running"

    # -- episode protocol ---------------------------------------------------

    def reset(self, seed: Optional[int] = None) -> np.ndarray:
        cfg = self.config
        self.rng = np.random.default_rng(cfg.rng_seed if seed is None else seed)
        self._patches = _SpeedPatches(self.rng, cfg.v_max)
        self.progress = 0
        self.step_count = 0
        self.n0 = 0.0
        self.v0 = float(cfg.v_init)
        self.done = False
        self.terminal_kind = "running"
        self.occ = np.empty((cfg.H_s, cfg.W), dtype=np.int8)
        self.lim = np.empty((cfg.H_s, cfg.W))
        for r in range(cfg.H_s):
            self.occ[r] = _raw_row(cfg, self.rng, r + 1)
            self.lim[r] = self._patches.next_row(cfg.W)
        self._repair(start_row=0)
        return self.observe()

    def view(self) -> Scene:
        return Scene(self.occ.copy(), self.lim.copy(), self.n0, self.v0)

    def load_scene_state(self, scene: Scene) -> np.ndarray:
        """Overwrite the freshly reset window with a persisted snapshot.

        The rng stream (already seeded by reset) keeps generating the rows
        revealed later, so a replay is fully determined by snapshot + seed.
        """
        cfg = self.config
        if scene.occupancy.shape != (cfg.H_s, cfg.W):
            raise ConfigError(
                f"scene grid {scene.occupancy.shape} does not match config "
                f"({cfg.H_s}, {cfg.W})")
        self.occ = scene.occupancy.astype(np.int8).copy()
        self.lim = scene.speed_limits.astype(float).copy()
        self.n0 = float(scene.n0)
        self.v0 = float(scene.v0)
        return self.observe()

    def observe(self) -> np.ndarray:
        return encode_observation(self.view(), self.config)

    def wall_visible(self) -> bool:
        return self.progress + self.config.H_s >= self.config.max_steps

    def step(self, raw_action: np.ndarray) -> StepOutcome:
        if self.done:
            raise EpisodeFinished("episode is over; call reset() first")
        cfg = self.config
        progress_before = self.progress
        action = decode_action(np.clip(np.asarray(raw_action, dtype=float), -1.0, 1.0),
                               self.n0, self.v0, cfg)

        plan_n, plan_v = action.n, action.v
        constrained = False
        emergency = False
        if cfg.gating:
            flat = np.concatenate([plan_n, plan_v])
            try:
                out = safety_mod.constrain(flat, self.view(), cfg, self.safety_config)
                if out is not flat and not np.array_equal(out, flat):
                    constrained = True
                plan_n, plan_v = out[:cfg.H_p], out[cfg.H_p:]
            except NoPathException:
                emergency = True
                plan_n, plan_v = self._emergency_trajectory()

        n_slots = len(plan_n) if emergency else cfg.move_layers
        executed, collided = self._execute(plan_n[:n_slots], plan_v[:n_slots])

        vref = reference_speeds(executed, self.lim)
        layers = evaluate_terms(executed, self.lim, self.frame)
        sums = {kind: vals.sum(axis=1) for kind, vals in layers.items()}
        report = CostReport(
            f_r=float(sums["speed_error"][0]), f_a=float(sums["acceleration"][0]),
            f_j=float(sums["jerk"][0]), f_d=float(sums["extra_distance"][0]),
            f_k=float(sums["curvature"][0]), f_l=float(sums["lane_crossing"][0]),
            f_c=float(sums["centripetal"][0]),
            total=float(weighted_total(sums, self.weights)[0]),
        )

        # Terminal classification: a collision always ends the episode; a car
        # at rest with the wall in sensor range made its stop; surviving the
        # step budget also counts as a success.
        self.step_count += 1
        if collided:
            kind, self.done = "collision", True
        elif emergency:
            kind, self.done = "no_path", True
        elif self.v0 < STOP_SPEED and self.wall_visible():
            kind, self.done = "success", True
        elif self.step_count >= cfg.max_steps:
            kind, self.done = "success", True
        else:
            kind = "running"
        self.terminal_kind = kind
        reward = step_reward(kind, report, self.weights)

        advances = int(executed.advanced.sum())
        self._shift(advances)

        info = {
            "terminal_kind": kind,
            "cost_report": report,
            "term_layers": {k: v[0].copy() for k, v in layers.items()},
            "constrained": constrained,
            "emergency": emergency,
            "executed_n": executed.n_full[0, 1:].copy(),
            "executed_v": executed.v_full[0, 1:].copy(),
            "advanced": executed.advanced[0].copy(),
            "vref": vref[0].copy(),
            "progress": self.progress,
            "progress_before": progress_before,
            "raw_action": action.raw,
        }
        return StepOutcome(self.observe(), reward, self.done, info)

    # -- internals ----------------------------------------------------------

    def _execute(self, plan_n: np.ndarray, plan_v: np.ndarray) -> tuple[TrajectoryArrays, bool]:
        """Run trajectory slots against the current window.

        Held slots (speed below the stop threshold) freeze the lateral
        position.  Execution truncates at the first collision, with the car
        left inside the offending cell.
        """
        cfg = self.config
        ns, vs, adv, rows = [self.n0], [self.v0], [], []
        advances = 0
        collided = False
        for n_j, v_j in zip(plan_n, plan_v):
            moving = v_j >= STOP_SPEED
            pos = float(n_j) if moving else ns[-1]
            ns.append(pos)
            vs.append(float(v_j))
            adv.append(moving)
            rows.append(advances if moving else -1)
            if moving:
                lane = int(lane_index(pos, cfg.W))
                hit = bool(self.occ[advances, lane])
                advances += 1
                if hit:
                    collided = True
                    break
        executed = TrajectoryArrays(
            n_full=np.array([ns]), v_full=np.array([vs]),
            advanced=np.array([adv]), rows=np.array([rows]))
        self.n0, self.v0 = ns[-1], vs[-1]
        self.progress += advances
        return executed, collided

    def _emergency_trajectory(self) -> tuple[np.ndarray, np.ndarray]:
        """Maximum-deceleration straight-ahead stop."""
        cfg = self.config
        vs = []
        v = self.v0
        while True:
            v = max(0.0, v - cfg.dv_max)
            vs.append(v)
            if v == 0.0:
                break
        return np.full(len(vs), self.n0), np.array(vs)

    def _shift(self, advances: int) -> None:
        cfg = self.config
        if advances > 0:
            self.occ = np.roll(self.occ, -advances, axis=0)
            self.lim = np.roll(self.lim, -advances, axis=0)
            for i in range(advances):
                r = cfg.H_s - advances + i
                abs_layer = self.progress + r + 1
                self.occ[r] = _raw_row(cfg, self.rng, abs_layer)
                self.lim[r] = self._patches.next_row(cfg.W)
            self._repair(start_row=cfg.H_s - advances)

    def _repair(self, start_row: int) -> None:
        """Connectivity repair after generating new rows; see EpisodeConfig."""
        cfg = self.config
        wall_mask = np.array([self.progress + r + 1 >= cfg.max_steps
                              for r in range(cfg.H_s)])
        ego_lane = int(lane_index(self.n0, cfg.W))
        if cfg.scene_connectivity == "no_dead_end":
            if start_row == 0 and not wall_mask[0]:
                lo = max(0, ego_lane - cfg.dn_max)
                hi = min(cfg.W, ego_lane + cfg.dn_max + 1)
                if self.occ[0, lo:hi].all():
                    self.occ[0, int(self.rng.integers(lo, hi))] = 0
            _ensure_no_dead_ends(self.occ, wall_mask, start_row, cfg.dn_max, self.rng)
        elif cfg.scene_connectivity == "path":
            _ensure_path(self.occ, wall_mask, ego_lane, cfg.dn_max, self.rng)


# -- scene snapshot serialization -------------------------------------------


def save_scene(scene: Scene, path: str) -> None:
    """Line-oriented snapshot: header ``W H_s n0 v0``, occupancy, limits."""
    h, w = scene.occupancy.shape
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{w} {h} {scene.n0!r} {scene.v0!r}\n")
        for row in scene.occupancy:
            fh.write("".join(str(int(c)) for c in row) + "\n")
        for row in scene.speed_limits:
            fh.write(" ".join(repr(float(c)) for c in row) + "\n")


def load_scene(path: str) -> Scene:
    with open(path, encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    try:
        w_s, h_s, n0_s, v0_s = lines[0].split()
        w, h = int(w_s), int(h_s)
        occ = np.array([[int(c) for c in lines[1 + r]] for r in range(h)], dtype=np.int8)
        lim = np.array([[float(c) for c in lines[1 + h + r].split()] for r in range(h)])
    except (IndexError, ValueError) as exc:
        raise ConfigError(f"malformed scene file {path}: {exc}") from exc
    if occ.shape != (h, w) or lim.shape != (h, w) or not np.isin(occ, (0, 1)).all():
        raise ConfigError(f"malformed scene file {path}: bad grid dimensions")
    return Scene(occupancy=occ, speed_limits=lim, n0=float(n0_s), v0=float(v0_s))
