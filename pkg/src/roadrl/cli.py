"""Command-line entry point.

Commands:
  train    --config F [--resume C] --out DIR
  compare  --ckpt C --episodes N --seed S --out DIR [--config F]
  bench    --ckpt C [--config F] [--out DIR]
  plot     --trace T --out DIR
  replay   --scene S --planner {rl,exhaustive} [--ckpt C] --out T [--seed N] [--config F]

Every command is deterministic given (config, seed); artifacts are written
atomically and carry the config hash in a run manifest.  Exit codes: 0 on
success, 1 on usage errors, 2 on runtime failures.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import os
import sys
import tempfile
import time
from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np

from . import plotting
from .cost import (CostFrame, CostWeights, EpisodeMetrics, METRIC_ROWS,
                   compare_planners, episode_path_metrics)
from .environment import (EpisodeConfig, LatticeEnv, Scene, load_scene,
                          save_scene)
from .errors import ConfigError, NoPathException, RoadRlError
from .geometry import fit_trajectory_spline
from .policy import (PpoConfig, forward_policy, load_checkpoint, plan_rl,
                     rolling_median, save_checkpoint, train)
from .safety import SafetyConfig
from .search import SearchConfig, plan_exhaustive, query_latency

__all__ = ["RunConfig", "parse_config", "config_text", "default_run_config",
           "eval_run_config", "run_episode", "make_rl_planner",
           "make_exhaustive_planner", "raw_from_trajectory", "main"]


# -- run configuration --------------------------------------------------------


@dataclass
class RunConfig:
    episode: EpisodeConfig
    weights: CostWeights
    safety: SafetyConfig
    ppo: PpoConfig
    seed: int = 0


def _bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("true", "1", "yes", "on"):
        return True
    if lowered in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# key -> (section, field, parser); parsers follow the field defaults' types.
_SCHEMA: dict[str, tuple[str, str, Callable]] = {}
for _f in dataclasses.fields(EpisodeConfig):
    if _f.name == "rng_seed":
        continue
    _SCHEMA[f"env.{_f.name}"] = (
        "episode", _f.name, {bool: _bool, int: int, float: float, str: str}[type(_f.default)])
for _f in dataclasses.fields(CostWeights):
    _SCHEMA[f"weights.{_f.name}"] = ("weights", _f.name, float)
_SCHEMA["safety.tau"] = ("safety", "tau", float)
_SCHEMA["safety.c_max"] = ("safety", "c_max", float)
for _f in dataclasses.fields(PpoConfig):
    if _f.name == "seed":
        continue
    _SCHEMA[f"ppo.{_f.name}"] = (
        "ppo", _f.name, {bool: _bool, int: int, float: float}[type(_f.default)])
_SCHEMA["seed"] = ("run", "seed", int)


def default_run_config() -> RunConfig:
    return RunConfig(episode=EpisodeConfig(), weights=CostWeights(),
                     safety=SafetyConfig(), ppo=PpoConfig(), seed=0)


def eval_run_config() -> RunConfig:
    """Evaluation profile: gated planners, test-mode replanning.

    v_max equals the plan horizon and c_max covers braking along the previous
    plan's remainder (|second difference| up to 2.5 with half-cell drift,
    times speed up to 2), so a gated car always has a live candidate; see the
    README safety notes.  Planning is 3 ahead / move 1, as in testing.
    """
    episode = EpisodeConfig(v_max=3, move_layers=1, gating=True,
                            scene_connectivity="path")
    return RunConfig(episode=episode, weights=CostWeights(),
                     safety=SafetyConfig(tau=0.5, c_max=5.0),
                     ppo=PpoConfig(), seed=0)


def smoke_run_config() -> RunConfig:
    """Training profile used by the scaled-down learning check."""
    episode = EpisodeConfig(v_max=3, move_layers=3, gating=False,
                            scene_connectivity="path")
    ppo = PpoConfig(total_steps=200_000)
    return RunConfig(episode=episode, weights=CostWeights(),
                     safety=SafetyConfig(tau=0.5, c_max=4.0), ppo=ppo, seed=0)


def parse_config(text: str, base: Optional[RunConfig] = None) -> RunConfig:
    """Parse a flat ``key = value`` config; errors carry line numbers."""
    rc = base or default_run_config()
    sections = {"episode": dataclasses.asdict(rc.episode),
                "weights": dataclasses.asdict(rc.weights),
                "safety": {"tau": rc.safety.tau, "c_max": rc.safety.c_max,
                           "speed_levels": rc.safety.speed_levels},
                "ppo": dataclasses.asdict(rc.ppo),
                "run": {"seed": rc.seed}}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, _, value = stripped.partition("=")
        key, value = key.strip(), value.strip()
        if key not in _SCHEMA:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        section, fld, parser = _SCHEMA[key]
        try:
            sections[section][fld] = parser(value)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from exc
    try:
        return RunConfig(
            episode=EpisodeConfig(**sections["episode"]),
            weights=CostWeights(**sections["weights"]),
            safety=SafetyConfig(**sections["safety"]),
            ppo=PpoConfig(**{**sections["ppo"], "seed": sections["run"]["seed"]}),
            seed=sections["run"]["seed"])
    except (ConfigError, ValueError) as exc:
        raise ConfigError(f"config validation failed: {exc}") from exc


def config_text(rc: RunConfig) -> str:
    """Canonical (sorted-key) rendering; hashing this pins a run."""
    values = {}
    for key, (section, fld, _) in _SCHEMA.items():
        obj = {"episode": rc.episode, "weights": rc.weights, "safety": rc.safety,
               "ppo": rc.ppo}.get(section)
        values[key] = rc.seed if section == "run" else getattr(obj, fld)
    lines = [f"{k} = {values[k]}" for k in sorted(values)]
    return "\n".join(lines) + "\n"


def config_hash(rc: RunConfig) -> str:
    return hashlib.sha256(config_text(rc).encode()).hexdigest()[:16]


def load_config_file(path: str, base: Optional[RunConfig] = None) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            return parse_config(fh.read(), base)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc


# -- small file helpers -------------------------------------------------------


def atomic_write(path: str, data: str) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_csv(path: str, header: list[str], rows: list[list]) -> None:
    import io
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    atomic_write(path, buf.getvalue())


def write_manifest(out_dir: str, rc: RunConfig, command: str) -> None:
    manifest = {"command": command, "config_hash": config_hash(rc), "seed": rc.seed}
    atomic_write(os.path.join(out_dir, "run.json"),
                 json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    atomic_write(os.path.join(out_dir, "run_config.cfg"), config_text(rc))


# -- planners ------------------------------------------------------------------


def raw_from_trajectory(n: np.ndarray, v: np.ndarray, n0: float, v0: float,
                        config: EpisodeConfig) -> np.ndarray:
    """Invert the cumulative-sum decoding for an in-bounds lattice plan."""
    dn = np.diff(np.concatenate([[n0], n])) / config.dn_max
    dv = np.diff(np.concatenate([[v0], v])) / config.dv_max
    return np.concatenate([dn, dv])


def make_exhaustive_planner(weights: CostWeights, config: EpisodeConfig,
                            safety_config: SafetyConfig,
                            search_config: SearchConfig = SearchConfig()):
    """Planner callable returning a raw action for env.step.

    When nothing is feasible it proposes the neutral action and lets the
    environment's own gate resolve the emergency stop, so campaign episodes
    log a safety stop instead of crashing.
    """
    def planner(scene: Scene) -> np.ndarray:
        try:
            plan = plan_exhaustive(scene, weights, config, search_config, safety_config)
        except NoPathException:
            return np.zeros(2 * config.H_p)
        return raw_from_trajectory(plan.n, plan.v, scene.n0, scene.v0, config)

    return planner


def make_rl_planner(params, config: EpisodeConfig):
    """Deterministic policy query (mean action); gating happens in the env."""
    from .environment import encode_observation

    def planner(scene: Scene) -> np.ndarray:
        mean, _ = forward_policy(params, encode_observation(scene, config))
        return np.clip(mean, -1.0, 1.0)

    return planner


@dataclass
class EpisodeRecord:
    metrics: EpisodeMetrics
    terminal_kind: str
    steps: int
    episode_return: float
    no_path_events: int
    seed: int


def run_episode(env: LatticeEnv, planner: Callable[[Scene], np.ndarray],
                seed: int) -> EpisodeRecord:
    env.reset(seed=seed)
    steps: list[dict] = []
    start_n0, start_v0 = env.n0, env.v0
    no_path = 0
    episode_return = 0.0
    kind = "running"
    while True:
        outcome = env.step(planner(env.view()))
        info = outcome.info
        steps.append({"executed_n": info["executed_n"], "executed_v": info["executed_v"],
                      "advanced": info["advanced"], "vref": info["vref"],
                      "reward": outcome.reward})
        episode_return += outcome.reward
        no_path += int(info["emergency"])
        if outcome.done:
            kind = info["terminal_kind"]
            break
    metrics = episode_path_metrics(start_n0, start_v0, steps, env.config.W)
    return EpisodeRecord(metrics=metrics, terminal_kind=kind, steps=len(steps),
                         episode_return=episode_return, no_path_events=no_path,
                         seed=seed)


def episode_seeds(base_seed: int, count: int) -> list[int]:
    ss = np.random.SeedSequence(base_seed)
    return [int(child.generate_state(1)[0]) for child in ss.spawn(count)]


# -- commands ------------------------------------------------------------------


def cmd_train(args) -> int:
    rc = load_config_file(args.config)
    os.makedirs(args.out, exist_ok=True)
    write_manifest(args.out, rc, "train")

    params = adam = None
    start_step = 0
    if args.resume:
        params, adam, start_step = load_checkpoint(args.resume)
        print(f"resuming from {args.resume} at step {start_step}")

    t0 = time.perf_counter()

    def progress(step, total):
        if step % (rc.ppo.n_envs * rc.ppo.n_steps * 10) == 0 or step >= total:
            rate = step / max(time.perf_counter() - t0, 1e-9)
            print(f"  step {step}/{total} ({rate:,.0f} steps/s)", flush=True)

    result = train(rc.ppo, rc.episode, rc.weights, params=params, adam=adam,
                   start_step=start_step, progress=progress)

    ckpt = os.path.join(args.out, "checkpoint.npz")
    save_checkpoint(ckpt, result.params, result.adam, result.env_steps)

    returns = [ep[1] for ep in result.episodes]
    medians = rolling_median(returns, window=1000)
    rows = [[i, ep[0], f"{ep[1]:.6f}", ep[2], f"{medians[i]:.6f}"]
            for i, ep in enumerate(result.episodes)]
    write_csv(os.path.join(args.out, "history.csv"),
              ["episode", "env_step", "episode_return", "episode_length",
               "rolling_median"], rows)

    xs = [float(ep[0]) for ep in result.episodes]
    svg = plotting.line_chart(
        {"episode return": (xs, returns), "rolling median (1000)": (xs, list(medians))},
        title="training episode rewards", x_label="environment steps",
        y_label="episode reward")
    atomic_write(os.path.join(args.out, "training_curve.svg"), svg)
    print(f"trained {result.env_steps} steps, {len(result.episodes)} episodes "
          f"-> {ckpt}")
    return 0


def _planner_pair(rc: RunConfig, ckpt_path: str):
    params, _, _ = load_checkpoint(ckpt_path)
    ex = make_exhaustive_planner(rc.weights, rc.episode, rc.safety)
    rl = make_rl_planner(params, rc.episode)
    return {"exhaustive": ex, "rl": rl}, params


def cmd_compare(args) -> int:
    rc = load_config_file(args.config, base=eval_run_config()) if args.config \
        else eval_run_config()
    rc.seed = args.seed
    os.makedirs(args.out, exist_ok=True)
    write_manifest(args.out, rc, "compare")
    planners, _ = _planner_pair(rc, args.ckpt)

    seeds = episode_seeds(args.seed, args.episodes)
    records: dict[str, list[EpisodeRecord]] = {}
    for name, planner in planners.items():
        env = LatticeEnv(rc.episode, weights=rc.weights, safety_config=rc.safety)
        records[name] = [run_episode(env, planner, seed) for seed in seeds]
        kinds = {}
        for rec in records[name]:
            kinds[rec.terminal_kind] = kinds.get(rec.terminal_kind, 0) + 1
        print(f"{name}: {len(records[name])} episodes, terminals {kinds}")

    ep_rows = []
    for name in planners:
        for i, rec in enumerate(records[name]):
            ep_rows.append([name, i, rec.seed, rec.terminal_kind, rec.steps,
                            f"{rec.episode_return:.6f}", rec.no_path_events]
                           + [f"{v:.6f}" for v in rec.metrics.as_dict().values()])
    write_csv(os.path.join(args.out, "episodes.csv"),
              ["planner", "episode", "seed", "terminal_kind", "steps",
               "episode_return", "no_path_events"]
              + [name for name, _ in METRIC_ROWS], ep_rows)

    table = compare_planners([r.metrics for r in records["exhaustive"]],
                             [r.metrics for r in records["rl"]])
    sum_rows = [[row["measure"], row["aggregation"],
                 f"{row['exhaustive_mean']:.6f}", f"{row['exhaustive_stderr']:.6f}",
                 f"{row['rl_mean']:.6f}", f"{row['rl_stderr']:.6f}"]
                for row in table]
    write_csv(os.path.join(args.out, "summary.csv"),
              ["measure", "aggregation", "exhaustive_mean", "exhaustive_stderr",
               "rl_mean", "rl_stderr"], sum_rows)

    print(f"{'measure':18s} {'agg':5s} {'exhaustive':>22s} {'rl':>22s}")
    for row in table:
        ex = f"{row['exhaustive_mean']:.3f} +/- {row['exhaustive_stderr']:.3f}"
        rl = f"{row['rl_mean']:.3f} +/- {row['rl_stderr']:.3f}"
        print(f"{row['measure']:18s} {row['aggregation']:5s} {ex:>22s} {rl:>22s}")
    return 0


def cmd_bench(args) -> int:
    rc = load_config_file(args.config) if args.config else default_run_config()
    planners, params = _planner_pair(rc, args.ckpt)

    scenes = []
    env = LatticeEnv(rc.episode, weights=rc.weights, safety_config=rc.safety)
    for seed in episode_seeds(rc.seed, 32):
        env.reset(seed=seed)
        scenes.append(env.view())

    def ex_query(scene):
        return plan_exhaustive(scene, rc.weights, rc.episode,
                               safety_config=rc.safety)

    rl_query = make_rl_planner(params, rc.episode)

    def rl_gated_query(scene):
        return plan_rl(params, scene, rc.episode, rc.safety)

    reports = {
        "exhaustive": query_latency(ex_query, scenes, min_queries=args.queries),
        "rl": query_latency(rl_query, scenes, min_queries=args.queries),
        "rl_gated": query_latency(rl_gated_query, scenes, min_queries=args.queries),
    }
    ratio = reports["exhaustive"].mean_s / reports["rl"].mean_s
    print(f"{'planner':12s} {'mean (s)':>12s} {'stderr (s)':>12s} {'queries':>8s}")
    for name, rep in reports.items():
        print(f"{name:12s} {rep.mean_s:12.3e} {rep.stderr_s:12.3e} {rep.queries:8d}")
    print(f"exhaustive / rl latency ratio: {ratio:.1f}x")

    if args.out:
        os.makedirs(args.out, exist_ok=True)
        write_manifest(args.out, rc, "bench")
        rows = [[name, f"{rep.mean_s:.9f}", f"{rep.stderr_s:.9f}", rep.queries]
                for name, rep in reports.items()]
        rows.append(["ratio_exhaustive_over_rl", f"{ratio:.6f}", "", ""])
        write_csv(os.path.join(args.out, "latency.csv"),
                  ["planner", "mean_s", "stderr_s", "queries"], rows)
    return 0


def cmd_replay(args) -> int:
    rc = load_config_file(args.config, base=eval_run_config()) if args.config \
        else eval_run_config()
    scene = load_scene(args.scene)
    cfg = replace(rc.episode, W=scene.occupancy.shape[1],
                  H_s=scene.occupancy.shape[0], rng_seed=args.seed)

    if args.planner == "rl":
        if not args.ckpt:
            raise ConfigError("the rl planner needs --ckpt")
        params, _, _ = load_checkpoint(args.ckpt)
        planner = make_rl_planner(params, cfg)
    else:
        planner = make_exhaustive_planner(rc.weights, cfg, rc.safety)

    env = LatticeEnv(cfg, weights=rc.weights, safety_config=rc.safety)
    env.reset(seed=args.seed)
    env.load_scene_state(scene)

    lines = []
    episode_return = 0.0
    step_idx = 0
    while True:
        view = env.view()
        raw = planner(view)
        outcome = env.step(raw)
        info = outcome.info
        lines.append(json.dumps({
            "type": "step", "index": step_idx,
            "progress_before": info["progress_before"],
            "occupancy": ["".join(str(int(c)) for c in row) for row in view.occupancy],
            "speed_limits": [[float(c) for c in row] for row in view.speed_limits],
            "n0": view.n0, "v0": view.v0,
            "raw_action": [float(x) for x in info["raw_action"]],
            "executed_n": [float(x) for x in info["executed_n"]],
            "executed_v": [float(x) for x in info["executed_v"]],
            "advanced": [bool(x) for x in info["advanced"]],
            "vref": [float(x) for x in info["vref"]],
            "reward": outcome.reward,
            "terminal_kind": info["terminal_kind"],
            "cost_report": outcome.info["cost_report"].as_dict(),
        }, sort_keys=True))
        episode_return += outcome.reward
        step_idx += 1
        if outcome.done:
            final_kind = info["terminal_kind"]
            lines.append(json.dumps({
                "type": "summary", "episode_return": episode_return,
                "steps": step_idx, "terminal_kind": final_kind,
                "config_hash": config_hash(rc)}, sort_keys=True))
            break
    atomic_write(args.out, "\n".join(lines) + "\n")
    print(f"replayed {step_idx} steps ({final_kind}) -> {args.out}")
    return 0


def _load_trace(path: str) -> tuple[list[dict], dict]:
    steps = []
    summary = {}
    try:
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    row = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise ConfigError(f"{path} line {lineno}: {exc}") from exc
                if row.get("type") == "step":
                    steps.append(row)
                elif row.get("type") == "summary":
                    summary = row
    except OSError as exc:
        raise ConfigError(f"cannot read trace {path}: {exc}") from exc
    if not steps:
        raise ConfigError(f"trace {path} contains no steps")
    return steps, summary


def cmd_plot(args) -> int:
    steps, _ = _load_trace(args.trace)
    os.makedirs(args.out, exist_ok=True)

    # Rebuild the absolute grid from the per-step windows (later windows win:
    # connectivity repairs may clear previously seen cells).
    grid: dict[int, tuple[list[int], list[float]]] = {}
    for step in steps:
        base = int(step["progress_before"])
        for r, (occ_row, lim_row) in enumerate(zip(step["occupancy"],
                                                   step["speed_limits"])):
            grid[base + r + 1] = ([int(c) for c in occ_row], list(lim_row))
    layers = sorted(grid)
    occupancy = [grid[l][0] for l in layers]
    limits = [grid[l][1] for l in layers]
    v_max = max(max(row) for row in limits)

    points = []          # (absolute layer, n) for advancing slots
    velocity = []        # (slot sequence index, v)
    for step in steps:
        progress = int(step["progress_before"])
        for n, v, adv in zip(step["executed_n"], step["executed_v"], step["advanced"]):
            if adv:
                progress += 1
                points.append((progress, n))
            velocity.append((len(velocity), v))

    spline_samples = []
    if len(points) >= 2:
        spline = fit_trajectory_spline(points)
        xs = np.linspace(points[0][0], points[-1][0], 100)
        spline_samples = list(zip(xs.tolist(), spline(xs).tolist()))

    first_layer = layers[0] if layers else 1
    svg = plotting.path_chart(
        occupancy, limits, v_max,
        [(p[0] - first_layer + 1, p[1]) for p in points],
        [(s[0] - first_layer + 1, s[1]) for s in spline_samples])
    atomic_write(os.path.join(args.out, "path.svg"), svg)

    vel_svg = plotting.line_chart(
        {"speed": ([float(i) for i, _ in velocity], [float(v) for _, v in velocity])},
        title="velocity profile", x_label="layer slot", y_label="cells/step")
    atomic_write(os.path.join(args.out, "velocity.svg"), vel_svg)

    write_csv(os.path.join(args.out, "path_points.csv"), ["layer", "n"],
              [[f"{p[0]:.6f}", f"{p[1]:.6f}"] for p in points])
    write_csv(os.path.join(args.out, "spline.csv"), ["layer", "n"],
              [[f"{s[0]:.6f}", f"{s[1]:.6f}"] for s in spline_samples])
    write_csv(os.path.join(args.out, "velocity.csv"), ["slot", "v"],
              [[i, f"{v:.6f}"] for i, v in velocity])
    print(f"plot data -> {args.out}")
    return 0


# -- argument parsing -----------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="roadrl", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train the trajectory policy")
    p.add_argument("--config", required=True)
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("compare", help="matched-seed planner comparison")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--episodes", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("bench", help="planner query latency")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--queries", type=int, default=200)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("plot", help="emit path/velocity plot data from a trace")
    p.add_argument("--trace", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("replay", help="roll one episode from a scene snapshot")
    p.add_argument("--scene", required=True)
    p.add_argument("--planner", choices=("rl", "exhaustive"), required=True)
    p.add_argument("--ckpt", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_replay)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    try:
        return args.func(args)
    except RoadRlError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
