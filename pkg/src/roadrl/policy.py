"""Gaussian trajectory policy trained with clipped-surrogate updates.

Policy and value function are separate fully connected networks with two
tanh hidden layers of 64 units; the policy head outputs the mean of a
diagonal Gaussian whose log standard deviations are free state-independent
parameters.  Everything is float64 numpy with hand-derived reverse-mode
gradients, so updates are bitwise reproducible under a fixed seed and the
gradients can be checked against central finite differences.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .cost import CostWeights
from .environment import EpisodeConfig, LatticeEnv, Scene, decode_action, encode_observation
from .errors import LengthMismatch, NonFiniteLoss, ShapeMismatch
from .safety import SafetyConfig, constrain

__all__ = [
    "PpoConfig",
    "PolicyParams",
    "AdamState",
    "RolloutBatch",
    "TrainResult",
    "init_params",
    "forward_policy",
    "forward_value",
    "sample_action",
    "gaussian_log_prob",
    "gaussian_entropy",
    "compute_gae",
    "ppo_loss_and_grads",
    "ppo_update",
    "collect_rollouts",
    "train",
    "plan_rl",
    "rolling_median",
    "save_checkpoint",
    "load_checkpoint",
]

_LOG_2PI = float(np.log(2.0 * np.pi))
_HIDDEN = 64

PARAM_FIELDS = ("p_w1", "p_b1", "p_w2", "p_b2", "p_w3", "p_b3", "log_std",
                "v_w1", "v_b1", "v_w2", "v_b2", "v_w3", "v_b3")


@dataclass
class PpoConfig:
    n_envs: int = 32
    n_steps: int = 64
    minibatch_size: int = 32
    gamma: float = 0.999
    learning_rate: float = 2e-4
    ent_coef: float = 0.01
    clip: float = 0.4
    n_epochs: int = 25
    gae_lambda: float = 0.99
    total_steps: int = 2_000_000
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    max_grad_norm: float = 0.5
    seed: int = 0

    def __post_init__(self) -> None:
        if (self.n_envs * self.n_steps) % self.minibatch_size != 0:
            raise ValueError("n_envs * n_steps must be divisible by minibatch_size")


@dataclass
class PolicyParams:
    """All learnable parameters; policy and value nets share nothing."""

    p_w1: np.ndarray
    p_b1: np.ndarray
    p_w2: np.ndarray
    p_b2: np.ndarray
    p_w3: np.ndarray
    p_b3: np.ndarray
    log_std: np.ndarray
    v_w1: np.ndarray
    v_b1: np.ndarray
    v_w2: np.ndarray
    v_b2: np.ndarray
    v_w3: np.ndarray
    v_b3: np.ndarray

    @property
    def obs_dim(self) -> int:
        return self.p_w1.shape[1]

    @property
    def act_dim(self) -> int:
        return self.p_w3.shape[0]

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_FIELDS}

    def copy(self) -> "PolicyParams":
        return PolicyParams(**{k: v.copy() for k, v in self.arrays().items()})

    def flatten(self) -> np.ndarray:
        return np.concatenate([getattr(self, name).ravel() for name in PARAM_FIELDS])

    def set_flat(self, flat: np.ndarray) -> None:
        offset = 0
        for name in PARAM_FIELDS:
            arr = getattr(self, name)
            arr[...] = flat[offset:offset + arr.size].reshape(arr.shape)
            offset += arr.size
        if offset != flat.size:
            raise ShapeMismatch("flat vector does not match parameter count")


def _orthogonal(rng: np.random.Generator, rows: int, cols: int, gain: float) -> np.ndarray:
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.where(np.diag(r) == 0.0, 1.0, np.sign(np.diag(r)))
    if rows < cols:
        q = q.T
    return gain * q[:rows, :cols]


def init_params(obs_dim: int, act_dim: int, rng: np.random.Generator) -> PolicyParams:
    """Orthogonal hidden weights, tiny policy head, zero biases, log-std 0."""
    g = np.sqrt(2.0)
    return PolicyParams(
        p_w1=_orthogonal(rng, _HIDDEN, obs_dim, g), p_b1=np.zeros(_HIDDEN),
        p_w2=_orthogonal(rng, _HIDDEN, _HIDDEN, g), p_b2=np.zeros(_HIDDEN),
        p_w3=_orthogonal(rng, act_dim, _HIDDEN, 0.01), p_b3=np.zeros(act_dim),
        log_std=np.zeros(act_dim),
        v_w1=_orthogonal(rng, _HIDDEN, obs_dim, g), v_b1=np.zeros(_HIDDEN),
        v_w2=_orthogonal(rng, _HIDDEN, _HIDDEN, g), v_b2=np.zeros(_HIDDEN),
        v_w3=_orthogonal(rng, 1, _HIDDEN, 1.0), v_b3=np.zeros(1),
    )


# -- forward / backward ------------------------------------------------------


def _as_batch(obs: np.ndarray, dim: int) -> tuple[np.ndarray, bool]:
    x = np.asarray(obs, dtype=float)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != dim:
        raise ShapeMismatch(f"observation must have {dim} features, got shape {x.shape}")
    return x, single


def _mlp_forward(x, w1, b1, w2, b2, w3, b3):
    h1 = np.tanh(x @ w1.T + b1)
    h2 = np.tanh(h1 @ w2.T + b2)
    return h1, h2, h2 @ w3.T + b3


def _mlp_backward(x, h1, h2, d_out, w2, w3):
    """Gradients of a scalar loss given d loss / d output."""
    d_w3 = d_out.T @ h2
    d_b3 = d_out.sum(axis=0)
    d_z2 = (d_out @ w3) * (1.0 - h2 * h2)
    d_w2 = d_z2.T @ h1
    d_b2 = d_z2.sum(axis=0)
    d_z1 = (d_z2 @ w2) * (1.0 - h1 * h1)
    d_w1 = d_z1.T @ x
    d_b1 = d_z1.sum(axis=0)
    return d_w1, d_b1, d_w2, d_b2, d_w3, d_b3


def forward_policy(params: PolicyParams, obs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean and standard deviation of the action distribution."""
    x, single = _as_batch(obs, params.obs_dim)
    _, _, mean = _mlp_forward(x, params.p_w1, params.p_b1, params.p_w2,
                              params.p_b2, params.p_w3, params.p_b3)
    std = np.broadcast_to(np.exp(params.log_std), mean.shape).copy()
    return (mean[0], std[0]) if single else (mean, std)


def forward_value(params: PolicyParams, obs: np.ndarray) -> np.ndarray:
    x, single = _as_batch(obs, params.obs_dim)
    _, _, out = _mlp_forward(x, params.v_w1, params.v_b1, params.v_w2,
                             params.v_b2, params.v_w3, params.v_b3)
    v = out[:, 0]
    return v[0] if single else v


def gaussian_log_prob(x: np.ndarray, mean: np.ndarray, log_std: np.ndarray) -> np.ndarray:
    z = (x - mean) / np.exp(log_std)
    return np.sum(-0.5 * z * z - log_std - 0.5 * _LOG_2PI, axis=-1)


def gaussian_entropy(log_std: np.ndarray) -> float:
    return float(np.sum(0.5 + 0.5 * _LOG_2PI + log_std))


def sample_action(mean: np.ndarray, std: np.ndarray,
                  rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Diagonal Gaussian sample and its log-probability.

    The raw sample is returned unclamped; execution clips to [-1, 1] at the
    environment boundary while importance ratios keep using the sample.
    """
    mean = np.asarray(mean, dtype=float)
    std = np.asarray(std, dtype=float)
    x = mean + std * rng.standard_normal(mean.shape)
    return x, gaussian_log_prob(x, mean, np.log(std))


def compute_gae(rewards: np.ndarray, values: np.ndarray, dones: np.ndarray,
                gamma: float, lam: float, last_values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Generalized advantage estimation over (T, n_envs) arrays.

    ``dones[t]`` marks that the transition at t ended its episode, so credit
    never leaks across the reset boundary.  Returns are advantages + values.
    """
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    dones = np.asarray(dones, dtype=float)
    last_values = np.asarray(last_values, dtype=float)
    if not (rewards.shape == values.shape == dones.shape):
        raise LengthMismatch("rewards, values and dones must share one shape")
    if last_values.shape != rewards.shape[1:]:
        raise LengthMismatch("last_values must match the environment axis")
    t_len = rewards.shape[0]
    advantages = np.zeros_like(rewards)
    gae = np.zeros_like(last_values)
    next_values = last_values
    for t in reversed(range(t_len)):
        not_done = 1.0 - dones[t]
        delta = rewards[t] + gamma * next_values * not_done - values[t]
        gae = delta + gamma * lam * not_done * gae
        advantages[t] = gae
        next_values = values[t]
    return advantages, advantages + values


@dataclass
class RolloutBatch:
    """One synchronized rollout across all environments, time-major."""

    obs: np.ndarray        # (T, E, D)
    actions: np.ndarray    # (T, E, A) unclamped samples
    rewards: np.ndarray    # (T, E)
    dones: np.ndarray      # (T, E)
    values: np.ndarray     # (T, E)
    log_probs: np.ndarray  # (T, E)
    last_values: np.ndarray          # (E,)
    advantages: Optional[np.ndarray] = None
    returns: Optional[np.ndarray] = None

    @property
    def size(self) -> int:
        return self.rewards.shape[0] * self.rewards.shape[1]

    def finalize(self, gamma: float, lam: float) -> None:
        self.advantages, self.returns = compute_gae(
            self.rewards, self.values, self.dones, gamma, lam, self.last_values)

    def flat(self) -> dict[str, np.ndarray]:
        """Env-major flattening: transition index = env * T + t."""
        def em(arr):
            return np.swapaxes(arr, 0, 1).reshape(self.size, *arr.shape[2:])
        if self.advantages is None:
            raise ValueError("finalize() must run before flattening")
        return {
            "obs": em(self.obs), "actions": em(self.actions),
            "log_probs": em(self.log_probs), "advantages": em(self.advantages),
            "returns": em(self.returns),
        }


# -- PPO update ---------------------------------------------------------------


def ppo_loss_and_grads(params: PolicyParams, obs, actions, old_log_probs,
                       advantages, returns, config: PpoConfig):
    """Clipped-surrogate + entropy + value loss, with exact gradients.

    The value network trains on its own parameters with unit coefficient;
    there is no shared trunk, so no balancing coefficient is needed.
    """
    b = obs.shape[0]
    h1p, h2p, mean = _mlp_forward(obs, params.p_w1, params.p_b1, params.p_w2,
                                  params.p_b2, params.p_w3, params.p_b3)
    std = np.exp(params.log_std)
    diff = actions - mean
    z2 = (diff / std) ** 2
    log_probs = np.sum(-0.5 * z2 - params.log_std - 0.5 * _LOG_2PI, axis=1)
    ratio = np.exp(log_probs - old_log_probs)
    s_plain = ratio * advantages
    s_clip = np.clip(ratio, 1.0 - config.clip, 1.0 + config.clip) * advantages
    take_plain = s_plain <= s_clip
    policy_loss = -np.mean(np.minimum(s_plain, s_clip))

    entropy = gaussian_entropy(params.log_std)
    h1v, h2v, v_out = _mlp_forward(obs, params.v_w1, params.v_b1, params.v_w2,
                                   params.v_b2, params.v_w3, params.v_b3)
    v_err = v_out[:, 0] - returns
    value_loss = float(np.mean(v_err * v_err))

    loss = float(policy_loss) - config.ent_coef * entropy + value_loss

    # Backward pass.  The min() gate passes gradient through the plain
    # surrogate wherever it is active (ties included); the clipped branch is
    # flat in ratio outside the band, so it contributes nothing there.
    d_ratio = np.where(take_plain, advantages, 0.0) * (-1.0 / b)
    d_log_probs = d_ratio * ratio
    d_mean = d_log_probs[:, None] * diff / (std * std)
    d_log_std = np.sum(d_log_probs[:, None] * (z2 - 1.0), axis=0) - config.ent_coef

    g = dict(zip(("p_w1", "p_b1", "p_w2", "p_b2", "p_w3", "p_b3"),
                 _mlp_backward(obs, h1p, h2p, d_mean, params.p_w2, params.p_w3)))
    g["log_std"] = d_log_std
    d_v = (2.0 / b) * v_err
    g.update(zip(("v_w1", "v_b1", "v_w2", "v_b2", "v_w3", "v_b3"),
                 _mlp_backward(obs, h1v, h2v, d_v[:, None], params.v_w2, params.v_w3)))

    diagnostics = {
        "policy_loss": float(policy_loss), "value_loss": value_loss,
        "entropy": entropy, "loss": loss,
        "ratio_max_dev": float(np.max(np.abs(ratio - 1.0))),
        "clip_fraction": float(np.mean(~take_plain)),
    }
    return loss, g, diagnostics


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def for_params(cls, params: PolicyParams) -> "AdamState":
        return cls(m={k: np.zeros_like(a) for k, a in params.arrays().items()},
                   v={k: np.zeros_like(a) for k, a in params.arrays().items()})


def _adam_step(params: PolicyParams, grads: dict[str, np.ndarray],
               adam: AdamState, config: PpoConfig) -> None:
    norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if config.max_grad_norm > 0 and norm > config.max_grad_norm:
        scale = config.max_grad_norm / norm
        grads = {k: g * scale for k, g in grads.items()}
    adam.t += 1
    b1, b2 = config.adam_beta1, config.adam_beta2
    bc1 = 1.0 - b1 ** adam.t
    bc2 = 1.0 - b2 ** adam.t
    for name, grad in grads.items():
        arr = getattr(params, name)
        m = adam.m[name]
        v = adam.v[name]
        m *= b1
        m += (1.0 - b1) * grad
        v *= b2
        v += (1.0 - b2) * grad * grad
        arr -= config.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + config.adam_eps)


def ppo_update(params: PolicyParams, batch: RolloutBatch, config: PpoConfig,
               adam: Optional[AdamState] = None,
               rng: Optional[np.random.Generator] = None):
    """Run the full epoch/minibatch schedule on one rollout batch.

    Advantages are normalized once over the update batch.  Returns the
    updated parameters (mutated in place), the Adam state and diagnostics of
    the first and last minibatch.
    """
    if adam is None:
        adam = AdamState.for_params(params)
    if rng is None:
        rng = np.random.default_rng(config.seed)
    flat = batch.flat()
    adv = flat["advantages"]
    adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    n = batch.size
    diags: dict = {}
    first = True
    for _ in range(config.n_epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.minibatch_size):
            idx = order[start:start + config.minibatch_size]
            loss, grads, d = ppo_loss_and_grads(
                params, flat["obs"][idx], flat["actions"][idx],
                flat["log_probs"][idx], adv[idx], flat["returns"][idx], config)
            if not np.isfinite(loss):
                raise NonFiniteLoss(f"loss became non-finite: {d}")
            if first:
                diags["first"] = d
                first = False
            _adam_step(params, grads, adam, config)
            diags["last"] = d
    return params, adam, diags


# -- rollouts and training -----------------------------------------------------


def collect_rollouts(params: PolicyParams, envs: Sequence[LatticeEnv], n_steps: int,
                     rng: np.random.Generator, obs: np.ndarray,
                     episode_log: Optional[list] = None,
                     step_offset: int = 0,
                     ep_accum: Optional[np.ndarray] = None) -> tuple[RolloutBatch, np.ndarray]:
    """Step all environments n_steps times under the stochastic policy.

    ``obs`` is the (E, D) matrix of current observations; environments are
    auto-reset on termination (continuing their own rng streams).  Completed
    episodes are appended to ``episode_log`` as (env_step, return, length);
    ``ep_accum`` carries the (E, 2) running return/length across calls.
    """
    n_envs = len(envs)
    obs_dim = params.obs_dim
    act_dim = params.act_dim
    if ep_accum is None:
        ep_accum = np.zeros((n_envs, 2))
    shape = (n_steps, n_envs)
    out_obs = np.empty(shape + (obs_dim,))
    out_act = np.empty(shape + (act_dim,))
    out_rew = np.empty(shape)
    out_done = np.zeros(shape)
    out_val = np.empty(shape)
    out_lp = np.empty(shape)
    for t in range(n_steps):
        mean, std = forward_policy(params, obs)
        actions, log_probs = sample_action(mean, std, rng)
        values = forward_value(params, obs)
        out_obs[t] = obs
        out_act[t] = actions
        out_val[t] = values
        out_lp[t] = log_probs
        next_obs = np.empty((n_envs, obs_dim))
        for e, env in enumerate(envs):
            outcome = env.step(actions[e])
            out_rew[t, e] = outcome.reward
            out_done[t, e] = float(outcome.done)
            ep_accum[e, 0] += outcome.reward
            ep_accum[e, 1] += 1
            if outcome.done:
                if episode_log is not None:
                    episode_log.append((step_offset + (t + 1) * n_envs,
                                        float(ep_accum[e, 0]), int(ep_accum[e, 1])))
                ep_accum[e] = 0.0
                next_obs[e] = env.reset(seed=None)
            else:
                next_obs[e] = outcome.observation
        obs = next_obs
    batch = RolloutBatch(obs=out_obs, actions=out_act, rewards=out_rew,
                         dones=out_done, values=out_val, log_probs=out_lp,
                         last_values=np.asarray(forward_value(params, obs)))
    return batch, obs


@dataclass
class TrainResult:
    params: PolicyParams
    adam: AdamState
    episodes: list            # (env_step, return, length)
    updates: list             # per-update diagnostics
    env_steps: int


def train(ppo_config: PpoConfig, env_config: EpisodeConfig,
          weights: CostWeights = CostWeights(),
          params: Optional[PolicyParams] = None,
          adam: Optional[AdamState] = None,
          start_step: int = 0,
          progress: Optional[Callable[[int, int], None]] = None) -> TrainResult:
    """Collect/update loop until total_steps environment steps are consumed."""
    seeds = np.random.SeedSequence(ppo_config.seed)
    env_seeds = seeds.spawn(ppo_config.n_envs)
    envs = []
    for i in range(ppo_config.n_envs):
        cfg = replace(env_config, rng_seed=int(env_seeds[i].generate_state(1)[0]))
        envs.append(LatticeEnv(cfg, weights=weights))
    obs = np.stack([env.reset() for env in envs])

    rng = np.random.default_rng(ppo_config.seed)
    if params is None:
        params = init_params(env_config.obs_dim, env_config.action_dim, rng)
    if adam is None:
        adam = AdamState.for_params(params)

    episodes: list = []
    updates: list = []
    ep_accum = np.zeros((ppo_config.n_envs, 2))
    env_steps = start_step
    per_iter = ppo_config.n_envs * ppo_config.n_steps
    while env_steps < ppo_config.total_steps:
        batch, obs = collect_rollouts(params, envs, ppo_config.n_steps, rng, obs,
                                      episode_log=episodes, step_offset=env_steps,
                                      ep_accum=ep_accum)
        batch.finalize(ppo_config.gamma, ppo_config.gae_lambda)
        params, adam, diag = ppo_update(params, batch, ppo_config, adam, rng)
        env_steps += per_iter
        updates.append({"env_steps": env_steps, **diag["last"]})
        if progress is not None:
            progress(env_steps, ppo_config.total_steps)
    return TrainResult(params=params, adam=adam, episodes=episodes,
                       updates=updates, env_steps=env_steps)


def rolling_median(values: Sequence[float], window: int = 1000) -> np.ndarray:
    """Trailing-window median of a series, one value per input point."""
    arr = np.asarray(values, dtype=float)
    out = np.empty_like(arr)
    for i in range(len(arr)):
        out[i] = np.median(arr[max(0, i - window + 1):i + 1])
    return out


def plan_rl(params: PolicyParams, scene: Scene, config: EpisodeConfig,
            safety_config: SafetyConfig) -> np.ndarray:
    """Deterministic evaluation query: mean action, decoded, then gated.

    Returns the flattened (n_1..n_H, v_1..v_H) trajectory; NoPathException
    from the gate propagates to the caller.
    """
    mean, _ = forward_policy(params, encode_observation(scene, config))
    action = np.clip(mean, -1.0, 1.0)
    decoded = decode_action(action, scene.n0, scene.v0, config)
    flat = np.concatenate([decoded.n, decoded.v])
    return constrain(flat, scene, config, safety_config)


# -- checkpointing -------------------------------------------------------------

_CKPT_VERSION = 1


def save_checkpoint(path: str, params: PolicyParams, adam: AdamState,
                    env_steps: int) -> None:
    """Single-file npz: parameters, Adam moments, counters (layout v1)."""
    payload = {"version": np.array(_CKPT_VERSION), "env_steps": np.array(env_steps),
               "adam_t": np.array(adam.t)}
    for name, arr in params.arrays().items():
        payload[f"param_{name}"] = arr
        payload[f"adam_m_{name}"] = adam.m[name]
        payload[f"adam_v_{name}"] = adam.v[name]
    np.savez(path, **payload)


def load_checkpoint(path: str) -> tuple[PolicyParams, AdamState, int]:
    with np.load(path) as data:
        version = int(data["version"])
        if version != _CKPT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        params = PolicyParams(**{name: data[f"param_{name}"].copy()
                                 for name in PARAM_FIELDS})
        adam = AdamState(
            m={name: data[f"adam_m_{name}"].copy() for name in PARAM_FIELDS},
            v={name: data[f"adam_v_{name}"].copy() for name in PARAM_FIELDS},
            t=int(data["adam_t"]))
        return params, adam, int(data["env_steps"])
