"""Clipped-surrogate policy optimization with a behavior-cloning term.

The minimized objective per update is::

    -alpha * mean(min(ratio * A, clip(ratio, 1-eps, 1+eps) * A))
    + beta * mean((V(s) - V_targ)^2)
    - gamma_bc * mean(log pi(a_demo | s_demo))
    - ent_coef * mean(entropy)

with advantages from generalized advantage estimation, normalized per minibatch.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import kernels
from .envworld import EPISODE_LENGTH, FEATURE_DIM, N_ACTIONS, EnvBatch, EnvSpec, Trajectory, state_features
from .errors import ContractViolation, DemoFormatError, NumericalError
from .nnet import (
    AdamState,
    StatePolicy,
    action_distribution,
    adam_step,
    backprop_gradients,
    choose_actions,
    clip_gradients,
    mlp_forward_cached,
    selected_log_probs,
)
from .rollout import episode_seed

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PpoBcConfig:
    alpha: float = 1.0
    beta: float = 0.5
    gamma_bc: float = 0.1
    epsilon_clip: float = 0.2
    gamma_discount: float = 0.99
    gae_lambda: float = 0.95
    n_envs: int = 64
    n_steps: int = EPISODE_LENGTH
    ppo_batch_size: int = 0  # 0 -> n_envs * n_steps // 4
    bc_batch_size: int = 32
    n_epochs: int = 10
    max_grad_norm: float = 5.0
    learning_rate: float = 3e-4
    ent_coef: float = 0.0
    hidden: tuple[int, ...] = (64, 64)
    eval_every: int = 10
    eval_rollouts: int = 10
    eval_deterministic: bool = False
    target_success: float | None = None

    def __post_init__(self):
        if not 0.0 < self.epsilon_clip < 1.0:
            raise ContractViolation("epsilon_clip must be in (0, 1)")
        if not (0.0 <= self.gamma_discount <= 1.0 and 0.0 <= self.gae_lambda <= 1.0):
            raise ContractViolation("gamma_discount and gae_lambda must be in [0, 1]")
        if min(self.alpha, self.beta, self.gamma_bc, self.ent_coef) < 0:
            raise ContractViolation("loss weights must be >= 0")
        object.__setattr__(self, "hidden", tuple(self.hidden))

    @property
    def minibatch_size(self) -> int:
        return self.ppo_batch_size or max(1, self.n_envs * self.n_steps // 4)


@dataclass
class RolloutBuffer:
    features: np.ndarray  # (T, n, F)
    states: np.ndarray  # (T, n, 7)
    actions: np.ndarray  # (T, n)
    rewards: np.ndarray
    dones: np.ndarray  # float 0/1
    values: np.ndarray
    log_probs: np.ndarray
    last_values: np.ndarray  # (n,) V(s_T) bootstrap for unfinished tails
    env_index: np.ndarray  # (n,) spec index of each copy
    snapshot: StatePolicy  # the collecting parameters (theta_old)
    episode_returns: list[float]
    episode_env: list[int]

    def __len__(self) -> int:
        return self.actions.size


@dataclass
class AdvantageEstimate:
    advantages: np.ndarray  # (T, n)
    returns: np.ndarray  # value targets


def assign_copies(n_envs: int, n_specs: int) -> np.ndarray:
    """Round-robin spec index for each env copy."""
    return np.arange(n_envs) % n_specs


def collect_rollouts(policy: StatePolicy, specs: Sequence[EnvSpec], cfg: PpoBcConfig, seed: int,
                     iteration: int = 0) -> RolloutBuffer:
    if not specs:
        raise ContractViolation("collect_rollouts needs at least one spec")
    snap = policy.copy()
    n, T = cfg.n_envs, cfg.n_steps
    env_index = assign_copies(n, len(specs))
    batch = EnvBatch([specs[k] for k in env_index])
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(iteration), 11]))
    ep_counter = np.zeros(n, dtype=np.int64)
    for i in range(n):
        batch.reset_slot(i, episode_seed(seed, i, iteration * 100_000))
    feats = np.zeros((T, n, FEATURE_DIM))
    states = np.zeros((T, n, 7))
    actions = np.zeros((T, n), dtype=np.int64)
    rewards = np.zeros((T, n))
    dones = np.zeros((T, n))
    values = np.zeros((T, n))
    logps = np.zeros((T, n))
    ret_acc = np.zeros(n)
    ep_returns, ep_env = [], []
    rows = np.arange(n)
    for t in range(T):
        f = batch.features()
        feats[t] = f
        states[t] = batch.state_vectors()
        logits = mlp_forward_cached(snap.actor_spec, snap.actor_params, f)[0]
        a = choose_actions(action_distribution(logits), rng, deterministic=False)
        lp, _, _ = selected_log_probs(logits, a)
        values[t] = snap.value(f)
        r, d = batch.step(a)
        actions[t], rewards[t], dones[t], logps[t] = a, r, d, lp
        ret_acc += r
        for i in rows[d]:
            ep_returns.append(float(ret_acc[i]))
            ep_env.append(int(env_index[i]))
            ret_acc[i] = 0.0
            ep_counter[i] += 1
            batch.reset_slot(i, episode_seed(seed, i, iteration * 100_000 + ep_counter[i]))
    last_values = snap.value(batch.features())
    return RolloutBuffer(feats, states, actions, rewards, dones, values, logps, last_values, env_index, snap,
                         ep_returns, ep_env)


def compute_gae(buffer: RolloutBuffer, cfg: PpoBcConfig) -> AdvantageEstimate:
    adv = np.zeros_like(buffer.rewards)
    kernels.gae(
        np.ascontiguousarray(buffer.rewards, dtype=float),
        np.ascontiguousarray(buffer.values, dtype=float),
        np.ascontiguousarray(buffer.dones, dtype=float),
        np.ascontiguousarray(buffer.last_values, dtype=float),
        cfg.gamma_discount,
        cfg.gae_lambda,
        adv,
    )
    return AdvantageEstimate(adv, adv + buffer.values)


def clipped_surrogate(ratio: np.ndarray, advantage: np.ndarray, epsilon: float) -> np.ndarray:
    return np.minimum(ratio * advantage, np.clip(ratio, 1 - epsilon, 1 + epsilon) * advantage)


def normalize_advantages(adv: np.ndarray) -> np.ndarray:
    if adv.size <= 1:
        return adv
    return (adv - adv.mean()) / (adv.std(ddof=1) + 1e-8)


@dataclass
class Minibatch:
    features: np.ndarray
    actions: np.ndarray
    old_log_probs: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray


@dataclass
class LossInfo:
    loss: float
    policy_loss: float
    value_loss: float
    bc_loss: float
    entropy: float
    clip_fraction: float


def ppo_bc_loss(policy: StatePolicy, mb: Minibatch, demo_features: np.ndarray | None,
                demo_actions: np.ndarray | None, cfg: PpoBcConfig, normalize: bool = True,
                clip: bool = True) -> tuple[LossInfo, np.ndarray, np.ndarray]:
    """Loss value and ``(actor_grad, critic_grad)``, clipped to ``max_grad_norm`` when ``clip``."""
    B = len(mb.actions)
    adv = normalize_advantages(mb.advantages) if normalize else mb.advantages
    has_demo = demo_features is not None and len(demo_features) > 0 and cfg.gamma_bc > 0
    x = np.concatenate([mb.features, demo_features]) if has_demo else mb.features
    logits, a_cache = mlp_forward_cached(policy.actor_spec, policy.actor_params, x)
    acts = np.concatenate([mb.actions, demo_actions]) if has_demo else mb.actions
    lp, probs, clamped = selected_log_probs(logits, acts)
    onehot = np.zeros_like(probs)
    onehot[np.arange(len(acts)), acts] = 1.0
    dlogp = np.where(clamped[:, None], 0.0, onehot - probs)

    lp_r = lp[:B]
    ratio = np.exp(lp_r - mb.old_log_probs)
    clipped_ratio = np.clip(ratio, 1 - cfg.epsilon_clip, 1 + cfg.epsilon_clip)
    surr = np.minimum(ratio * adv, clipped_ratio * adv)
    d_surr_d_ratio = np.where(ratio * adv <= clipped_ratio * adv, adv, 0.0)
    policy_loss = -cfg.alpha * surr.mean()
    g_logits = np.zeros_like(logits)
    g_logits[:B] = (-cfg.alpha / B) * (d_surr_d_ratio * ratio)[:, None] * dlogp[:B]

    lsm = np.log(np.maximum(probs[:B], 1e-300))
    ent = -(probs[:B] * lsm).sum(axis=1)
    if cfg.ent_coef > 0:
        g_logits[:B] += (cfg.ent_coef / B) * probs[:B] * (lsm + ent[:, None])
    ent_loss = -cfg.ent_coef * ent.mean()

    bc_loss = 0.0
    if has_demo:
        Bd = len(demo_actions)
        bc_loss = -cfg.gamma_bc * lp[B:].mean()
        g_logits[B:] = (-cfg.gamma_bc / Bd) * dlogp[B:]

    v, c_cache = mlp_forward_cached(policy.critic_spec, policy.critic_params, mb.features)
    err = v[:, 0] - mb.returns
    value_loss = cfg.beta * np.mean(err * err)
    g_v = (2 * cfg.beta / B) * err[:, None]

    loss = policy_loss + value_loss + bc_loss + ent_loss
    if not np.isfinite(loss):
        raise NumericalError("non-finite PPO-BC loss")
    g_actor, _ = backprop_gradients(policy.actor_spec, policy.actor_params, a_cache, g_logits)
    g_critic, _ = backprop_gradients(policy.critic_spec, policy.critic_params, c_cache, g_v)
    if clip:
        g_actor, g_critic = clip_gradients([g_actor, g_critic], cfg.max_grad_norm)
    info = LossInfo(float(loss), float(policy_loss), float(value_loss), float(bc_loss), float(ent.mean()),
                    float(np.mean(np.abs(ratio - 1) > cfg.epsilon_clip)))
    return info, g_actor, g_critic


def demo_pairs(demos: Sequence[Trajectory], specs: Sequence[EnvSpec]) -> tuple[np.ndarray, np.ndarray]:
    """Stack demo (features, actions); each pair is featurized with its own env's goal."""
    goals = {s.env_id: np.asarray(s.goal_site) for s in specs}
    feats, acts = [], []
    for d in demos:
        a = np.asarray(d.actions)
        if a.size and (a.min() < 0 or a.max() >= N_ACTIONS or not np.issubdtype(a.dtype, np.integer)):
            raise DemoFormatError(f"demo on {d.env_id} has out-of-range actions")
        if d.env_id not in goals:
            raise DemoFormatError(f"demo env {d.env_id} not among the training specs")
        if len(d) == 0:
            continue
        feats.append(state_features(goals[d.env_id], np.asarray(d.states)))
        acts.append(a.astype(np.int64))
    if not feats:
        return np.zeros((0, FEATURE_DIM)), np.zeros(0, dtype=np.int64)
    return np.concatenate(feats), np.concatenate(acts)


@dataclass
class TrainResult:
    policy: StatePolicy
    best_success: float
    env_steps: int
    history: list[dict]


def train_state_policy(specs: Sequence[EnvSpec], demos: Sequence[Trajectory], cfg: PpoBcConfig = PpoBcConfig(),
                       budget: int = 200_000, seed: int = 0, init: StatePolicy | None = None,
                       metrics_path: str | Path | None = None) -> TrainResult:
    """Demo-bootstrapped PPO over ``specs``; returns the best evaluated snapshot."""
    from .evalharness import evaluate_success_rate

    if not specs:
        raise ContractViolation("train_state_policy needs at least one spec")
    demo_x, demo_a = demo_pairs(demos, specs)
    policy = init.copy() if init is not None else StatePolicy.create(FEATURE_DIM, cfg.hidden, seed=seed)
    opt_a = AdamState.zeros(policy.actor_params.size)
    opt_c = AdamState.zeros(policy.critic_params.size)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 23]))
    steps_per_iter = cfg.n_envs * cfg.n_steps
    n_iters = max(1, budget // steps_per_iter)
    best, best_rate, env_steps = policy.copy(), -1.0, 0
    history: list[dict] = []
    writer = None
    fh = None
    if metrics_path is not None:
        fh = open(metrics_path, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(["iteration", "env_steps", "mean_episode_reward", "per_spec_success",
                         "policy_loss", "value_loss", "bc_loss", "eval_success"])
    try:
        for it in range(n_iters):
            buf = collect_rollouts(policy, specs, cfg, seed, it)
            env_steps += steps_per_iter
            est = compute_gae(buf, cfg)
            flat = Minibatch(
                buf.features.reshape(-1, FEATURE_DIM),
                buf.actions.ravel(),
                buf.log_probs.ravel(),
                est.advantages.ravel(),
                est.returns.ravel(),
            )
            mbs = cfg.minibatch_size
            infos = []
            for _ in range(cfg.n_epochs):
                perm = rng.permutation(len(flat.actions))
                for start in range(0, len(perm), mbs):
                    sel = perm[start : start + mbs]
                    mb = Minibatch(flat.features[sel], flat.actions[sel], flat.old_log_probs[sel],
                                   flat.advantages[sel], flat.returns[sel])
                    if len(demo_a) and cfg.gamma_bc > 0:
                        di = rng.integers(0, len(demo_a), size=cfg.bc_batch_size)
                        dx, da = demo_x[di], demo_a[di]
                    else:
                        dx = da = None
                    info, ga, gc = ppo_bc_loss(policy, mb, dx, da, cfg)
                    policy.actor_params, opt_a = adam_step(policy.actor_params, ga, opt_a, cfg.learning_rate)
                    policy.critic_params, opt_c = adam_step(policy.critic_params, gc, opt_c, cfg.learning_rate)
                    infos.append(info)
            per_spec = {}
            for k, s in enumerate(specs):
                rets = [r for r, e in zip(buf.episode_returns, buf.episode_env) if e == k]
                per_spec[s.env_id] = float(np.mean(rets)) if rets else 0.0
            row = {
                "iteration": it,
                "env_steps": env_steps,
                "mean_episode_reward": float(np.mean(buf.episode_returns)) if buf.episode_returns else 0.0,
                "per_spec_success": per_spec,
                "policy_loss": float(np.mean([i.policy_loss for i in infos])),
                "value_loss": float(np.mean([i.value_loss for i in infos])),
                "bc_loss": float(np.mean([i.bc_loss for i in infos])),
                "eval_success": None,
            }
            if (it + 1) % cfg.eval_every == 0 or it == n_iters - 1:
                rep = evaluate_success_rate(policy, specs, cfg.eval_rollouts, seed=seed + 7,
                                            deterministic_actions=cfg.eval_deterministic)
                row["eval_success"] = rep.mean
                if rep.mean >= best_rate:
                    best, best_rate = policy.copy(), rep.mean
                log.debug("iter %d steps %d eval %.3f", it, env_steps, rep.mean)
            history.append(row)
            if writer is not None:
                writer.writerow([row["iteration"], row["env_steps"], row["mean_episode_reward"],
                                 json.dumps(per_spec, sort_keys=True), row["policy_loss"], row["value_loss"],
                                 row["bc_loss"], "" if row["eval_success"] is None else row["eval_success"]])
            if cfg.target_success is not None and row["eval_success"] is not None and row["eval_success"] >= cfg.target_success:
                break
    finally:
        if fh is not None:
            fh.close()
    return TrainResult(best, best_rate, env_steps, history)


def config_dict(cfg: PpoBcConfig) -> dict:
    d = asdict(cfg)
    d["hidden"] = list(cfg.hidden)
    return d
