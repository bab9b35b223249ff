"""Vectorized episode runner shared by evaluation, teachers and model demos.

An *agent* is any object with ``act(batch, idx, rng, deterministic)`` that
returns one action per slot index in ``idx``; it may also define
``on_reset(batch, i, rng)``, called when slot ``i`` starts an episode.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .envworld import EPISODE_LENGTH, N_ACTIONS, EnvBatch, EnvSpec, Trajectory, WorldState, inject_disturbance, reset


def episode_seed(seed: int, env_index: int, k: int) -> int:
    """Fixed per-(run seed, environment, rollout) reset seed."""
    return int(np.random.SeedSequence([int(seed), int(env_index), int(k)]).generate_state(1)[0])


@dataclass
class Disturbance:
    at_step: int
    seed: int


def run_episodes(
    agent,
    jobs: Sequence[tuple[EnvSpec, int]],
    seed: int,
    deterministic: bool = False,
    initial_states: Sequence[WorldState | None] | None = None,
    disturbance: Disturbance | None = None,
    episode_length: int = EPISODE_LENGTH,
) -> list[Trajectory]:
    """Run one episode per ``(spec, episode_seed)`` job, all slots in lockstep."""
    n = len(jobs)
    if n == 0:
        return []
    batch = EnvBatch([spec for spec, _ in jobs], episode_length=episode_length)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 9001]))
    for i, (spec, ep_seed) in enumerate(jobs):
        init = initial_states[i] if initial_states is not None else None
        batch.set_state(i, init if init is not None else reset(spec, ep_seed))
        if hasattr(agent, "on_reset"):
            agent.on_reset(batch, i, rng)
    states = np.zeros((episode_length, n, 7))
    actions = np.zeros((episode_length, n), dtype=np.int64)
    rewards = np.zeros((episode_length, n))
    dones = np.zeros((episode_length, n), dtype=bool)
    lengths = np.zeros(n, dtype=np.int64)
    meta = [dict() for _ in range(n)]
    active = np.ones(n, dtype=bool)
    for t in range(episode_length):
        idx = np.flatnonzero(active)
        if len(idx) == 0:
            break
        if disturbance is not None and t == disturbance.at_step:
            for i in idx:
                st = batch.get_state(i)
                if st.carried:
                    meta[i]["disturbance"] = "skipped"
                    continue
                new = inject_disturbance(batch.specs[i], st, disturbance.seed + int(i))
                batch.set_state(i, new)
                meta[i]["disturbance"] = "applied"
                meta[i]["disturbance_shift"] = (new.object_pos[0] - st.object_pos[0], new.object_pos[1] - st.object_pos[1])
        states[t] = batch.state_vectors()
        act = np.zeros(n, dtype=np.int64)
        act[idx] = agent.act(batch, idx, rng, deterministic)
        # finished slots take a harmless step; their outputs are discarded
        r, d = batch.step(act)
        actions[t] = act
        rewards[t] = r
        dones[t] = d
        lengths[idx] += 1
        active &= ~d
    out = []
    for i, (spec, ep_seed) in enumerate(jobs):
        T = lengths[i]
        out.append(
            Trajectory(spec.env_id, int(ep_seed), states[:T, i].copy(), actions[:T, i].copy(),
                       rewards[:T, i].copy(), dones[:T, i].copy(), meta=meta[i])
        )
    return out


class RandomAgent:
    kind = "random"

    def act(self, batch, idx, rng, deterministic):
        return rng.integers(0, N_ACTIONS, size=len(idx))


class ConstantAgent:
    """Ignores observations and always emits the same action."""

    kind = "constant"

    def __init__(self, action: int = 0):
        self.action = action

    def act(self, batch, idx, rng, deterministic):
        return np.full(len(idx), self.action, dtype=np.int64)
