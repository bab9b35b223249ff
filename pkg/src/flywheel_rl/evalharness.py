"""Success-rate evaluation, robustness probes and the scaling report."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .envworld import EPISODE_LENGTH, GRASP_RADIUS, EnvSpec, WorldState, HOME, reset, valid_object_position
from .errors import ContractViolation
from .rollout import Disturbance, episode_seed, run_episodes

REPORT_COLUMNS = ["policy_id", "mode", "env_id", "rollouts", "successes", "success_rate"]


@dataclass
class EvalReport:
    policy_id: str
    mode: str  # standard | disturbance | multi_object
    rollouts_per_env: int
    successes: dict[str, int] = field(default_factory=dict)
    notes: dict = field(default_factory=dict)

    @property
    def per_env(self) -> dict[str, float]:
        return {k: v / self.rollouts_per_env for k, v in self.successes.items()}

    @property
    def total_rollouts(self) -> int:
        return self.rollouts_per_env * len(self.successes)

    @property
    def mean(self) -> float:
        n = self.total_rollouts
        return sum(self.successes.values()) / n if n else 0.0

    @property
    def stderr(self) -> float:
        n = self.total_rollouts
        p = self.mean
        return math.sqrt(p * (1 - p) / n) if n else 0.0

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for env_id, s in self.successes.items():
            w.writerow([self.policy_id, self.mode, env_id, self.rollouts_per_env, s, repr(float(s / self.rollouts_per_env))])
        w.writerow([self.policy_id, self.mode, "__mean__", self.total_rollouts, sum(self.successes.values()),
                    repr(float(self.mean))])
        return buf.getvalue()


def _policy_id(policy) -> str:
    return getattr(policy, "policy_id", None) or getattr(policy, "kind", type(policy).__name__)


def evaluate_success_rate(policy, specs: Sequence[EnvSpec], rollouts_per_env: int, seed: int = 0,
                          deterministic_actions: bool = True) -> EvalReport:
    if rollouts_per_env < 1:
        raise ContractViolation("rollouts_per_env must be >= 1")
    jobs = [(s, episode_seed(seed, i, k)) for i, s in enumerate(specs) for k in range(rollouts_per_env)]
    trajs = run_episodes(policy, jobs, seed, deterministic=deterministic_actions)
    rep = EvalReport(_policy_id(policy), "standard", rollouts_per_env)
    for i, s in enumerate(specs):
        chunk = trajs[i * rollouts_per_env : (i + 1) * rollouts_per_env]
        rep.successes[s.env_id] = rep.successes.get(s.env_id, 0) + sum(t.success for t in chunk)
    return rep


def evaluate_disturbance(policy, spec: EnvSpec, rollouts: int, disturbance_step: int = 10, seed: int = 0,
                         deterministic_actions: bool = True, specs: Sequence[EnvSpec] | None = None) -> EvalReport:
    """Standard rollouts with the object pushed once at ``disturbance_step``.

    Pass ``specs`` to evaluate several environments in one report (``spec`` is
    then ignored).
    """
    if not 0 <= disturbance_step < EPISODE_LENGTH:
        raise ContractViolation("disturbance_step must be < episode length")
    specs = [spec] if specs is None else list(specs)
    jobs = [(s, episode_seed(seed, i, k)) for i, s in enumerate(specs) for k in range(rollouts)]
    trajs = run_episodes(policy, jobs, seed, deterministic=deterministic_actions,
                         disturbance=Disturbance(disturbance_step, seed + 1))
    rep = EvalReport(_policy_id(policy), "disturbance", rollouts)
    applied = skipped = 0
    for i, s in enumerate(specs):
        chunk = trajs[i * rollouts : (i + 1) * rollouts]
        rep.successes[s.env_id] = sum(t.success for t in chunk)
        applied += sum(t.meta.get("disturbance") == "applied" for t in chunk)
        skipped += sum(t.meta.get("disturbance") == "skipped" for t in chunk)
    rep.notes.update(applied=applied, skipped=skipped)
    return rep


@dataclass
class MultiObjectResult:
    n_objects: int
    episodes_budget: int
    placed: list[bool]  # index k-1: was the k-th object placed
    episodes_used: list[int | None]  # episodes consumed when the k-th object got placed
    object_starts: list[tuple[float, float]]


def _object_starts(spec: EnvSpec, n: int, rng: np.random.Generator) -> list[tuple[float, float]]:
    starts: list[tuple[float, float]] = []
    for _ in range(10_000):
        if len(starts) == n:
            break
        p = tuple(float(v) for v in np.asarray(spec.object_nominal) + rng.uniform(-spec.object_jitter, spec.object_jitter, 2))
        if valid_object_position(spec, p) and all(math.dist(p, q) > 2 * GRASP_RADIUS for q in starts):
            starts.append(p)
    if len(starts) < n:
        raise ContractViolation(f"{spec.env_id}: cannot place {n} non-overlapping objects")
    return starts


def evaluate_multi_object(policy, spec: EnvSpec, n_objects: int = 3, episodes: int = 6, seed: int = 0,
                          deterministic_actions: bool = True) -> MultiObjectResult:
    """Place objects one per episode, always targeting the nearest unplaced one.

    Every episode counts against the budget, successful or not.
    """
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), spec.layout_seed, 5]))
    starts = _object_starts(spec, n_objects, rng)
    unplaced = list(range(n_objects))
    placed_at: list[int] = []
    for ep in range(episodes):
        if not unplaced:
            break
        target = min(unplaced, key=lambda j: (math.dist(HOME, starts[j]), j))
        init = WorldState(ee_pos=HOME, object_pos=starts[target])
        traj = run_episodes(policy, [(spec, episode_seed(seed, 0, ep))], seed + ep,
                            deterministic=deterministic_actions, initial_states=[init])[0]
        if traj.success:
            unplaced.remove(target)
            placed_at.append(ep + 1)
    placed = [k < len(placed_at) for k in range(n_objects)]
    used = [placed_at[k] if k < len(placed_at) else None for k in range(n_objects)]
    return MultiObjectResult(n_objects, episodes, placed, used, starts)


SCALING_COLUMNS = ["env_count", "mean_success", "stderr", "rollouts"]


def scaling_report(checkpoints: Sequence[tuple[int, object]], heldout: Sequence[EnvSpec], rollouts: int,
                   seed: int = 0, deterministic_actions: bool = True) -> str:
    """CSV with one row per checkpoint, sorted by training-environment count."""
    if len(checkpoints) < 2:
        raise ContractViolation("scaling_report needs at least two checkpoints")
    rows = []
    for count, policy in sorted(checkpoints, key=lambda c: c[0]):
        rep = evaluate_success_rate(policy, heldout, rollouts, seed=seed, deterministic_actions=deterministic_actions)
        rows.append((count, rep.mean, rep.stderr, rep.total_rollouts))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SCALING_COLUMNS)
    for count, mean, se, n in rows:
        w.writerow([count, repr(float(mean)), repr(float(se)), n])
    return buf.getvalue()
