"""Teacher -> student distillation into the observation-based generalist.

Dataset layout (``root/``)::

    manifest.json          schema version, per-env counts and mode split
    envs.jsonl             one EnvSpec record per line
    shards/<env_id>.jsonl  one trajectory record per line

Observations are not stored: each transition is re-rendered from its state
(and ``noise_seed + t`` for noise-augmented trajectories), which reproduces
the training input exactly.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .envworld import EnvSpec, Trajectory, render_states
from .errors import ContractViolation, NumericalError, TeacherTooWeak
from .nnet import AdamState, GeneralistPolicy, adam_step, selected_log_probs
from .rollout import episode_seed, run_episodes

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1


def trajectory_to_record(t: Trajectory) -> dict:
    return {
        "env_id": t.env_id,
        "episode_seed": int(t.episode_seed),
        "mode": "clean" if t.noise_seed is None else "noisy",
        "noise_seed": None if t.noise_seed is None else int(t.noise_seed),
        "states": np.asarray(t.states).tolist(),
        "actions": [int(a) for a in t.actions],
        "rewards": [float(r) for r in t.rewards],
        "dones": [bool(d) for d in t.dones],
        "meta": t.meta,
    }


def trajectory_from_record(d: dict) -> Trajectory:
    states = np.asarray(d["states"], dtype=float).reshape(-1, 7)
    return Trajectory(
        env_id=d["env_id"],
        episode_seed=int(d["episode_seed"]),
        states=states,
        actions=np.asarray(d["actions"], dtype=np.int64),
        rewards=np.asarray(d["rewards"], dtype=float),
        dones=np.asarray(d["dones"], dtype=bool),
        noise_seed=None if d.get("noise_seed") is None else int(d["noise_seed"]),
        meta=dict(d.get("meta") or {}),
    )


class TrajectoryDataset:
    """Success-only trajectory store, grouped by environment, mirrored on disk."""

    def __init__(self, root: str | Path | None = None):
        self.root = None if root is None else Path(root)
        self.specs: dict[str, EnvSpec] = {}
        self.trajs: dict[str, list[Trajectory]] = {}
        self.shortfall: dict[str, int] = {}
        if self.root is not None:
            (self.root / "shards").mkdir(parents=True, exist_ok=True)

    # ---- mutation

    def add_spec(self, spec: EnvSpec) -> None:
        if spec.env_id in self.specs:
            return
        self.specs[spec.env_id] = spec
        self.trajs.setdefault(spec.env_id, [])
        if self.root is not None:
            with open(self.root / "envs.jsonl", "a") as fh:
                fh.write(json.dumps(spec.to_dict(), sort_keys=True) + "\n")

    def add(self, trajs: Sequence[Trajectory]) -> None:
        """Append trajectories; every one must be successful and belong to a known spec."""
        for t in trajs:
            if not t.success:
                raise ContractViolation(f"refusing to store unsuccessful trajectory on {t.env_id}")
            if t.env_id not in self.specs:
                raise ContractViolation(f"unknown env {t.env_id}; add its spec first")
        by_env: dict[str, list[Trajectory]] = {}
        for t in trajs:
            by_env.setdefault(t.env_id, []).append(t)
        for env_id, group in by_env.items():
            self.trajs[env_id].extend(group)
            if self.root is not None:
                with open(self._shard(env_id), "a") as fh:
                    for t in group:
                        fh.write(json.dumps(trajectory_to_record(t)) + "\n")
        if self.root is not None:
            self.write_manifest()

    def _shard(self, env_id: str) -> Path:
        return self.root / "shards" / f"{env_id}.jsonl"

    def manifest(self) -> dict:
        envs = {}
        for env_id in sorted(self.trajs):
            ts = self.trajs[env_id]
            envs[env_id] = {
                "trajectories": len(ts),
                "clean": sum(t.noise_seed is None for t in ts),
                "noisy": sum(t.noise_seed is not None for t in ts),
                "transitions": int(sum(len(t) for t in ts)),
            }
        return {"schema_version": SCHEMA_VERSION, "envs": envs}

    def write_manifest(self) -> None:
        with open(self.root / "manifest.json", "w") as fh:
            json.dump(self.manifest(), fh, indent=1, sort_keys=True)
            fh.write("\n")

    @classmethod
    def open(cls, root: str | Path) -> TrajectoryDataset:
        root = Path(root)
        with open(root / "manifest.json") as fh:
            manifest = json.load(fh)
        if manifest.get("schema_version") != SCHEMA_VERSION:
            raise ContractViolation(f"{root}: unsupported dataset schema {manifest.get('schema_version')}")
        ds = cls.__new__(cls)
        ds.root = root
        ds.specs, ds.trajs, ds.shortfall = {}, {}, {}
        with open(root / "envs.jsonl") as fh:
            for line in fh:
                if line.strip():
                    s = EnvSpec.from_dict(json.loads(line))
                    ds.specs[s.env_id] = s
                    ds.trajs[s.env_id] = []
        for env_id in ds.specs:
            shard = ds._shard(env_id)
            if shard.exists():
                with open(shard) as fh:
                    ds.trajs[env_id] = [trajectory_from_record(json.loads(l)) for l in fh if l.strip()]
        return ds

    # ---- queries

    @property
    def env_ids(self) -> list[str]:
        return [e for e in self.specs if self.trajs.get(e)]

    def __len__(self) -> int:
        return sum(len(v) for v in self.trajs.values())

    def observations(self, t: Trajectory) -> np.ndarray:
        return render_states(self.specs[t.env_id], np.asarray(t.states), t.step_noise_seeds())


# --------------------------------------------------------------------------- dataset generation


def _traj_noise_seed(seed: int, env_index: int, k: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(env_index), int(k), 29]).generate_state(1)[0] % (2**31))


def rollout_successes(agent, specs: Sequence[EnvSpec], target: int, attempt_cap: int, seed: int,
                      wave: int | None = None, deterministic: bool = False):
    """Roll ``agent`` on every spec until ``target`` successes or ``attempt_cap`` attempts.

    Returns ``(successes_by_env, attempts_by_env)``; success lists are in attempt order.
    """
    wave = wave or max(target, 1)
    got = {s.env_id: [] for s in specs}
    tried = {s.env_id: 0 for s in specs}
    while True:
        jobs, owners = [], []
        for i, s in enumerate(specs):
            need = target - len(got[s.env_id])
            room = attempt_cap - tried[s.env_id]
            n = min(room, wave) if need > 0 else 0
            for _ in range(n):
                jobs.append((s, episode_seed(seed, i, tried[s.env_id])))
                owners.append(s.env_id)
                tried[s.env_id] += 1
        if not jobs:
            break
        trajs = run_episodes(agent, jobs, seed + sum(tried.values()), deterministic=deterministic)
        for env_id, t in zip(owners, trajs):
            if t.success and len(got[env_id]) < target:
                got[env_id].append(t)
    return got, tried


def _generate(teacher, specs: Sequence[EnvSpec], per_env: int, seed: int):
    got, tried = rollout_successes(teacher, specs, per_env, 20 * per_env, seed)
    weak = {}
    for i, s in enumerate(specs):
        ts = got[s.env_id]
        if len(ts) < per_env:
            weak[s.env_id] = len(ts) / max(tried[s.env_id], 1)
            continue
        for k, t in enumerate(ts):
            if k >= per_env // 2:
                t.noise_seed = _traj_noise_seed(seed, i, k)
    return got, weak


def generate_distill_dataset(teacher, specs: Sequence[EnvSpec], per_env: int = 100, seed: int = 0,
                             dataset: TrajectoryDataset | None = None, allow_partial: bool = False) -> TrajectoryDataset:
    """Success-filtered teacher rollouts; half clean, half noise-augmented per env.

    A teacher that cannot fill the quota within ``20 * per_env`` attempts
    raises :class:`TeacherTooWeak`, unless ``allow_partial`` keeps whatever
    successes it produced (recorded in ``dataset.shortfall``).
    """
    ds = dataset if dataset is not None else TrajectoryDataset()
    got, weak = _generate(teacher, specs, per_env, seed)
    if not allow_partial:
        for s in specs:
            if s.env_id in weak:
                raise TeacherTooWeak(s.env_id, weak[s.env_id])
    for s in specs:
        ds.add_spec(s)
        ds.add(got[s.env_id])
        if s.env_id in weak:
            ds.shortfall[s.env_id] = per_env - len(got[s.env_id])
            log.warning("teacher filled %d/%d trajectories on %s", len(got[s.env_id]), per_env, s.env_id)
    return ds


# --------------------------------------------------------------------------- minibatching


@dataclass
class Chunk:
    index: int
    observations: np.ndarray
    actions: np.ndarray
    trajectories: list[Trajectory]


def balanced_chunks(dataset: TrajectoryDataset, chunk_trajs_per_env: int = 5, epoch_seed: int = 0,
                    subset: dict[str, list[Trajectory]] | None = None) -> Iterator[Chunk]:
    """Each chunk holds up to ``chunk_trajs_per_env`` unseen trajectories from every env."""
    pools = subset if subset is not None else {e: dataset.trajs[e] for e in dataset.env_ids}
    if not any(pools.values()):
        raise ContractViolation("dataset is empty")
    rng = np.random.default_rng(np.random.SeedSequence([int(epoch_seed), 31]))
    orders = {e: [pools[e][j] for j in rng.permutation(len(pools[e]))] for e in sorted(pools)}
    c = 0
    while True:
        picked = []
        for e in sorted(orders):
            picked.extend(orders[e][c * chunk_trajs_per_env : (c + 1) * chunk_trajs_per_env])
        if not picked:
            return
        obs = np.concatenate([dataset.observations(t) for t in picked])
        acts = np.concatenate([np.asarray(t.actions, dtype=np.int64) for t in picked])
        perm = rng.permutation(len(acts))
        yield Chunk(c, obs[perm], acts[perm], picked)
        c += 1


def balanced_minibatches(dataset: TrajectoryDataset, chunk_trajs_per_env: int = 5, minibatch_size: int = 256,
                         epoch_seed: int = 0, subset: dict[str, list[Trajectory]] | None = None
                         ) -> Iterator[tuple[int, np.ndarray, np.ndarray]]:
    """Yields ``(chunk_index, observations, actions)`` minibatches covering one epoch."""
    for chunk in balanced_chunks(dataset, chunk_trajs_per_env, epoch_seed, subset):
        for s in range(0, len(chunk.actions), minibatch_size):
            yield chunk.index, chunk.observations[s : s + minibatch_size], chunk.actions[s : s + minibatch_size]


# --------------------------------------------------------------------------- training


def nll_and_grads(policy: GeneralistPolicy, obs: np.ndarray, actions: np.ndarray):
    """Mean negative log-likelihood and its gradients ``(encoder or None, head)``."""
    actions = np.asarray(actions, dtype=np.int64)
    logits, caches = policy.forward(obs)
    lp, probs, clamped = selected_log_probs(logits, actions)
    loss = -float(lp.mean())
    if not np.isfinite(loss):
        raise NumericalError("non-finite distillation loss")
    onehot = np.zeros_like(probs)
    onehot[np.arange(len(actions)), actions] = 1.0
    upstream = np.where(clamped[:, None], 0.0, probs - onehot) / len(actions)
    g_enc, g_head = policy.backward(caches, upstream)
    return loss, g_enc, g_head


@dataclass
class DistillOptimizer:
    encoder: AdamState
    head: AdamState

    @classmethod
    def for_policy(cls, policy: GeneralistPolicy) -> DistillOptimizer:
        return cls(AdamState.zeros(policy.encoder_params.size), AdamState.zeros(policy.head_params.size))


def apply_gradients(policy: GeneralistPolicy, g_enc, g_head, lr: float, opt: DistillOptimizer) -> None:
    if g_enc is not None and not policy.freeze_encoder:
        policy.encoder_params, opt.encoder = adam_step(policy.encoder_params, g_enc, opt.encoder, lr)
    policy.head_params, opt.head = adam_step(policy.head_params, g_head, opt.head, lr)


def distill_update(policy: GeneralistPolicy, obs: np.ndarray, actions: np.ndarray, lr: float,
                   opt: DistillOptimizer | None = None) -> tuple[GeneralistPolicy, float]:
    """One optimizer step on the mean NLL. Updates ``policy`` in place and returns it."""
    actions = np.asarray(actions)
    if actions.size and (actions.min() < 0 or actions.max() >= policy.head_spec.output_dim):
        raise ContractViolation("distill_update: action out of range")
    opt = opt or DistillOptimizer.for_policy(policy)
    loss, g_enc, g_head = nll_and_grads(policy, obs, actions)
    apply_gradients(policy, g_enc, g_head, lr, opt)
    return policy, loss


@dataclass(frozen=True)
class DistillConfig:
    learning_rate: float = 1e-3
    minibatch_size: int = 256
    accumulation_steps: int = 1
    chunk_trajs_per_env: int = 5
    max_epochs: int = 40
    patience: int = 5
    min_delta: float = 1e-4
    val_fraction: float = 0.1
    per_env: int = 100
    fewshot_epochs: int = 50
    fewshot_minibatch: int = 64
    fewshot_learning_rate: float = 1e-3
    embed_dim: int = 64
    encoder_hidden: tuple[int, ...] = ()
    head_hidden: tuple[int, ...] = (64, 64)

    def __post_init__(self):
        object.__setattr__(self, "encoder_hidden", tuple(self.encoder_hidden))
        object.__setattr__(self, "head_hidden", tuple(self.head_hidden))


def split_validation(dataset: TrajectoryDataset, fraction: float, seed: int):
    """Whole-trajectory split per env: ``(train, val)`` dicts of env_id -> trajectories."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 37]))
    train, val = {}, {}
    for e in dataset.env_ids:
        ts = dataset.trajs[e]
        n_val = int(round(fraction * len(ts))) if len(ts) > 1 else 0
        perm = rng.permutation(len(ts))
        val[e] = [ts[j] for j in sorted(perm[:n_val])]
        train[e] = [ts[j] for j in sorted(perm[n_val:])]
    return train, val


def mean_log_likelihood(policy: GeneralistPolicy, obs: np.ndarray, actions: np.ndarray) -> float:
    if len(actions) == 0:
        return 0.0
    lp, _, _ = selected_log_probs(policy.logits(obs), np.asarray(actions, dtype=np.int64))
    return float(lp.mean())


@dataclass
class GeneralistTrainResult:
    policy: GeneralistPolicy
    history: list[dict] = field(default_factory=list)
    init_val_ll: float = 0.0
    best_val_ll: float = 0.0
    epochs: int = 0


def train_generalist(policy: GeneralistPolicy, dataset: TrajectoryDataset, cfg: DistillConfig = DistillConfig(),
                     seed: int = 0) -> GeneralistTrainResult:
    """Supervised fitting of the whole (cumulative) dataset with validation early stopping."""
    if not dataset.env_ids:
        raise ContractViolation("train_generalist needs a non-empty dataset")
    policy = policy.copy()
    train, val = split_validation(dataset, cfg.val_fraction, seed)
    val_ts = [t for e in sorted(val) for t in val[e]]
    if val_ts:
        val_obs = np.concatenate([dataset.observations(t) for t in val_ts])
        val_act = np.concatenate([t.actions for t in val_ts])
    else:
        val_obs, val_act = np.zeros((0, 1)), np.zeros(0, dtype=np.int64)
    opt = DistillOptimizer.for_policy(policy)
    init_ll = mean_log_likelihood(policy, val_obs, val_act) if val_ts else 0.0
    best_ll, best, stale = init_ll, policy.copy(), 0
    history = []
    epoch = 0
    for epoch in range(1, cfg.max_epochs + 1):
        losses = []
        acc_enc = acc_head = None
        acc_n = 0
        last_chunk = None
        for chunk_idx, obs, acts in balanced_minibatches(dataset, cfg.chunk_trajs_per_env, cfg.minibatch_size,
                                                         epoch_seed=seed * 1000 + epoch, subset=train):
            if last_chunk is not None and chunk_idx != last_chunk and acc_n:
                apply_gradients(policy, acc_enc, acc_head, cfg.learning_rate, opt)
                acc_enc = acc_head = None
                acc_n = 0
            last_chunk = chunk_idx
            loss, g_enc, g_head = nll_and_grads(policy, obs, acts)
            losses.append(loss)
            w = 1.0 / cfg.accumulation_steps
            acc_head = g_head * w if acc_head is None else acc_head + g_head * w
            if g_enc is not None:
                acc_enc = g_enc * w if acc_enc is None else acc_enc + g_enc * w
            acc_n += 1
            if acc_n == cfg.accumulation_steps:
                apply_gradients(policy, acc_enc, acc_head, cfg.learning_rate, opt)
                acc_enc = acc_head = None
                acc_n = 0
        if acc_n:
            apply_gradients(policy, acc_enc, acc_head, cfg.learning_rate, opt)
        ll = mean_log_likelihood(policy, val_obs, val_act) if val_ts else -float(np.mean(losses))
        history.append({"epoch": epoch, "train_nll": float(np.mean(losses)), "val_ll": ll})
        log.debug("distill epoch %d train nll %.4f val ll %.4f", epoch, np.mean(losses), ll)
        if ll > best_ll + cfg.min_delta:
            best_ll, best, stale = ll, policy.copy(), 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    return GeneralistTrainResult(best, history, init_ll, best_ll, epoch)


def demo_observations(spec: EnvSpec, demos: Sequence[Trajectory]) -> tuple[np.ndarray, np.ndarray]:
    obs = np.concatenate([render_states(spec, np.asarray(d.states), d.step_noise_seeds()) for d in demos])
    acts = np.concatenate([np.asarray(d.actions, dtype=np.int64) for d in demos])
    return obs, acts


def finetune_fewshot(policy: GeneralistPolicy, demos: Sequence[Trajectory], spec: EnvSpec,
                     cfg: DistillConfig = DistillConfig(), seed: int = 0) -> GeneralistPolicy:
    """Head-only supervised fine-tuning on a handful of target-env demonstrations."""
    if not demos:
        raise ContractViolation("finetune_fewshot needs at least one demonstration")
    if any(d.env_id != spec.env_id for d in demos):
        raise ContractViolation("all demonstrations must come from the target spec")
    tuned = policy.copy()
    tuned.freeze_encoder = True
    obs, acts = demo_observations(spec, demos)
    opt = DistillOptimizer.for_policy(tuned)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 41]))
    for _ in range(cfg.fewshot_epochs):
        perm = rng.permutation(len(acts))
        for s in range(0, len(perm), cfg.fewshot_minibatch):
            sel = perm[s : s + cfg.fewshot_minibatch]
            distill_update(tuned, obs[sel], acts[sel], cfg.fewshot_learning_rate, opt)
    tuned.freeze_encoder = policy.freeze_encoder
    return tuned
