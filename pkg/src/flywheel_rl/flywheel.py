"""Batched amortized data collection and scanned-deployment fine-tuning.

Each batch of ``K`` environments is first attempted with the current
generalist; its successes bootstrap a state-based teacher.  Only the
environments that teacher cannot solve fall back to expert (human)
demonstrations, so the human cost per batch shrinks as the generalist
improves.  The ledger records that cost next to the compute proxies.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import expert
from .distill import (
    DistillConfig,
    TrajectoryDataset,
    generate_distill_dataset,
    rollout_successes,
    train_generalist,
)
from .envworld import EnvSpec, Trajectory
from .errors import ContractViolation, TeacherTooWeak, ZeroShotTooWeak
from .evalharness import evaluate_success_rate
from .expert import ExpertConfig, collect_demonstrations
from .nnet import GeneralistPolicy, StatePolicy
from .ppo_bc import PpoBcConfig, config_dict, train_state_policy

log = logging.getLogger(__name__)

LEDGER_SCHEMA_VERSION = 1
LEDGER_COLUMNS = [
    "batch",
    "env_ids",
    "human_demo_count",
    "model_demo_count",
    "model_demo_attempts",
    "rl_env_steps",
    "failed_envs",
    "heldout_success",
]
ENV_COLUMNS = ["batch", "env_id", "model_successes", "model_attempts", "s1_success", "in_failed", "teacher",
               "teacher_shortfall"]


@dataclass(frozen=True)
class FlywheelConfig:
    batch_size_K: int = 5
    success_threshold_r: float = 0.5
    model_demo_target: int = 10
    model_demo_attempt_cap: int = 100
    demos_per_env_human: int = 10
    rl_budget: int = 500_000
    eval_rollouts_per_env: int = 20
    heldout_rollouts_per_env: int = 10
    scan_max_rounds: int = 4
    ppo: PpoBcConfig = field(default_factory=PpoBcConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    expert: ExpertConfig = field(default_factory=ExpertConfig)

    def __post_init__(self):
        if self.batch_size_K < 1:
            raise ContractViolation("batch_size_K must be >= 1")
        if not 0.0 <= self.success_threshold_r <= 1.0:
            raise ContractViolation("success_threshold_r must be in [0, 1]")
        if self.eval_rollouts_per_env < 1:
            raise ContractViolation("eval_rollouts_per_env must be >= 1")
        if self.model_demo_target < 0 or self.model_demo_attempt_cap < 0 or self.demos_per_env_human < 1:
            raise ContractViolation("demo counts must be non-negative (human demos >= 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ppo"] = config_dict(self.ppo)
        d["distill"]["encoder_hidden"] = list(self.distill.encoder_hidden)
        d["distill"]["head_hidden"] = list(self.distill.head_hidden)
        return d


@dataclass
class BatchLedger:
    batch: int
    env_ids: list[str]
    human_demo_count: int
    model_demo_count: int
    model_demo_attempts: int
    rl_env_steps: int
    s1_success: dict[str, float]
    failed_envs: list[str]
    heldout_success: float | None = None
    model_successes: dict[str, int] = field(default_factory=dict)
    model_attempts: dict[str, int] = field(default_factory=dict)
    teacher_shortfall: dict[str, int] = field(default_factory=dict)

    def row(self) -> list:
        return [
            self.batch,
            " ".join(self.env_ids),
            self.human_demo_count,
            self.model_demo_count,
            self.model_demo_attempts,
            self.rl_env_steps,
            " ".join(self.failed_envs),
            "" if self.heldout_success is None else repr(float(self.heldout_success)),
        ]

    def env_rows(self) -> list[list]:
        failed = set(self.failed_envs)
        return [
            [self.batch, e, self.model_successes.get(e, 0), self.model_attempts.get(e, 0),
             "" if e not in self.s1_success else repr(float(self.s1_success[e])),
             int(e in failed), "s2" if e in failed else "s1", self.teacher_shortfall.get(e, 0)]
            for e in self.env_ids
        ]


def ledger_csv(rows: Sequence[BatchLedger]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LEDGER_COLUMNS)
    for r in rows:
        w.writerow(r.row())
    return buf.getvalue()


def env_ledger_csv(rows: Sequence[BatchLedger]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ENV_COLUMNS)
    for r in rows:
        w.writerows(r.env_rows())
    return buf.getvalue()


def filter_successful_rollouts(trajectories: Sequence[Trajectory]) -> list[Trajectory]:
    return [t for t in trajectories if t.success]


def failed_environments(policy, specs: Sequence[EnvSpec], r: float, eval_rollouts: int, seed: int = 0) -> set[str]:
    """Ids of specs whose sampled-action success rate is strictly below ``r``."""
    if eval_rollouts < 1:
        raise ContractViolation("eval_rollouts must be >= 1")
    rep = evaluate_success_rate(policy, specs, eval_rollouts, seed=seed, deterministic_actions=False)
    return {e for e, rate in rep.per_env.items() if rate < r}


def _seed(seed: int, *tags: int) -> int:
    return int(np.random.SeedSequence([int(seed), *map(int, tags)]).generate_state(1)[0] % (2**31))


def _human_demos(specs: Sequence[EnvSpec], cfg: FlywheelConfig, seed: int) -> list[Trajectory]:
    return [d for s in specs for d in collect_demonstrations(s, cfg.demos_per_env_human, seed=_seed(seed, s.layout_seed),
                                                             cfg=cfg.expert)]


def run_batch(pi_G: GeneralistPolicy | None, specs_batch: Sequence[EnvSpec], expert_cfg: ExpertConfig,
              cfg: FlywheelConfig, cumulative_dataset: TrajectoryDataset, seed: int, batch_index: int = 0,
              heldout: Sequence[EnvSpec] | None = None) -> tuple[GeneralistPolicy, BatchLedger]:
    """One batch of amortized collection; ``pi_G=None`` means no generalist yet."""
    if len(specs_batch) != cfg.batch_size_K:
        raise ContractViolation(f"batch has {len(specs_batch)} specs, expected K={cfg.batch_size_K}")
    cfg = FlywheelConfig(**{**cfg.__dict__, "expert": expert_cfg})
    by_id = {s.env_id: s for s in specs_batch}
    served0 = expert.demos_served()
    rl_steps = 0

    # (1) generalist attempts
    if pi_G is not None and cfg.model_demo_target > 0:
        got, tried = rollout_successes(pi_G, specs_batch, cfg.model_demo_target, cfg.model_demo_attempt_cap,
                                       _seed(seed, 1))
    else:
        got = {s.env_id: [] for s in specs_batch}
        tried = {s.env_id: 0 for s in specs_batch}
    model_demos = [t for s in specs_batch for t in got[s.env_id]]

    # (2)-(3) bootstrapped teacher and the failure set
    s1: StatePolicy | None = None
    s1_success: dict[str, float] = {}
    if model_demos:
        res = train_state_policy(specs_batch, model_demos, cfg.ppo, budget=cfg.rl_budget, seed=_seed(seed, 2))
        s1, rl_steps = res.policy, rl_steps + res.env_steps
        rep = evaluate_success_rate(s1, specs_batch, cfg.eval_rollouts_per_env, seed=_seed(seed, 3),
                                    deterministic_actions=False)
        s1_success = rep.per_env
        failed = {e for e, rate in s1_success.items() if rate < cfg.success_threshold_r}
    else:
        # nothing to bootstrap from: every env needs the human
        failed = set(by_id)
    log.info("batch %d: model demos %d/%d attempts, failed %s", batch_index, len(model_demos),
             sum(tried.values()), sorted(failed))

    # (4)-(5) human fallback and distillation data
    new_data = TrajectoryDataset()
    passed = [s for s in specs_batch if s.env_id not in failed]
    for s in passed:
        try:
            generate_distill_dataset(s1, [s], cfg.distill.per_env, seed=_seed(seed, 5, s.layout_seed),
                                     dataset=new_data)
        except TeacherTooWeak as exc:
            log.warning("batch %d: %s too weak for distillation (%.3f), moving to human fallback",
                        batch_index, exc.env_id, exc.success_rate)
            failed.add(s.env_id)
    failed_specs = [s for s in specs_batch if s.env_id in failed]
    if failed_specs:
        human = _human_demos(failed_specs, cfg, _seed(seed, 4))
        res = train_state_policy(failed_specs, human, cfg.ppo, budget=cfg.rl_budget, seed=_seed(seed, 6))
        rl_steps += res.env_steps
        generate_distill_dataset(res.policy, failed_specs, cfg.distill.per_env, seed=_seed(seed, 7), dataset=new_data,
                                 allow_partial=True)
        # a teacher that missed its quota is topped up with the human demos themselves
        for d in human:
            if d.env_id in new_data.shortfall:
                new_data.add([d])

    human_count = expert.demos_served() - served0
    if human_count != len(failed_specs) * cfg.demos_per_env_human:
        raise ContractViolation(f"human demo accounting mismatch: {human_count} served")

    # (6) cumulative retraining
    for s in specs_batch:
        cumulative_dataset.add_spec(s)
        cumulative_dataset.add(new_data.trajs[s.env_id])
    if cumulative_dataset.root is not None:
        cumulative_dataset.write_manifest()
    dc = cfg.distill
    init = pi_G if pi_G is not None else GeneralistPolicy.create(dc.embed_dim, dc.encoder_hidden, dc.head_hidden,
                                                                  seed=_seed(seed, 8))
    init = init.copy()
    init.freeze_encoder = False
    pi_G = train_generalist(init, cumulative_dataset, dc, seed=_seed(seed, 9)).policy

    heldout_rate = None
    if heldout:
        heldout_rate = evaluate_success_rate(pi_G, heldout, cfg.heldout_rollouts_per_env, seed=_seed(seed, 10),
                                            deterministic_actions=False).mean
    row = BatchLedger(
        batch=batch_index,
        env_ids=[s.env_id for s in specs_batch],
        human_demo_count=human_count,
        model_demo_count=len(model_demos),
        model_demo_attempts=int(sum(tried.values())),
        rl_env_steps=int(rl_steps),
        s1_success=s1_success,
        failed_envs=[s.env_id for s in failed_specs],
        heldout_success=heldout_rate,
        model_successes={e: len(v) for e, v in got.items()},
        model_attempts=dict(tried),
        teacher_shortfall=dict(new_data.shortfall),
    )
    return pi_G, row


def run_flywheel(family: Sequence[EnvSpec], cfg: FlywheelConfig = FlywheelConfig(), seed: int = 0,
                 heldout: Sequence[EnvSpec] | None = None, dataset: TrajectoryDataset | None = None,
                 on_batch=None) -> tuple[GeneralistPolicy, list[BatchLedger]]:
    """Run consecutive batches of K over ``family``; a trailing partial batch is dropped."""
    K = cfg.batch_size_K
    if len(family) < K:
        raise ContractViolation(f"family of {len(family)} is smaller than K={K}")
    if len(family) % K:
        log.warning("dropping %d trailing envs that do not fill a batch", len(family) % K)
    dataset = dataset if dataset is not None else TrajectoryDataset()
    pi_G: GeneralistPolicy | None = None
    rows: list[BatchLedger] = []
    for b in range(len(family) // K):
        pi_G, row = run_batch(pi_G, family[b * K : (b + 1) * K], cfg.expert, cfg, dataset, _seed(seed, 100, b), b,
                              heldout)
        rows.append(row)
        if on_batch is not None:
            on_batch(pi_G, row)
    return pi_G, rows


@dataclass
class ScanResult:
    policy: GeneralistPolicy
    collected: int
    rounds: int
    attempts: int
    history: list[dict] = field(default_factory=list)


def scanned_finetune(pi_G: GeneralistPolicy, test_spec: EnvSpec, cfg: FlywheelConfig = FlywheelConfig(),
                     seed: int = 0, training_ids: Sequence[str] = ()) -> ScanResult:
    """Adapt ``pi_G`` to one scanned environment from its own successes only.

    Successes accumulate across rounds until more than ``model_demo_target``
    are held; each round trains a state teacher from them and distils its
    rollouts into the head with the encoder frozen.  No expert demos are used.
    """
    if test_spec.env_id in set(training_ids):
        raise ContractViolation(f"{test_spec.env_id} is part of the training family")
    served0 = expert.demos_served()
    enc0 = pi_G.encoder_params.copy()
    policy = pi_G.copy()
    policy.freeze_encoder = True
    collected: list[Trajectory] = []
    history = []
    attempts = 0
    rnd = 0
    while len(collected) <= cfg.model_demo_target:
        if rnd >= cfg.scan_max_rounds:
            log.warning("scan stopped after %d rounds with %d successes", rnd, len(collected))
            break
        got, tried = rollout_successes(policy, [test_spec], cfg.model_demo_target, cfg.model_demo_attempt_cap,
                                       _seed(seed, 11, rnd))
        attempts += tried[test_spec.env_id]
        collected.extend(filter_successful_rollouts(got[test_spec.env_id]))
        if not collected:
            raise ZeroShotTooWeak(f"{test_spec.env_id}: no success in {attempts} generalist attempts")
        res = train_state_policy([test_spec], collected, cfg.ppo, budget=cfg.rl_budget, seed=_seed(seed, 12, rnd))
        data = generate_distill_dataset(res.policy, [test_spec], cfg.distill.per_env, seed=_seed(seed, 13, rnd),
                                        allow_partial=True)
        if not data.env_ids:
            log.warning("scan round %d: teacher produced no successes", rnd)
            rnd += 1
            continue
        policy = train_generalist(policy, data, cfg.distill, seed=_seed(seed, 14, rnd)).policy
        history.append({"round": rnd, "collected": len(collected), "attempts": tried[test_spec.env_id],
                        "teacher_success": res.best_success})
        rnd += 1
    if expert.demos_served() != served0:
        raise ContractViolation("scanned fine-tuning consumed expert demonstrations")
    if not np.array_equal(policy.encoder_params, enc0):
        raise ContractViolation("encoder changed during scanned fine-tuning")
    policy.freeze_encoder = pi_G.freeze_encoder
    return ScanResult(policy, len(collected), rnd, attempts, history)


def ledger_to_json(rows: Sequence[BatchLedger]) -> str:
    return json.dumps([asdict(r) for r in rows], sort_keys=True)
