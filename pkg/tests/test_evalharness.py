from __future__ import annotations

import csv
import io
import math

import numpy as np
import pytest

from flywheel_rl.envworld import generate_env_family
from flywheel_rl.errors import ContractViolation
from flywheel_rl.evalharness import (
    REPORT_COLUMNS, SCALING_COLUMNS, EvalReport, evaluate_disturbance, evaluate_multi_object,
    evaluate_success_rate, scaling_report,
)
from flywheel_rl.expert import ExpertAgent
from flywheel_rl.nnet import GeneralistPolicy
from flywheel_rl.rollout import ConstantAgent, Disturbance, RandomAgent, run_episodes


def test_expert_rate_is_one(family):
    rep = evaluate_success_rate(ExpertAgent(), family, 5, seed=0)
    assert all(v == 1.0 for v in rep.per_env.values()) and rep.mean == 1.0


def test_random_baseline_is_low():
    specs = generate_env_family(20, 1)
    rep = evaluate_success_rate(RandomAgent(), specs, 5, seed=0, deterministic_actions=False)
    assert rep.total_rollouts == 100
    assert rep.mean <= 0.05


def test_report_is_deterministic_and_exact(family):
    pol = GeneralistPolicy.create(embed_dim=8, head_hidden=(8,), seed=0)
    before = (pol.encoder_params.tobytes(), pol.head_params.tobytes())
    a = evaluate_success_rate(pol, family[:3], 4, seed=1, deterministic_actions=False)
    b = evaluate_success_rate(pol, family[:3], 4, seed=1, deterministic_actions=False)
    assert a.successes == b.successes
    assert (pol.encoder_params.tobytes(), pol.head_params.tobytes()) == before
    with pytest.raises(ContractViolation):
        evaluate_success_rate(pol, family[:1], 0)


def test_report_csv_and_stderr():
    rep = EvalReport("p", "standard", 4, {"a": 1, "b": 3})
    assert rep.mean == 0.5
    assert rep.stderr == pytest.approx(math.sqrt(0.25 / 8))
    rows = list(csv.reader(io.StringIO(rep.to_csv())))
    assert rows[0] == REPORT_COLUMNS
    assert rows[1] == ["p", "standard", "a", "4", "1", "0.25"]
    assert rows[-1][2] == "__mean__" and float(rows[-1][5]) == 0.5


def test_report_csv_numpy_counts_stay_plain():
    # numpy scalars must not leak their repr ("np.float64(...)") into the file
    rep = EvalReport("p", "standard", 4, {"a": np.int64(1), "b": np.int64(3)})
    rows = list(csv.reader(io.StringIO(rep.to_csv())))
    assert [r[5] for r in rows[1:]] == ["0.25", "0.75", "0.5"]


def test_disturbance_moves_resting_object(family):
    spec = family[0]
    trajs = run_episodes(ConstantAgent(1), [(spec, 0)], seed=0, disturbance=Disturbance(5, 3))
    t = trajs[0]
    assert t.meta["disturbance"] == "applied"
    assert not np.array_equal(t.states[5, 2:4], t.states[4, 2:4])
    np.testing.assert_array_equal(t.states[5:, 2:4], np.repeat(t.states[5:6, 2:4], len(t) - 5, axis=0))


def test_expert_with_replanning_survives_disturbance(family):
    rep = evaluate_disturbance(ExpertAgent(), family[0], 5, 10, seed=0, specs=family)
    assert rep.mean == 1.0
    assert rep.notes["applied"] + rep.notes["skipped"] == len(family) * 5
    assert rep.notes["applied"] > 0


def test_constant_policy_fails_under_disturbance(family):
    rep = evaluate_disturbance(ConstantAgent(0), family[0], 5, 10, seed=0, specs=family)
    assert rep.mean == 0.0
    with pytest.raises(ContractViolation):
        evaluate_disturbance(ConstantAgent(0), family[0], 1, 60)


def test_multi_object_expert(family):
    res = evaluate_multi_object(ExpertAgent(), family[0], 3, 6, seed=0)
    assert res.placed == [True, True, True]
    assert res.episodes_used == [1, 2, 3]
    one = evaluate_multi_object(ExpertAgent(), family[1], 1, 1, seed=0)
    assert one.placed == [True] and one.episodes_used == [1]


def test_multi_object_counts_are_monotone(family):
    pol = GeneralistPolicy.create(embed_dim=8, head_hidden=(8,), seed=0)
    res = evaluate_multi_object(pol, family[2], 3, 6, seed=0, deterministic_actions=False)
    used = [u for u in res.episodes_used if u is not None]
    assert used == sorted(used)
    assert res.placed == sorted(res.placed, reverse=True)


def test_scaling_report(family):
    pol = GeneralistPolicy.create(embed_dim=8, head_hidden=(8,), seed=0)
    with pytest.raises(ContractViolation):
        scaling_report([(4, pol)], family[:2], 2)
    text = scaling_report([(8, pol), (4, pol)], family[:2], 2, seed=0)
    rows = list(csv.reader(io.StringIO(text)))
    assert rows[0] == SCALING_COLUMNS
    assert [r[0] for r in rows[1:]] == ["4", "8"]
    assert rows[1][1:] == rows[2][1:]
    assert all(float(v) >= 0 for r in rows[1:] for v in r[1:3])
