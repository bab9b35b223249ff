from __future__ import annotations

import math
from collections import deque

import numpy as np
import pytest
from hypothesis import given, strategies as st

from flywheel_rl.envworld import (
    CELL, GRID, GRASP, HOME, MOVE_NX, MOVE_NY, MOVE_PX, MOVE_PY, N_ACTIONS, OBS_EXTENT, RELEASE,
    EnvSpec, ObsGrid, WorldState, check_feasible, generate_env_family, inject_disturbance,
    is_success, load_specs, occupancy, point_in_obstacle, render_observation, reset, save_specs, step,
)
from flywheel_rl.errors import ContractViolation


def _bfs_oracle(occ, start, goal):
    """Plain deque BFS, written independently of the kernel."""
    seen = {start}
    q = deque([start])
    while q:
        r, c = q.popleft()
        if (r, c) == goal:
            return True
        for dr, dc in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            nr, nc = r + dr, c + dc
            if 0 <= nr < GRID and 0 <= nc < GRID and not occ[nr][nc] and (nr, nc) not in seen:
                seen.add((nr, nc))
                q.append((nr, nc))
    return False


def _cell(p):
    return min(GRID - 1, int(p[1] * GRID)), min(GRID - 1, int(p[0] * GRID))


def test_empty_family():
    assert generate_env_family(0, 3) == []


def test_family_is_deterministic():
    assert generate_env_family(5, 7) == generate_env_family(5, 7)


def test_family_paths_exist_by_bfs_oracle():
    for s in generate_env_family(50, 1):
        occ = occupancy(s.obstacles).tolist()
        home = _cell(HOME)
        assert _bfs_oracle(occ, home, _cell(s.object_nominal)), s.env_id
        assert _bfs_oracle(occ, _cell(s.object_nominal), _cell(s.goal_site)), s.env_id
        assert check_feasible(s)


def test_spec_jsonl_round_trip(tmp_path, family):
    p = tmp_path / "specs.jsonl"
    save_specs(family, p)
    assert load_specs(p) == family


def test_reset_deterministic_and_in_range(family):
    for s in family:
        for seed in range(5):
            a, b = reset(s, seed), reset(s, seed)
            assert a == b
            assert not a.carried and a.gripper_open and a.step_count == 0
            assert a.ee_pos == HOME
            dx = abs(a.object_pos[0] - s.object_nominal[0])
            dy = abs(a.object_pos[1] - s.object_nominal[1])
            assert dx <= 0.1 + 1e-12 and dy <= 0.1 + 1e-12
            assert not point_in_obstacle(a.object_pos, s.obstacles)


def test_step_moves_by_step_size(trivial):
    st0 = WorldState((0.5, 0.5), (0.1, 0.1))
    nxt, r, done = step(trivial, st0, MOVE_PX)
    assert nxt.ee_pos == pytest.approx((0.53, 0.5), abs=1e-12)
    assert nxt.step_count == 1 and r == 0.0 and not done
    assert step(trivial, st0, MOVE_NY)[0].ee_pos == pytest.approx((0.5, 0.47), abs=1e-12)


def test_step_clamps_at_bounds(trivial):
    nxt, _, _ = step(trivial, WorldState((0.99, 0.5), (0.1, 0.1)), MOVE_PX)
    assert nxt.ee_pos[0] == pytest.approx(1.0)


def test_step_clamps_at_obstacle_face():
    spec = EnvSpec("face", 0, ((0.5, 0.4, 0.6, 0.6),), (0.9, 0.9), (0.1, 0.1))
    nxt, _, _ = step(spec, WorldState((0.48, 0.5), (0.1, 0.1)), MOVE_PX)
    assert nxt.ee_pos[0] == pytest.approx(0.5)
    assert not point_in_obstacle(nxt.ee_pos, spec.obstacles)


def test_grasp_and_release(trivial):
    g = trivial.goal_site
    s0 = WorldState(g, (g[0] + 0.02, g[1]))
    s1, r1, _ = step(trivial, s0, GRASP)
    assert s1.carried and s1.object_pos == s1.ee_pos and r1 == 0.0
    s2, r2, d2 = step(trivial, s1, RELEASE)
    assert r2 == 1.0 and d2
    assert is_success(trivial, s2) == (r2 == 1.0)


def test_grasp_out_of_radius_does_nothing(trivial):
    s1, _, _ = step(trivial, WorldState((0.5, 0.5), (0.5, 0.55)), GRASP)
    assert not s1.carried


def test_step_rejects_bad_action(trivial):
    with pytest.raises(ContractViolation):
        step(trivial, WorldState((0.5, 0.5), (0.1, 0.1)), N_ACTIONS)
    with pytest.raises(ContractViolation):
        step(trivial, WorldState((0.5, 0.5), (0.1, 0.1), step_count=60), 0)


def test_episode_ends_at_length(trivial):
    s = WorldState((0.5, 0.5), (0.1, 0.1), step_count=59)
    assert step(trivial, s, MOVE_PX)[2]


def test_success_predicate(trivial):
    gx, gy = trivial.goal_site
    assert is_success(trivial, WorldState((0, 0), (gx, gy)))
    assert is_success(trivial, WorldState((0, 0), (gx + 0.079, gy)))
    assert not is_success(trivial, WorldState((0, 0), (gx + 0.081, gy)))
    assert not is_success(trivial, WorldState((gx, gy), (gx, gy), carried=True, gripper_open=False))


def test_render_deterministic_and_bounded(family):
    s = family[0]
    st0 = reset(s, 0)
    a, b = render_observation(s, st0), render_observation(s, st0)
    np.testing.assert_array_equal(a.flat(), b.flat())
    noisy = render_observation(s, st0, noise_seed=5)
    assert noisy.grid.min() >= 0.0 and noisy.grid.max() <= 1.0
    np.testing.assert_array_equal(noisy.flat(), render_observation(s, st0, noise_seed=5).flat())
    assert not np.array_equal(noisy.flat(), a.flat())
    assert ObsGrid.from_flat(a.flat()).grid.shape == (3, GRID, GRID)


def test_render_marks_every_overlapped_cell(family):
    cell = OBS_EXTENT / GRID
    for s in family:
        st0 = reset(s, 1)
        grid = render_observation(s, st0).grid[0]
        ox, oy = st0.ee_pos[0] - OBS_EXTENT / 2, st0.ee_pos[1] - OBS_EXTENT / 2
        for x0, y0, x1, y1 in s.obstacles:
            for r in range(GRID):
                for c in range(GRID):
                    cx0, cy0 = ox + c * cell, oy + r * cell
                    if min(cx0 + cell, x1) > max(cx0, x0) and min(cy0 + cell, y1) > max(cy0, y0):
                        assert grid[r, c] > 0


def test_render_object_mass_and_robot_state(trivial):
    st0 = WorldState((0.5, 0.5), (0.55, 0.45))
    obs = render_observation(trivial, st0)
    assert obs.grid[1].sum() == pytest.approx(1.0)
    np.testing.assert_array_equal(obs.robot, [0.5, 0.5, 0.0])


@given(x=st.floats(0, 1), y=st.floats(0, 1), ox=st.floats(0, 1), oy=st.floats(0, 1), seed=st.integers(0, 10**6))
def test_render_values_in_unit_interval(x, y, ox, oy, seed):
    s = generate_env_family(1, seed % 7)[0]
    obs = render_observation(s, WorldState((x, y), (ox, oy)), noise_seed=seed)
    assert obs.grid.min() >= 0.0 and obs.grid.max() <= 1.0


def test_disturbance_contract(family):
    for s in family[:6]:
        st0 = reset(s, 2)
        a, b = inject_disturbance(s, st0, 11), inject_disturbance(s, st0, 11)
        assert a == b
        assert abs(a.object_pos[0] - st0.object_pos[0]) <= 0.1 + 1e-12
        assert abs(a.object_pos[1] - st0.object_pos[1]) <= 0.1 + 1e-12
        assert (a.ee_pos, a.gripper_open, a.carried, a.step_count) == (
            st0.ee_pos, st0.gripper_open, st0.carried, st0.step_count)
    with pytest.raises(ContractViolation):
        inject_disturbance(family[0], WorldState((0.5, 0.5), (0.5, 0.5), carried=True, gripper_open=False), 0)


def test_random_walks_never_penetrate_and_reward_matches_predicate():
    """Invariants over 10^5 random actions: no penetration, carried => object at ee, reward == success."""
    from flywheel_rl.envworld import EnvBatch

    specs = generate_env_family(50, 5)
    rng = np.random.default_rng(0)
    b = EnvBatch(specs)
    for i, s in enumerate(specs):
        b.reset_slot(i, i)
    totals = np.zeros(len(specs))
    for _ in range(2000):
        rew, done = b.step(rng.integers(0, N_ACTIONS, len(specs)))
        totals += rew
        for i, s in enumerate(specs):
            st_i = b.get_state(i)
            assert not point_in_obstacle(st_i.ee_pos, s.obstacles)
            if st_i.carried:
                assert st_i.object_pos == st_i.ee_pos
            assert (rew[i] == 1.0) == is_success(s, st_i)
            if done[i]:
                assert totals[i] <= 1.0
                totals[i] = 0.0
                b.reset_slot(i, int(rng.integers(1 << 30)))
