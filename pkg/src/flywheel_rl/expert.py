"""Scripted waypoint demonstrator used in place of a human teleoperator.

Routes are planned on the 16x16 occupancy grid. With ``multimodality > 1``
the planner picks among several route classes, where two routes belong to
different classes when they pass at least one obstacle on different sides
(signed crossings of an upward ray cast from each obstacle's center).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .envworld import (
    EPISODE_LENGTH,
    GRASP,
    GRASP_RADIUS,
    GRID,
    MOVE_NX,
    MOVE_NY,
    MOVE_PX,
    MOVE_PY,
    RELEASE,
    STEP_SIZE,
    EnvBatch,
    EnvSpec,
    Trajectory,
    WorldState,
    bfs_distances,
    cell_center,
    cell_of,
    occupancy,
    reset,
    step,
)
from .errors import ContractViolation, DemoCollectionFailed, Infeasible

WAYPOINT_TOL = STEP_SIZE / 2
ROUTE_SLACK_CELLS = 6
_NEIGHBORS = ((0, 1), (0, -1), (1, 0), (-1, 0))


@dataclass(frozen=True)
class ExpertConfig:
    multimodality: int = 1
    action_noise: float = 0.0

    def __post_init__(self):
        if self.multimodality < 1:
            raise ContractViolation("multimodality must be >= 1")
        if not 0.0 <= self.action_noise < 1.0:
            raise ContractViolation("action_noise must be in [0, 1)")


class _DemoCounter:
    """Counts demonstrations handed out by :func:`collect_demonstrations`."""

    def __init__(self):
        self.count = 0


DEMO_COUNTER = _DemoCounter()


def demos_served() -> int:
    return DEMO_COUNTER.count


# --------------------------------------------------------------------------- planning


def _descend(dist: np.ndarray, cell: tuple[int, int]) -> list[tuple[int, int]]:
    """Walk from ``cell`` down the distance field to its zero cell."""
    path = [cell]
    r, c = cell
    while dist[r, c] > 0:
        for dr, dc in _NEIGHBORS:
            nr, nc = r + dr, c + dc
            if 0 <= nr < GRID and 0 <= nc < GRID and dist[nr, nc] == dist[r, c] - 1:
                r, c = nr, nc
                break
        path.append((r, c))
    return path


def route_signature(cells: list[tuple[int, int]], obstacles) -> tuple[int, ...]:
    """Signed crossings of each obstacle's upward center ray by the cell-center polyline."""
    sig = []
    for x0, y0, x1, y1 in obstacles:
        cx, cy = (x0 + x1) / 2, (y0 + y1) / 2
        n = 0
        for (r0, c0), (r1, c1) in zip(cells[:-1], cells[1:]):
            if r0 != r1:
                continue
            ya = cell_center(r0, c0)[1]
            xa, xb = cell_center(r0, c0)[0], cell_center(r1, c1)[0]
            if ya > cy and (xa < cx) != (xb < cx):
                n += 1 if xb > xa else -1
        sig.append(n)
    return tuple(sig)


def route_classes(spec: EnvSpec, start: tuple[int, int], goal: tuple[int, int],
                  max_classes: int, slack: int = ROUTE_SLACK_CELLS) -> list[list[tuple[int, int]]]:
    """Up to ``max_classes`` cell routes with distinct signatures, shortest first."""
    occ = occupancy(spec.obstacles)
    d_s = bfs_distances(occ, start)
    d_g = bfs_distances(occ, goal)
    if d_s[goal] < 0:
        raise Infeasible(f"{spec.env_id}: no path from cell {start} to {goal}")
    shortest = _descend(d_g, start)
    if max_classes == 1:
        return [shortest]
    best = {route_signature(shortest, spec.obstacles): shortest}
    limit = d_s[goal] + slack
    for r in range(GRID):
        for c in range(GRID):
            if d_s[r, c] < 0 or d_g[r, c] < 0 or d_s[r, c] + d_g[r, c] > limit:
                continue
            path = _descend(d_s, (r, c))[::-1] + _descend(d_g, (r, c))[1:]
            sig = route_signature(path, spec.obstacles)
            if sig not in best or len(path) < len(best[sig]):
                best[sig] = path
    ordered = sorted(best.items(), key=lambda kv: (len(kv[1]), kv[0]))
    return [p for _, p in ordered[:max_classes]]


def plan_path(spec: EnvSpec, start: tuple[float, float], to: tuple[float, float],
              multimodality: int = 1, rng: np.random.Generator | None = None) -> list[tuple[float, float]]:
    """Collision-free waypoints from ``start`` to ``to``.

    The first waypoint is the center of ``start``'s cell, then successive cell
    centers, then ``to`` itself.
    """
    s_cell, g_cell = cell_of(start), cell_of(to)
    occ = occupancy(spec.obstacles)
    if occ[s_cell] or occ[g_cell]:
        raise Infeasible(f"{spec.env_id}: endpoint lies in an occupied cell")
    classes = route_classes(spec, s_cell, g_cell, multimodality)
    k = 0 if rng is None or len(classes) == 1 else int(rng.integers(len(classes)))
    return [cell_center(*rc) for rc in classes[k]] + [tuple(to)]


@dataclass
class ExpertPlan:
    to_object: list[tuple[float, float]]
    to_goal: list[tuple[float, float]]
    object_at_plan: tuple[float, float]
    cursor: list[int] = field(default_factory=lambda: [0, 0])


def make_plan(spec: EnvSpec, state: WorldState, cfg: ExpertConfig = ExpertConfig(),
              rng: np.random.Generator | None = None) -> ExpertPlan:
    to_object = [] if state.carried else plan_path(spec, state.ee_pos, state.object_pos, cfg.multimodality, rng)
    start = state.ee_pos if state.carried else state.object_pos
    to_goal = plan_path(spec, start, spec.goal_site, cfg.multimodality, rng)
    return ExpertPlan(to_object, to_goal, state.object_pos)


def _follow(ee, waypoints, cursor: list[int], phase: int) -> int:
    while cursor[phase] < len(waypoints) - 1:
        w = waypoints[cursor[phase]]
        if abs(w[0] - ee[0]) <= WAYPOINT_TOL and abs(w[1] - ee[1]) <= WAYPOINT_TOL:
            cursor[phase] += 1
        else:
            break
    w = waypoints[cursor[phase]]
    dx, dy = w[0] - ee[0], w[1] - ee[1]
    if abs(dx) > WAYPOINT_TOL:
        return MOVE_PX if dx > 0 else MOVE_NX
    if abs(dy) > WAYPOINT_TOL:
        return MOVE_PY if dy > 0 else MOVE_NY
    # at the final waypoint within tolerance; nudge along the larger offset
    if abs(dx) >= abs(dy):
        return MOVE_PX if dx > 0 else MOVE_NX
    return MOVE_PY if dy > 0 else MOVE_NY


def expert_action(spec: EnvSpec, state: WorldState, plan: ExpertPlan) -> int:
    ee = state.ee_pos
    if state.carried:
        if math.dist(ee, spec.goal_site) < spec.goal_radius:
            return RELEASE
        return _follow(ee, plan.to_goal, plan.cursor, 1)
    if math.dist(ee, state.object_pos) < GRASP_RADIUS:
        return GRASP
    return _follow(ee, plan.to_object, plan.cursor, 0)


def _noisy(action: int, cfg: ExpertConfig, rng: np.random.Generator) -> int:
    if cfg.action_noise > 0 and rng.random() < cfg.action_noise:
        return int(rng.integers(0, 4))
    return action


def _episode_seed(seed: int, k: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(k), 17]).generate_state(1)[0])


def run_expert_episode(spec: EnvSpec, episode_seed: int, cfg: ExpertConfig, rng: np.random.Generator,
                       episode_length: int = EPISODE_LENGTH) -> Trajectory:
    state = reset(spec, episode_seed)
    plan = make_plan(spec, state, cfg, rng)
    states, actions, rewards, dones = [], [], [], []
    done = False
    while not done:
        a = _noisy(expert_action(spec, state, plan), cfg, rng)
        states.append(state.as_vector())
        nxt, r, done = step(spec, state, a, episode_length)
        actions.append(a)
        rewards.append(r)
        dones.append(done)
        state = nxt
    return Trajectory(spec.env_id, episode_seed, np.array(states), np.array(actions, dtype=np.int64),
                      np.array(rewards), np.array(dones, dtype=bool))


def collect_demonstrations(spec: EnvSpec, n: int = 10, seed: int = 0, cfg: ExpertConfig = ExpertConfig(),
                           retry_budget: int | None = None) -> list[Trajectory]:
    """``n`` successful expert episodes with clean observations."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), spec.layout_seed, 3]))
    retry_budget = 10 * max(n, 1) if retry_budget is None else retry_budget
    demos: list[Trajectory] = []
    attempts = 0
    while len(demos) < n:
        if attempts >= n + retry_budget:
            raise DemoCollectionFailed(f"{spec.env_id}: {len(demos)}/{n} demos after {attempts} attempts")
        traj = run_expert_episode(spec, _episode_seed(seed, attempts), cfg, rng)
        attempts += 1
        if traj.success:
            demos.append(traj)
    DEMO_COUNTER.count += len(demos)
    return demos


class ExpertAgent:
    """Batch agent wrapper around the scripted expert.

    With ``replan=True`` a slot's plan is rebuilt whenever its resting object
    has moved since the plan was made (e.g. after a disturbance).
    """

    kind = "expert"

    def __init__(self, cfg: ExpertConfig = ExpertConfig(), replan: bool = True):
        self.cfg = cfg
        self.replan = replan
        self.plans: dict[int, ExpertPlan] = {}

    def on_reset(self, batch: EnvBatch, i: int, rng: np.random.Generator) -> None:
        self.plans[i] = make_plan(batch.specs[i], batch.get_state(i), self.cfg, rng)

    def act(self, batch: EnvBatch, idx: np.ndarray, rng, deterministic: bool) -> np.ndarray:
        out = np.empty(len(idx), dtype=np.int64)
        for j, i in enumerate(idx):
            spec, state = batch.specs[i], batch.get_state(i)
            plan = self.plans.get(int(i))
            if plan is None or (self.replan and not state.carried and state.object_pos != plan.object_at_plan):
                plan = self.plans[int(i)] = make_plan(spec, state, ExpertConfig(), None)
            out[j] = expert_action(spec, state, plan)
        return out
