"""Planar sparse-reward pick-and-place environments.

Each :class:`EnvSpec` is one procedurally generated "scene": axis-aligned
obstacles in the unit square, an object to pick up and a circular goal site
to drop it in. Dynamics are exact and deterministic; the only randomness is
the object's start jitter at reset, which is driven by an explicit seed.

Actions::

    0: +x   1: -x   2: +y   3: -y   4: grasp   5: release
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import kernels
from .errors import ContractViolation, FileFormatError, GenerationExhausted

GRID = 16
CELL = 1.0 / GRID
N_ACTIONS = 6
MAX_OBSTACLES = 4
STEP_SIZE = 0.03
EPISODE_LENGTH = 60
GOAL_RADIUS = 0.08
GRASP_RADIUS = 0.04
OBJECT_JITTER = 0.1
HOME = (7.5 * CELL, 7.5 * CELL)
MAX_GENERATION_ATTEMPTS = 1000
# expert step estimate per grid cell travelled (0.0625 / 0.03, rounded up)
STEPS_PER_CELL = 2.1
# planned-route step budget enforced at generation, leaves slack for re-planning
ROUTE_STEP_BUDGET = 44
OBS_CHANNELS = 3
# side length of the effector-centred observation window (workspace units)
OBS_EXTENT = 2.0
ROBOT_DIM = 3
OBS_DIM = OBS_CHANNELS * GRID * GRID + ROBOT_DIM
STATE_DIM = 7
FEATURE_DIM = 12
DROPOUT_PROB = 0.05
INTENSITY_JITTER = 0.05

MOVE_PX, MOVE_NX, MOVE_PY, MOVE_NY, GRASP, RELEASE = range(N_ACTIONS)


@dataclass(frozen=True)
class EnvSpec:
    env_id: str
    layout_seed: int
    obstacles: tuple[tuple[float, float, float, float], ...]
    goal_site: tuple[float, float]
    object_nominal: tuple[float, float]
    goal_radius: float = GOAL_RADIUS
    object_jitter: float = OBJECT_JITTER
    texture_seed: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["obstacles"] = [list(o) for o in self.obstacles]
        d["goal_site"] = list(self.goal_site)
        d["object_nominal"] = list(self.object_nominal)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> EnvSpec:
        return cls(
            env_id=str(d["env_id"]),
            layout_seed=int(d["layout_seed"]),
            obstacles=tuple(tuple(float(v) for v in o) for o in d["obstacles"]),
            goal_site=(float(d["goal_site"][0]), float(d["goal_site"][1])),
            object_nominal=(float(d["object_nominal"][0]), float(d["object_nominal"][1])),
            goal_radius=float(d.get("goal_radius", GOAL_RADIUS)),
            object_jitter=float(d.get("object_jitter", OBJECT_JITTER)),
            texture_seed=int(d.get("texture_seed", 0)),
        )

    def obstacle_intensities(self) -> np.ndarray:
        """Per-obstacle rendering intensity in [0.6, 1.0], a function of texture_seed."""
        rng = np.random.default_rng([self.texture_seed, 7919])
        out = np.zeros(MAX_OBSTACLES)
        out[: len(self.obstacles)] = rng.uniform(0.6, 1.0, size=len(self.obstacles))
        return out


@dataclass(frozen=True)
class WorldState:
    ee_pos: tuple[float, float]
    object_pos: tuple[float, float]
    carried: bool = False
    gripper_open: bool = True
    step_count: int = 0

    def as_vector(self) -> np.ndarray:
        return np.array(
            [*self.ee_pos, *self.object_pos, float(self.carried), float(self.gripper_open), float(self.step_count)]
        )

    @classmethod
    def from_vector(cls, v: Sequence[float]) -> WorldState:
        return cls(
            ee_pos=(float(v[0]), float(v[1])),
            object_pos=(float(v[2]), float(v[3])),
            carried=bool(v[4]),
            gripper_open=bool(v[5]),
            step_count=int(v[6]),
        )


@dataclass
class ObsGrid:
    grid: np.ndarray  # (OBS_CHANNELS, GRID, GRID)
    robot: np.ndarray  # (ee_x, ee_y, carried)

    def flat(self) -> np.ndarray:
        return np.concatenate([self.grid.ravel(), self.robot])

    @classmethod
    def from_flat(cls, v: np.ndarray) -> ObsGrid:
        n = OBS_CHANNELS * GRID * GRID
        return cls(grid=v[:n].reshape(OBS_CHANNELS, GRID, GRID).copy(), robot=v[n:].copy())


@dataclass(frozen=True)
class Transition:
    state: np.ndarray
    action: int
    reward: float
    done: bool
    observation: ObsGrid | None = None


@dataclass
class Trajectory:
    """One episode. ``states[t]`` is the pre-action state of step ``t``.

    ``noise_seed`` is None for clean observations; otherwise step ``t`` was
    observed through ``render_observation(spec, state_t, noise_seed + t)``.
    """

    env_id: str
    episode_seed: int
    states: np.ndarray  # (T, STATE_DIM)
    actions: np.ndarray  # (T,) int64
    rewards: np.ndarray  # (T,)
    dones: np.ndarray  # (T,) bool
    noise_seed: int | None = None
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.actions)

    @property
    def success(self) -> bool:
        return len(self.rewards) > 0 and bool(self.dones[-1]) and self.rewards[-1] == 1.0

    def transitions(self) -> list[Transition]:
        return [
            Transition(self.states[t], int(self.actions[t]), float(self.rewards[t]), bool(self.dones[t]))
            for t in range(len(self))
        ]

    def step_noise_seeds(self) -> list[int | None]:
        if self.noise_seed is None:
            return [None] * len(self)
        return [self.noise_seed + t for t in range(len(self))]


# --------------------------------------------------------------------------- geometry


def cell_of(p: Sequence[float]) -> tuple[int, int]:
    """(row, col) of the grid cell containing point ``p``."""
    col = min(GRID - 1, max(0, int(math.floor(p[0] * GRID))))
    row = min(GRID - 1, max(0, int(math.floor(p[1] * GRID))))
    return row, col


def cell_center(row: int, col: int) -> tuple[float, float]:
    return ((col + 0.5) * CELL, (row + 0.5) * CELL)


def point_in_obstacle(p: Sequence[float], obstacles: Iterable[Sequence[float]]) -> bool:
    """Strict interior test; faces and corners count as free space."""
    return any(o[0] < p[0] < o[2] and o[1] < p[1] < o[3] for o in obstacles)


@lru_cache(maxsize=4096)
def occupancy(obstacles: tuple[tuple[float, float, float, float], ...]) -> np.ndarray:
    """16x16 grid, 1 where the cell overlaps an obstacle with positive area."""
    occ = np.zeros((GRID, GRID), dtype=np.uint8)
    for x0, y0, x1, y1 in obstacles:
        c0 = max(0, int(math.floor(x0 * GRID)))
        c1 = min(GRID - 1, int(math.ceil(x1 * GRID)) - 1)
        r0 = max(0, int(math.floor(y0 * GRID)))
        r1 = min(GRID - 1, int(math.ceil(y1 * GRID)) - 1)
        occ[r0 : r1 + 1, c0 : c1 + 1] = 1
    occ.setflags(write=False)
    return occ


def bfs_distances(occ: np.ndarray, start: tuple[int, int]) -> np.ndarray:
    dist = np.empty(occ.shape, dtype=np.int64)
    kernels.bfs_grid(np.ascontiguousarray(occ, dtype=np.uint8), start[0], start[1], dist)
    return dist


@lru_cache(maxsize=4096)
def _home_distances(obstacles):
    d = bfs_distances(occupancy(obstacles), cell_of(HOME))
    d.setflags(write=False)
    return d


def valid_object_position(spec: EnvSpec, p: Sequence[float]) -> bool:
    """Object start/disturbance positions: in-bounds, free, reachable cell, clear of the goal."""
    if not (0.0 <= p[0] <= 1.0 and 0.0 <= p[1] <= 1.0):
        return False
    if point_in_obstacle(p, spec.obstacles):
        return False
    r, c = cell_of(p)
    if occupancy(spec.obstacles)[r, c] or _home_distances(spec.obstacles)[r, c] < 0:
        return False
    return math.dist(p, spec.goal_site) >= spec.goal_radius + 0.02


def _route_cost_ok(obstacles, goal, nominal, reach: float) -> bool:
    occ = occupancy(obstacles)
    d_home = _home_distances(obstacles)
    d_goal = bfs_distances(occ, cell_of(goal))
    lo_c = cell_of((nominal[0] - reach, 0.0))[1]
    hi_c = cell_of((nominal[0] + reach, 0.0))[1]
    lo_r = cell_of((0.0, nominal[1] - reach))[0]
    hi_r = cell_of((0.0, nominal[1] + reach))[0]
    nr, nc = cell_of(nominal)
    if d_home[nr, nc] < 0 or d_goal[nr, nc] < 0:
        return False
    for r in range(lo_r, hi_r + 1):
        for c in range(lo_c, hi_c + 1):
            if occ[r, c] or d_home[r, c] < 0:
                continue
            cells = d_home[r, c] + d_goal[r, c]
            if STEPS_PER_CELL * cells + 6 > ROUTE_STEP_BUDGET:
                return False
    return True


def check_feasible(spec: EnvSpec) -> bool:
    """Feasibility contract used at generation (and re-checkable by callers)."""
    occ = occupancy(spec.obstacles)
    for o in spec.obstacles:
        if not (0.0 <= o[0] < o[2] <= 1.0 and 0.0 <= o[1] < o[3] <= 1.0):
            return False
    for p in (HOME, spec.goal_site, spec.object_nominal):
        if not (0.0 <= p[0] <= 1.0 and 0.0 <= p[1] <= 1.0):
            return False
    hr, hc = cell_of(HOME)
    gr, gc = cell_of(spec.goal_site)
    if occ[hr, hc] or occ[gr, gc]:
        return False
    if not valid_object_position(spec, spec.object_nominal):
        return False
    if math.dist(spec.object_nominal, spec.goal_site) < spec.goal_radius + spec.object_jitter * math.sqrt(2) + 0.02:
        return False
    return _route_cost_ok(spec.obstacles, spec.goal_site, spec.object_nominal, spec.object_jitter)


# --------------------------------------------------------------------------- generation


def _index_rng(family_seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([family_seed, index]))


def generate_env(family_seed: int, index: int) -> EnvSpec:
    rng = _index_rng(family_seed, index)
    layout_seed = int(rng.integers(0, 2**31 - 1))
    texture_seed = int(rng.integers(0, 2**31 - 1))
    for _ in range(MAX_GENERATION_ATTEMPTS):
        obstacles = []
        for _ in range(int(rng.integers(1, MAX_OBSTACLES + 1))):
            w, h = rng.uniform(0.05, 0.3, size=2)
            x0 = rng.uniform(0.0, 1.0 - w)
            y0 = rng.uniform(0.0, 1.0 - h)
            obstacles.append((float(x0), float(y0), float(x0 + w), float(y0 + h)))
        goal = rng.uniform(0.1, 0.9, size=2)
        nominal = rng.uniform(0.15, 0.85, size=2)
        spec = EnvSpec(
            env_id=f"env-{family_seed}-{index:04d}",
            layout_seed=layout_seed,
            obstacles=tuple(obstacles),
            goal_site=(float(goal[0]), float(goal[1])),
            object_nominal=(float(nominal[0]), float(nominal[1])),
            texture_seed=texture_seed,
        )
        if check_feasible(spec):
            return spec
    raise GenerationExhausted(f"no feasible layout for family {family_seed} index {index}")


def generate_env_family(count: int, family_seed: int, start: int = 0) -> list[EnvSpec]:
    """``count`` feasible specs, each a pure function of (family_seed, index)."""
    if count < 0:
        raise ContractViolation("count must be >= 0")
    return [generate_env(family_seed, start + i) for i in range(count)]


def trivial_spec(env_id: str = "trivial") -> EnvSpec:
    """Obstacle-free scene used for smoke runs and the RL acceptance check."""
    return EnvSpec(
        env_id=env_id,
        layout_seed=0,
        obstacles=(),
        goal_site=(0.75, 0.7),
        object_nominal=(0.3, 0.35),
    )


def save_specs(specs: Iterable[EnvSpec], path: str | Path) -> None:
    with open(path, "w") as fh:
        for s in specs:
            fh.write(json.dumps(s.to_dict(), sort_keys=True) + "\n")


def load_specs(path: str | Path) -> list[EnvSpec]:
    specs = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                specs.append(EnvSpec.from_dict(json.loads(line)))
            except (ValueError, KeyError, TypeError, IndexError) as exc:
                raise FileFormatError(f"{path}:{lineno}: bad spec line ({exc})") from exc
    return specs


# --------------------------------------------------------------------------- single-state API


def _sample_object(spec: EnvSpec, center: Sequence[float], half: float, rng: np.random.Generator):
    for _ in range(MAX_GENERATION_ATTEMPTS):
        p = (float(center[0] + rng.uniform(-half, half)), float(center[1] + rng.uniform(-half, half)))
        if valid_object_position(spec, p):
            return p
    return None


def reset(spec: EnvSpec, episode_seed: int) -> WorldState:
    rng = np.random.default_rng(np.random.SeedSequence([int(episode_seed), spec.layout_seed]))
    p = _sample_object(spec, spec.object_nominal, spec.object_jitter, rng)
    if p is None:
        p = spec.object_nominal
    return WorldState(ee_pos=HOME, object_pos=p)


def step(spec: EnvSpec, state: WorldState, action: int, episode_length: int = EPISODE_LENGTH):
    """Advance one step. Returns ``(next_state, reward, done)``."""
    if not (0 <= int(action) < N_ACTIONS) or int(action) != action:
        raise ContractViolation(f"invalid action {action!r}")
    if state.step_count >= episode_length:
        raise ContractViolation("episode already finished")
    batch = EnvBatch([spec], episode_length=episode_length)
    batch.set_state(0, state)
    reward, done = batch.step(np.array([action]))
    return batch.get_state(0), float(reward[0]), bool(done[0])


def is_success(spec: EnvSpec, state: WorldState) -> bool:
    if state.carried or not state.gripper_open:
        return False
    return math.dist(state.object_pos, spec.goal_site) < spec.goal_radius


def render_observation(spec: EnvSpec, state: WorldState, noise_seed: int | None = None) -> ObsGrid:
    """Rasterize the scene into a 3 x 16 x 16 grid centred on the end effector.

    Channels are obstacles (area coverage times texture intensity; space
    outside the workspace counts as solid), the object (bilinear splat) and
    the goal disk (4 x 4 supersampled coverage).  The window spans
    ``OBS_EXTENT`` per side; object and goal beyond it are clamped onto its
    border so their direction stays visible.  ``noise_seed`` adds the
    sensor-noise analog of :func:`apply_observation_noise`.
    """
    batch = EnvBatch([spec])
    batch.set_state(0, state)
    seeds = None if noise_seed is None else [noise_seed]
    return ObsGrid.from_flat(batch.render(seeds)[0])


def apply_observation_noise(flat_obs: np.ndarray, noise_seed: int) -> None:
    """In-place sensor-noise analog on the grid part: jitter, clamp, cell dropout."""
    n = OBS_CHANNELS * GRID * GRID
    rng = np.random.default_rng(int(noise_seed))
    jitter = rng.uniform(-INTENSITY_JITTER, INTENSITY_JITTER, size=n)
    drop = rng.random(n) < DROPOUT_PROB
    grid = np.clip(flat_obs[:n] + jitter, 0.0, 1.0)
    grid[drop] = 0.0
    flat_obs[:n] = grid


def inject_disturbance(spec: EnvSpec, state: WorldState, seed: int) -> WorldState:
    """Push the (resting) object to a random nearby valid position."""
    if state.carried:
        raise ContractViolation("cannot disturb a carried object")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), spec.layout_seed, 1]))
    p = _sample_object(spec, state.object_pos, spec.object_jitter, rng)
    if p is None:
        return state
    return WorldState(state.ee_pos, p, state.carried, state.gripper_open, state.step_count)


def state_features(spec_goal: np.ndarray, states: np.ndarray) -> np.ndarray:
    """Privileged-state policy input.

    ``states`` rows are WorldState vectors; ``spec_goal`` rows the goal site of
    each row's environment. Features: ee, object, goal (scaled to [-1, 1]),
    object-ee and goal-ee offsets (x4), carried, gripper_open.
    """
    ee = states[:, 0:2]
    obj = states[:, 2:4]
    goal = np.broadcast_to(spec_goal, ee.shape)
    return np.concatenate(
        [2 * ee - 1, 2 * obj - 1, 2 * goal - 1, 4 * (obj - ee), 4 * (goal - ee), states[:, 4:6]], axis=1
    )


# --------------------------------------------------------------------------- batched worlds


class EnvBatch:
    """``n`` independent worlds stepped together through the kernels.

    Slot ``i`` runs ``specs[i]``; specs may repeat.
    """

    def __init__(self, specs: Sequence[EnvSpec], episode_length: int = EPISODE_LENGTH):
        n = len(specs)
        self.specs = list(specs)
        self.episode_length = episode_length
        self.ee = np.zeros((n, 2))
        self.obj = np.zeros((n, 2))
        self.carried = np.zeros(n, dtype=np.uint8)
        self.gripper_open = np.ones(n, dtype=np.uint8)
        self.step_count = np.zeros(n, dtype=np.int64)
        self.obstacles = np.zeros((n, MAX_OBSTACLES, 4))
        self.n_obs = np.zeros(n, dtype=np.int64)
        self.goal = np.zeros((n, 2))
        self.goal_radius = np.zeros(n)
        self.intensity = np.zeros((n, MAX_OBSTACLES))
        for i, s in enumerate(self.specs):
            self._load_spec(i, s)

    def __len__(self) -> int:
        return len(self.specs)

    def _load_spec(self, i: int, spec: EnvSpec) -> None:
        self.specs[i] = spec
        k = len(spec.obstacles)
        self.obstacles[i] = 0.0
        if k:
            self.obstacles[i, :k] = spec.obstacles
        self.n_obs[i] = k
        self.goal[i] = spec.goal_site
        self.goal_radius[i] = spec.goal_radius
        self.intensity[i] = spec.obstacle_intensities()

    def set_spec(self, i: int, spec: EnvSpec) -> None:
        if spec is not self.specs[i]:
            self._load_spec(i, spec)

    def set_state(self, i: int, state: WorldState) -> None:
        self.ee[i] = state.ee_pos
        self.obj[i] = state.object_pos
        self.carried[i] = state.carried
        self.gripper_open[i] = state.gripper_open
        self.step_count[i] = state.step_count

    def get_state(self, i: int) -> WorldState:
        return WorldState(
            ee_pos=(float(self.ee[i, 0]), float(self.ee[i, 1])),
            object_pos=(float(self.obj[i, 0]), float(self.obj[i, 1])),
            carried=bool(self.carried[i]),
            gripper_open=bool(self.gripper_open[i]),
            step_count=int(self.step_count[i]),
        )

    def reset_slot(self, i: int, episode_seed: int) -> WorldState:
        s = reset(self.specs[i], episode_seed)
        self.set_state(i, s)
        return s

    def state_vectors(self, idx: np.ndarray | None = None) -> np.ndarray:
        sel = slice(None) if idx is None else idx
        return np.column_stack(
            [
                self.ee[sel],
                self.obj[sel],
                self.carried[sel].astype(float),
                self.gripper_open[sel].astype(float),
                self.step_count[sel].astype(float),
            ]
        )

    def features(self, idx: np.ndarray | None = None) -> np.ndarray:
        goal = self.goal if idx is None else self.goal[idx]
        return state_features(goal, self.state_vectors(idx))

    def step(self, actions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        actions = np.ascontiguousarray(actions, dtype=np.int64)
        if actions.shape != (len(self),) or actions.min(initial=0) < 0 or actions.max(initial=0) >= N_ACTIONS:
            raise ContractViolation("actions out of range")
        reward = np.zeros(len(self))
        done = np.zeros(len(self), dtype=np.uint8)
        kernels.step_batch(
            self.ee, self.obj, self.carried, self.gripper_open, self.step_count, actions,
            self.obstacles, self.n_obs, self.goal, self.goal_radius, GRASP_RADIUS, STEP_SIZE,
            self.episode_length, reward, done,
        )
        return reward, done.astype(bool)

    def success(self) -> np.ndarray:
        out = np.zeros(len(self), dtype=bool)
        kernels.success_batch(self.obj, self.carried, self.gripper_open, self.goal, self.goal_radius, out)
        return out

    def render(self, noise_seeds: Sequence[int | None] | None = None, idx: np.ndarray | None = None) -> np.ndarray:
        """Flattened observations (grid ++ robot state), one row per slot in ``idx``."""
        if idx is None:
            arrays = (self.ee, self.obj, self.carried, self.obstacles, self.n_obs, self.intensity,
                      self.goal, self.goal_radius)
        else:
            arrays = tuple(
                np.ascontiguousarray(a[idx])
                for a in (self.ee, self.obj, self.carried, self.obstacles, self.n_obs, self.intensity,
                          self.goal, self.goal_radius)
            )
        out = np.zeros((len(arrays[0]), OBS_DIM))
        kernels.render_batch(*arrays, out)
        if noise_seeds is not None:
            for i, s in enumerate(noise_seeds):
                if s is not None:
                    apply_observation_noise(out[i], s)
        return out


def render_states(spec: EnvSpec, states: np.ndarray, noise_seeds: Sequence[int | None] | None = None) -> np.ndarray:
    """Observations for many states of one environment (rows of ``states``)."""
    n = len(states)
    batch = EnvBatch([spec] * n)
    batch.ee[:] = states[:, 0:2]
    batch.obj[:] = states[:, 2:4]
    batch.carried[:] = states[:, 4].astype(np.uint8)
    batch.gripper_open[:] = states[:, 5].astype(np.uint8)
    batch.step_count[:] = states[:, 6].astype(np.int64)
    return batch.render(noise_seeds)
