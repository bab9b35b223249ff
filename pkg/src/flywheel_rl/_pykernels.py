"""Pure-Python/numpy implementations of the hot kernels.

Used when the compiled ``_ckernels`` extension is unavailable, and as the
reference the compiled version is tested against. Signatures and in-place
semantics match ``_ckernels.pyx`` exactly.
"""

from __future__ import annotations

import math
from collections import deque

import numpy as np

GRID = 16
SUPERSAMPLE = 4
OBS_EXTENT = 2.0


def _move_axis(pos, other, delta, obstacles, n_obs, axis):
    # Translate one coordinate by ``delta``, stopping at the workspace edge or
    # the first obstacle face crossed. Faces are closed, interiors open.
    new = pos + delta
    if delta > 0:
        new = min(new, 1.0)
        for k in range(n_obs):
            lo_o, hi_o = (obstacles[k, 1], obstacles[k, 3]) if axis == 0 else (obstacles[k, 0], obstacles[k, 2])
            face = obstacles[k, 0] if axis == 0 else obstacles[k, 1]
            if lo_o < other < hi_o and pos <= face < new:
                new = face
    else:
        new = max(new, 0.0)
        for k in range(n_obs):
            lo_o, hi_o = (obstacles[k, 1], obstacles[k, 3]) if axis == 0 else (obstacles[k, 0], obstacles[k, 2])
            face = obstacles[k, 2] if axis == 0 else obstacles[k, 3]
            if lo_o < other < hi_o and new < face <= pos:
                new = face
    return new


def step_batch(ee, obj, carried, gripper_open, step_count, actions, obstacles, n_obs,
               goal, goal_radius, grasp_radius, step_size, episode_length, reward_out, done_out):
    n = ee.shape[0]
    for i in range(n):
        a = int(actions[i])
        x, y = ee[i, 0], ee[i, 1]
        if a == 0:
            x = _move_axis(x, y, step_size, obstacles[i], n_obs[i], 0)
        elif a == 1:
            x = _move_axis(x, y, -step_size, obstacles[i], n_obs[i], 0)
        elif a == 2:
            y = _move_axis(y, x, step_size, obstacles[i], n_obs[i], 1)
        elif a == 3:
            y = _move_axis(y, x, -step_size, obstacles[i], n_obs[i], 1)
        elif a == 4:
            if not carried[i]:
                dx = x - obj[i, 0]
                dy = y - obj[i, 1]
                if math.sqrt(dx * dx + dy * dy) < grasp_radius:
                    carried[i] = 1
            gripper_open[i] = 0
        elif a == 5:
            carried[i] = 0
            gripper_open[i] = 1
        ee[i, 0] = x
        ee[i, 1] = y
        if carried[i]:
            obj[i, 0] = x
            obj[i, 1] = y
        step_count[i] += 1
        gx = obj[i, 0] - goal[i, 0]
        gy = obj[i, 1] - goal[i, 1]
        success = (not carried[i]) and gripper_open[i] and math.sqrt(gx * gx + gy * gy) < goal_radius[i]
        reward_out[i] = 1.0 if success else 0.0
        done_out[i] = 1 if (success or step_count[i] >= episode_length) else 0


def success_batch(obj, carried, gripper_open, goal, goal_radius, out):
    dx = obj[:, 0] - goal[:, 0]
    dy = obj[:, 1] - goal[:, 1]
    d = np.sqrt(dx * dx + dy * dy)
    out[:] = (carried == 0) & (gripper_open != 0) & (d < goal_radius)


def render_batch(ee, obj, carried, obstacles, n_obs, intensity, goal, goal_radius, out):
    # Effector-centred window of side OBS_EXTENT; area outside the workspace
    # reads as obstacle, object and goal are clamped onto the window border.
    n = ee.shape[0]
    cell = OBS_EXTENT / GRID
    lim = OBS_EXTENT / 2 - cell / 2
    plane = GRID * GRID
    out[:] = 0.0
    steps = np.arange(GRID + 1) * cell
    sub = (np.arange(GRID * SUPERSAMPLE) + 0.5) * (cell / SUPERSAMPLE)
    for i in range(n):
        grid = out[i, : 3 * plane].reshape(3, GRID, GRID)
        ox = ee[i, 0] - OBS_EXTENT / 2
        oy = ee[i, 1] - OBS_EXTENT / 2
        ex = ox + steps
        ey = oy + steps
        for k in range(n_obs[i]):
            x0, y0, x1, y1 = obstacles[i, k]
            wx = np.clip(np.minimum(ex[1:], x1) - np.maximum(ex[:-1], x0), 0.0, None)
            wy = np.clip(np.minimum(ey[1:], y1) - np.maximum(ey[:-1], y0), 0.0, None)
            grid[0] += np.outer(wy, wx) / (cell * cell) * intensity[i, k]
        ix = np.clip(np.minimum(ex[1:], 1.0) - np.maximum(ex[:-1], 0.0), 0.0, None) / cell
        iy = np.clip(np.minimum(ey[1:], 1.0) - np.maximum(ey[:-1], 0.0), 0.0, None) / cell
        grid[0] += 1.0 - np.outer(iy, ix)
        np.clip(grid[0], 0.0, 1.0, out=grid[0])

        px = ee[i, 0] + min(max(obj[i, 0] - ee[i, 0], -lim), lim)
        py = ee[i, 1] + min(max(obj[i, 1] - ee[i, 1], -lim), lim)
        cols, wcols = _splat_axis((px - ox) / cell - 0.5)
        rows, wrows = _splat_axis((py - oy) / cell - 0.5)
        for r, wr in zip(rows, wrows):
            for c, wc in zip(cols, wcols):
                grid[1, r, c] += wr * wc

        gx = ee[i, 0] + min(max(goal[i, 0] - ee[i, 0], -lim), lim)
        gy = ee[i, 1] + min(max(goal[i, 1] - ee[i, 1], -lim), lim)
        r2 = goal_radius[i] * goal_radius[i]
        inside = ((ox + sub[None, :] - gx) ** 2 + (oy + sub[:, None] - gy) ** 2) < r2
        grid[2] = inside.reshape(GRID, SUPERSAMPLE, GRID, SUPERSAMPLE).sum(axis=(1, 3)) / (SUPERSAMPLE * SUPERSAMPLE)

        out[i, 3 * plane] = ee[i, 0]
        out[i, 3 * plane + 1] = ee[i, 1]
        out[i, 3 * plane + 2] = 1.0 if carried[i] else 0.0


def _splat_axis(u):
    # ``u`` in cell-centre units, already inside [0, GRID - 1]
    c0 = math.floor(u)
    f = u - c0
    if c0 < 0:
        return (0,), (1.0,)
    if c0 >= GRID - 1:
        return (GRID - 1,), (1.0,)
    return (c0, c0 + 1), (1.0 - f, f)


def bfs_grid(occupied, start_row, start_col, dist_out):
    rows, cols = occupied.shape
    dist_out[:] = -1
    if occupied[start_row, start_col]:
        return
    dist_out[start_row, start_col] = 0
    queue = deque([(start_row, start_col)])
    while queue:
        r, c = queue.popleft()
        d = dist_out[r, c] + 1
        for nr, nc in ((r, c + 1), (r, c - 1), (r + 1, c), (r - 1, c)):
            if 0 <= nr < rows and 0 <= nc < cols and not occupied[nr, nc] and dist_out[nr, nc] < 0:
                dist_out[nr, nc] = d
                queue.append((nr, nc))


def gae(rewards, values, dones, last_values, gamma, lam, adv_out):
    steps = rewards.shape[0]
    running = np.zeros(rewards.shape[1])
    for t in range(steps - 1, -1, -1):
        next_v = last_values if t == steps - 1 else values[t + 1]
        live = 1.0 - dones[t]
        delta = rewards[t] + gamma * next_v * live - values[t]
        running = delta + gamma * lam * live * running
        adv_out[t] = running
