# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels: batched env stepping, rasterization, grid BFS, GAE.

Mirrors ``_pykernels`` function by function; see that module for semantics.
"""

from libc.math cimport sqrt, floor

import numpy as np
cimport numpy as cnp

cnp.import_array()

DEF GRID = 16
DEF SUPERSAMPLE = 4
DEF OBS_EXTENT = 2.0


cdef double _move_axis(double pos, double other, double delta, const double[:, :] obstacles,
                       long n_obs, int axis) nogil:
    cdef double new = pos + delta
    cdef double lo_o, hi_o, face
    cdef long k
    if delta > 0:
        if new > 1.0:
            new = 1.0
        for k in range(n_obs):
            if axis == 0:
                lo_o = obstacles[k, 1]
                hi_o = obstacles[k, 3]
                face = obstacles[k, 0]
            else:
                lo_o = obstacles[k, 0]
                hi_o = obstacles[k, 2]
                face = obstacles[k, 1]
            if lo_o < other < hi_o and pos <= face < new:
                new = face
    else:
        if new < 0.0:
            new = 0.0
        for k in range(n_obs):
            if axis == 0:
                lo_o = obstacles[k, 1]
                hi_o = obstacles[k, 3]
                face = obstacles[k, 2]
            else:
                lo_o = obstacles[k, 0]
                hi_o = obstacles[k, 2]
                face = obstacles[k, 3]
            if lo_o < other < hi_o and new < face <= pos:
                new = face
    return new


def step_batch(double[:, ::1] ee, double[:, ::1] obj, cnp.uint8_t[::1] carried,
               cnp.uint8_t[::1] gripper_open, cnp.int64_t[::1] step_count,
               const cnp.int64_t[::1] actions, const double[:, :, ::1] obstacles,
               const cnp.int64_t[::1] n_obs, const double[:, ::1] goal,
               const double[::1] goal_radius, double grasp_radius, double step_size,
               long episode_length, double[::1] reward_out, cnp.uint8_t[::1] done_out):
    cdef Py_ssize_t n = ee.shape[0]
    cdef Py_ssize_t i
    cdef long a
    cdef double x, y, dx, dy, gx, gy
    cdef bint success
    with nogil:
        for i in range(n):
            a = actions[i]
            x = ee[i, 0]
            y = ee[i, 1]
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
                    if sqrt(dx * dx + dy * dy) < grasp_radius:
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
            success = (not carried[i]) and gripper_open[i] and sqrt(gx * gx + gy * gy) < goal_radius[i]
            reward_out[i] = 1.0 if success else 0.0
            done_out[i] = 1 if (success or step_count[i] >= episode_length) else 0


def success_batch(const double[:, ::1] obj, const cnp.uint8_t[::1] carried,
                  const cnp.uint8_t[::1] gripper_open, const double[:, ::1] goal,
                  const double[::1] goal_radius, out):
    cdef Py_ssize_t n = obj.shape[0]
    cdef Py_ssize_t i
    cdef double dx, dy
    cdef cnp.uint8_t[::1] res = np.zeros(n, dtype=np.uint8)
    for i in range(n):
        dx = obj[i, 0] - goal[i, 0]
        dy = obj[i, 1] - goal[i, 1]
        res[i] = (carried[i] == 0) and (gripper_open[i] != 0) and sqrt(dx * dx + dy * dy) < goal_radius[i]
    out[:] = np.asarray(res).astype(bool)


cdef inline void _splat_axis(double u, long* c0, long* c1, double* w0, double* w1) nogil:
    cdef double fl = floor(u)
    cdef long c = <long>fl
    cdef double f = u - fl
    if c < 0:
        c0[0] = 0
        c1[0] = -1
        w0[0] = 1.0
        w1[0] = 0.0
    elif c >= GRID - 1:
        c0[0] = GRID - 1
        c1[0] = -1
        w0[0] = 1.0
        w1[0] = 0.0
    else:
        c0[0] = c
        c1[0] = c + 1
        w0[0] = 1.0 - f
        w1[0] = f


cdef inline double _clamp(double v, double lim) nogil:
    if v < -lim:
        return -lim
    if v > lim:
        return lim
    return v


cdef inline double _overlap(double lo, double hi, double a, double b) nogil:
    if b < hi:
        hi = b
    if a > lo:
        lo = a
    return hi - lo if hi - lo > 0.0 else 0.0


def render_batch(const double[:, ::1] ee, const double[:, ::1] obj, const cnp.uint8_t[::1] carried,
                 const double[:, :, ::1] obstacles, const cnp.int64_t[::1] n_obs,
                 const double[:, ::1] intensity, const double[:, ::1] goal,
                 const double[::1] goal_radius, double[:, ::1] out):
    cdef Py_ssize_t n = ee.shape[0]
    cdef Py_ssize_t i, k, r, c, a, b
    cdef Py_ssize_t plane = GRID * GRID
    cdef double cell = OBS_EXTENT / GRID
    cdef double lim = OBS_EXTENT / 2 - cell / 2
    cdef double ox, oy, x0, y0, x1, y1, v, gx, gy, px, py, r2, dx, dy
    cdef long c0, c1, r0, r1
    cdef double wc0, wc1, wr0, wr1
    cdef long count
    cdef double[GRID] wxs
    cdef double[GRID] wys
    cdef double[GRID + 1] steps
    cdef double sub[GRID * SUPERSAMPLE]
    for a in range(GRID + 1):
        steps[a] = a * cell
    for a in range(GRID * SUPERSAMPLE):
        sub[a] = (a + 0.5) * (cell / SUPERSAMPLE)
    with nogil:
        for i in range(n):
            for k in range(3 * plane + 3):
                out[i, k] = 0.0
            ox = ee[i, 0] - OBS_EXTENT / 2
            oy = ee[i, 1] - OBS_EXTENT / 2
            for k in range(n_obs[i]):
                x0 = obstacles[i, k, 0]
                y0 = obstacles[i, k, 1]
                x1 = obstacles[i, k, 2]
                y1 = obstacles[i, k, 3]
                for c in range(GRID):
                    wxs[c] = _overlap(ox + steps[c], ox + steps[c + 1], x0, x1)
                    wys[c] = _overlap(oy + steps[c], oy + steps[c + 1], y0, y1)
                for r in range(GRID):
                    for c in range(GRID):
                        out[i, r * GRID + c] += wys[r] * wxs[c] / (cell * cell) * intensity[i, k]
            for c in range(GRID):
                wxs[c] = _overlap(ox + steps[c], ox + steps[c + 1], 0.0, 1.0) / cell
                wys[c] = _overlap(oy + steps[c], oy + steps[c + 1], 0.0, 1.0) / cell
            for r in range(GRID):
                for c in range(GRID):
                    v = out[i, r * GRID + c] + (1.0 - wys[r] * wxs[c])
                    if v > 1.0:
                        v = 1.0
                    elif v < 0.0:
                        v = 0.0
                    out[i, r * GRID + c] = v

            px = ee[i, 0] + _clamp(obj[i, 0] - ee[i, 0], lim)
            py = ee[i, 1] + _clamp(obj[i, 1] - ee[i, 1], lim)
            _splat_axis((px - ox) / cell - 0.5, &c0, &c1, &wc0, &wc1)
            _splat_axis((py - oy) / cell - 0.5, &r0, &r1, &wr0, &wr1)
            out[i, plane + r0 * GRID + c0] += wr0 * wc0
            if c1 >= 0:
                out[i, plane + r0 * GRID + c1] += wr0 * wc1
            if r1 >= 0:
                out[i, plane + r1 * GRID + c0] += wr1 * wc0
                if c1 >= 0:
                    out[i, plane + r1 * GRID + c1] += wr1 * wc1

            gx = ee[i, 0] + _clamp(goal[i, 0] - ee[i, 0], lim)
            gy = ee[i, 1] + _clamp(goal[i, 1] - ee[i, 1], lim)
            r2 = goal_radius[i] * goal_radius[i]
            for r in range(GRID):
                for c in range(GRID):
                    count = 0
                    for a in range(SUPERSAMPLE):
                        dy = oy + sub[r * SUPERSAMPLE + a] - gy
                        for b in range(SUPERSAMPLE):
                            dx = ox + sub[c * SUPERSAMPLE + b] - gx
                            if dx * dx + dy * dy < r2:
                                count += 1
                    out[i, 2 * plane + r * GRID + c] = count / <double>(SUPERSAMPLE * SUPERSAMPLE)

            out[i, 3 * plane] = ee[i, 0]
            out[i, 3 * plane + 1] = ee[i, 1]
            out[i, 3 * plane + 2] = 1.0 if carried[i] else 0.0


def bfs_grid(const cnp.uint8_t[:, ::1] occupied, long start_row, long start_col,
             cnp.int64_t[:, ::1] dist_out):
    cdef long rows = occupied.shape[0]
    cdef long cols = occupied.shape[1]
    cdef long head = 0, tail = 0, r, c, nr, nc, d, q
    cdef cnp.int64_t[::1] queue = np.empty(rows * cols, dtype=np.int64)
    cdef long dr[4]
    cdef long dc[4]
    dr[:] = [0, 0, 1, -1]
    dc[:] = [1, -1, 0, 0]
    dist_out[:, :] = -1
    if occupied[start_row, start_col]:
        return
    dist_out[start_row, start_col] = 0
    queue[tail] = start_row * cols + start_col
    tail += 1
    while head < tail:
        r = queue[head] // cols
        c = queue[head] % cols
        head += 1
        d = dist_out[r, c] + 1
        for q in range(4):
            nr = r + dr[q]
            nc = c + dc[q]
            if 0 <= nr < rows and 0 <= nc < cols and not occupied[nr, nc] and dist_out[nr, nc] < 0:
                dist_out[nr, nc] = d
                queue[tail] = nr * cols + nc
                tail += 1


def gae(const double[:, ::1] rewards, const double[:, ::1] values, const double[:, ::1] dones,
        const double[::1] last_values, double gamma, double lam, double[:, ::1] adv_out):
    cdef Py_ssize_t steps = rewards.shape[0]
    cdef Py_ssize_t n = rewards.shape[1]
    cdef Py_ssize_t t, j
    cdef double next_v, live, delta
    cdef double[::1] running = np.zeros(n)
    with nogil:
        for t in range(steps - 1, -1, -1):
            for j in range(n):
                next_v = last_values[j] if t == steps - 1 else values[t + 1, j]
                live = 1.0 - dones[t, j]
                delta = rewards[t, j] + gamma * next_v * live - values[t, j]
                running[j] = delta + gamma * lam * live * running[j]
                adv_out[t, j] = running[j]
