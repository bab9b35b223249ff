"""Time the compiled kernels against the numpy fallback.

Usage: ``python benchmarks/bench_kernels.py [--envs 64] [--repeat 5] [--json out.json]``

Each row is the best-of-``repeat`` wall time of one call on a batch of
``--envs`` worlds, and the speed-up of the compiled backend.
"""

from __future__ import annotations

import argparse
import json
import sys
import timeit

import numpy as np

from flywheel_rl import kernels
from flywheel_rl.envworld import EPISODE_LENGTH, GRASP_RADIUS, OBS_DIM, STEP_SIZE, EnvBatch, generate_env_family, occupancy


def _workloads(n: int, seed: int = 0):
    rng = np.random.default_rng(seed)
    b = EnvBatch(generate_env_family(n, 1))
    for i in range(n):
        b.reset_slot(i, i)
    actions = rng.integers(0, 6, n)
    occ = np.ascontiguousarray(occupancy(b.specs[0].obstacles), dtype=np.uint8)
    T = EPISODE_LENGTH
    r, v = rng.random((T, n)), rng.normal(size=(T, n))
    d = (rng.random((T, n)) < 0.05).astype(float)
    last = rng.normal(size=n)

    def step(mod):
        st = [a.copy() for a in (b.ee, b.obj, b.carried, b.gripper_open, b.step_count)]
        rew, done = np.zeros(n), np.zeros(n, dtype=np.uint8)
        return lambda: mod.step_batch(*st, actions, b.obstacles, b.n_obs, b.goal, b.goal_radius, GRASP_RADIUS,
                                      STEP_SIZE, 1 << 30, rew, done)

    def render(mod):
        out = np.zeros((n, OBS_DIM))
        return lambda: mod.render_batch(b.ee, b.obj, b.carried, b.obstacles, b.n_obs, b.intensity, b.goal,
                                        b.goal_radius, out)

    def success(mod):
        out = np.zeros(n, dtype=bool)
        return lambda: mod.success_batch(b.obj, b.carried, b.gripper_open, b.goal, b.goal_radius, out)

    def bfs(mod):
        dist = np.zeros(occ.shape, dtype=np.int64)
        return lambda: mod.bfs_grid(occ, 7, 7, dist)

    def gae(mod):
        out = np.zeros((T, n))
        return lambda: mod.gae(r, v, d, last, 0.99, 0.95, out)

    return {"step_batch": step, "render_batch": render, "success_batch": success, "bfs_grid": bfs, "gae": gae}


def run(n_envs: int, repeat: int) -> list[dict]:
    backends = {"python": kernels.get_backend("python")}
    try:
        backends["cython"] = kernels.get_backend("cython")
    except ImportError:
        print("compiled extension not built; timing the fallback only", file=sys.stderr)
    rows = []
    for name, make in _workloads(n_envs).items():
        row = {"kernel": name, "envs": n_envs}
        for label, mod in backends.items():
            fn = make(mod)
            number = max(1, int(0.05 / max(timeit.timeit(fn, number=1), 1e-7)))
            row[f"{label}_us"] = min(timeit.repeat(fn, number=number, repeat=repeat)) / number * 1e6
        if "cython_us" in row:
            row["speedup"] = row["python_us"] / row["cython_us"]
        rows.append(row)
    return rows


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--envs", type=int, default=64)
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--json", help="also write the rows to this file")
    args = p.parse_args(argv)
    rows = run(args.envs, args.repeat)
    print(f"{'kernel':<14}{'python us':>12}{'cython us':>12}{'speed-up':>10}")
    for r in rows:
        tail = "" if "cython_us" not in r else f"{r['cython_us']:>12.1f}{r['speedup']:>9.1f}x"
        print(f"{r['kernel']:<14}{r['python_us']:>12.1f}{tail}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
