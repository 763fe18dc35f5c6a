"""Compare the numba and numpy variants of the hot kernels.

    python benchmarks/bench_kernels.py [--repeat 20]

Each kernel is run once per mode before timing so numba compilation is
not counted. Results are best-of-``repeat`` wall times.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from scoredistill import _accel
from scoredistill.oracles import four_mode_mixture, optimal_x0
from scoredistill.render import VoxelRenderer
from scoredistill.render.fixtures import named_scene
from scoredistill.schedule import make_schedule
from scoredistill.views import CameraPose


def best_of(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases():
    sched = make_schedule(1000)
    mix = four_mode_mixture()
    x = np.random.default_rng(0).standard_normal((4096, 2)) * 2
    yield "mixture_posterior_x0 (4096 pts)", lambda: optimal_x0(x, 400, mix, sched)

    r = VoxelRenderer(grid=16, image_size=32)
    theta = named_scene(r, "asymmetric").values
    pose = CameraPose(30.0, 10.0)
    cot = np.random.default_rng(1).standard_normal(r.image_shape)
    yield "voxel forward (16^3, 32px)", lambda: r.render(theta, pose)
    yield "voxel backward (16^3, 32px)", lambda: r.vjp(theta, pose, cot)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)
    if not _accel.HAVE_NUMBA:
        print("numba is not installed; only the numpy path is available")
    print(f"{'kernel':34s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}")
    for name, fn in cases():
        with _accel.use_numba(False):
            slow = best_of(fn, args.repeat)
        with _accel.use_numba(True):
            fast = best_of(fn, args.repeat)
        print(f"{name:34s} {slow * 1e3:10.3f} {fast * 1e3:10.3f} {slow / fast:8.1f}x")


if __name__ == "__main__":
    main()
