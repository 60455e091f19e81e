"""Compiled vs pure-Python geometry kernels, plus whole-run timings.

    python3 benchmarks/bench_kernels.py [--repeat N] [--runs N]
"""

import argparse
import math
import time

import numpy as np

from leasesim import _pykernels, engine
from leasesim.geometry import build_model

try:
    from leasesim import _ckernels
except ImportError:
    _ckernels = None


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(rng):
    boxes = np.column_stack([rng.uniform(-2, 2, 8), rng.uniform(-2, 2, 8), rng.uniform(-math.pi, math.pi, 8),
                             np.full(8, 0.2125), np.full(8, 0.096)])
    angles = np.radians(np.arange(0.0, 360.0, 1.0))
    rects = np.array([[-2.25, -2.25, -0.6, -0.6], [0.6, 0.6, 2.25, 2.25]])
    pts = rng.uniform(-2, 2, (2000, 2))
    path = build_model({"layout": "four_way"}).path("eb_left")
    poly, cum = np.asarray(path.polyline, float), np.asarray(path.cum, float)
    return {
        "obb_overlap x 64": lambda k: [k.obb_overlap(tuple(a), tuple(b)) for a in boxes for b in boxes],
        "raycast_obbs 360 rays x 8 boxes": lambda k: k.raycast_obbs(0.0, 0.0, angles, boxes, 5.0),
        "segment_hits_rects x 200": lambda k: [k.segment_hits_rects(*p, 0.0, 0.0, rects) for p in pts[:200]],
        "points_in_rect 2000 points": lambda k: k.points_in_rect(pts, (-1.0, -1.0, 1.0, 1.0)),
        "project_polyline x 200": lambda k: [k.project_polyline(x, y, poly, cum) for x, y in pts[:200]],
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--runs", type=int, default=5, help="simulations per bundled scenario")
    args = ap.parse_args(argv)

    rng = np.random.default_rng(0)
    print(f"{'kernel':<34}{'python [ms]':>12}{'cython [ms]':>12}{'speed-up':>10}")
    for name, fn in cases(rng).items():
        py = best_of(lambda: fn(_pykernels), args.repeat) * 1e3
        if _ckernels is None:
            print(f"{name:<34}{py:>12.3f}{'-':>12}{'-':>10}")
            continue
        cy = best_of(lambda: fn(_ckernels), args.repeat) * 1e3
        print(f"{name:<34}{py:>12.3f}{cy:>12.3f}{py / cy:>9.1f}x")

    print()
    print(f"{'scenario':<14}{'runs':>6}{'mean [s]':>10}  backend={engine.kernels.BACKEND}")
    for name in engine.bundled_scenarios():
        t0 = time.perf_counter()
        for s in range(args.runs):
            engine.run(name, seed=s, trace=False)
        print(f"{name:<14}{args.runs:>6}{(time.perf_counter() - t0) / args.runs:>10.3f}")


if __name__ == "__main__":
    main()
