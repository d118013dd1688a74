"""Time the compiled kernels against their numpy fallbacks.

Each backend runs in its own interpreter because the choice is made at
import time from ``FIELDSEG_DISABLE_NUMBA``. The numba timings exclude the
first (compiling) call.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--size 128] [--json out.json]
"""
from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
import time

WORKER = r"""
import json, sys, time
import numpy as np
from fieldseg import _accel, kernels
from fieldseg.synthland import domain_preset, generate_landscape
from fieldseg.geometry import rasterize_ids

size, repeat = int(sys.argv[1]), int(sys.argv[2])
rng = np.random.default_rng(0)
surface = rng.random((size, size))
markers = np.zeros((size, size), dtype=np.int64)
markers.ravel()[rng.choice(size * size, size // 2, replace=False)] = np.arange(1, size // 2 + 1)
ids = rng.integers(0, 6, (size, size))
cands = rng.uniform(0, size, (4 * size, 20, 2))
radii = rng.uniform(0.5, 2, 4 * size)
spec = domain_preset("target-small", extent_px=(size, size))
scene = generate_landscape(spec)

cases = {
    "priority_flood": lambda: kernels.priority_flood(surface, markers, None, kernels.DYNAMICS, 0.1),
    "interior_ring": lambda: kernels.interior_ring(ids, 2),
    "dart_throw": lambda: kernels.dart_throw(cands, radii, 1.0),
    "rasterize_ids": lambda: rasterize_ids(scene.polygons, scene.grid),
    "generate_landscape": lambda: generate_landscape(spec),
}
out = {"backend": _accel.backend(), "timings": {}}
for name, fn in cases.items():
    fn()  # warm-up, includes compilation for numba
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    out["timings"][name] = best
print(json.dumps(out))
"""


def run_backend(disable: bool, size: int, repeat: int) -> dict:
    env = dict(os.environ, FIELDSEG_DISABLE_NUMBA="1" if disable else "0")
    proc = subprocess.run([sys.executable, "-c", WORKER, str(size), str(repeat)], env=env,
                          capture_output=True, text=True, check=True)
    return json.loads(proc.stdout.strip().splitlines()[-1])


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--size", type=int, default=128, help="raster side length in pixels")
    ap.add_argument("--repeat", type=int, default=5, help="timed repetitions (best is reported)")
    ap.add_argument("--json", help="also write the results to this file")
    args = ap.parse_args(argv)

    fast = run_backend(False, args.size, args.repeat)
    slow = run_backend(True, args.size, args.repeat)
    if fast["backend"] != "numba":
        print("numba is not installed; both columns use the numpy fallback", file=sys.stderr)
    print(f"{'kernel':<20} {fast['backend'] + ' [ms]':>13} {'numpy [ms]':>12} {'speed-up':>9}")
    rows = {}
    for name, t_fast in fast["timings"].items():
        t_slow = slow["timings"][name]
        rows[name] = {"numba_s": t_fast, "numpy_s": t_slow, "speedup": t_slow / t_fast}
        print(f"{name:<20} {1e3 * t_fast:>13.2f} {1e3 * t_slow:>12.2f} {t_slow / t_fast:>8.1f}x")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump({"size": args.size, "repeat": args.repeat, "kernels": rows}, fh, indent=1, sort_keys=True)
    return 0


if __name__ == "__main__":
    sys.exit(main())
