"""Time the numba and numpy projector backends on the desk and paper geometries.

    python benchmarks/bench_kernels.py [--repeat 3] [--scale desk|paper|both]

Each kernel is warmed up once (numba compiles on first call) and then timed
``--repeat`` times; the best wall time is reported along with the max
absolute difference between backends.
"""
import argparse
import time
import warnings

import numpy as np

from ctsdm import kernels
from ctsdm.geometry import FanBeamGeometry, back_project, fbp, fbp_adjoint, forward_project
from ctsdm.phantoms import shepp_logan

warnings.filterwarnings("ignore", message="The TBB threading layer")


def _best(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        start = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - start)
    return min(times), out


def bench(geom, repeat):
    img = shepp_logan(geom.image_size_px)
    sino = forward_project(img, geom, backend="numpy").values
    cases = {
        "forward_project": lambda b: forward_project(img, geom, backend=b).values,
        "back_project": lambda b: back_project(sino, geom, backend=b),
        "fbp": lambda b: fbp(sino, geom, backend=b),
        "fbp_adjoint": lambda b: fbp_adjoint(img, geom, backend=b),
    }
    backends = ["numpy"] + (["numba"] if kernels.numba_available() else [])
    rows = []
    for name, fn in cases.items():
        results = {b: _best(lambda: fn(b), repeat) for b in backends}
        diff = (
            float(np.max(np.abs(results["numba"][1] - results["numpy"][1])))
            if "numba" in results else float("nan")
        )
        rows.append((name, {b: t for b, (t, _) in results.items()}, diff))
    return rows


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--scale", choices=("desk", "paper", "both"), default="both")
    args = ap.parse_args()
    scales = {"desk": FanBeamGeometry.desk(), "paper": FanBeamGeometry()}
    names = ("desk", "paper") if args.scale == "both" else (args.scale,)
    print(f"{'scale':6} {'kernel':16} {'numpy s':>9} {'numba s':>9} {'speedup':>8} {'max diff':>9}")
    for scale in names:
        for name, t, diff in bench(scales[scale], args.repeat):
            nb = t.get("numba", float("nan"))
            print(f"{scale:6} {name:16} {t['numpy']:9.4f} {nb:9.4f} {t['numpy'] / nb:8.1f} {diff:9.1e}")


if __name__ == "__main__":
    main()
