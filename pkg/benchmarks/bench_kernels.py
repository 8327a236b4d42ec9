"""Time the compiled element kernels against the NumPy fallback.

Usage: python benchmarks/bench_kernels.py [--divisions 8 16 32] [--repeat 5]
"""
import argparse
import time

import numpy as np

from deepbnd import fem, kernels
from deepbnd.micro import LatticeConfig, Microstructure, lhs_sample


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t)
    return min(times), out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--divisions", type=int, nargs="+", default=[8, 16, 32],
                    help="mesh divisions per lattice block")
    ap.add_argument("--order", type=int, default=1)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()

    if kernels.BACKEND != "cython":
        print("compiled kernels unavailable; only the NumPy backend can be timed")
    backends = ["python"] + (["cython"] if kernels.BACKEND == "cython" else [])
    lat = LatticeConfig()
    m = Microstructure.from_theta(lat, lhs_sample(1, lat.n_balls, 0).theta[0])
    print(f"{'kernel':<20}{'cells':>8}{'python [ms]':>14}{'cython [ms]':>14}{'speed-up':>10}")
    for d in args.divisions:
        mesh = fem.build_mesh(lat.n_side * d, args.order, (-0.5, 0.5, -0.5, 0.5))
        pts = mesh.quadrature_points.reshape(-1, 2)
        D = fem.material_tensor(mesh, m)
        h = lat.spacing
        cases = {
            "element_matrices": lambda b: kernels.element_matrices(
                mesh.nodes, mesh.cells, mesh.ref.dshape, mesh.ref.weights, D, backend=b),
            "inclusion_indicator": lambda b: kernels.inclusion_indicator(
                pts, -0.5, -0.5, h, lat.n_side, lat.n_side, m.centres, m.radii, lat.gamma,
                backend=b),
        }
        for name, fn in cases.items():
            res = {b: best_of(lambda: fn(b), args.repeat) for b in backends}
            tp = res["python"][0]
            if "cython" in res:
                tc = res["cython"][0]
                a, c = res["python"][1], res["cython"][1]
                a = a if isinstance(a, tuple) else (a,)
                c = c if isinstance(c, tuple) else (c,)
                diff = max(float(np.abs(x - y).max()) for x, y in zip(a, c))
                if diff > 1e-10:
                    raise SystemExit(f"backends disagree on {name}: {diff:.3e}")
                print(f"{name:<20}{mesh.cells.shape[0]:>8}{1e3 * tp:>14.2f}{1e3 * tc:>14.2f}{tp / tc:>10.1f}")
            else:
                print(f"{name:<20}{mesh.cells.shape[0]:>8}{1e3 * tp:>14.2f}{'-':>14}{'-':>10}")


if __name__ == "__main__":
    main()
