"""Compiled vs numpy kernels: wall time per call and agreement.

    python benchmarks/bench_kernels.py [--repeat 20]
"""

import argparse
import timeit

import numpy as np

from cpm import _kernels_py as py

try:
    from cpm import _kernels as compiled
except ImportError:
    compiled = None


def cases(rng):
    xi = rng.normal(scale=1.5, size=(2400, 6))  # one reverse step of 100 trials x 5 samples x 3 terms
    rot, trans = py.se3_exp(xi)
    small_xi = xi[:2]
    cloud_a = rng.normal(scale=0.05, size=(1200, 3))
    cloud_b = rng.normal(scale=0.05, size=(1200, 3)) + [0.2, 0.0, 0.0]
    return {
        "se3_exp n=2400": lambda k: k.se3_exp(xi),
        "se3_exp n=2": lambda k: k.se3_exp(small_xi),
        "se3_log n=2400": lambda k: k.se3_log(rot, trans, xi[:, :3]),
        "min_pair_distance 1200x1200": lambda k: k.min_pair_distance(cloud_a, cloud_b),
    }


def agree(a, b) -> float:
    if isinstance(a, tuple):
        return max(agree(x, y) for x, y in zip(a, b))
    return float(np.max(np.abs(np.asarray(a) - np.asarray(b))))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    if compiled is None:
        raise SystemExit("compiled extension not built; run: pip install -e . --no-build-isolation")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<30}{'numpy ms':>12}{'cython ms':>12}{'speedup':>10}{'max diff':>12}")
    for name, fn in cases(rng).items():
        t_py = min(timeit.repeat(lambda: fn(py), number=1, repeat=args.repeat)) * 1e3
        t_c = min(timeit.repeat(lambda: fn(compiled), number=1, repeat=args.repeat)) * 1e3
        diff = agree(fn(py), fn(compiled))
        print(f"{name:<30}{t_py:>12.3f}{t_c:>12.3f}{t_py / t_c:>9.1f}x{diff:>12.1e}")


if __name__ == "__main__":
    main()
