"""Time the compiled kernels against the numpy fallback.

Shapes follow a default training step: batch 128, 16 features, a 32-unit
hidden layer, an 8-dimensional critic output and two strata.

    python3 benchmarks/bench_kernels.py [--repeat N]
"""

import argparse
import timeit

import numpy as np

from civdg import _backend


def cases(rng):
    B, p, h, C, M, K = 128, 16, 32, 2, 8, 2
    x, W, b = rng.normal(size=(B, p)), rng.normal(size=(h, p)), rng.normal(size=h)
    dout = rng.normal(size=(B, h))
    e, c = rng.normal(size=(B, C)), rng.normal(size=(B, M))
    d = rng.integers(0, K, B).astype(np.int64)
    Wc, u = rng.normal(size=(32, 16)), rng.normal(size=32)
    scores, labels = rng.random(4000), (rng.random(4000) < 0.3).astype(float)
    return {
        "affine_forward": lambda k: k.affine_forward(x, W, b),
        "affine_backward": lambda k: k.affine_backward(dout, x, W),
        "leaky_relu": lambda k: k.leaky_relu(dout, 0.01),
        "moment_matrix": lambda k: k.moment_matrix(e, c),
        "stratum_sums": lambda k: k.stratum_sums(c, d, K),
        "power_iteration": lambda k: k.power_iteration(Wc, u, 1),
        "auroc (n=4000)": lambda k: k.auroc(scores, labels),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--number", type=int, default=2000)
    args = ap.parse_args(argv)

    py = _backend.load("python")
    try:
        cy = _backend.load("cython")
    except ImportError:
        cy = None
        print("compiled kernels not built; timing the numpy fallback only")

    print(f"{'kernel':<18}{'python us':>12}{'cython us':>12}{'speedup':>10}")
    for name, fn in cases(np.random.default_rng(0)).items():
        number = args.number // 20 if name.startswith("auroc") else args.number
        t_py = min(timeit.repeat(lambda: fn(py), number=number, repeat=args.repeat)) / number * 1e6
        if cy is None:
            print(f"{name:<18}{t_py:>12.2f}")
            continue
        t_cy = min(timeit.repeat(lambda: fn(cy), number=number, repeat=args.repeat)) / number * 1e6
        print(f"{name:<18}{t_py:>12.2f}{t_cy:>12.2f}{t_py / t_cy:>9.2f}x")


if __name__ == "__main__":
    main()
