"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 20] [--csv out.csv]

Each case is timed with the best of ``--repeat`` runs after a warm-up call;
both backends are also checked to agree before timing.
"""

import argparse
import csv
import sys
import time

import numpy as np

from drolt import kernels

# (classes, samples, dim): training minibatches up to a full-dataset bank refresh
CASES = [(10, 64, 32), (10, 256, 32), (100, 256, 64), (10, 1237, 32)]


def make_case(n_classes, n, dim, seed=0):
    rng = np.random.default_rng(seed)
    z = rng.normal(size=(n, dim))
    y = np.arange(n) % n_classes
    mu = rng.normal(size=(n_classes, dim))
    eps = rng.uniform(0, 2, size=n_classes)
    w = 1.0 / np.bincount(y, minlength=n_classes)
    return z, y.astype(np.int64), mu, eps, w


def best_time(fn, repeat):
    fn()
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=20)
    p.add_argument("--csv", default=None, help="also write the table here")
    args = p.parse_args(argv)

    try:
        compiled = kernels.get_backend("cython")
    except ImportError:
        print("compiled extension is not built; run `pip install --no-build-isolation -e .`", file=sys.stderr)
        return 1
    py = kernels.get_backend("python")

    rows = []
    for c, n, d in CASES:
        z, y, mu, eps, w = make_case(c, n, d)
        calls = {
            "margin_loss+grad": lambda m: m.margin_loss(z, y, mu, eps, w, 1.0, True),
            "margin_loss": lambda m: m.margin_loss(z, y, mu, eps, w, 1.0, False),
            "pairwise_distances": lambda m: m.pairwise_distances(mu, z),
            "nearest_centroid": lambda m: m.nearest_centroid(mu, z),
        }
        for name, call in calls.items():
            a, b = call(py), call(compiled)
            if name.startswith("margin"):
                assert abs(a[0] - b[0]) <= 1e-10 * max(1.0, abs(a[0])), name
            else:
                np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)
            t_py = best_time(lambda: call(py), args.repeat)
            t_c = best_time(lambda: call(compiled), args.repeat)
            rows.append({"kernel": name, "classes": c, "samples": n, "dim": d,
                         "numpy_us": t_py * 1e6, "cython_us": t_c * 1e6, "speedup": t_py / t_c})

    print(f"{'kernel':<20}{'C':>5}{'n':>6}{'d':>5}{'numpy us':>12}{'cython us':>12}{'speedup':>9}")
    for r in rows:
        print(f"{r['kernel']:<20}{r['classes']:>5}{r['samples']:>6}{r['dim']:>5}"
              f"{r['numpy_us']:>12.1f}{r['cython_us']:>12.1f}{r['speedup']:>8.1f}x")
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
            w.writeheader()
            w.writerows(rows)
    return 0


if __name__ == "__main__":
    sys.exit(main())
