"""Compare the compiled and numpy kernel backends on pipeline-sized inputs.

    python3 benchmarks/bench_kernels.py [--repeat N]

Each kernel is timed on both backends with ``timeit``; outputs are checked
for agreement before timing.
"""
import argparse
import timeit

import numpy as np

from gridtopo import kernels


def cases(rng):
    lat = 32.9 + rng.uniform(0, 0.05, 1500)
    lon = -97.0 + rng.uniform(0, 0.05, 1500)
    tlat, tlon = lat[:100].copy(), lon[:100].copy()
    V = rng.normal(size=(40, 672))
    V[:, ::37] = np.nan
    x, y = rng.normal(size=(2, 672))
    X = rng.normal(size=(60, 674))
    C = X[:3].copy()
    return {
        "haversine 1500x100": lambda m: m.haversine_matrix(lat, lon, tlat, tlon),
        "pearson_matrix 40x672": lambda m: m.pearson_matrix(V, 96),
        "pearson_pair 672": lambda m: m.pearson_pair(V[0], V[1], 96),
        "hist_mi 672, 16 bins": lambda m: m.hist_mi(x, y, 16),
        "hist_entropy 672": lambda m: m.hist_entropy(x, 16),
        "lloyd_assign 60x674, k=3": lambda m: m.lloyd_assign(X, C),
    }


def _same(a, b):
    if isinstance(a, tuple):
        return all(_same(u, v) for u, v in zip(a, b))
    return np.allclose(a, b, rtol=1e-9, atol=1e-12, equal_nan=True)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    impls = kernels.backends()
    if "cython" not in impls:
        print("compiled backend not built; only the numpy fallback is available")
    names = sorted(impls)
    print(f"active backend: {kernels.BACKEND}")
    print(f"{'kernel':<26}" + "".join(f"{n + ' (us)':>16}" for n in names) + f"{'speedup':>10}")
    for label, fn in cases(np.random.default_rng(0)).items():
        outs = [fn(impls[n]) for n in names]
        if not all(_same(outs[0], o) for o in outs[1:]):
            raise SystemExit(f"{label}: backends disagree")
        best = {}
        for n in names:
            timer = timeit.Timer(lambda: fn(impls[n]))
            loops, _ = timer.autorange()
            best[n] = min(timer.repeat(args.repeat, loops)) / loops * 1e6
        ratio = best["python"] / best["cython"] if "cython" in best else float("nan")
        print(f"{label:<26}" + "".join(f"{best[n]:>16.1f}" for n in names) + f"{ratio:>9.1f}x")


if __name__ == "__main__":
    main()
