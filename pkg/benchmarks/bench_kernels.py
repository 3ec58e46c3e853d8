"""Compare the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5]
"""
import argparse
import timeit

import numpy as np

from gradmerge import _kernels_py
from gradmerge.cells import WindowLayout, partition_cells

try:
    from gradmerge import _kernels
except ImportError:
    _kernels = None


def cases(rng):
    values = rng.standard_normal((64, 64, 768))
    energy = rng.uniform(size=70 * 70)
    cells = np.array(partition_cells(70, 70, WindowLayout.local(14), 2, 2).cells, dtype=np.int64)
    return {
        "gradient_energy/central 64x64x768": lambda k: k.gradient_energy(values, k.CENTRAL),
        "gradient_energy/sobel 64x64x768": lambda k: k.gradient_energy(values, k.SOBEL),
        "cell_reduce/max 70x70, 2x2 cells": lambda k: k.cell_reduce(energy, cells, k.AGG_MAX, -1),
        "cell_reduce/mean 70x70, 2x2 cells": lambda k: k.cell_reduce(energy, cells, k.AGG_MEAN, -1),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    backends = {"python": _kernels_py}
    if _kernels is not None:
        backends["cython"] = _kernels
    else:
        print("compiled kernels unavailable; timing the fallback only")
    print(f"{'kernel':38s}" + "".join(f"{b:>12s}" for b in backends) + ("     speedup" if len(backends) > 1 else ""))
    for name, fn in cases(np.random.default_rng(0)).items():
        best = {b: min(timeit.repeat(lambda: fn(k), number=1, repeat=args.repeat)) for b, k in backends.items()}
        line = f"{name:38s}" + "".join(f"{best[b] * 1e3:10.2f}ms" for b in backends)
        if len(best) > 1:
            line += f"{best['python'] / best['cython']:11.1f}x"
        print(line)


if __name__ == "__main__":
    main()
