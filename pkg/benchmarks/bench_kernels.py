"""Compare the compiled bootstrap kernels with the numpy fallback.

Usage: python benchmarks/bench_kernels.py [--n 1000] [--k 6] [--B 999] [--repeat 5]

Both backends receive the same psi and index matrix; the script checks that
their outputs agree before reporting timings.
"""

from __future__ import annotations

import argparse
import sys
import timeit

import numpy as np

from megmm import _kernels_py, kernels


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=1000)
    ap.add_argument("--k", type=int, default=6, help="columns of psi, m*(p+1)")
    ap.add_argument("--B", type=int, default=999)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    try:
        from megmm import _kernels as compiled
    except ImportError:
        print("compiled extension not built; run `pip install -e . --no-build-isolation`", file=sys.stderr)
        return 1

    rng = np.random.default_rng(args.seed)
    psi = rng.standard_normal((args.n, args.k))
    idx = rng.integers(0, args.n, (args.B, args.n))

    for name in ("resampled_means", "resampled_cov"):
        a = getattr(kernels, name)(psi, idx, impl=compiled)
        b = getattr(kernels, name)(psi, idx, impl=_kernels_py)
        for x, y in zip(np.atleast_1d(a) if name == "resampled_means" else a,
                        np.atleast_1d(b) if name == "resampled_means" else b):
            np.testing.assert_allclose(x, y, rtol=1e-10, atol=1e-12)

    print(f"n={args.n} k={args.k} B={args.B} (best of {args.repeat})")
    print(f"{'kernel':<18}{'cython s':>12}{'numpy s':>12}{'speedup':>10}")
    for name in ("resampled_means", "resampled_cov", "centered_cov"):
        fn = getattr(kernels, name)
        call = (lambda impl: fn(psi, impl=impl)) if name == "centered_cov" else (lambda impl: fn(psi, idx, impl=impl))
        tc = min(timeit.repeat(lambda: call(compiled), number=1, repeat=args.repeat))
        tp = min(timeit.repeat(lambda: call(_kernels_py), number=1, repeat=args.repeat))
        print(f"{name:<18}{tc:>12.4g}{tp:>12.4g}{tp / tc:>10.3g}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
