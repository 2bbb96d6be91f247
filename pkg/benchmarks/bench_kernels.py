"""Time the numba and numpy kernel backends on pipeline-sized inputs.

    python benchmarks/bench_kernels.py [--repeat 5]

The forward convolution is absent: both backends run it as the same BLAS
contraction.  Each kernel is warmed up once per backend (so numba compile time is not
counted), then timed as the best of ``--repeat`` runs.  Outputs of the two
backends are compared as a sanity check.
"""

import argparse
import time

import numpy as np

from vbiopsy import _accel, kernels


def best_of(fn, repeat):
    fn()
    best = float("inf")
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def cases(rng):
    x = rng.normal(size=(2, 8, 16, 16, 16))
    w = rng.normal(size=(16, 8, 3, 3, 3))
    g = rng.normal(size=(2, 16, 8, 8, 8))
    vol = rng.random((32, 32, 32))
    occ = (rng.random((32, 32, 32)) < 0.01).astype(np.float64)
    fg = rng.random((32, 32, 32)) < 0.6
    taps = np.exp(-0.5 * (np.arange(-6, 7) / 2.0) ** 2)
    taps /= taps.sum()
    return {
        "conv3d backward 2x8x16^3 -> 16": lambda: kernels.conv3d_fast_backward(x, w, g, 2, 1),
        "filter_axis 32^3 (13 taps) x3": lambda: [kernels.filter_axis(vol, taps, a) for a in range(3)],
        "dilate_l1 32^3 r=2": lambda: kernels.dilate_l1(occ, 2),
        "label6 32^3": lambda: kernels.label6(fg),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    results, outputs = {}, {}
    for use in (True, False):
        if use and not _accel.HAVE_NUMBA:
            continue
        prev = _accel.set_backend(use)
        name = _accel.backend_name()
        for label, fn in cases(np.random.default_rng(args.seed)).items():
            results[(label, name)] = best_of(fn, args.repeat)
            outputs[(label, name)] = fn()
        _accel.set_backend(prev)

    print(f"{'kernel':34s} {'numba ms':>10s} {'numpy ms':>10s} {'speedup':>8s}  agree")
    for label in cases(np.random.default_rng(args.seed)):
        tn = results.get((label, "numba"))
        tp = results[(label, "numpy")]
        if tn is None:
            print(f"{label:34s} {'-':>10s} {tp * 1e3:10.2f}")
            continue
        a, b = outputs[(label, "numba")], outputs[(label, "numpy")]
        if isinstance(a, tuple) or isinstance(a, list):
            agree = all(np.allclose(u, v, atol=1e-9) for u, v in zip(a, b) if u is not None)
        elif label.startswith("label6"):
            # component ids may differ between backends; compare the partition
            agree = len(np.unique(a)) == len(np.unique(b))
        else:
            agree = np.allclose(a, b, atol=1e-9)
        print(f"{label:34s} {tn * 1e3:10.2f} {tp * 1e3:10.2f} {tp / tn:7.1f}x  {agree}")


if __name__ == "__main__":
    main()
