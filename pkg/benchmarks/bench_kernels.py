"""Time the numba kernels against the numpy fallback on pipeline-sized inputs.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Shapes match what the default configuration feeds each kernel: a batch of
64-px patches through the first extractor stage, the RFTM's 32-channel convs,
a 128x128 dark-channel window of 15, and 600 pooled 32-d feature vectors.
"""

import argparse
import timeit

import numpy as np

from hdprior.kernels import get


def cases(rng):
    x0 = rng.random((16, 3, 64, 64))
    w0 = rng.normal(size=(16, 3, 3, 3))
    x1 = rng.random((16, 16, 16, 16))
    w1 = rng.normal(size=(32, 16, 3, 3))
    g1 = rng.normal(size=(16, 32, 16, 16))
    pooled = rng.random((16, 32, 32, 32))
    m = rng.random((128, 128))
    feats = rng.normal(size=(600, 32))
    return {
        "conv2d_forward 16x3x64x64": lambda k: k.conv2d_forward(x0, w0, np.zeros(16), 1, 1),
        "conv2d_backward 16x16x16x16": lambda k: k.conv2d_backward(x1, w1, g1, 1, 1),
        "maxpool2_forward 16x32x32x32": lambda k: k.maxpool2_forward(pooled),
        "min_filter2d 128x128 w15": lambda k: k.min_filter2d(m, 15),
        "sqdist 600x32": lambda k: k.sqdist(feats, feats),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    backends = {name: get(name) for name in ("numba", "numpy")}
    print(f"{'kernel':32s} {'numba ms':>10s} {'numpy ms':>10s} {'speedup':>8s}")
    for label, fn in cases(np.random.default_rng(0)).items():
        fn(backends["numba"])  # compile outside the timed region
        best = {name: min(timeit.repeat(lambda: fn(k), number=1, repeat=args.repeat)) * 1e3
                for name, k in backends.items()}
        print(f"{label:32s} {best['numba']:10.2f} {best['numpy']:10.2f} "
              f"{best['numpy'] / best['numba']:7.1f}x")


if __name__ == "__main__":
    main()
