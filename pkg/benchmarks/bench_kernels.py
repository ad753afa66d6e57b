"""Time every kernel on the numpy and numba backends.

    python benchmarks/bench_kernels.py [--repeat N]

Prints one row per kernel with the best-of-N wall time per call for each
backend and the speedup. Numba compile time is excluded by a warm-up call.
"""

from __future__ import annotations

import argparse
import timeit

import numpy as np

from fsdakit import kernels


def cases(rng):
    boxes = np.stack([rng.uniform(0, 600, 40), rng.uniform(0, 400, 40)], axis=1)
    boxes = np.concatenate([boxes, boxes + rng.uniform(5, 80, (40, 2))], axis=1)
    mask = kernels.NUMPY.fill_boxes(480, 640, boxes)
    img = rng.uniform(0, 255, (64, 64, 3))
    fmap = rng.normal(size=(64, 20, 20))
    ious = rng.random((200, 50))
    y = np.repeat(np.arange(6), 4)
    x = rng.normal(size=(len(y), 128))
    w = rng.normal(size=(6, 128))
    b = rng.normal(size=6)
    return {
        "fill_boxes": lambda k: k.fill_boxes(480, 640, boxes),
        "free_positions": lambda k: k.free_positions(mask, 48, 48, 8),
        "gaussian_blur": lambda k: k.gaussian_blur(img, 1.2),
        "bilinear_upsample": lambda k: k.bilinear_upsample(fmap, 16),
        "greedy_match": lambda k: k.greedy_match(ious, 0.5),
        "similarity_value": lambda k: k.similarity_value(x, y, False),
        "dissimilarity_value": lambda k: k.dissimilarity_value(x, y, 0.3),
        "classification_value": lambda k: k.classification_value(x, y, w, b),
    }


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    backends = [kernels.NUMPY] + ([kernels.NUMBA] if kernels.NUMBA is not None else [])
    rng = np.random.default_rng(0)
    header = f"{'kernel':<22}" + "".join(f"{b.name + ' us':>14}" for b in backends)
    print(header + (f"{'speedup':>10}" if len(backends) == 2 else ""))
    for name, fn in cases(rng).items():
        times = []
        for backend in backends:
            fn(backend)  # warm-up, includes jit compilation
            timer = timeit.Timer(lambda: fn(backend))
            number, _ = timer.autorange()
            times.append(min(timer.repeat(args.repeat, number)) / number * 1e6)
        row = f"{name:<22}" + "".join(f"{t:>14.1f}" for t in times)
        if len(times) == 2:
            row += f"{times[0] / times[1]:>9.1f}x"
        print(row)
    if kernels.NUMBA is None:
        print("numba not installed: numpy backend only")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
