"""Compare numba and numpy kernel backends.

Usage: python benchmarks/bench_kernels.py [--repeats N]

Times im2col, col2im, a full conv2d forward/backward step and KDE grid
evaluation at training-scale shapes, and checks that both backends agree.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from ihf_harmony import _kernels
from ihf_harmony.tensor import Tape, Tensor, backward, conv2d


def _time(fn, repeats: int) -> float:
    fn()  # warm-up (numba compilation)
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def cases(rng):
    n, c, h, w, k, stride = 8, 16, 64, 64, 3, 1
    xp = rng.standard_normal((n, c, h + 2, w + 2)).astype(np.float32)
    ho, wo = h, w
    cols = rng.standard_normal((c * k * k, n * ho * wo)).astype(np.float32)
    x = Tensor(rng.standard_normal((n, c, h, w)).astype(np.float32), requires_grad=True)
    wt = Tensor(rng.standard_normal((32, c, k, k)).astype(np.float32) * 0.1, requires_grad=True)
    samples = rng.uniform(0, 1, 20000)
    grid = np.linspace(0.0, 1.0, 256)

    def conv_step():
        with Tape() as tape:
            loss = conv2d(x, wt, stride=1, padding=1).sum()
        return backward(tape, loss)[wt]

    return {
        "im2col": lambda: _kernels.im2col(xp, k, stride, ho, wo),
        "col2im": lambda: _kernels.col2im(cols, (n, c, h + 2, w + 2), k, stride, ho, wo),
        "conv2d fwd+bwd": conv_step,
        "kde 20k x 256": lambda: _kernels.kde_grid(samples, grid, 0.02),
    }


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeats", type=int, default=5)
    args = p.parse_args(argv)
    if not _kernels.HAVE_NUMBA:
        print("numba not installed; nothing to compare")
        return 1
    fns = cases(np.random.default_rng(0))
    prev = _kernels.get_backend()
    results = {}
    try:
        for backend in ("numpy", "numba"):
            _kernels.set_backend(backend)
            results[backend] = {}
            for name, fn in fns.items():
                results[backend][name] = (_time(fn, args.repeats), np.asarray(fn()))
    finally:
        _kernels.set_backend(prev)
    print(f"{'kernel':<16}{'numpy ms':>12}{'numba ms':>12}{'speedup':>10}{'max |diff|':>14}")
    for name in fns:
        tn, on = results["numpy"][name]
        tb, ob = results["numba"][name]
        diff = float(np.abs(on.astype(np.float64) - ob.astype(np.float64)).max())
        print(f"{name:<16}{tn * 1e3:>12.2f}{tb * 1e3:>12.2f}{tn / tb:>10.2f}{diff:>14.2e}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
