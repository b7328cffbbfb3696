"""Hot inner loops: im2col / col2im for conv2d and Gaussian KDE grid evaluation.

Each kernel has a numba ``@njit`` implementation and a pure-numpy fallback.
The backend is picked at import time from the ``IHF_NUMBA`` environment
variable (``0``/``false``/``off`` selects numpy) and can be switched at
runtime with :func:`set_backend`.  Both paths produce identical results up
to float rounding of the KDE sum; the im2col/col2im paths are bit-identical.
"""

from __future__ import annotations

import os

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a hard dependency in practice
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]
        return lambda f: f


def _env_backend() -> str:
    flag = os.environ.get("IHF_NUMBA", "1").strip().lower()
    if flag in ("0", "false", "off", "no", "numpy") or not HAVE_NUMBA:
        return "numpy"
    return "numba"


_BACKEND = _env_backend()


def get_backend() -> str:
    return _BACKEND


def set_backend(name: str) -> str:
    """Select ``"numba"`` or ``"numpy"`` kernels; returns the previous backend."""
    global _BACKEND
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}; expected 'numba' or 'numpy'")
    if name == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba is not installed")
    prev, _BACKEND = _BACKEND, name
    return prev


# ---------------------------------------------------------------------------
# im2col / col2im
#
# Column layout: cols[(c, ki, kj), (n, i, j)] with shape (C*k*k, N*Ho*Wo),
# so that conv2d is a single GEMM  W(O, C*k*k) @ cols.
# ---------------------------------------------------------------------------


def _im2col_numpy(xp, k, stride, ho, wo):
    n, c = xp.shape[:2]
    cols = np.empty((c, k, k, n, ho, wo), dtype=xp.dtype)
    for ki in range(k):
        for kj in range(k):
            patch = xp[:, :, ki:ki + stride * ho:stride, kj:kj + stride * wo:stride]
            cols[:, ki, kj] = patch.transpose(1, 0, 2, 3)
    return cols.reshape(c * k * k, n * ho * wo)


def _col2im_numpy(cols, n, c, hp, wp, k, stride, ho, wo):
    cols = cols.reshape(c, k, k, n, ho, wo)
    xp = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    for ki in range(k):
        for kj in range(k):
            xp[:, :, ki:ki + stride * ho:stride, kj:kj + stride * wo:stride] += (
                cols[:, ki, kj].transpose(1, 0, 2, 3)
            )
    return xp


@njit(cache=True)
def _im2col_numba(xp, k, stride, ho, wo):
    n, c = xp.shape[0], xp.shape[1]
    cols = np.empty((c * k * k, n * ho * wo), dtype=xp.dtype)
    for ci in range(c):
        for ki in range(k):
            for kj in range(k):
                row = (ci * k + ki) * k + kj
                for ni in range(n):
                    base = ni * ho * wo
                    for i in range(ho):
                        src = i * stride + ki
                        for j in range(wo):
                            cols[row, base + i * wo + j] = xp[ni, ci, src, j * stride + kj]
    return cols


@njit(cache=True)
def _col2im_numba(cols, n, c, hp, wp, k, stride, ho, wo):
    xp = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    # (ki, kj) outermost so every output element accumulates in the same order
    # as the numpy path: bit-identical results.
    for ki in range(k):
        for kj in range(k):
            for ci in range(c):
                row = (ci * k + ki) * k + kj
                for ni in range(n):
                    base = ni * ho * wo
                    for i in range(ho):
                        dst = i * stride + ki
                        for j in range(wo):
                            xp[ni, ci, dst, j * stride + kj] += cols[row, base + i * wo + j]
    return xp


def im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Unfold a padded (N, C, Hp, Wp) array into (C*k*k, N*Ho*Wo) columns."""
    if _BACKEND == "numba":
        return _im2col_numba(np.ascontiguousarray(xp), k, stride, ho, wo)
    return _im2col_numpy(xp, k, stride, ho, wo)


def col2im(cols: np.ndarray, shape: tuple, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Adjoint of :func:`im2col`; ``shape`` is the padded (N, C, Hp, Wp) shape."""
    n, c, hp, wp = shape
    if _BACKEND == "numba":
        return _col2im_numba(np.ascontiguousarray(cols), n, c, hp, wp, k, stride, ho, wo)
    return _col2im_numpy(cols, n, c, hp, wp, k, stride, ho, wo)


# ---------------------------------------------------------------------------
# Gaussian KDE on a grid
# ---------------------------------------------------------------------------


def _kde_grid_numpy(samples, grid, h, chunk=2048):
    dens = np.zeros(grid.shape[0], dtype=np.float64)
    for s in range(0, samples.shape[0], chunk):
        u = (grid[:, None] - samples[None, s:s + chunk]) / h
        dens += np.exp(-0.5 * u * u).sum(axis=1)
    return dens / (samples.shape[0] * h * np.sqrt(2.0 * np.pi))


@njit(cache=True)
def _kde_grid_numba(samples, grid, h, cutoff):
    # samples must be sorted; terms beyond cutoff*h are below exp(-cutoff**2 / 2)
    m = samples.shape[0]
    g = grid.shape[0]
    dens = np.zeros(g, dtype=np.float64)
    norm = 1.0 / (m * h * np.sqrt(2.0 * np.pi))
    inv = 1.0 / h
    for gi in range(g):
        x = grid[gi]
        lo = np.searchsorted(samples, x - cutoff * h)
        hi = np.searchsorted(samples, x + cutoff * h)
        acc = 0.0
        for si in range(lo, hi):
            u = (x - samples[si]) * inv
            acc += np.exp(-0.5 * u * u)
        dens[gi] = acc * norm
    return dens


KDE_CUTOFF = 9.0


def kde_grid(samples: np.ndarray, grid: np.ndarray, h: float) -> np.ndarray:
    """Gaussian kernel density of ``samples`` with bandwidth ``h`` evaluated on ``grid``."""
    samples = np.ascontiguousarray(samples, dtype=np.float64)
    grid = np.ascontiguousarray(grid, dtype=np.float64)
    if _BACKEND == "numba":
        return _kde_grid_numba(np.sort(samples), grid, float(h), KDE_CUTOFF)
    return _kde_grid_numpy(samples, grid, float(h))
