"""Hot numeric kernels: nearest-codeword search and cluster accumulation.

Two interchangeable implementations exist for each kernel: a numba @njit
version and a pure-numpy fallback. Selection is controlled by the
CODEC_LM_BACKEND environment variable ("auto", "numba", "numpy"); "auto"
prefers numba when it imports. `benchmarks/bench_kernels.py` compares both.
"""

import os

import numpy as np

try:
    from numba import njit, prange

    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover - numba is a hard dep, but stay usable
    NUMBA_AVAILABLE = False

    def njit(*args, **kwargs):
        def decorator(func):
            return func

        return decorator

    def prange(*args):
        return range(*args)


_VALID_BACKENDS = ("auto", "numba", "numpy")


def _resolve(name: str) -> str:
    if name not in _VALID_BACKENDS:
        raise ValueError(f"unknown backend {name!r}, expected one of {_VALID_BACKENDS}")
    if name == "auto":
        return "numba" if NUMBA_AVAILABLE else "numpy"
    if name == "numba" and not NUMBA_AVAILABLE:
        raise ValueError("backend 'numba' requested but numba is not importable")
    return name


BACKEND = _resolve(os.environ.get("CODEC_LM_BACKEND", "auto"))


def select_backend(name: str) -> str:
    """Switch the active kernel backend; returns the resolved name."""
    global BACKEND
    BACKEND = _resolve(name)
    return BACKEND


@njit(parallel=True, fastmath=True, cache=True)
def _nearest_codeword_numba(frames, book, codes, resid):
    n, dim = frames.shape
    k = book.shape[0]
    for t in prange(n):
        best = 0
        best_d = np.inf
        for c in range(k):
            d = 0.0
            for j in range(dim):
                diff = frames[t, j] - book[c, j]
                d += diff * diff
            if d < best_d:  # strict: ties keep the smallest index
                best_d = d
                best = c
        codes[t] = best
        for j in range(dim):
            resid[t, j] = frames[t, j] - book[best, j]


def _nearest_codeword_numpy(frames, book, codes, resid):
    # ||r - c||^2 = ||r||^2 - 2 r.c + ||c||^2; argmin picks first occurrence
    d = (
        (frames * frames).sum(axis=1)[:, None]
        - 2.0 * frames @ book.T
        + (book * book).sum(axis=1)[None, :]
    )
    np.argmin(d, axis=1, out=codes)
    np.subtract(frames, book[codes], out=resid)


def nearest_codeword(frames: np.ndarray, book: np.ndarray):
    """Per row of `frames`, find the nearest row of `book` (L2, smallest-index
    ties) and the residual. Returns (codes, residuals)."""
    frames = np.ascontiguousarray(frames, dtype=np.float64)
    book = np.ascontiguousarray(book, dtype=np.float64)
    if frames.ndim != 2 or book.ndim != 2 or frames.shape[1] != book.shape[1]:
        raise ValueError(
            f"shape mismatch: frames {frames.shape} vs codebook {book.shape}"
        )
    codes = np.empty(frames.shape[0], dtype=np.int64)
    resid = np.empty_like(frames)
    if BACKEND == "numba":
        _nearest_codeword_numba(frames, book, codes, resid)
    else:
        _nearest_codeword_numpy(frames, book, codes, resid)
    return codes, resid


@njit(cache=True)
def _cluster_accumulate_numba(frames, codes, sums, counts):
    n, dim = frames.shape
    for t in range(n):
        c = codes[t]
        counts[c] += 1
        for j in range(dim):
            sums[c, j] += frames[t, j]


def _cluster_accumulate_numpy(frames, codes, sums, counts):
    np.add.at(sums, codes, frames)
    np.add.at(counts, codes, 1)


def cluster_accumulate(frames: np.ndarray, codes: np.ndarray, k: int):
    """Sum rows of `frames` by assigned cluster. Returns (sums (k,D), counts (k,))."""
    frames = np.ascontiguousarray(frames, dtype=np.float64)
    codes = np.ascontiguousarray(codes, dtype=np.int64)
    sums = np.zeros((k, frames.shape[1]), dtype=np.float64)
    counts = np.zeros(k, dtype=np.int64)
    if BACKEND == "numba":
        _cluster_accumulate_numba(frames, codes, sums, counts)
    else:
        _cluster_accumulate_numpy(frames, codes, sums, counts)
    return sums, counts
