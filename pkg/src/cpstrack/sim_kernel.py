"""Dense similarity and reduction kernels.

The similarity of two vectors is *defined* as their float64 dot product
accumulated in ascending channel order, rounded once to float32. Products
of float32 values are exact in float64, so that definition is symmetric
(``S(a, b) == S(b, a).T`` bitwise) and independent of FMA contraction.

``cosine_similarity_matrix`` gets there fast: a BLAS float64 product is
taken first, its distance from the fixed-order sum is bounded by the
standard summation error bound, and every entry whose float32 rounding
is not certified by that bound is recomputed with the fixed-order loop.
Output therefore never depends on BLAS blocking or on thread count.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

import numba as nb
import numpy as np

from .errors import DimMismatch, EmptyMatrix

TILE = 64
_U = 2.0 ** -53


@nb.njit(nogil=True, cache=True)
def _fixed_order_entries(a, b, rows, cols, out):
    for t in range(rows.shape[0]):
        i = rows[t]
        j = cols[t]
        s = 0.0
        for k in range(a.shape[1]):
            s += np.float64(a[i, k]) * np.float64(b[j, k])
        out[i, j] = np.float32(s)


@nb.njit(nogil=True, cache=True)
def fixed_order_matrix(a, b):
    """Fixed-order kernel over every entry; the slow reference path."""
    n, m = a.shape[0], b.shape[0]
    out = np.empty((n, m), dtype=np.float32)
    for i in range(n):
        for j in range(m):
            s = 0.0
            for k in range(a.shape[1]):
                s += np.float64(a[i, k]) * np.float64(b[j, k])
            out[i, j] = np.float32(s)
    return out


def _as_matrix(x) -> np.ndarray:
    arr = np.asarray(getattr(x, "data", x), dtype=np.float32)
    if arr.ndim == 3:
        arr = arr.reshape(-1, arr.shape[-1])
    if arr.ndim != 2:
        raise DimMismatch(f"expected (n, d) vectors, got shape {arr.shape}")
    return np.ascontiguousarray(arr)


def default_workers() -> int:
    return max(1, min(8, os.cpu_count() or 1))


@nb.njit(nogil=True, cache=True)
def _certify(approx, a, b, na, nb_, r0, out):
    # each summation order is within gamma_d * sum|a_k b_k| <= gamma_d |a||b| of the exact sum
    c = 4.0 * (a.shape[1] + 2) * 2.0 ** -53
    d = a.shape[1]
    for ii in range(approx.shape[0]):
        i = r0 + ii
        for j in range(approx.shape[1]):
            x = approx[ii, j]
            slack = c * na[i] * nb_[j]
            lo = np.float32(x - slack)
            if lo == np.float32(x + slack):
                out[i, j] = lo
            else:
                s = 0.0
                for k in range(d):
                    s += np.float64(a[i, k]) * np.float64(b[j, k])
                out[i, j] = np.float32(s)


def _certified_rows(a, b, b64t, na, nb_, r0, r1, out):
    approx = a[r0:r1].astype(np.float64) @ b64t
    _certify(approx, a, b, na, nb_, r0, out)


def cosine_similarity_matrix(ref, cur, workers: int | None = None, tile: int = TILE) -> np.ndarray:
    """S[i, j] = <ref_i, cur_j> for unit vectors, as an (n, m) float32 array.

    ``ref`` and ``cur`` are (n, d) / (m, d) arrays or EmbeddingGrids.
    Rows are processed in blocks of ``tile * 4`` spread over ``workers``
    threads; the result is bitwise identical for any tile or worker count.
    """
    a = _as_matrix(ref)
    b = _as_matrix(cur)
    if a.shape[1] != b.shape[1]:
        raise DimMismatch(f"embedding dims differ: {a.shape[1]} vs {b.shape[1]}")
    n, m = a.shape[0], b.shape[0]
    out = np.empty((n, m), dtype=np.float32)
    if n == 0 or m == 0:
        return out
    b64t = np.ascontiguousarray(b.T, dtype=np.float64)
    na = np.linalg.norm(a.astype(np.float64), axis=1)
    nb_ = np.linalg.norm(b.astype(np.float64), axis=1)
    step = max(1, tile * 4)
    spans = [(r0, min(r0 + step, n)) for r0 in range(0, n, step)]
    workers = default_workers() if workers is None else max(1, int(workers))
    if workers == 1 or len(spans) == 1:
        for r0, r1 in spans:
            _certified_rows(a, b, b64t, na, nb_, r0, r1, out)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(lambda s: _certified_rows(a, b, b64t, na, nb_, s[0], s[1], out), spans))
    return out


def _check_nonempty(S) -> np.ndarray:
    S = np.asarray(S)
    if S.ndim != 2 or S.size == 0:
        raise EmptyMatrix(f"expected a non-empty 2-D matrix, got shape {S.shape}")
    return S


@nb.njit(nogil=True, cache=True)
def _argmax_both(S):
    n, m = S.shape
    rbest = np.zeros(n, dtype=np.int64)
    cbest = np.zeros(m, dtype=np.int64)
    cval = S[0].copy()
    for i in range(n):
        rv = S[i, 0]
        for j in range(m):
            v = S[i, j]
            if v > rv:
                rv = v
                rbest[i] = j
            if v > cval[j]:
                cval[j] = v
                cbest[j] = i
    return rbest, cbest


def row_argmax(S) -> np.ndarray:
    """Column index of the maximum of each row; ties go to the lowest index."""
    return np.argmax(_check_nonempty(S), axis=1)


def col_argmax(S) -> np.ndarray:
    """Row index of the maximum of each column; ties go to the lowest index."""
    return np.argmax(_check_nonempty(S), axis=0)


def argmax_both(S) -> tuple[np.ndarray, np.ndarray]:
    """``(row_argmax(S), col_argmax(S))`` in one pass over S."""
    S = _check_nonempty(S)
    if S.dtype not in (np.float32, np.float64):
        S = S.astype(np.float64)
    return _argmax_both(np.ascontiguousarray(S))


def pairwise_euclidean(points) -> np.ndarray:
    """Symmetric (k, k) Euclidean distance matrix of integer (row, col) points."""
    p = np.asarray(points, dtype=np.int64).reshape(-1, 2)
    diff = p[:, None, :] - p[None, :, :]
    return np.sqrt((diff * diff).sum(axis=-1).astype(np.float64))


def top_k_min(scores, k: int) -> list[int]:
    """Indices of the ``k`` smallest scores, ordered by (score, index)."""
    if k < 1:
        raise ValueError("k must be >= 1")
    s = np.asarray(scores, dtype=np.float64).ravel()
    order = np.lexsort((np.arange(s.size), s))
    return [int(i) for i in order[:k]]
