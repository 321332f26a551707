"""Exhaustive nearest-row search used by residual matching and VQ lookup.

A compiled kernel handles the hot scan when the extension built; otherwise
a chunked pure-numpy path with identical semantics is used. Both compute
squared Euclidean distances with float64 accumulation and break ties by
the lowest row index. Set ``RFAD_NO_EXT=1`` to force the numpy path.
"""

from __future__ import annotations

import os

import numpy as np

from .errors import ContractError, DimensionError

try:
    if os.environ.get("RFAD_NO_EXT"):
        raise ImportError("extension disabled via RFAD_NO_EXT")
    from ._kernels import nearest_rows as _nearest_rows_compiled
except ImportError:  # pragma: no cover - depends on build environment
    _nearest_rows_compiled = None

HAVE_COMPILED_KERNEL = _nearest_rows_compiled is not None

# cap on temporary (chunk, rows, dim) float64 scratch, in elements
_CHUNK_BUDGET = 1 << 23


def nearest_rows_numpy(queries: np.ndarray, pool: np.ndarray) -> np.ndarray:
    """Pure-numpy reference scan; exact, chunked to bound memory."""
    nq, dim = queries.shape
    rows = pool.shape[0]
    out = np.empty(nq, dtype=np.int64)
    chunk = max(1, _CHUNK_BUDGET // max(rows * dim, 1))
    for start in range(0, nq, chunk):
        block = queries[start:start + chunk]
        diff = block[:, None, :] - pool[None, :, :]
        d2 = np.einsum("qrc,qrc->qr", diff, diff)
        out[start:start + chunk] = np.argmin(d2, axis=1)
    return out


def nearest_rows(queries: np.ndarray, pool: np.ndarray) -> np.ndarray:
    """Index of the nearest pool row for each query row.

    Euclidean metric, float64 accumulation, ties broken by lowest index.
    """
    queries = np.ascontiguousarray(queries, dtype=np.float64)
    pool = np.ascontiguousarray(pool, dtype=np.float64)
    if queries.ndim != 2 or pool.ndim != 2:
        raise DimensionError("queries and pool must be 2-D")
    if pool.shape[0] == 0:
        raise ContractError("pool must be non-empty")
    if queries.shape[1] != pool.shape[1]:
        raise DimensionError(
            f"query dim {queries.shape[1]} != pool dim {pool.shape[1]}")
    if _nearest_rows_compiled is not None:
        return np.asarray(_nearest_rows_compiled(queries, pool))
    return nearest_rows_numpy(queries, pool)
