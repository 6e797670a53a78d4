"""Hot numeric kernels with a numba path and a pure-numpy path.

Both paths compute squared distances as ``dx*dx + dy*dy + dz*dz`` in that
order so that tie-breaking agrees bit-for-bit between them.
"""

import numpy as np

from ._accel import njit, resolve_backend

# --------------------------------------------------------------------------
# farthest point sampling


@njit
def _fps_numba(coords, m, seed):
    n = coords.shape[0]
    out = np.empty(m, dtype=np.int64)
    mind = np.full(n, np.inf)
    cur = seed
    for i in range(m):
        out[i] = cur
        cx = coords[cur, 0]
        cy = coords[cur, 1]
        cz = coords[cur, 2]
        best = -1.0
        best_j = 0
        for j in range(n):
            dx = coords[j, 0] - cx
            dy = coords[j, 1] - cy
            dz = coords[j, 2] - cz
            d = dx * dx + dy * dy + dz * dz
            if d < mind[j]:
                mind[j] = d
            if mind[j] > best:
                best = mind[j]
                best_j = j
        cur = best_j
    return out


def _fps_numpy(coords, m, seed):
    n = coords.shape[0]
    out = np.empty(m, dtype=np.int64)
    mind = np.full(n, np.inf)
    x, y, z = coords[:, 0], coords[:, 1], coords[:, 2]
    cur = seed
    for i in range(m):
        out[i] = cur
        dx = x - x[cur]
        dy = y - y[cur]
        dz = z - z[cur]
        np.minimum(mind, dx * dx + dy * dy + dz * dz, out=mind)
        cur = int(np.argmax(mind))
    return out


def fps_indices(coords, m, seed=0, backend=None):
    coords = np.ascontiguousarray(coords, dtype=np.float64)
    if resolve_backend(backend) == "numba":
        return _fps_numba(coords, int(m), int(seed))
    return _fps_numpy(coords, int(m), int(seed))


# --------------------------------------------------------------------------
# k nearest neighbours


@njit
def _knn_numba(coords, queries, k):
    n = coords.shape[0]
    m = queries.shape[0]
    out = np.empty((m, k), dtype=np.int64)
    bd = np.empty(k)
    bi = np.empty(k, dtype=np.int64)
    for q in range(m):
        qx = queries[q, 0]
        qy = queries[q, 1]
        qz = queries[q, 2]
        filled = 0
        for j in range(n):
            dx = coords[j, 0] - qx
            dy = coords[j, 1] - qy
            dz = coords[j, 2] - qz
            d = dx * dx + dy * dy + dz * dz
            if filled < k:
                pos = filled
                filled += 1
            elif d < bd[k - 1]:
                pos = k - 1
            else:
                continue
            # insert after any equal distances: earlier index wins ties
            while pos > 0 and bd[pos - 1] > d:
                bd[pos] = bd[pos - 1]
                bi[pos] = bi[pos - 1]
                pos -= 1
            bd[pos] = d
            bi[pos] = j
        for t in range(k):
            out[q, t] = bi[t]
    return out


def _knn_numpy(coords, queries, k):
    dx = queries[:, None, 0] - coords[None, :, 0]
    dy = queries[:, None, 1] - coords[None, :, 1]
    dz = queries[:, None, 2] - coords[None, :, 2]
    d = dx * dx + dy * dy + dz * dz
    # stable sort keeps the lower index first among equal distances
    return np.argsort(d, axis=1, kind="stable")[:, :k].astype(np.int64)


def knn_indices(coords, queries, k, backend=None):
    coords = np.ascontiguousarray(coords, dtype=np.float64)
    queries = np.ascontiguousarray(queries, dtype=np.float64)
    if resolve_backend(backend) == "numba":
        return _knn_numba(coords, queries, int(k))
    return _knn_numpy(coords, queries, int(k))


# --------------------------------------------------------------------------
# scatter-add (backward of row gathering)


@njit
def _scatter_add_numba(out, idx, src):
    d = src.shape[1]
    for r in range(idx.shape[0]):
        row = idx[r]
        for c in range(d):
            out[row, c] += src[r, c]
    return out


def _scatter_add_numpy(out, idx, src):
    np.add.at(out, idx, src)
    return out


def scatter_add_rows(n_rows, idx, src, backend=None):
    """Sum rows of ``src`` (R, d) into an (n_rows, d) zero array at ``idx`` (R,)."""
    idx = np.ascontiguousarray(idx, dtype=np.int64).ravel()
    src = np.ascontiguousarray(src).reshape(idx.shape[0], -1)
    out = np.zeros((n_rows, src.shape[1]), dtype=src.dtype)
    if resolve_backend(backend) == "numba":
        return _scatter_add_numba(out, idx, src)
    return _scatter_add_numpy(out, idx, src)
