"""Numeric inner loops for metrics and codebook statistics.

Every kernel has a numba-compiled version and a pure-numpy twin with the
same signature. Set ``CDFACE_DISABLE_NUMBA=1`` before import to force the
numpy path (also used automatically when numba is missing).
"""

import os

import numpy as np

_DISABLED = os.environ.get("CDFACE_DISABLE_NUMBA", "0").lower() in ("1", "true", "yes")

try:
    if _DISABLED:
        raise ImportError
    from numba import njit

    HAVE_NUMBA = True
except ImportError:
    HAVE_NUMBA = False


# --------------------------------------------------------------------------
# numpy implementations


def _pairwise_distances_np(flat):
    diff = flat[:, None, :] - flat[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def _vertex_errors_np(pred, gt):
    # pred, gt: T x V x 3 -> T x V
    return np.linalg.norm(pred - gt, axis=-1)


def _nearest_rows_np(z, tokens):
    d = ((z[:, None, :] - tokens[None, :, :]) ** 2).sum(-1)
    return d.argmin(axis=1)


# --------------------------------------------------------------------------
# numba implementations

if HAVE_NUMBA:

    @njit(cache=True)
    def _pairwise_distances_nb(flat):
        s, d = flat.shape
        out = np.zeros((s, s))
        for i in range(s):
            for j in range(i + 1, s):
                acc = 0.0
                for k in range(d):
                    diff = flat[i, k] - flat[j, k]
                    acc += diff * diff
                out[i, j] = np.sqrt(acc)
                out[j, i] = out[i, j]
        return out

    @njit(cache=True)
    def _vertex_errors_nb(pred, gt):
        t_len, v, _ = pred.shape
        out = np.empty((t_len, v))
        for t in range(t_len):
            for i in range(v):
                acc = 0.0
                for c in range(3):
                    diff = pred[t, i, c] - gt[t, i, c]
                    acc += diff * diff
                out[t, i] = np.sqrt(acc)
        return out

    @njit(cache=True)
    def _nearest_rows_nb(z, tokens):
        h, d = z.shape
        k = tokens.shape[0]
        out = np.empty(h, dtype=np.int64)
        for i in range(h):
            best = np.inf
            arg = 0
            for j in range(k):
                acc = 0.0
                for c in range(d):
                    diff = z[i, c] - tokens[j, c]
                    acc += diff * diff
                if acc < best:
                    best = acc
                    arg = j
            out[i] = arg
        return out

    pairwise_distances = _pairwise_distances_nb
    vertex_errors = _vertex_errors_nb
    nearest_rows = _nearest_rows_nb
else:
    pairwise_distances = _pairwise_distances_np
    vertex_errors = _vertex_errors_np
    nearest_rows = _nearest_rows_np


BACKEND = "numba" if HAVE_NUMBA else "numpy"

NUMPY_KERNELS = {
    "pairwise_distances": _pairwise_distances_np,
    "vertex_errors": _vertex_errors_np,
    "nearest_rows": _nearest_rows_np,
}

ACTIVE_KERNELS = {
    "pairwise_distances": pairwise_distances,
    "vertex_errors": vertex_errors,
    "nearest_rows": nearest_rows,
}
