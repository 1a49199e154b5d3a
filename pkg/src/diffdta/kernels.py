"""Hot numeric inner loops, with numba-jitted and pure-numpy twins.

Backend selection happens once at import time via the ``DIFFDTA_NUMBA``
environment variable:

* ``auto`` (default) -- use numba when it imports, else fall back to numpy
* ``1`` / ``true``   -- require numba, raise if it is unavailable
* ``0`` / ``false``  -- force the pure-numpy path

Both twins of a kernel execute the same floating-point operations in the
same order, so results agree bit for bit; ``benchmarks/bench_kernels.py``
times one against the other.
"""

import os

import numpy as np

_MODE = os.environ.get("DIFFDTA_NUMBA", "auto").strip().lower()
if _MODE in ("1", "true", "yes", "on"):
    _WANT_NUMBA = True
    _REQUIRE_NUMBA = True
elif _MODE in ("0", "false", "no", "off"):
    _WANT_NUMBA = False
    _REQUIRE_NUMBA = False
else:
    _WANT_NUMBA = True
    _REQUIRE_NUMBA = False

_njit = None
_prange = range
if _WANT_NUMBA:
    try:
        from numba import njit as _njit
        from numba import prange as _prange
    except ImportError:
        if _REQUIRE_NUMBA:
            raise
        _njit = None
        _prange = range

BACKEND = "numba" if _njit is not None else "numpy"


# ---------------------------------------------------------------------------
# numpy twins
# ---------------------------------------------------------------------------

def scatter_add_rows_numpy(out, idx, rows):
    """out[idx[i]] += rows[i] for every i, duplicates accumulated."""
    np.add.at(out, idx, rows)


def adam_update_numpy(value, grad, m, v, lr, beta1, beta2, eps, bc1, bc2):
    """One in-place Adam update on flat arrays; bc1/bc2 are the bias terms."""
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * (grad * grad)
    value -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


def ci_pair_stats_numpy(y, f):
    """Counts over ordered pairs with y_i > y_j.

    Returns (wins, ties, comparable): predictions strictly ordered the same
    way, predictions exactly tied, and the number of comparable pairs.
    Row-chunked so the n^2 comparison masks stay within a fixed budget.
    """
    n = y.shape[0]
    wins = 0
    ties = 0
    comparable = 0
    chunk = max(1, 10_000_000 // max(n, 1))
    for start in range(0, n, chunk):
        yc = y[start:start + chunk]
        fc = f[start:start + chunk]
        cmp_mask = yc[:, None] > y[None, :]
        fd = fc[:, None] - f[None, :]
        comparable += int(cmp_mask.sum())
        wins += int((cmp_mask & (fd > 0)).sum())
        ties += int((cmp_mask & (fd == 0)).sum())
    return wins, ties, comparable


# ---------------------------------------------------------------------------
# numba twins
# ---------------------------------------------------------------------------

if _njit is not None:

    @_njit(cache=True)
    def _scatter_add_rows_nb(out, idx, rows):
        for i in range(idx.shape[0]):
            r = idx[i]
            for j in range(rows.shape[1]):
                out[r, j] += rows[i, j]

    @_njit(cache=True, parallel=True)
    def _adam_update_nb(value, grad, m, v, lr, beta1, beta2, eps, bc1, bc2):
        # elementwise and race-free, so prange keeps results deterministic
        for i in _prange(value.shape[0]):
            m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i]
            v[i] = beta2 * v[i] + (1.0 - beta2) * (grad[i] * grad[i])
            value[i] -= lr * (m[i] / bc1) / (np.sqrt(v[i] / bc2) + eps)

    @_njit(cache=True)
    def _ci_pair_stats_nb(y, f):
        n = y.shape[0]
        wins = 0
        ties = 0
        comparable = 0
        for i in range(n):
            for j in range(n):
                if y[i] > y[j]:
                    comparable += 1
                    d = f[i] - f[j]
                    if d > 0.0:
                        wins += 1
                    elif d == 0.0:
                        ties += 1
        return wins, ties, comparable

    def scatter_add_rows_numba(out, idx, rows):
        _scatter_add_rows_nb(out, np.ascontiguousarray(idx), np.ascontiguousarray(rows))

    def adam_update_numba(value, grad, m, v, lr, beta1, beta2, eps, bc1, bc2):
        _adam_update_nb(value, grad, m, v, lr, beta1, beta2, eps, bc1, bc2)

    def ci_pair_stats_numba(y, f):
        wins, ties, comparable = _ci_pair_stats_nb(
            np.ascontiguousarray(y), np.ascontiguousarray(f)
        )
        return int(wins), int(ties), int(comparable)

    scatter_add_rows = scatter_add_rows_numba
    adam_update = adam_update_numba
    ci_pair_stats = ci_pair_stats_numba
else:
    scatter_add_rows = scatter_add_rows_numpy
    adam_update = adam_update_numpy
    ci_pair_stats = ci_pair_stats_numpy
