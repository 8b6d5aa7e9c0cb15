"""Compiled inner loops for per-rating gradient updates.

The hot path is a numba kernel that walks one contiguous range of rating
triples and applies the update rule in place.  It releases the GIL, so
worker threads running on disjoint blocks get real parallelism, and batch
workers may point several lanes at the same staging buffers (racy,
last-writer-wins per component, by design).

Visit order: the range is cut into fixed-size windows; windows are visited
in a seeded random order, and each window is copied into a small scratch
buffer and shuffled in place before its updates run.  A single full-range
permutation would thrash the cache on multi-megabyte blocks (random reads
over the whole triple arrays), which would make per-element cost grow with
block size; the windowed order keeps the scratch resident in cache so
throughput stays flat across sizes while every epoch still sees a fresh
seeded ordering.
"""

import numpy as np
from numba import njit

# Visit-order window, in triples.  Scratch footprint is ~16 bytes per slot,
# so 4096 keeps the shuffle working set inside L2.
SHUFFLE_WINDOW = 4096

_U64 = np.uint64
_GOLDEN = _U64(0x9E3779B97F4A7C15)
_MIX_A = _U64(0xBF58476D1CE4E5B9)
_MIX_B = _U64(0x94D049BB133111EB)


def mix64(*parts: int) -> int:
    """Stable integer hash for deriving per-block order seeds.

    Pure integer arithmetic (splitmix64 steps), so the value is identical
    across runs and platforms, unlike Python's salted hash().  The result
    is clipped to 63 bits so it always fits a signed 64-bit kernel argument.
    """
    mask = 0xFFFFFFFFFFFFFFFF
    h = 0x6A09E667F3BCC909
    for p in parts:
        h = (h ^ (int(p) & mask)) & mask
        h = (h + 0x9E3779B97F4A7C15) & mask
        z = h
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & mask
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & mask
        h = z ^ (z >> 31)
    return h & 0x7FFFFFFFFFFFFFFF


@njit(cache=True, nogil=True, inline="always")
def _rand_step(state):
    state = state + _GOLDEN
    z = state
    z = (z ^ (z >> _U64(30))) * _MIX_A
    z = (z ^ (z >> _U64(27))) * _MIX_B
    z = z ^ (z >> _U64(31))
    return state, z


@njit(cache=True, nogil=True)
def sgd_range(user_f, item_f, rows, cols, vals, start, stop,
              lr, reg_user, reg_item, seed, row_base, col_base):
    """Apply one SGD pass over triples[start:stop] in a seeded shuffled order.

    user_f is indexed by rows[i] - row_base, item_f by cols[i] - col_base,
    so the same kernel serves both in-place updates on the shared factor
    matrices (bases 0) and updates against a staged sub-range copy.

    Both vector updates of one triple use the pre-update values of the
    other vector, so the step is order-independent within a triple.
    Returns the number of triples processed.
    """
    n = stop - start
    if n <= 0:
        return 0
    state = _U64(seed) ^ _U64(0xD1B54A32D192ED03)
    window = SHUFFLE_WINDOW
    n_windows = (n + window - 1) // window

    worder = np.empty(n_windows, np.int64)
    for i in range(n_windows):
        worder[i] = i
    for i in range(n_windows - 1, 0, -1):
        state, z = _rand_step(state)
        j = int(z % _U64(i + 1))
        t = worder[i]
        worder[i] = worder[j]
        worder[j] = t

    srow = np.empty(window, np.int64)
    scol = np.empty(window, np.int64)
    sval = np.empty(window, np.float64)
    k = user_f.shape[1]
    done = 0
    for w in range(n_windows):
        lo = start + worder[w] * window
        hi = lo + window
        if hi > stop:
            hi = stop
        span = hi - lo
        # Sequential first touch keeps the prefetcher busy; the shuffle and
        # the update loop then run against cache-resident scratch.
        for i in range(span):
            srow[i] = rows[lo + i] - row_base
            scol[i] = cols[lo + i] - col_base
            sval[i] = vals[lo + i]
        for i in range(span - 1, 0, -1):
            state, z = _rand_step(state)
            j = int(z % _U64(i + 1))
            t0 = srow[i]
            srow[i] = srow[j]
            srow[j] = t0
            t1 = scol[i]
            scol[i] = scol[j]
            scol[j] = t1
            t2 = sval[i]
            sval[i] = sval[j]
            sval[j] = t2
        for i in range(span):
            ui = srow[i]
            vi = scol[i]
            acc = 0.0
            for f in range(k):
                acc += user_f[ui, f] * item_f[vi, f]
            err = sval[i] - acc
            for f in range(k):
                pu = user_f[ui, f]
                qv = item_f[vi, f]
                user_f[ui, f] = pu + lr * (err * qv - reg_user * pu)
                item_f[vi, f] = qv + lr * (err * pu - reg_item * qv)
        done += span
    return done


def warmup(k: int = 8) -> None:
    """Force kernel compilation so first measured timings are clean."""
    user_f = np.zeros((2, k))
    item_f = np.zeros((2, k))
    rows = np.zeros(2, np.int32)
    cols = np.zeros(2, np.int32)
    vals = np.zeros(2, np.float64)
    sgd_range(user_f, item_f, rows, cols, vals, 0, 2, 0.0, 0.0, 0.0, 1, 0, 0)
