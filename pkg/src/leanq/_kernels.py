"""Compiled inner loops for the affine grid search.

The search enumerates every (t_min, t_max) range-shrink pair, scores the
weighted squared quantization error of the resulting scale/zero-point,
and keeps the best candidate. Scoring is a fresh left-to-right float64
accumulation per candidate, so a candidate's error is bit-identical no
matter how the t_min range is partitioned across workers; the strict
less-than comparison plus ascending iteration order implements the
lexicographic (t_min, t_max) tie-break.

The early break when a partial sum already exceeds the incumbent best is
selection-preserving: error terms are nonnegative, so an abandoned
candidate can only finish strictly worse.
"""

import numpy as np
from numba import njit


@njit(cache=True, nogil=True)
def search_affine_range(w, cw, maxq, wmin, wmax, t_half, t_steps, t_lo, t_hi):
    """Scan t_min in [t_lo, t_hi) x t_max in [0, t_half).

    Returns (best_err, best_t_min, best_t_max); t_min == -1 means no
    feasible candidate (possible only for a zero dynamic range).
    """
    rng = wmax - wmin
    n = w.shape[0]
    best_err = np.inf
    best_t_min = -1
    best_t_max = -1
    for t_min in range(t_lo, t_hi):
        lo = wmin + (t_min * rng) / t_steps
        for t_max in range(t_half):
            hi = wmax - (t_max * rng) / t_steps
            scale = (hi - lo) / maxq
            if scale <= 0.0:
                continue
            zero = -np.rint(lo / scale)
            if zero < 0.0:
                zero = 0.0
            elif zero > maxq:
                zero = maxq
            acc = 0.0
            for k in range(n):
                c = np.rint(w[k] / scale) + zero
                if c < 0.0:
                    c = 0.0
                elif c > maxq:
                    c = maxq
                d = (c - zero) * scale - w[k]
                acc += cw[k] * d * d
                if acc > best_err:
                    break
            if acc < best_err:
                best_err = acc
                best_t_min = t_min
                best_t_max = t_max
    return best_err, best_t_min, best_t_max


def warmup():
    """Force JIT compilation so timing-sensitive callers pay it up front."""
    w = np.array([0.0, 1.0])
    cw = np.array([1.0, 1.0])
    search_affine_range(w, cw, 3.0, 0.0, 1.0, 2, 4, 0, 2)
