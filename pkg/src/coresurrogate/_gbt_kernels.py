"""Compiled split scan for vector-leaf regression trees."""
from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def split_gains(X, Yc, order, min_samples_leaf):
    """SSE reduction of every admissible split of every feature.

    Args:
        X: (n, p) features. Yc: (n, m) node-centered targets.
        order: (p, n) per-feature ascending argsort of the node rows.

    Returns:
        (p, n - 1) gains; entry ``[f, k]`` splits after the ``k``-th smallest
        value of feature ``f``. Inadmissible positions (leaf too small or tied
        values) hold ``-inf``.
    """
    n, p = X.shape
    m = Yc.shape[1]
    total = np.zeros(m)
    for i in range(n):
        for j in range(m):
            total[j] += Yc[i, j]
    tt = 0.0
    for j in range(m):
        tt += total[j] * total[j]
    gains = np.full((p, n - 1), -np.inf)
    run = np.empty(m)
    for f in range(p):
        run[:] = 0.0
        cc = 0.0
        tc = 0.0
        for k in range(n - 1):
            row = order[f, k]
            yc_dot_run = 0.0
            yy = 0.0
            yt = 0.0
            for j in range(m):
                y = Yc[row, j]
                yc_dot_run += y * run[j]
                yy += y * y
                yt += y * total[j]
                run[j] += y
            cc += 2.0 * yc_dot_run + yy
            tc += yt
            nl = k + 1
            nr = n - nl
            if nl < min_samples_leaf or nr < min_samples_leaf:
                continue
            if not X[row, f] < X[order[f, k + 1], f]:
                continue
            gains[f, k] = cc / nl + (tt - 2.0 * tc + cc) / nr - tt / n
    return gains
