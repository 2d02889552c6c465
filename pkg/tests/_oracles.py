"""Reference computations written independently of the package."""

import itertools
import math

import numpy as np


def monotone_rearrangement(x, a, y, b, p):
    """W_p^p between 1-d measures by integrating the quantile functions."""
    ix, iy = np.argsort(x, kind="stable"), np.argsort(y, kind="stable")
    x, a, y, b = np.asarray(x)[ix], np.asarray(a)[ix], np.asarray(y)[iy], np.asarray(b)[iy]
    ca, cb = np.cumsum(a), np.cumsum(b)
    ca[-1] = cb[-1] = 1.0
    cuts = np.unique(np.concatenate([[0.0], ca, cb]))
    total = 0.0
    for lo, hi in zip(cuts[:-1], cuts[1:]):
        mid = 0.5 * (lo + hi)
        i = min(int(np.searchsorted(ca, mid)), len(x) - 1)
        j = min(int(np.searchsorted(cb, mid)), len(y) - 1)
        total += (hi - lo) * abs(x[i] - y[j]) ** p
    return total


def lagrangian_min(blocks, w, thetas, theta0, M):
    """Minimize the Lagrangian by enumerating selections and vertex couplings.

    For a fixed selection the Lagrangian separates over candidates, and for
    a selected candidate each client's coupling column is a vertex of the
    simplex (all mass on one particle), so enumerating the particle per
    client and candidate covers every vertex.
    """
    K = blocks[0].shape[1]
    col_best = []
    for k in range(K):
        best_k = math.inf
        for choice in itertools.product(*[range(b.shape[0]) for b in blocks]):
            c = sum(ws * b[i, k] - th[i] for ws, b, th, i in zip(w, blocks, thetas, choice))
            best_k = min(best_k, c)
        col_best.append(best_k)
    mass_term = sum(float(np.sum(th)) / len(th) for th in thetas)
    best = math.inf
    for gamma in itertools.product((0, 1), repeat=K):
        value = theta0 * (sum(gamma) - M) + sum(gamma) * mass_term
        value += sum(cb for g, cb in zip(gamma, col_best) if g)
        best = min(best, value)
    return best
