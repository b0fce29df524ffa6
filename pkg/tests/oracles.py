"""Independent brute-force oracles used by the tests."""

import itertools

import numpy as np
from scipy.special import logsumexp


def alignment_costs(C):
    """Cost of every monotone alignment path through ``C``, by enumeration."""
    t1, t2 = C.shape
    out = []

    def walk(i, j, acc):
        acc = acc + C[i, j]
        if i == t1 - 1 and j == t2 - 1:
            out.append(acc)
            return
        if i + 1 < t1:
            walk(i + 1, j, acc)
        if j + 1 < t2:
            walk(i, j + 1, acc)
        if i + 1 < t1 and j + 1 < t2:
            walk(i + 1, j + 1, acc)

    walk(0, 0, 0.0)
    return np.asarray(out)


def brute_soft_dtw(x, y, gamma):
    C = (np.asarray(x, float)[:, None] - np.asarray(y, float)[None, :]) ** 2
    costs = alignment_costs(C)
    return float(-gamma * logsumexp(-costs / gamma))


def brute_exact_ot(M):
    """Exact transport cost between uniform measures of equal size: the best permutation."""
    n = M.shape[0]
    return min(sum(M[i, p[i]] for i in range(n)) for p in itertools.permutations(range(n))) / n
