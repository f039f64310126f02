"""Independently coded references shared by the test modules.

Everything here re-derives results with explicit loops and scalar formulas,
sharing no code with the package beyond numpy itself. The production code
is vectorized (k-d tree queries, batched gathers, einsum aggregation);
agreement between the two routes is what the tests certify.
"""

import math

import numpy as np


# -- neighbor selection -------------------------------------------------------


def brute_sorted_others(positions, q):
    """All points except q, sorted by (distance, index)."""
    d = np.linalg.norm(positions - positions[q], axis=1)
    idx = np.arange(len(positions))
    keep = idx != q
    idx, d = idx[keep], d[keep]
    order = np.lexsort((idx, d))
    return idx[order], d[order]


def brute_atrous(positions, q, K, D):
    """Sort-then-stride reference: ranks D, 2D, ..., K*D (1-indexed),
    cyclically repeating the sorted list when it is too short."""
    idx, d = brute_sorted_others(positions, q)
    need = K * D
    if idx.size < need:
        reps = -(-need // idx.size)
        idx = np.tile(idx, reps)[:need]
        d = np.tile(d, reps)[:need]
    sel = np.arange(D - 1, need, D)
    return idx[sel], d[sel]


# -- mean-field refinement ------------------------------------------------------


def ref_filters(positions, features, nbr, ta, tb, tg):
    n, k = nbr.shape
    B = np.zeros((n, k))
    S = np.zeros((n, k))
    for i in range(n):
        for a in range(k):
            j = nbr[i, a]
            dp = sum((positions[i, d] - positions[j, d]) ** 2 for d in range(3))
            df = sum((features[i, d] - features[j, d]) ** 2
                     for d in range(features.shape[1]))
            B[i, a] = math.exp(-dp / (2 * ta * ta) - df / (2 * tb * tb))
            S[i, a] = math.exp(-dp / (2 * tg * tg))
    return B, S


def ref_xcrf(U, positions, features, nbr, wb, ws, Wc, ta, tb, tg, r):
    """Straight transliteration of the r-iteration penalty loop."""
    n, c = U.shape
    B, S = ref_filters(positions, features, nbr, ta, tb, tg)
    G = wb * B + ws * S
    hollow = Wc * (1.0 - np.eye(c))
    u1 = U.copy()
    for _ in range(r):
        us = np.zeros_like(u1)
        for i in range(n):
            m = max(u1[i])
            e = [math.exp(u1[i, q] - m) for q in range(c)]
            z = sum(e)
            for q in range(c):
                us[i, q] = e[q] / z
        up = np.zeros_like(u1)
        for i in range(n):
            star = int(np.argmax(us[i]))          # ties to lowest index
            for q in range(c):
                acc = 0.0
                for a in range(nbr.shape[1]):
                    acc += G[i, a] * us[nbr[i, a], q]
                up[i, q] = acc * hollow[star, q]
        u1 = U - up
    return u1


def random_instance(rng, n=None, c=None, k=None, r=None):
    n = n if n is not None else int(rng.integers(4, 65))
    c = c if c is not None else int(rng.integers(2, 6))
    k = k if k is not None else int(rng.integers(1, min(8, n - 1) + 1))
    r = r if r is not None else int(rng.integers(0, 6))
    positions = rng.uniform(-5, 5, size=(n, 3))
    features = rng.normal(size=(n, 2))
    U = rng.normal(scale=2.0, size=(n, c))
    nbr = np.zeros((n, k), dtype=np.intp)
    for i in range(n):
        others = np.delete(np.arange(n), i)
        nbr[i] = rng.choice(others, size=k, replace=False)
    wb, ws = rng.normal(scale=1.5, size=2)
    Wc = rng.normal(size=(c, c)) * (1.0 - np.eye(c))
    ta, tb, tg = rng.uniform(0.3, 3.0, size=3)
    return U, positions, features, nbr, wb, ws, Wc, ta, tb, tg, r
