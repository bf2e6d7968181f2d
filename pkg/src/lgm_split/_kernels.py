"""Numba kernels for the up-looking sparse Cholesky factorization.

All matrices are CSC. The input to the factorization is the *upper* triangle
of the permuted matrix (row index <= column index in each column), which is
the lower triangle of the original stored by rows.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def etree(n, Cp, Ci):
    parent = np.full(n, -1, dtype=np.int64)
    ancestor = np.full(n, -1, dtype=np.int64)
    for k in range(n):
        for p in range(Cp[k], Cp[k + 1]):
            i = Ci[p]
            while i != -1 and i < k:
                inext = ancestor[i]
                ancestor[i] = k
                if inext == -1:
                    parent[i] = k
                i = inext
    return parent


@njit(cache=True)
def _ereach(Cp, Ci, k, parent, s, w):
    n = s.shape[0]
    top = n
    w[k] = k
    for p in range(Cp[k], Cp[k + 1]):
        i = Ci[p]
        if i > k:
            continue
        length = 0
        while w[i] != k:
            s[length] = i
            length += 1
            w[i] = k
            i = parent[i]
        while length > 0:
            top -= 1
            length -= 1
            s[top] = s[length]
    return top


@njit(cache=True)
def column_counts(n, Cp, Ci, parent):
    counts = np.ones(n, dtype=np.int64)
    s = np.empty(n, dtype=np.int64)
    w = np.full(n, -1, dtype=np.int64)
    for k in range(n):
        top = _ereach(Cp, Ci, k, parent, s, w)
        for t in range(top, n):
            counts[s[t]] += 1
    return counts


@njit(cache=True)
def numeric_cholesky(n, Cp, Ci, Cx, parent, Lp, Li, Lx):
    """Fill ``Li``/``Lx``. Returns -1 on success, else the failing pivot."""
    c = Lp[:n].copy()
    x = np.zeros(n)
    s = np.empty(n, dtype=np.int64)
    w = np.full(n, -1, dtype=np.int64)
    for k in range(n):
        top = _ereach(Cp, Ci, k, parent, s, w)
        x[k] = 0.0
        for p in range(Cp[k], Cp[k + 1]):
            if Ci[p] <= k:
                x[Ci[p]] = Cx[p]
        d = x[k]
        x[k] = 0.0
        for t in range(top, n):
            i = s[t]
            lki = x[i] / Lx[Lp[i]]
            x[i] = 0.0
            for p in range(Lp[i] + 1, c[i]):
                x[Li[p]] -= Lx[p] * lki
            d -= lki * lki
            p = c[i]
            c[i] += 1
            Li[p] = k
            Lx[p] = lki
        if not d > 1e-300:
            Lx[Lp[k]] = d
            return k
        p = c[k]
        c[k] += 1
        Li[p] = k
        Lx[p] = np.sqrt(d)
    return -1


@njit(cache=True)
def lsolve(n, Lp, Li, Lx, x):
    for j in range(n):
        x[j] /= Lx[Lp[j]]
        for p in range(Lp[j] + 1, Lp[j + 1]):
            x[Li[p]] -= Lx[p] * x[j]


@njit(cache=True)
def ltsolve(n, Lp, Li, Lx, x):
    for j in range(n - 1, -1, -1):
        for p in range(Lp[j] + 1, Lp[j + 1]):
            x[j] -= Lx[p] * x[Li[p]]
        x[j] /= Lx[Lp[j]]


@njit(cache=True)
def ltsolve_many(n, Lp, Li, Lx, X):
    for j in range(n - 1, -1, -1):
        for p in range(Lp[j] + 1, Lp[j + 1]):
            r = Li[p]
            for m in range(X.shape[1]):
                X[j, m] -= Lx[p] * X[r, m]
        d = Lx[Lp[j]]
        for m in range(X.shape[1]):
            X[j, m] /= d
