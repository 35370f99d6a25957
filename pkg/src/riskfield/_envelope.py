"""Numba kernels for envelope (profile) Cholesky storage.

Row ``i`` of the lower factor is stored densely for columns
``first[i] .. i`` at ``vals[rowptr[i] - first[i] + j]``.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def envelope_layout(n, indptr, indices):
    """Row starts of the envelope of a lower-triangular CSR pattern."""
    first = np.empty(n, dtype=np.int64)
    for i in range(n):
        f = i
        for p in range(indptr[i], indptr[i + 1]):
            j = indices[p]
            if j < f:
                f = j
        first[i] = f
    rowptr = np.empty(n + 1, dtype=np.int64)
    rowptr[0] = 0
    for i in range(n):
        rowptr[i + 1] = rowptr[i] + (i - first[i] + 1)
    return first, rowptr


@njit(cache=True)
def factorize(n, indptr, indices, data, first, rowptr, vals):
    """In-place envelope Cholesky. Returns -1 on success, else the failing row."""
    for t in range(vals.shape[0]):
        vals[t] = 0.0
    for i in range(n):
        bi = rowptr[i] - first[i]
        for p in range(indptr[i], indptr[i + 1]):
            vals[bi + indices[p]] += data[p]
        fi = first[i]
        for j in range(fi, i):
            bj = rowptr[j] - first[j]
            k0 = fi if fi > first[j] else first[j]
            s = vals[bi + j]
            for k in range(k0, j):
                s -= vals[bi + k] * vals[bj + k]
            vals[bi + j] = s / vals[bj + j]
        s = vals[bi + i]
        for k in range(fi, i):
            s -= vals[bi + k] * vals[bi + k]
        if not (s > 0.0):
            return i
        vals[bi + i] = np.sqrt(s)
    return -1


@njit(cache=True)
def forward(n, first, rowptr, vals, b):
    """Solve L y = b in place for b of shape (n, m)."""
    m = b.shape[1]
    for i in range(n):
        bi = rowptr[i] - first[i]
        for c in range(m):
            s = b[i, c]
            for k in range(first[i], i):
                s -= vals[bi + k] * b[k, c]
            b[i, c] = s / vals[bi + i]


@njit(cache=True)
def backward(n, first, rowptr, vals, b):
    """Solve L^T x = b in place for b of shape (n, m)."""
    m = b.shape[1]
    for i in range(n - 1, -1, -1):
        bi = rowptr[i] - first[i]
        d = vals[bi + i]
        for c in range(m):
            b[i, c] /= d
            xi = b[i, c]
            if xi != 0.0:
                for k in range(first[i], i):
                    b[k, c] -= vals[bi + k] * xi


@njit(cache=True)
def column_lists(n, first):
    """Rows k > j with first[k] <= j, grouped by column j (ascending)."""
    counts = np.zeros(n + 1, dtype=np.int64)
    for k in range(n):
        for j in range(first[k], k):
            counts[j + 1] += 1
    colptr = np.cumsum(counts)
    fill = colptr[:-1].copy()
    rows = np.empty(colptr[n], dtype=np.int64)
    for k in range(n):
        for j in range(first[k], k):
            rows[fill[j]] = k
            fill[j] += 1
    return colptr, rows


@njit(cache=True)
def selected_inverse(n, first, rowptr, vals, colptr, colrows):
    """Entries of Q^{-1} on the envelope (Takahashi recursion)."""
    S = np.zeros(vals.shape[0])
    for j in range(n - 1, -1, -1):
        ljj = vals[rowptr[j] - first[j] + j]
        c0 = colptr[j]
        c1 = colptr[j + 1]
        for a in range(c1 - 1, c0 - 1, -1):
            i = colrows[a]
            s = 0.0
            for b in range(c0, c1):
                k = colrows[b]
                lkj = vals[rowptr[k] - first[k] + j]
                if k >= i:
                    s += lkj * S[rowptr[k] - first[k] + i]
                else:
                    s += lkj * S[rowptr[i] - first[i] + k]
            S[rowptr[i] - first[i] + j] = -s / ljj
        s = 0.0
        for b in range(c0, c1):
            k = colrows[b]
            s += vals[rowptr[k] - first[k] + j] * S[rowptr[k] - first[k] + j]
        S[rowptr[j] - first[j] + j] = 1.0 / (ljj * ljj) - s / ljj
    return S


@njit(cache=True)
def envelope_coo(n, first, rowptr):
    """Row/column indices (lower triangle) of every envelope slot."""
    total = rowptr[n]
    r = np.empty(total, dtype=np.int64)
    c = np.empty(total, dtype=np.int64)
    for i in range(n):
        for j in range(first[i], i + 1):
            t = rowptr[i] - first[i] + j
            r[t] = i
            c[t] = j
    return r, c
