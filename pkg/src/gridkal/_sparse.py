"""Sparse LU with a fast path for many right-hand sides.

SuperLU solves multi-column right-hand sides one column at a time; the
covariance recursion needs thousands of columns per step, so the factors
are reused in row-major blocked triangular sweeps compiled with numba.
"""
from __future__ import annotations

import numba
import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

_BLOCK = 256
_MANY = 16


@numba.njit(cache=True)
def _lower_unit(indptr, indices, data, X):
    n = X.shape[0]
    for i in range(n):
        row = X[i]
        for k in range(indptr[i], indptr[i + 1]):
            j = indices[k]
            if j < i:
                row -= data[k] * X[j]


@numba.njit(cache=True)
def _upper(indptr, indices, data, X):
    n = X.shape[0]
    for i in range(n - 1, -1, -1):
        row = X[i]
        diag = 1.0
        for k in range(indptr[i], indptr[i + 1]):
            j = indices[k]
            if j > i:
                row -= data[k] * X[j]
            elif j == i:
                diag = data[k]
        row /= diag


class SparseLU:
    """LU factorisation of a square sparse matrix; ``solve`` accepts 1-D or 2-D input."""

    def __init__(self, M):
        M = sp.csc_matrix(M)
        self.shape = M.shape
        self._lu = spla.splu(M, permc_spec="COLAMD")
        self._L = self._lu.L.tocsr()
        self._U = self._lu.U.tocsr()
        self._perm_r = self._lu.perm_r
        self._perm_c = self._lu.perm_c

    def solve(self, b: np.ndarray) -> np.ndarray:
        b = np.asarray(b, dtype=float)
        if b.ndim == 1 or b.shape[1] < _MANY:
            return self._lu.solve(b)
        n, m = b.shape
        y = np.empty_like(b)
        y[self._perm_r] = b
        z = np.empty_like(b)
        L, U = self._L, self._U
        for c0 in range(0, m, _BLOCK):
            blk = np.ascontiguousarray(y[:, c0:c0 + _BLOCK])
            _lower_unit(L.indptr, L.indices, L.data, blk)
            _upper(U.indptr, U.indices, U.data, blk)
            z[:, c0:c0 + _BLOCK] = blk
        return z[self._perm_c]
