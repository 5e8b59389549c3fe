"""Small helpers for tensor-product (Kronecker) linear algebra.

Vectors of coefficients are stored in colexicographic order: the first
spatial direction runs fastest, time runs slowest.  A coefficient vector of
length ``N_t * N_s`` therefore reshapes to ``(N_t, n_d, ..., n_1)`` in
C order.
"""

import numpy as np
import scipy.sparse as sp


def mode_apply(mat, tensor, axis):
    """Contract ``mat`` with ``tensor`` along ``axis``.

    Computes ``out[..., i, ...] = sum_j mat[i, j] * tensor[..., j, ...]``
    where the contracted index sits at position ``axis``.  ``mat`` may be
    dense or scipy sparse.
    """
    t = np.moveaxis(tensor, axis, 0)
    head = t.shape[0]
    rest = t.shape[1:]
    flat = t.reshape(head, -1)
    out = mat @ flat
    out = np.asarray(out).reshape((mat.shape[0],) + rest)
    return np.moveaxis(out, 0, axis)


def outer_product_grid(vectors):
    """Tensor (outer) product of 1D arrays, shaped ``(len(v0), len(v1), ...)``."""
    grid = np.asarray(vectors[0], dtype=float)
    for v in vectors[1:]:
        grid = np.multiply.outer(grid, np.asarray(v, dtype=float))
    return grid


def kron_chain(mats):
    """Kronecker product of a list of sparse matrices (first factor slowest)."""
    out = mats[0]
    for m in mats[1:]:
        out = sp.kron(out, m, format="csr")
    return sp.csr_matrix(out)


def two_factor_matvec(time_mat, space_mat, x, nt, ns):
    """Apply ``(time_mat kron space_mat)`` to ``x`` without forming the product.

    Uses the reshaping identity ``(B kron A) vec(X) = vec(A X B^T)`` adapted to
    the C-order layout ``X = x.reshape(nt, ns)``.
    """
    X = x.reshape(nt, ns)
    Y = time_mat @ X if time_mat is not None else X
    Y = np.asarray(Y)
    if space_mat is not None:
        Y = np.asarray((space_mat @ Y.T)).T
    return Y.reshape(-1)
