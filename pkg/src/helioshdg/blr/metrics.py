"""Accuracy indicators: componentwise backward error and condition estimate."""
from __future__ import annotations

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import LinearOperator, onenormest


def backward_error(A, x, b) -> float:
    """max_i |Ax - b|_i / (|A||x| + |b|)_i over all columns.

    Rows with zero numerator and zero denominator are skipped; a nonzero
    residual over a zero denominator gives ``inf``.
    """
    A = sp.csr_matrix(A)
    x = np.asarray(x)
    b = np.asarray(b)
    x2 = x.reshape(A.shape[1], -1)
    b2 = b.reshape(A.shape[0], -1)
    num = np.abs(A @ x2 - b2)
    den = abs(A) @ np.abs(x2) + np.abs(b2)
    zero = den == 0
    if np.any(zero & (num != 0)):
        return float("inf")
    ratio = np.divide(num, den, out=np.zeros_like(num), where=~zero)
    return float(ratio.max()) if ratio.size else 0.0


def condition_estimate(factors, A=None) -> float:
    """Infinity-norm condition number ||A||_inf ||A^-1||_inf.

    ||A^-1||_inf = ||A^-H||_1 is estimated with the Hager-Higham block
    1-norm estimator, applying A^-H and A^-1 through the existing factors.
    """
    from .factor import solve

    A = factors.matrix if A is None else sp.csr_matrix(A)
    n = A.shape[0]
    op = LinearOperator((n, n), dtype=complex,
                        matvec=lambda v: solve(factors, v, trans="C"),
                        rmatvec=lambda v: solve(factors, v, trans="N"),
                        matmat=lambda V: solve(factors, V, trans="C"),
                        rmatmat=lambda V: solve(factors, V, trans="N"))
    inv_norm = onenormest(op, t=2)
    anorm = float(abs(A).sum(axis=1).max())
    return float(anorm * inv_norm)
