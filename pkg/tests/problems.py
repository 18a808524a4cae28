"""Small problem builders shared by the tests."""

import numpy as np

from monodiff.core import ProblemSpec
from monodiff.operators import AffineOperator, L1Prox, QuadraticResolvent, ZeroOperator, ZeroProx


def quadratic(Q, part="B"):
    """min x^T Q x / 2 - theta^T x; x* = Q^{-1} theta."""
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    n = Q.shape[0]
    eig = np.linalg.eigvalsh(Q)
    if part == "B":
        return ProblemSpec(n, n, ZeroProx(n, n), AffineOperator(Q, C=-np.eye(n)), eig[0], eig[-1], "B")
    # same objective handled entirely by the backward step
    return ProblemSpec(n, n, QuadraticResolvent(Q, C=-np.eye(n), p=n), ZeroOperator(n, n), eig[0], 0.0, "A")


def lasso(lam=0.5, n=1):
    """min ||x - theta||^2 / 2 + lam ||x||_1; x* = soft(theta, lam)."""
    return ProblemSpec(n, n, L1Prox(n, n, lam), AffineOperator(np.eye(n), C=-np.eye(n)), 1.0, 1.0, "B")


def random_lasso(rng, n=4, p=3, lam=0.3):
    """min ||M x - C theta||^2 / 2 + lam ||x||_1 with M well conditioned."""
    M = rng.standard_normal((n + 2, n))
    Q = M.T @ M + 0.5 * np.eye(n)
    C = rng.standard_normal((n, p))
    eig = np.linalg.eigvalsh(Q)
    return ProblemSpec(n, p, L1Prox(n, p, lam), AffineOperator(Q, C=C), eig[0], eig[-1], "B")
