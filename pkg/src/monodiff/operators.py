"""Concrete monotone operators, resolvents and their joint Jacobians.

Two kinds of handles live here:

* prox/resolvent handles, called as ``R(theta, u, gamma)`` and returning
  ``(I + gamma A_theta)^{-1}(u)``;
* forward handles, called as ``B(theta, x)``.

Both have a ``jacobian`` method with the same signature that returns a
:class:`~monodiff.core.Selection` of the joint (theta, point) Clarke Jacobian.
At kinks the canonical selection is the one-sided limit with the smaller
slope, and every one-sided limit is listed in ``extremes``.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .core import (
    DimensionMismatch,
    NonPositiveModulus,
    Selection,
    SingularSystem,
    UnknownRegistryName,
    as_matrix,
    as_vector,
    block_diagonal_selection,
    frozen,
    op_norm,
    separable_selection,
)

DEFAULT_KINK_TOL = 1e-8


# --------------------------------------------------------------------------
# plain functions


def soft_threshold(v, level):
    """Prox of ``level * ||.||_1``: ``sign(v) * max(|v| - level, 0)``."""
    v = np.asarray(v, dtype=float)
    return np.sign(v) * np.maximum(np.abs(v) - level, 0.0)


def soft_threshold_jacobian(v, level, kink_tol: float = DEFAULT_KINK_TOL) -> Selection:
    """Joint Jacobian of ``(level, v) -> soft_threshold(v, level)``.

    ``d_theta`` is the ``n x 1`` derivative with respect to ``level``.
    """
    v = as_vector(v)
    a = np.abs(v)
    active = a > level + kink_tol
    kinked = np.abs(a - level) <= kink_tol
    d_level = np.where(active, -np.sign(v), 0.0)[:, None]
    diag = active.astype(float)
    kinks = [(i, ((np.zeros(1), 0.0), (np.array([-np.sign(v[i])]), 1.0)))
             for i in np.flatnonzero(kinked)]
    return separable_selection(d_level, diag, kinks)


def project_linf_ball(z, radius=1.0):
    """Componentwise ``sign(z) * min(radius, |z|)``."""
    z = np.asarray(z, dtype=float)
    return np.sign(z) * np.minimum(radius, np.abs(z))


def project_linf_ball_jacobian(z, radius=1.0, kink_tol: float = DEFAULT_KINK_TOL) -> Selection:
    """Joint Jacobian of ``(radius, z) -> project_linf_ball(z, radius)``."""
    z = as_vector(z)
    a = np.abs(z)
    inside = a < radius - kink_tol
    kinked = np.abs(a - radius) <= kink_tol
    d_radius = np.where(inside, 0.0, np.sign(z))[:, None]
    diag = inside.astype(float)
    kinks = [(i, ((np.array([np.sign(z[i])]), 0.0), (np.zeros(1), 1.0)))
             for i in np.flatnonzero(kinked)]
    return separable_selection(d_radius, diag, kinks)


def quadratic_resolvent(Q, b, gamma, u):
    """Resolvent of ``x -> Qx + b``: ``(I + gamma Q)^{-1}(u - gamma b)``."""
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    u = as_vector(u, Q.shape[0], "u")
    b = as_vector(b, Q.shape[0], "b")
    M = np.eye(Q.shape[0]) + gamma * Q
    try:
        return np.linalg.solve(M, u - gamma * b)
    except np.linalg.LinAlgError as exc:
        raise SingularSystem("I + gamma Q is singular; Q must be PSD and gamma > 0") from exc


def moreau_conjugate_prox(prox_g, gamma, y, theta=None):
    """``prox_{gamma g*}(y) = y - gamma prox_{g/gamma}(y/gamma)``."""
    y = as_vector(y)
    theta = np.zeros(prox_g.p) if theta is None else theta
    return y - gamma * prox_g(theta, y / gamma, 1.0 / gamma)


def forward_step(B, theta, x, gamma):
    """``x - gamma B_theta(x)``."""
    return np.asarray(x, dtype=float) - gamma * B(theta, x)


# --------------------------------------------------------------------------
# parametrized linear maps


class AffineMatrix:
    """Matrix-valued map ``theta -> base + sum_k theta_k coeffs[k]``."""

    def __init__(self, base, coeffs):
        base = np.atleast_2d(np.asarray(base, dtype=float))
        coeffs = np.asarray(coeffs, dtype=float)
        if coeffs.ndim != 3 or coeffs.shape[1:] != base.shape:
            raise DimensionMismatch(
                f"coefficients must have shape (p, {base.shape[0]}, {base.shape[1]}), got {coeffs.shape}")
        self.base = frozen(base)
        self.coeffs = frozen(coeffs)
        self._flat = frozen(coeffs.reshape(coeffs.shape[0], -1))

    @property
    def m(self) -> int:
        return self.base.shape[0]

    @property
    def n(self) -> int:
        return self.base.shape[1]

    @property
    def p(self) -> int:
        return self.coeffs.shape[0]

    def __call__(self, theta) -> np.ndarray:
        theta = as_vector(theta, self.p, "theta")
        return self.base + (theta @ self._flat).reshape(self.base.shape)

    @classmethod
    def constant(cls, K, p: int) -> "AffineMatrix":
        K = np.atleast_2d(np.asarray(K, dtype=float))
        return cls(K, np.zeros((p,) + K.shape))

    @classmethod
    def from_theta(cls, rows: int, cols: int) -> "AffineMatrix":
        """``K_theta = theta.reshape(rows, cols)`` (row-major)."""
        p = rows * cols
        return cls(np.zeros((rows, cols)), np.eye(p).reshape(p, rows, cols))


def _theta_matrix(C, n, p, default_identity=False):
    if C is None:
        if default_identity and n == p:
            return np.eye(n)
        return np.zeros((n, p))
    return as_matrix(C, (n, p), "C")


# --------------------------------------------------------------------------
# prox / resolvent handles


class ProxOperator:
    """Base class for resolvent handles ``(theta, u, gamma) -> prox_{gamma g_theta}(u)``.

    ``modulus`` is the strong convexity (strong monotonicity) constant of
    ``g_theta``; ``conjugate()`` returns the handle for ``prox_{s g_theta*}``.
    """

    n: int
    p: int
    modulus: float = 0.0
    kink_tol: float = DEFAULT_KINK_TOL

    def __call__(self, theta, u, gamma):
        raise NotImplementedError

    def jacobian(self, theta, u, gamma) -> Selection:
        raise NotImplementedError

    def value(self, theta, x) -> float:
        """``g_theta(x)`` (``inf`` outside the domain)."""
        raise NotImplementedError

    def conjugate(self) -> "ProxOperator":
        return MoreauConjugate(self)

    @property
    def has_explicit_conjugate(self) -> bool:
        return not isinstance(self.conjugate(), MoreauConjugate)


class ZeroProx(ProxOperator):
    """``g = 0``; the resolvent is the identity."""

    def __init__(self, n: int, p: int):
        self.n, self.p = n, p

    def __call__(self, theta, u, gamma):
        return np.array(u, dtype=float)

    def jacobian(self, theta, u, gamma):
        return Selection(np.zeros((self.n, self.p)), np.eye(self.n))

    def value(self, theta, x):
        return 0.0

    def conjugate(self):
        return OriginIndicator(self.n, self.p)


class OriginIndicator(ProxOperator):
    """Indicator of ``{0}``; its prox is the zero map."""

    def __init__(self, n: int, p: int):
        self.n, self.p = n, p

    def __call__(self, theta, u, gamma):
        return np.zeros(self.n)

    def jacobian(self, theta, u, gamma):
        return Selection(np.zeros((self.n, self.p)), np.zeros((self.n, self.n)))

    def value(self, theta, x):
        return 0.0 if not np.any(x) else np.inf

    def conjugate(self):
        return ZeroProx(self.n, self.p)


class L1Prox(ProxOperator):
    """``g_theta(x) = sum_i w_i |x_i|`` with ``w = weight * theta[theta_index]``
    when ``theta_index`` is given, else ``w = weight``."""

    def __init__(self, n: int, p: int, weight=1.0, theta_index: Optional[int] = None,
                 kink_tol: float = DEFAULT_KINK_TOL):
        self.n, self.p = n, p
        self.weight = frozen(np.broadcast_to(np.asarray(weight, dtype=float), (n,)))
        if np.any(self.weight < 0):
            raise NonPositiveModulus("l1 weights must be non-negative")
        self.theta_index = theta_index
        self.kink_tol = kink_tol

    def _weights(self, theta):
        if self.theta_index is None:
            return self.weight
        return self.weight * float(np.asarray(theta)[self.theta_index])

    def __call__(self, theta, u, gamma):
        return soft_threshold(u, gamma * self._weights(theta))

    def jacobian(self, theta, u, gamma):
        u = as_vector(u, self.n, "u")
        level = gamma * self._weights(theta)
        a = np.abs(u)
        active = a > level + self.kink_tol
        kinked = np.abs(a - level) <= self.kink_tol
        d_theta = np.zeros((self.n, self.p))
        active_rows = np.zeros((self.n, self.p))
        if self.theta_index is not None:
            active_rows[:, self.theta_index] = -gamma * self.weight * np.sign(u)
            d_theta[active] = active_rows[active]
        kinks = [(i, ((np.zeros(self.p), 0.0), (active_rows[i], 1.0))) for i in np.flatnonzero(kinked)]
        return separable_selection(d_theta, active.astype(float), kinks)

    def value(self, theta, x):
        return float(np.sum(self._weights(theta) * np.abs(x)))

    def conjugate(self):
        return LinfBallProjection(self.n, self.p, self.weight, self.theta_index, self.kink_tol)


class LinfBallProjection(ProxOperator):
    """Indicator of the box ``|x_i| <= r_i``; prox is the clamp, independent of gamma."""

    def __init__(self, n: int, p: int, radius=1.0, theta_index: Optional[int] = None,
                 kink_tol: float = DEFAULT_KINK_TOL):
        self.n, self.p = n, p
        self.radius = frozen(np.broadcast_to(np.asarray(radius, dtype=float), (n,)))
        self.theta_index = theta_index
        self.kink_tol = kink_tol

    def _radius(self, theta):
        if self.theta_index is None:
            return self.radius
        return self.radius * float(np.asarray(theta)[self.theta_index])

    def __call__(self, theta, u, gamma):
        return project_linf_ball(u, self._radius(theta))

    def jacobian(self, theta, u, gamma):
        u = as_vector(u, self.n, "u")
        r = self._radius(theta)
        a = np.abs(u)
        inside = a < r - self.kink_tol
        kinked = np.abs(a - r) <= self.kink_tol
        clamp_rows = np.zeros((self.n, self.p))
        if self.theta_index is not None:
            clamp_rows[:, self.theta_index] = self.radius * np.sign(u)
        d_theta = np.where(inside[:, None], 0.0, clamp_rows)
        kinks = [(i, ((clamp_rows[i], 0.0), (np.zeros(self.p), 1.0))) for i in np.flatnonzero(kinked)]
        return separable_selection(d_theta, inside.astype(float), kinks)

    def value(self, theta, x):
        return 0.0 if np.all(np.abs(x) <= self._radius(theta) + 1e-12) else np.inf

    def conjugate(self):
        return L1Prox(self.n, self.p, self.radius, self.theta_index, self.kink_tol)


class BoxProjection(ProxOperator):
    """Indicator of ``[lo, hi]`` (componentwise)."""

    def __init__(self, n: int, p: int, lo=-1.0, hi=1.0, kink_tol: float = DEFAULT_KINK_TOL):
        self.n, self.p = n, p
        self.lo = frozen(np.broadcast_to(np.asarray(lo, dtype=float), (n,)))
        self.hi = frozen(np.broadcast_to(np.asarray(hi, dtype=float), (n,)))
        if np.any(self.lo > self.hi):
            raise ValueError("box requires lo <= hi")
        self.kink_tol = kink_tol

    def __call__(self, theta, u, gamma):
        return np.clip(u, self.lo, self.hi)

    def jacobian(self, theta, u, gamma):
        u = as_vector(u, self.n, "u")
        inside = (u > self.lo + self.kink_tol) & (u < self.hi - self.kink_tol)
        kinked = (np.abs(u - self.lo) <= self.kink_tol) | (np.abs(u - self.hi) <= self.kink_tol)
        zero = np.zeros(self.p)
        kinks = [(i, ((zero, 0.0), (zero, 1.0))) for i in np.flatnonzero(kinked)]
        return separable_selection(np.zeros((self.n, self.p)), inside.astype(float), kinks)

    def value(self, theta, x):
        ok = np.all(x >= self.lo - 1e-12) and np.all(x <= self.hi + 1e-12)
        return 0.0 if ok else np.inf

    def conjugate(self):
        return BoxSupportProx(self.n, self.p, self.lo, self.hi, self.kink_tol)


class BoxSupportProx(ProxOperator):
    """Support function of ``[lo, hi]``: ``sum_i max(lo_i x_i, hi_i x_i)``."""

    def __init__(self, n: int, p: int, lo=-1.0, hi=1.0, kink_tol: float = DEFAULT_KINK_TOL):
        self.n, self.p = n, p
        self.lo = frozen(np.broadcast_to(np.asarray(lo, dtype=float), (n,)))
        self.hi = frozen(np.broadcast_to(np.asarray(hi, dtype=float), (n,)))
        self.kink_tol = kink_tol

    def __call__(self, theta, u, gamma):
        u = np.asarray(u, dtype=float)
        return np.where(u > gamma * self.hi, u - gamma * self.hi,
                        np.where(u < gamma * self.lo, u - gamma * self.lo, 0.0))

    def jacobian(self, theta, u, gamma):
        u = as_vector(u, self.n, "u")
        lo, hi = gamma * self.lo, gamma * self.hi
        outside = (u > hi + self.kink_tol) | (u < lo - self.kink_tol)
        kinked = (np.abs(u - lo) <= self.kink_tol) | (np.abs(u - hi) <= self.kink_tol)
        zero = np.zeros(self.p)
        kinks = [(i, ((zero, 0.0), (zero, 1.0))) for i in np.flatnonzero(kinked)]
        return separable_selection(np.zeros((self.n, self.p)), outside.astype(float), kinks)

    def value(self, theta, x):
        x = np.asarray(x, dtype=float)
        return float(np.sum(np.maximum(self.lo * x, self.hi * x)))

    def conjugate(self):
        return BoxProjection(self.n, self.p, self.lo, self.hi, self.kink_tol)


class SquaredNorm(ProxOperator):
    """``g_theta(x) = weight/2 ||x - C theta - c||^2`` plus an optional box indicator.

    The box keeps the prox closed form because everything is separable.
    """

    def __init__(self, n: int, p: int, weight=1.0, C=None, c=None, lo=None, hi=None,
                 kink_tol: float = DEFAULT_KINK_TOL):
        if weight <= 0:
            raise NonPositiveModulus("squared_norm needs weight > 0")
        self.n, self.p = n, p
        self.weight = float(weight)
        self.C = frozen(_theta_matrix(C, n, p))
        self.c = frozen(np.zeros(n) if c is None else as_vector(c, n, "c"))
        self.boxed = lo is not None or hi is not None
        self.lo = frozen(np.broadcast_to(np.asarray(-np.inf if lo is None else lo, dtype=float), (n,)))
        self.hi = frozen(np.broadcast_to(np.asarray(np.inf if hi is None else hi, dtype=float), (n,)))
        self.modulus = self.weight
        self.kink_tol = kink_tol

    def _center(self, theta):
        return self.C @ as_vector(theta, self.p, "theta") + self.c

    def __call__(self, theta, u, gamma):
        gm = gamma * self.weight
        v = (np.asarray(u, dtype=float) + gm * self._center(theta)) / (1.0 + gm)
        return np.clip(v, self.lo, self.hi)

    def jacobian(self, theta, u, gamma):
        gm = gamma * self.weight
        s = 1.0 / (1.0 + gm)
        v = (as_vector(u, self.n, "u") + gm * self._center(theta)) * s
        inside = (v > self.lo + self.kink_tol) & (v < self.hi - self.kink_tol)
        kinked = (np.abs(v - self.lo) <= self.kink_tol) | (np.abs(v - self.hi) <= self.kink_tol)
        free_rows = gm * s * self.C
        d_theta = np.where(inside[:, None], free_rows, 0.0)
        kinks = [(i, ((np.zeros(self.p), 0.0), (free_rows[i], s))) for i in np.flatnonzero(kinked)]
        return separable_selection(d_theta, s * inside.astype(float), kinks)

    def value(self, theta, x):
        x = np.asarray(x, dtype=float)
        if np.any(x < self.lo - 1e-12) or np.any(x > self.hi + 1e-12):
            return np.inf
        return 0.5 * self.weight * float(np.sum((x - self._center(theta)) ** 2))

    def conjugate(self):
        if self.boxed:
            return MoreauConjugate(self)
        return SquaredNormConjugate(self.n, self.p, self.weight, self.C, self.c)


class SquaredNormConjugate(ProxOperator):
    """``g*(y) = ||y||^2 / (2 weight) + <C theta + c, y>``."""

    def __init__(self, n: int, p: int, weight=1.0, C=None, c=None):
        self.n, self.p = n, p
        self.weight = float(weight)
        self.C = frozen(_theta_matrix(C, n, p))
        self.c = frozen(np.zeros(n) if c is None else as_vector(c, n, "c"))
        self.modulus = 1.0 / self.weight

    def _shift(self, theta):
        return self.C @ as_vector(theta, self.p, "theta") + self.c

    def __call__(self, theta, u, gamma):
        mu = self.weight
        return mu * (np.asarray(u, dtype=float) - gamma * self._shift(theta)) / (mu + gamma)

    def jacobian(self, theta, u, gamma):
        mu = self.weight
        return Selection(-gamma * mu / (mu + gamma) * self.C, mu / (mu + gamma) * np.eye(self.n))

    def value(self, theta, x):
        x = np.asarray(x, dtype=float)
        return float(x @ x) / (2 * self.weight) + float(self._shift(theta) @ x)

    def conjugate(self):
        return SquaredNorm(self.n, self.p, self.weight, self.C, self.c)


def huber(t, delta):
    a = np.abs(t)
    return np.where(a <= delta, 0.5 * t * t, delta * a - 0.5 * delta * delta)


class HuberProx(ProxOperator):
    """``g_theta(x) = sum_i huber_delta(x_i - (C theta)_i)``."""

    def __init__(self, n: int, p: int, delta=1.0, C=None, kink_tol: float = DEFAULT_KINK_TOL):
        if delta <= 0:
            raise ValueError("huber needs delta > 0")
        self.n, self.p = n, p
        self.delta = float(delta)
        self.C = frozen(_theta_matrix(C, n, p))
        self.kink_tol = kink_tol

    def __call__(self, theta, u, gamma):
        m = self.C @ as_vector(theta, self.p, "theta")
        z = np.asarray(u, dtype=float) - m
        inner = np.abs(z) <= self.delta * (1 + gamma)
        out = np.where(inner, z / (1 + gamma), z - gamma * self.delta * np.sign(z))
        return m + out

    def jacobian(self, theta, u, gamma):
        m = self.C @ as_vector(theta, self.p, "theta")
        z = as_vector(u, self.n, "u") - m
        edge = self.delta * (1 + gamma)
        flat = 1.0 / (1 + gamma)
        outer = np.abs(z) > edge + self.kink_tol
        kinked = np.abs(np.abs(z) - edge) <= self.kink_tol
        diag = np.where(outer, 1.0, flat)
        d_theta = (1.0 - diag)[:, None] * self.C
        kinks = [(i, (((1 - flat) * self.C[i], flat), (np.zeros(self.p), 1.0)))
                 for i in np.flatnonzero(kinked)]
        return separable_selection(d_theta, diag, kinks)

    def value(self, theta, x):
        m = self.C @ as_vector(theta, self.p, "theta")
        return float(np.sum(huber(np.asarray(x, dtype=float) - m, self.delta)))

    def conjugate(self):
        return HuberConjugateProx(self.n, self.p, self.delta, self.C, self.kink_tol)


class HuberConjugateProx(ProxOperator):
    """``g*(y) = sum_i y_i^2/2 + indicator(|y_i| <= delta) + <C theta, y>``."""

    def __init__(self, n: int, p: int, delta=1.0, C=None, kink_tol: float = DEFAULT_KINK_TOL):
        self.n, self.p = n, p
        self.delta = float(delta)
        self.C = frozen(_theta_matrix(C, n, p))
        self.modulus = 1.0
        self.kink_tol = kink_tol

    def __call__(self, theta, u, gamma):
        m = self.C @ as_vector(theta, self.p, "theta")
        return np.clip((np.asarray(u, dtype=float) - gamma * m) / (1 + gamma), -self.delta, self.delta)

    def jacobian(self, theta, u, gamma):
        m = self.C @ as_vector(theta, self.p, "theta")
        v = (as_vector(u, self.n, "u") - gamma * m) / (1 + gamma)
        inside = np.abs(v) < self.delta - self.kink_tol
        kinked = np.abs(np.abs(v) - self.delta) <= self.kink_tol
        free_rows = -gamma / (1 + gamma) * self.C
        d_theta = np.where(inside[:, None], free_rows, 0.0)
        kinks = [(i, ((np.zeros(self.p), 0.0), (free_rows[i], 1.0 / (1 + gamma))))
                 for i in np.flatnonzero(kinked)]
        return separable_selection(d_theta, inside / (1.0 + gamma), kinks)

    def value(self, theta, x):
        x = np.asarray(x, dtype=float)
        if np.any(np.abs(x) > self.delta + 1e-12):
            return np.inf
        m = self.C @ as_vector(theta, self.p, "theta")
        return 0.5 * float(x @ x) + float(m @ x)

    def conjugate(self):
        return HuberProx(self.n, self.p, self.delta, self.C, self.kink_tol)


class QuadraticResolvent(ProxOperator):
    """Resolvent of the affine monotone map ``x -> Qx + b + C theta`` (Q symmetric PSD)."""

    def __init__(self, Q, b=None, C=None, p: int = 1):
        Q = np.atleast_2d(np.asarray(Q, dtype=float))
        if not np.allclose(Q, Q.T):
            raise ValueError("quadratic resolvent needs symmetric Q")
        eig = np.linalg.eigvalsh(Q)
        if eig[0] < -1e-12:
            raise ValueError("quadratic resolvent needs positive semidefinite Q")
        self.n, self.p = Q.shape[0], p
        self.Q = frozen(Q)
        self.b = frozen(np.zeros(self.n) if b is None else as_vector(b, self.n, "b"))
        self.C = frozen(_theta_matrix(C, self.n, p))
        self.modulus = max(0.0, float(eig[0]))

    def _shift(self, theta):
        return self.b + self.C @ as_vector(theta, self.p, "theta")

    def __call__(self, theta, u, gamma):
        return quadratic_resolvent(self.Q, self._shift(theta), gamma, u)

    def jacobian(self, theta, u, gamma):
        inv = np.linalg.inv(np.eye(self.n) + gamma * self.Q)
        return Selection(-gamma * inv @ self.C, inv)

    def value(self, theta, x):
        x = np.asarray(x, dtype=float)
        return 0.5 * float(x @ self.Q @ x) + float(self._shift(theta) @ x)

    def conjugate(self):
        if self.modulus <= 0:
            return MoreauConjugate(self)
        return QuadraticConjugateProx(self)


class QuadraticConjugateProx(ProxOperator):
    """Prox of ``g*(y) = (y - m)^T Q^{-1} (y - m) / 2`` with ``m = b + C theta``."""

    def __init__(self, primal: QuadraticResolvent):
        self.primal = primal
        self.n, self.p = primal.n, primal.p
        self.modulus = 1.0 / float(np.linalg.eigvalsh(primal.Q)[-1])

    def __call__(self, theta, u, gamma):
        Q = self.primal.Q
        m = self.primal._shift(theta)
        return np.linalg.solve(Q + gamma * np.eye(self.n), Q @ np.asarray(u, dtype=float) + gamma * m)

    def jacobian(self, theta, u, gamma):
        Q = self.primal.Q
        inv = np.linalg.inv(Q + gamma * np.eye(self.n))
        return Selection(gamma * inv @ self.primal.C, inv @ Q)

    def value(self, theta, x):
        d = np.asarray(x, dtype=float) - self.primal._shift(theta)
        return 0.5 * float(d @ np.linalg.solve(self.primal.Q, d))

    def conjugate(self):
        return self.primal


class MoreauConjugate(ProxOperator):
    """Prox of ``g*`` obtained from the prox of ``g`` by Moreau decomposition."""

    def __init__(self, base: ProxOperator):
        self.base = base
        self.n, self.p = base.n, base.p
        self.kink_tol = base.kink_tol

    def __call__(self, theta, u, gamma):
        u = np.asarray(u, dtype=float)
        return u - gamma * self.base(theta, u / gamma, 1.0 / gamma)

    def jacobian(self, theta, u, gamma):
        u = as_vector(u, self.n, "u")
        inner = self.base.jacobian(theta, u / gamma, 1.0 / gamma)
        eye = np.eye(self.n)

        def flip(dt, dx):
            return -gamma * dt, eye - dx

        extremes = tuple(flip(dt, dx) for dt, dx in inner.extremes)
        return Selection(*flip(inner.d_theta, inner.d_x), extremes)

    def conjugate(self):
        return self.base


class BlockDiagonalProx(ProxOperator):
    """Resolvent of ``diag(A_1, ..., A_k)`` acting on stacked blocks."""

    def __init__(self, parts: Sequence[ProxOperator]):
        ps = {part.p for part in parts}
        if len(ps) != 1:
            raise DimensionMismatch("all blocks must share the parameter dimension")
        self.parts = tuple(parts)
        self.sizes = tuple(part.n for part in parts)
        self.n = sum(self.sizes)
        self.p = ps.pop()
        self.modulus = min(part.modulus for part in parts)

    def _split(self, u):
        return np.split(np.asarray(u, dtype=float), np.cumsum(self.sizes)[:-1])

    def __call__(self, theta, u, gamma):
        return np.concatenate([part(theta, ui, gamma) for part, ui in zip(self.parts, self._split(u))])

    def jacobian(self, theta, u, gamma):
        sels = [part.jacobian(theta, ui, gamma) for part, ui in zip(self.parts, self._split(u))]
        return block_diagonal_selection(sels)

    def value(self, theta, x):
        return sum(part.value(theta, xi) for part, xi in zip(self.parts, self._split(x)))

    def conjugate(self):
        return BlockDiagonalProx([part.conjugate() for part in self.parts])


# --------------------------------------------------------------------------
# forward (single-valued, Lipschitz) handles


class ForwardOperator:
    """Base class for ``(theta, x) -> B_theta(x)``.

    ``lipschitz`` is a Lipschitz bound in ``x`` (``None`` if unknown),
    ``modulus`` the strong monotonicity constant.
    """

    n: int
    p: int
    lipschitz: Optional[float] = None
    modulus: float = 0.0

    def __call__(self, theta, x):
        raise NotImplementedError

    def jacobian(self, theta, x) -> Selection:
        raise NotImplementedError


class ZeroOperator(ForwardOperator):
    def __init__(self, n: int, p: int):
        self.n, self.p = n, p
        self.lipschitz = 0.0

    def __call__(self, theta, x):
        return np.zeros(self.n)

    def jacobian(self, theta, x):
        return Selection(np.zeros((self.n, self.p)), np.zeros((self.n, self.n)))


class AffineOperator(ForwardOperator):
    """``B_theta(x) = M x + C theta + b``; monotone when ``M + M^T`` is PSD.

    With symmetric ``M = Q`` this is the gradient of
    ``x^T Q x / 2 + (C theta + b)^T x``.
    """

    def __init__(self, M, C=None, b=None, p: Optional[int] = None):
        M = np.atleast_2d(np.asarray(M, dtype=float))
        n = M.shape[0]
        if p is None:
            p = n if C is None else np.atleast_2d(np.asarray(C)).shape[-1]
        self.n, self.p = n, p
        self.M = frozen(M)
        self.C = frozen(_theta_matrix(C, n, p))
        self.b = frozen(np.zeros(n) if b is None else as_vector(b, n, "b"))
        sym = 0.5 * (M + M.T)
        self.modulus = max(0.0, float(np.linalg.eigvalsh(sym)[0]))
        self.lipschitz = op_norm(M)

    def __call__(self, theta, x):
        return self.M @ as_vector(x, self.n, "x") + self.C @ as_vector(theta, self.p, "theta") + self.b

    def jacobian(self, theta, x):
        return Selection(np.array(self.C), np.array(self.M))


class HuberGradient(ForwardOperator):
    """Gradient of a strongly convex Huber objective.

    ``coupling="shift"``: ``f = mu/2 ||x||^2 + sum_i huber(x_i - (C theta)_i)``.
    ``coupling="scale"`` (p == n): ``f = mu/2 ||x||^2 + sum_i huber(theta_i x_i)``;
    the Lipschitz bound then holds for ``|theta_i| <= theta_bound``.
    """

    def __init__(self, n: int, p: int, delta=1.0, mu=0.0, C=None, coupling="shift",
                 theta_bound=1.0, kink_tol: float = DEFAULT_KINK_TOL):
        if coupling not in ("shift", "scale"):
            raise ValueError("coupling must be 'shift' or 'scale'")
        if coupling == "scale" and n != p:
            raise DimensionMismatch("scale coupling needs p == n")
        self.n, self.p = n, p
        self.delta, self.mu = float(delta), float(mu)
        self.coupling = coupling
        self.C = frozen(_theta_matrix(C, n, p, default_identity=True))
        self.kink_tol = kink_tol
        self.modulus = self.mu
        self.lipschitz = self.mu + (1.0 if coupling == "shift" else float(theta_bound) ** 2)

    def _arg(self, theta, x):
        theta = as_vector(theta, self.p, "theta")
        if self.coupling == "shift":
            return x - self.C @ theta
        return theta * x

    def value(self, theta, x):
        x = as_vector(x, self.n, "x")
        return 0.5 * self.mu * float(x @ x) + float(np.sum(huber(self._arg(theta, x), self.delta)))

    def __call__(self, theta, x):
        x = as_vector(x, self.n, "x")
        slope = np.clip(self._arg(theta, x), -self.delta, self.delta)
        if self.coupling == "shift":
            return self.mu * x + slope
        return self.mu * x + np.asarray(theta, dtype=float) * slope

    def jacobian(self, theta, x):
        x = as_vector(x, self.n, "x")
        theta = as_vector(theta, self.p, "theta")
        t = self._arg(theta, x)
        a = np.abs(t)
        curved = (a < self.delta - self.kink_tol).astype(float)
        kinked = np.flatnonzero(np.abs(a - self.delta) <= self.kink_tol)
        slope = np.clip(t, -self.delta, self.delta)

        def rows(curv):
            # curv: second derivative of huber per coordinate (0 or 1)
            if self.coupling == "shift":
                return -curv[:, None] * self.C, self.mu + curv
            dt = np.diag(slope + theta * x * curv)
            return dt, self.mu + theta ** 2 * curv

        d_theta, diag = rows(curved)
        flat_t, flat_d = rows(np.zeros(self.n))
        full_t, full_d = rows(np.ones(self.n))
        kinks = [(i, ((flat_t[i], flat_d[i]), (full_t[i], full_d[i]))) for i in kinked]
        return separable_selection(d_theta, diag, kinks)


class SkewCoupling(ForwardOperator):
    """``B_theta(x, y) = (K_theta^T y, -K_theta x)`` on the stacked variable."""

    def __init__(self, K: AffineMatrix):
        self.K = K
        self.nx, self.ny = K.n, K.m
        self.n, self.p = K.n + K.m, K.p
        self.lipschitz = None

    def __call__(self, theta, z):
        z = as_vector(z, self.n, "z")
        K = self.K(theta)
        x, y = z[:self.nx], z[self.nx:]
        return np.concatenate([K.T @ y, -K @ x])

    def jacobian(self, theta, z):
        z = as_vector(z, self.n, "z")
        K = self.K(theta)
        x, y = z[:self.nx], z[self.nx:]
        d_x = np.block([[np.zeros((self.nx, self.nx)), K.T], [-K, np.zeros((self.ny, self.ny))]])
        coeffs = self.K.coeffs
        d_theta = np.concatenate([
            np.einsum("kmn,m->nk", coeffs, y),
            -np.einsum("kmn,n->mk", coeffs, x),
        ])
        return Selection(d_theta, d_x)


# --------------------------------------------------------------------------
# registries


def _gauge_square(n, p, params):
    from .counterexamples import GaugeSquareGradient, SmoothedSquare

    if n != 2:
        raise DimensionMismatch("gauge_square acts on R^2")
    sq = SmoothedSquare(params.get("half_width", 1.0), params.get("corner_radius", 0.25))
    return GaugeSquareGradient(sq, p=p, C=_reshape(params.get("C"), (2, p)))


def _reshape(value, shape):
    return None if value is None else as_matrix(value, shape)


FORWARD_REGISTRY = {
    "zero": lambda n, p, prm: ZeroOperator(n, p),
    "quadratic": lambda n, p, prm: _quadratic_forward(n, p, prm, symmetric=True),
    "affine": lambda n, p, prm: _quadratic_forward(n, p, prm, symmetric=False),
    "huber": lambda n, p, prm: HuberGradient(
        n, p, delta=prm.get("delta", 1.0), mu=prm.get("mu", 0.0),
        C=_reshape(prm.get("C"), (n, p)), coupling=prm.get("coupling", "shift"),
        theta_bound=prm.get("theta_bound", 1.0)),
    "gauge_square": _gauge_square,
}


def _quadratic_forward(n, p, prm, symmetric):
    key = "Q" if symmetric else "M"
    M = as_matrix(prm.get(key, prm.get("Q", np.eye(n))), (n, n), key)
    if symmetric and not np.allclose(M, M.T):
        raise ValueError("quadratic needs a symmetric Q; use 'affine' for general M")
    C = prm.get("C")
    C = -np.eye(n) if C is None and n == p else _reshape(C, (n, p))
    return AffineOperator(M, C=C, b=prm.get("b"), p=p)


PROX_REGISTRY = {
    "zero": lambda n, p, prm: ZeroProx(n, p),
    "l1": lambda n, p, prm: L1Prox(n, p, prm.get("weight", 1.0), prm.get("theta_index")),
    "linf_ball_projection": lambda n, p, prm: LinfBallProjection(
        n, p, prm.get("radius", 1.0), prm.get("theta_index")),
    "box_projection": lambda n, p, prm: BoxProjection(n, p, prm.get("lo", -1.0), prm.get("hi", 1.0)),
    "squared_norm": lambda n, p, prm: SquaredNorm(
        n, p, prm.get("weight", 1.0), _reshape(prm.get("C"), (n, p)), prm.get("c"),
        prm.get("lo"), prm.get("hi")),
    "huber": lambda n, p, prm: HuberProx(n, p, prm.get("delta", 1.0), _reshape(prm.get("C"), (n, p))),
    "quadratic": lambda n, p, prm: QuadraticResolvent(
        as_matrix(prm.get("Q", np.eye(n)), (n, n), "Q"), prm.get("b"), _reshape(prm.get("C"), (n, p)), p),
}

SMOOTH_NAMES = ("quadratic", "huber", "gauge_square")


def make_forward(name: str, n: int, p: int, params: Optional[dict] = None) -> ForwardOperator:
    try:
        factory = FORWARD_REGISTRY[name]
    except KeyError:
        raise UnknownRegistryName(f"unknown forward operator {name!r}; known: {sorted(FORWARD_REGISTRY)}")
    return factory(n, p, dict(params or {}))


def make_prox(name: str, n: int, p: int, params: Optional[dict] = None) -> ProxOperator:
    try:
        factory = PROX_REGISTRY[name]
    except KeyError:
        raise UnknownRegistryName(f"unknown prox operator {name!r}; known: {sorted(PROX_REGISTRY)}")
    return factory(n, p, dict(params or {}))


def smooth_gradient_handle(name: str, n: int, p: int, **params) -> ForwardOperator:
    """Gradient handle of a registered smooth function ``f(theta, x)``.

    The returned handle carries ``modulus`` (alpha) and ``lipschitz`` (beta).
    """
    if name not in SMOOTH_NAMES:
        raise UnknownRegistryName(f"unknown smooth function {name!r}; known: {list(SMOOTH_NAMES)}")
    return make_forward(name, n, p, params)
