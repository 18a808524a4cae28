"""Fenchel-Rockafellar dual route for ``min_x f_theta(x) + g_theta(K_theta x)``.

The dual ``min_y f_theta*(-K_theta^T y) + g_theta*(y)`` is solved by
forward-backward splitting with ``A = d g*`` and
``B = grad of y -> f*(-K^T y)``, differentiated implicitly, and the primal is
recovered as ``x* = grad f*(-K^T y*)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .core import (
    ImplicitJacobian,
    NonPositiveModulus,
    ProblemSpec,
    Selection,
    SolveReport,
    SurjectivityLost,
    as_matrix,
    as_vector,
    frozen,
)
from .implicit import assemble_blocks, contraction_certificate, implicit_jacobian
from .operators import AffineMatrix, AffineOperator, ForwardOperator, ProxOperator
from .solver import check_step, fixed_point_solve, step_size_default

SURJECTIVITY_FLOOR = 1e-8


class QuadraticFunction:
    """``f_theta(x) = x^T P x / 2 - (C theta + c)^T x`` with ``P`` symmetric positive definite.

    ``grad_conj`` is the gradient of the conjugate,
    ``grad f*(theta, z) = P^{-1}(z + C theta + c)``.
    """

    def __init__(self, P, C=None, c=None, p: int = 1):
        P = np.atleast_2d(np.asarray(P, dtype=float))
        if not np.allclose(P, P.T):
            raise ValueError("P must be symmetric")
        eig = np.linalg.eigvalsh(P)
        if eig[0] <= 0:
            raise NonPositiveModulus("P must be positive definite")
        self.n, self.p = P.shape[0], p
        self.P = frozen(P)
        self.P_inv = frozen(np.linalg.inv(P))
        self.C = frozen(np.zeros((self.n, p)) if C is None else as_matrix(C, (self.n, p), "C"))
        self.c = frozen(np.zeros(self.n) if c is None else as_vector(c, self.n, "c"))
        self.alpha = float(eig[0])
        self.beta = float(eig[-1])

    def _linear(self, theta):
        return self.C @ as_vector(theta, self.p, "theta") + self.c

    def value(self, theta, x):
        x = np.asarray(x, dtype=float)
        return 0.5 * float(x @ self.P @ x) - float(self._linear(theta) @ x)

    def gradient(self) -> AffineOperator:
        return AffineOperator(self.P, C=-self.C, b=-self.c, p=self.p)

    def grad_conj(self, theta, z):
        return self.P_inv @ (np.asarray(z, dtype=float) + self._linear(theta))

    def grad_conj_jacobian(self, theta, z) -> Tuple[np.ndarray, np.ndarray]:
        """``(d/dtheta, d/dz)`` of ``grad f*``."""
        return self.P_inv @ self.C, np.array(self.P_inv)


@dataclass(frozen=True)
class CompositeSpec:
    """Data of the composite primal problem and its dual.

    ``g`` is the prox handle of ``g_theta``; the dual resolvent is
    ``g.conjugate()`` unless ``prox_g_conj`` is given explicitly.
    ``lambda_min``/``lambda_max`` bound the singular values of ``K_theta``;
    when left as ``None`` they are measured at the solve point.
    """

    f: QuadraticFunction
    g: ProxOperator
    K: AffineMatrix
    alpha: Optional[float] = None
    beta: Optional[float] = None
    lambda_min: Optional[float] = None
    lambda_max: Optional[float] = None
    prox_g_conj: Optional[ProxOperator] = None

    @property
    def m(self) -> int:
        return self.K.m

    @property
    def n(self) -> int:
        return self.K.n

    @property
    def p(self) -> int:
        return self.K.p

    def conj_prox(self) -> ProxOperator:
        return self.prox_g_conj if self.prox_g_conj is not None else self.g.conjugate()

    def moduli(self) -> Tuple[float, float]:
        a = self.f.alpha if self.alpha is None else self.alpha
        b = self.f.beta if self.beta is None else self.beta
        return a, b


def dual_constants(alpha, beta, lambda_min, lambda_max):
    """``(lambda_min^2/beta, lambda_max^2/alpha, (0, 2 a/(a + b)^2))`` for the dual smooth part."""
    for name, value in (("alpha", alpha), ("beta", beta), ("lambda_min", lambda_min), ("lambda_max", lambda_max)):
        if not value > 0:
            raise NonPositiveModulus(f"{name} must be positive, got {value}")
    a = lambda_min ** 2 / beta
    b = lambda_max ** 2 / alpha
    return a, b, (0.0, 2.0 * a / (a + b) ** 2)


class DualGradient(ForwardOperator):
    """``y -> -K_theta grad f*(theta, -K_theta^T y)``, the gradient of ``y -> f*(-K^T y)``."""

    def __init__(self, f: QuadraticFunction, K: AffineMatrix, alpha: float, beta: float):
        self.f, self.K = f, K
        self.n, self.p = K.m, K.p
        self.modulus, self.lipschitz = alpha, beta

    def __call__(self, theta, y):
        K = self.K(theta)
        return -K @ self.f.grad_conj(theta, -K.T @ as_vector(y, self.n, "y"))

    def jacobian(self, theta, y):
        y = as_vector(y, self.n, "y")
        K = self.K(theta)
        z = -K.T @ y
        g = self.f.grad_conj(theta, z)
        g_theta, g_z = self.f.grad_conj_jacobian(theta, z)
        coeffs = self.K.coeffs
        # d/dtheta_k of -K g(theta, -K^T y)
        dK_g = np.einsum("kmn,n->mk", coeffs, g)
        dz = -np.einsum("kmn,m->nk", coeffs, y)
        d_theta = -dK_g - K @ (g_theta + g_z @ dz)
        d_y = K @ g_z @ K.T
        return Selection(d_theta, d_y)


def check_surjective(K: np.ndarray, floor: float = SURJECTIVITY_FLOOR) -> Tuple[float, float]:
    """Return ``(sigma_min, sigma_max)`` of ``K``; raise if it is not onto."""
    m, n = K.shape
    if m > n:
        raise SurjectivityLost(f"K has more rows ({m}) than columns ({n})")
    s = np.linalg.svd(K, compute_uv=False)
    if s[-1] < floor:
        raise SurjectivityLost(f"sigma_min(K) = {s[-1]:.3e} < {floor:.0e}")
    return float(s[-1]), float(s[0])


def dual_problem(cspec: CompositeSpec, theta) -> Tuple[ProblemSpec, Tuple[float, float, tuple]]:
    """Forward-backward data for the dual at ``theta`` and its constants."""
    smin, smax = check_surjective(cspec.K(theta))
    lmin = smin if cspec.lambda_min is None else cspec.lambda_min
    lmax = smax if cspec.lambda_max is None else cspec.lambda_max
    alpha, beta = cspec.moduli()
    a_d, b_d, rng = dual_constants(alpha, beta, lmin, lmax)
    spec = ProblemSpec(cspec.m, cspec.p, cspec.conj_prox(), DualGradient(cspec.f, cspec.K, a_d, b_d),
                       a_d, b_d, "B")
    return spec, (a_d, b_d, rng)


def dual_residual(cspec: CompositeSpec, theta, y, gamma) -> np.ndarray:
    """``y - prox_{gamma g*}(y + gamma K grad f*(-K^T y))``."""
    gamma = check_step(gamma)
    y = as_vector(y, cspec.m, "y")
    K = cspec.K(theta)
    u = y + gamma * K @ cspec.f.grad_conj(theta, -K.T @ y)
    return y - cspec.conj_prox()(theta, u, gamma)


@dataclass(frozen=True)
class DualSolution:
    y_star: np.ndarray
    J_dual: ImplicitJacobian
    report: SolveReport
    certificate: object
    constants: tuple


def solve_dual_and_differentiate(cspec: CompositeSpec, theta, gamma: Optional[float] = None,
                                 tol: float = 1e-10, y0=None, max_iter: int = 1_000_000) -> DualSolution:
    theta = as_vector(theta, cspec.p, "theta")
    spec, constants = dual_problem(cspec, theta)
    a_d, b_d, (_, upper) = constants
    gamma = step_size_default(a_d, b_d) if gamma is None else check_step(gamma)
    report = fixed_point_solve(spec, theta, x0=y0, tol=tol, gamma=gamma, max_iter=max_iter)
    blocks = assemble_blocks(spec, theta, report.x_star, gamma, tol=max(tol, report.residual_norm))
    cert = contraction_certificate(blocks, gamma, a_d, b_d, "B")
    ij = implicit_jacobian(blocks, gamma, cert if cert.verdict else None)
    return DualSolution(report.x_star, ij, report, cert, constants)


def _primal_map_jacobian(cspec: CompositeSpec, theta, y):
    """Joint Jacobian of ``(theta, y) -> grad f*(theta, -K_theta^T y)``."""
    K = cspec.K(theta)
    z = -K.T @ y
    g_theta, g_z = cspec.f.grad_conj_jacobian(theta, z)
    dz = -np.einsum("kmn,m->nk", cspec.K.coeffs, y)
    return g_theta + g_z @ dz, -g_z @ K.T


def primal_from_dual(cspec: CompositeSpec, theta, y_star, J_dual=None):
    """``x* = grad f*(-K^T y*)`` and, if ``J_dual`` is given, its Jacobian by the chain rule.

    ``J_dual`` may be a matrix or an ``ImplicitJacobian``; in the latter case
    every alternative at a kink is mapped through as well.
    """
    theta = as_vector(theta, cspec.p, "theta")
    y_star = as_vector(y_star, cspec.m, "y_star")
    x_star = cspec.f.grad_conj(theta, -cspec.K(theta).T @ y_star)
    if J_dual is None:
        return x_star, None
    d_theta, d_y = _primal_map_jacobian(cspec, theta, y_star)
    if isinstance(J_dual, ImplicitJacobian):
        alts = tuple(d_theta + d_y @ J for J in J_dual.alternatives)
        return x_star, (d_theta + d_y @ J_dual.J, alts)
    return x_star, d_theta + d_y @ np.asarray(J_dual, dtype=float)


def primal_vjp(cspec: CompositeSpec, sol: DualSolution, theta, v) -> np.ndarray:
    """``J_primal^T v`` without forming ``J_primal``."""
    from .implicit import vjp

    d_theta, d_y = _primal_map_jacobian(cspec, theta, sol.y_star)
    return d_theta.T @ v + vjp(sol.J_dual.blocks, sol.report.gamma_used, d_y.T @ v)
