"""Primal-dual (linear coupling) and separable min-max instantiations."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import (
    ImplicitJacobian,
    InadmissibleStepSize,
    ProblemSpec,
    SolveReport,
    SpecViolation,
    as_vector,
    op_norm,
)
from .implicit import assemble_blocks, contraction_certificate, implicit_jacobian
from .operators import AffineMatrix, BlockDiagonalProx, ProxOperator, SkewCoupling, ZeroOperator
from .solver import check_step, fixed_point_solve, step_size_default


@dataclass(frozen=True)
class PrimalDualSpec:
    """``min_x g_theta(x) + max_y <K_theta x, y> - f_theta*(y)``.

    ``alpha`` is a common strong convexity modulus of ``g`` and ``f*``;
    ``beta`` bounds ``||K_theta||_op``.
    """

    prox_g: ProxOperator
    prox_f_conj: ProxOperator
    K: AffineMatrix
    alpha: float
    beta: float

    def __post_init__(self):
        if self.alpha <= 0:
            raise SpecViolation("primal-dual needs alpha > 0")
        if (self.prox_g.n, self.prox_f_conj.n) != (self.K.n, self.K.m):
            raise SpecViolation("prox dimensions do not match K")

    @property
    def n(self) -> int:
        return self.K.n

    @property
    def m(self) -> int:
        return self.K.m

    @property
    def p(self) -> int:
        return self.K.p

    def problem(self) -> ProblemSpec:
        """Stacked inclusion with ``A = diag(dg, df*)`` and skew ``B``."""
        return ProblemSpec(self.n + self.m, self.p, BlockDiagonalProx([self.prox_g, self.prox_f_conj]),
                           SkewCoupling(self.K), self.alpha, self.beta, "A")

    def default_gamma(self) -> float:
        return step_size_default(self.alpha, self.beta)


def pd_apply_H(pdspec: PrimalDualSpec, theta, x, y, gamma) -> np.ndarray:
    """``(prox_{gamma g}(x - gamma K^T y), prox_{gamma f*}(y + gamma K x))``."""
    gamma = check_step(gamma)
    theta = as_vector(theta, pdspec.p, "theta")
    x = as_vector(x, pdspec.n, "x")
    y = as_vector(y, pdspec.m, "y")
    K = pdspec.K(theta)
    return np.concatenate([
        pdspec.prox_g(theta, x - gamma * K.T @ y, gamma),
        pdspec.prox_f_conj(theta, y + gamma * K @ x, gamma),
    ])


@dataclass(frozen=True)
class SaddleSolution:
    x_star: np.ndarray
    y_star: np.ndarray
    J: ImplicitJacobian
    report: SolveReport
    certificate: object

    @property
    def z_star(self) -> np.ndarray:
        return np.concatenate([self.x_star, self.y_star])


def pd_solve_and_differentiate(pdspec: PrimalDualSpec, theta, gamma: Optional[float] = None,
                               tol: float = 1e-10, z0=None, max_iter: int = 1_000_000) -> SaddleSolution:
    theta = as_vector(theta, pdspec.p, "theta")
    spec = pdspec.problem()
    gamma = pdspec.default_gamma() if gamma is None else check_step(gamma)
    report = fixed_point_solve(spec, theta, x0=z0, tol=tol, gamma=gamma, max_iter=max_iter)
    blocks = assemble_blocks(spec, theta, report.x_star, gamma, tol=max(tol, report.residual_norm))
    cert = contraction_certificate(blocks, gamma, pdspec.alpha, pdspec.beta, "A")
    ij = implicit_jacobian(blocks, gamma, cert if cert.verdict else None)
    z = report.x_star
    return SaddleSolution(z[:pdspec.n], z[pdspec.n:], ij, report, cert)


@dataclass(frozen=True)
class SkewReport:
    max_inner_product: float
    lipschitz_quotient: float
    beta: float


def skew_coupling_check(pdspec: PrimalDualSpec, theta, samples: int = 100,
                        rng: Optional[np.random.Generator] = None, atol: float = 1e-12) -> SkewReport:
    """Check ``<B z, z> = 0`` and ``||B u - B v|| <= beta ||u - v||`` on random samples."""
    rng = np.random.default_rng(0) if rng is None else rng
    theta = as_vector(theta, pdspec.p, "theta")
    B = SkewCoupling(pdspec.K)
    worst_ip, worst_q = 0.0, 0.0
    for _ in range(samples):
        z = rng.standard_normal(B.n)
        w = rng.standard_normal(B.n)
        Bz = B(theta, z)
        worst_ip = max(worst_ip, abs(float(Bz @ z)) / max(1.0, float(z @ z)))
        worst_q = max(worst_q, float(np.linalg.norm(Bz - B(theta, w)) / np.linalg.norm(z - w)))
    if worst_ip > atol:
        raise SpecViolation(f"<B z, z> = {worst_ip:.3e}; coupling is not skew")
    if worst_q > pdspec.beta * (1 + 1e-12):
        raise SpecViolation(f"sampled Lipschitz quotient {worst_q:.6g} exceeds beta = {pdspec.beta:.6g}")
    return SkewReport(worst_ip, worst_q, pdspec.beta)


@dataclass(frozen=True)
class MinMaxSpec:
    """``min_{x in X} max_{y in Y} Phi_theta(x, y)`` through its joint resolvent.

    ``joint_resolvent`` is a prox handle on ``R^{n+m}`` for
    ``A = diag(d_x Phi + N_X, -d_y Phi + N_Y)``; ``alpha`` is the strong
    convex-concavity modulus.
    """

    joint_resolvent: ProxOperator
    alpha: float
    n: int

    def __post_init__(self):
        if self.alpha <= 0:
            raise SpecViolation("min-max needs alpha > 0")

    @property
    def m(self) -> int:
        return self.joint_resolvent.n - self.n

    @property
    def p(self) -> int:
        return self.joint_resolvent.p

    @classmethod
    def separable(cls, prox_x: ProxOperator, prox_y: ProxOperator, alpha: float) -> "MinMaxSpec":
        """``Phi = phi(theta, x) - psi(theta, y)``: the resolvent is a pair of proxes.

        ``prox_x`` is the prox of ``phi + indicator(X)``, ``prox_y`` that of
        ``psi + indicator(Y)``.
        """
        return cls(BlockDiagonalProx([prox_x, prox_y]), alpha, prox_x.n)

    def problem(self) -> ProblemSpec:
        dim = self.joint_resolvent.n
        return ProblemSpec(dim, self.p, self.joint_resolvent, ZeroOperator(dim, self.p),
                           self.alpha, 0.0, "A")


def minmax_solve_and_differentiate(mmspec: MinMaxSpec, theta, gamma: Optional[float] = None,
                                   tol: float = 1e-10, z0=None, max_iter: int = 1_000_000) -> SaddleSolution:
    """Fixed point of the joint resolvent and ``J = (I - V)^{-1} U``; needs ``gamma < 1/alpha``."""
    if gamma is None:
        gamma = 0.5 / mmspec.alpha
    gamma = check_step(gamma)
    if not gamma < 1.0 / mmspec.alpha:
        raise InadmissibleStepSize(f"min-max needs gamma in (0, 1/alpha) = (0, {1 / mmspec.alpha:g}), got {gamma}")
    theta = as_vector(theta, mmspec.p, "theta")
    spec = mmspec.problem()
    report = fixed_point_solve(spec, theta, x0=z0, tol=tol, gamma=gamma, max_iter=max_iter)
    blocks = assemble_blocks(spec, theta, report.x_star, gamma, tol=max(tol, report.residual_norm))
    cert = contraction_certificate(blocks, gamma, mmspec.alpha, 0.0, "A")
    ij = implicit_jacobian(blocks, gamma, cert if cert.verdict else None)
    z = report.x_star
    return SaddleSolution(z[:mmspec.n], z[mmspec.n:], ij, report, cert)


def resolvent_lipschitz_sample(prox: ProxOperator, theta, gamma, samples: int = 200,
                               rng: Optional[np.random.Generator] = None) -> float:
    """Largest sampled quotient ``||R(u) - R(v)|| / ||u - v||``."""
    rng = np.random.default_rng(0) if rng is None else rng
    worst = 0.0
    for _ in range(samples):
        u = 3 * rng.standard_normal(prox.n)
        v = u + rng.standard_normal(prox.n) * rng.choice([1e-3, 1e-1, 1.0])
        worst = max(worst, float(np.linalg.norm(prox(theta, u, gamma) - prox(theta, v, gamma))
                                 / np.linalg.norm(u - v)))
    return worst


def coupling_norm(pdspec: PrimalDualSpec, theta) -> float:
    return op_norm(pdspec.K(theta))
