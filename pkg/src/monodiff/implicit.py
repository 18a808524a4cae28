"""Jacobian blocks at a solution, contraction certificates and implicit Jacobians.

With ``[U V]`` a selection of the resolvent Jacobian at
``(theta, x* - gamma B(x*))`` and ``[W Z]`` one of ``B`` at ``(theta, x*)``,
the solution map has the conservative Jacobian element

    J = (I - V (I - gamma Z))^{-1} (U - gamma V W).
"""

from __future__ import annotations

import math
from typing import Iterable, Optional, Union

import numpy as np

from .core import (
    MAX_COMBINATIONS,
    ContractionCertificate,
    ImplicitJacobian,
    JacobianBlocks,
    ProblemSpec,
    SingularSystem,
    StalePoint,
    as_vector,
    dedupe_matrices,
    op_norm,
    parallel_map,
    residual_matrices,
    sigma_min,
)
from .solver import check_step, fixed_point_solve

INVERTIBILITY_SLACK = 1e-8


def assemble_blocks(spec: ProblemSpec, theta, x_star, gamma, tol: float = 1e-8) -> JacobianBlocks:
    """Evaluate both Jacobian selections at the fixed point ``x_star``.

    Raises ``StalePoint`` if ``||x_star - H(theta, x_star)|| > tol``.
    """
    gamma = check_step(gamma)
    theta = as_vector(theta, spec.p, "theta")
    x_star = as_vector(x_star, spec.n, "x_star")
    u = x_star - gamma * spec.forward(theta, x_star)
    res = float(np.linalg.norm(x_star - spec.resolvent(theta, u, gamma)))
    if res > tol:
        raise StalePoint(f"residual {res:.3e} exceeds {tol:.1e}; x_star is not a fixed point")
    r = spec.resolvent.jacobian(theta, u, gamma)
    f = spec.forward.jacobian(theta, x_star)
    return JacobianBlocks(
        U=np.asarray(r.d_theta, dtype=float), V=np.asarray(r.d_x, dtype=float),
        W=np.asarray(f.d_theta, dtype=float), Z=np.asarray(f.d_x, dtype=float),
        at_resolvent_point=u, at_forward_point=x_star, theta=theta,
        resolvent_extremes=r.extremes, forward_extremes=f.extremes,
    )


def theory_bound(gamma: float, alpha: float, beta: float, part: str) -> float:
    """Lipschitz bound on ``x -> H(theta, x)`` for the declared strongly monotone part."""
    if part == "B":
        return math.sqrt(max(0.0, 1.0 - gamma * (2.0 * alpha - gamma * beta ** 2)))
    if part == "A":
        return math.sqrt(1.0 + gamma ** 2 * beta ** 2) / (1.0 + gamma * alpha)
    return math.inf


def contraction_certificate(blocks: Union[JacobianBlocks, Iterable[JacobianBlocks]], gamma: float,
                            alpha: float, beta: float, part: str,
                            cap: int = MAX_COMBINATIONS) -> ContractionCertificate:
    """Max of ``||V (I - gamma Z)||_op`` over all selections, including kink extremes."""
    gamma = check_step(gamma)
    if isinstance(blocks, JacobianBlocks):
        blocks = [blocks]
    worst, count = 0.0, 0
    for b in blocks:
        eye = np.eye(b.n)
        for _, V, _, Z in b.combinations(cap):
            worst = max(worst, op_norm(V @ (eye - gamma * Z)))
            count += 1
    return ContractionCertificate(worst, theory_bound(gamma, alpha, beta, part), worst < 1.0, count)


def _solve(lhs, rhs):
    try:
        return np.linalg.solve(lhs, rhs)
    except np.linalg.LinAlgError as exc:
        raise SingularSystem("I - V(I - gamma Z) is singular; contractivity fails or blocks are wrong") from exc


def implicit_jacobian(blocks: JacobianBlocks, gamma: float,
                      certificate: Optional[ContractionCertificate] = None,
                      cap: int = MAX_COMBINATIONS) -> ImplicitJacobian:
    """Solve ``(I - V(I - gamma Z)) J = U - gamma V W`` for every selection.

    The canonical selection gives ``J``; at kinks every extreme combination
    is solved too and the distinct results are kept in ``alternatives``.
    """
    gamma = check_step(gamma)
    results = []
    cond = None
    for U, V, W, Z in blocks.combinations(cap):
        lhs, rhs = residual_matrices(U, V, W, Z, gamma)
        if cond is None:
            cond = float(np.linalg.cond(lhs))
            if not np.isfinite(cond) or cond > 1e15:
                raise SingularSystem(f"I - V(I - gamma Z) is numerically singular (cond={cond:.3e})")
        results.append(_solve(lhs, rhs))
        if certificate is not None:
            smin = sigma_min(lhs)
            floor = 1.0 - certificate.sampled_norm - INVERTIBILITY_SLACK
            if smin < floor:
                raise SingularSystem(
                    f"sigma_min {smin:.3e} below the contraction floor {floor:.3e}; blocks are inconsistent")
    return ImplicitJacobian(results[0], cond, blocks, dedupe_matrices(results))


def linear_system_residual(ij: ImplicitJacobian, gamma: float) -> float:
    b = ij.blocks
    lhs, rhs = residual_matrices(b.U, b.V, b.W, b.Z, gamma)
    return float(np.linalg.norm(lhs @ ij.J - rhs))


def vjp(blocks: JacobianBlocks, gamma: float, v) -> np.ndarray:
    """``J^T v`` through the adjoint system, using the canonical selection."""
    gamma = check_step(gamma)
    v = as_vector(v, blocks.n, "v")
    lhs, rhs = residual_matrices(blocks.U, blocks.V, blocks.W, blocks.Z, gamma)
    w = _solve(lhs.T, v)
    return rhs.T @ w


def fd_jacobian(spec: ProblemSpec, theta, gamma: Optional[float] = None, h: float = 1e-5,
                tol: Optional[float] = None, x0=None, max_iter: int = 1_000_000) -> np.ndarray:
    """Central finite differences of ``theta -> x*(theta)``, two full solves per column.

    Inner solves run to ``tol`` (default ``h**2 / 100``).
    """
    theta = np.asarray(theta, dtype=float).ravel()
    if theta.size == 0:
        return np.zeros((spec.n, 0))
    tol = h * h / 100.0 if tol is None else tol

    def column(j):
        e = np.zeros_like(theta)
        e[j] = h
        plus = fixed_point_solve(spec, theta + e, x0=x0, tol=tol, max_iter=max_iter, gamma=gamma).x_star
        minus = fixed_point_solve(spec, theta - e, x0=x0, tol=tol, max_iter=max_iter, gamma=gamma).x_star
        return (plus - minus) / (2 * h)

    return np.column_stack(parallel_map(column, list(range(theta.size))))


def differentiate(spec: ProblemSpec, theta, gamma: Optional[float] = None, tol: float = 1e-10,
                  x0=None, certify: bool = True, max_iter: int = 1_000_000):
    """Solve, assemble blocks and return ``(report, implicit_jacobian, certificate)``."""
    report = fixed_point_solve(spec, theta, x0=x0, tol=tol, gamma=gamma, max_iter=max_iter)
    g = report.gamma_used
    blocks = assemble_blocks(spec, theta, report.x_star, g, tol=max(tol, report.residual_norm))
    cert = None
    if certify:
        cert = contraction_certificate(blocks, g, spec.alpha, spec.beta, spec.strongly_monotone_part)
    ij = implicit_jacobian(blocks, g, cert if cert is not None and cert.verdict else None)
    return report, ij, cert
