import numpy as np
import pytest

from monodiff.core import InadmissibleStepSize, NonPositiveModulus, ProblemSpec, SurjectivityLost
from monodiff.duality import (
    CompositeSpec,
    DualGradient,
    QuadraticFunction,
    dual_constants,
    dual_residual,
    primal_from_dual,
    solve_dual_and_differentiate,
)
from monodiff.implicit import differentiate, fd_jacobian
from monodiff.operators import AffineMatrix, L1Prox, ZeroProx
from oracles import fd_joint, random_spd


def lasso_1d(weight=0.5):
    f = QuadraticFunction([[1.0]], C=[[1.0]], p=1)  # (x - theta)^2 / 2 up to a constant
    return CompositeSpec(f, L1Prox(1, 1, weight), AffineMatrix.constant(np.eye(1), 1))


def test_dual_constants_examples():
    a, b, (lo, hi) = dual_constants(1, 1, 1, 1)
    assert (a, b, lo, hi) == (1.0, 1.0, 0.0, 0.5)
    a, b, _ = dual_constants(1, 1, 0.5, 2)
    assert (a, b) == (0.25, 4.0)
    with pytest.raises(NonPositiveModulus):
        dual_constants(1, 1, 0.0, 1)


@pytest.mark.parametrize("theta", [-2.0, -0.3, 0.1, 0.45, 1.7])
def test_dual_lasso_clamp(theta):
    cs = lasso_1d()
    sol = solve_dual_and_differentiate(cs, [theta], tol=1e-12)
    assert sol.y_star[0] == pytest.approx(np.clip(theta, -0.5, 0.5), abs=1e-10)
    assert sol.J_dual.J[0, 0] == (1.0 if abs(theta) < 0.5 else 0.0)
    x, (Jp, _) = primal_from_dual(cs, [theta], sol.y_star, sol.J_dual)
    assert x[0] == pytest.approx(np.sign(theta) * max(abs(theta) - 0.5, 0), abs=1e-10)
    assert Jp[0, 0] == (0.0 if abs(theta) < 0.5 else 1.0)


def test_dual_kink_reports_both_limits():
    sol = solve_dual_and_differentiate(lasso_1d(), [0.5], tol=1e-12)
    assert sorted(float(J[0, 0]) for J in sol.J_dual.alternatives) == [0.0, 1.0]


def test_dual_residual_examples():
    cs = lasso_1d()
    # y = 0.2, theta = 1, gamma = 0.5: forward step 0.2 + 0.5 (1 - 0.2) = 0.6, clamp 0.5
    assert dual_residual(cs, [1.0], [0.2], 0.5)[0] == pytest.approx(0.2 - 0.5)
    sol = solve_dual_and_differentiate(cs, [1.0], tol=1e-12)
    assert abs(dual_residual(cs, [1.0], sol.y_star, 0.3)[0]) <= 1e-10
    with pytest.raises(InadmissibleStepSize):
        dual_residual(cs, [1.0], [0.0], 0.0)


def _smooth_composite(rng, n=3, p=2):
    P = random_spd(rng, n)
    f = QuadraticFunction(P, C=rng.standard_normal((n, p)), c=rng.standard_normal(n), p=p)
    K = AffineMatrix(np.eye(n) * 2, 0.1 * rng.standard_normal((p, n, n)))
    return CompositeSpec(f, ZeroProx(n, p), K)


def test_smooth_dual_matches_fd_and_unconstrained_minimizer(rng):
    cs = _smooth_composite(rng)
    theta = rng.standard_normal(2)
    sol = solve_dual_and_differentiate(cs, theta, tol=1e-12)
    dual_spec = ProblemSpec(cs.m, cs.p, cs.conj_prox(), DualGradient(cs.f, cs.K, 1.0, 1.0))
    fd = fd_jacobian(dual_spec, theta, gamma=sol.report.gamma_used, h=1e-5)
    assert np.max(np.abs(sol.J_dual.J - fd)) <= 1e-5
    x, Jp = primal_from_dual(cs, theta, sol.y_star, sol.J_dual.J)
    np.testing.assert_allclose(x, np.linalg.solve(cs.f.P, cs.f.C @ theta + cs.f.c), atol=1e-9)
    np.testing.assert_allclose(Jp, np.linalg.solve(cs.f.P, cs.f.C), atol=1e-8)


def test_primal_at_zero_dual(rng):
    cs = _smooth_composite(rng)
    theta = rng.standard_normal(2)
    x, _ = primal_from_dual(cs, theta, np.zeros(cs.m))
    np.testing.assert_allclose(x, cs.f.grad_conj(theta, np.zeros(cs.n)))


def _diag_lasso(rng, n=3, p=2):
    """f quadratic, g = ||.||_1, K = diag(d): also solvable directly with weights |d|."""
    P = random_spd(rng, n)
    C = rng.standard_normal((n, p))
    f = QuadraticFunction(P, C=C, p=p)
    d = rng.uniform(0.5, 2.0, n) * rng.choice([-1, 1], n)
    cs = CompositeSpec(f, L1Prox(n, p, 0.4), AffineMatrix.constant(np.diag(d), p))
    eig = np.linalg.eigvalsh(P)
    direct = ProblemSpec(n, p, L1Prox(n, p, 0.4 * np.abs(d)), f.gradient(), eig[0], eig[-1], "B")
    return cs, direct


def test_dual_route_matches_direct_primal(rng):
    agreed = 0
    for _ in range(20):
        cs, direct = _diag_lasso(rng)
        theta = 2 * rng.standard_normal(2)
        tol = 1e-11
        sol = solve_dual_and_differentiate(cs, theta, tol=tol)
        x_dual, (J_dual_primal, _) = primal_from_dual(cs, theta, sol.y_star, sol.J_dual)
        rep, ij, _ = differentiate(direct, theta, tol=tol)
        scale = np.linalg.norm(cs.K(theta), 2) * np.linalg.norm(cs.f.P_inv, 2)
        assert np.linalg.norm(x_dual - rep.x_star) <= 10 * tol * max(1.0, scale)
        if sol.J_dual.blocks.at_kink or ij.blocks.at_kink:
            continue
        assert np.max(np.abs(J_dual_primal - ij.J)) <= 1e-5
        agreed += 1
    assert agreed >= 15


def test_dual_strong_convexity_witness(rng):
    for _ in range(5):
        cs = _smooth_composite(rng)
        theta = rng.standard_normal(2)
        K = cs.K(theta)
        s = np.linalg.svd(K, compute_uv=False)
        a_d = s[-1] ** 2 / cs.f.beta
        grad = DualGradient(cs.f, cs.K, a_d, 1.0)
        for _ in range(100):
            y1, y2 = rng.standard_normal((2, cs.m))
            d = grad(theta, y1) - grad(theta, y2)
            assert d @ (y1 - y2) >= a_d * (y1 - y2) @ (y1 - y2) - 1e-10


def test_dual_gradient_jacobian_matches_fd(rng):
    cs = _smooth_composite(rng)
    op = DualGradient(cs.f, cs.K, 1.0, 1.0)
    theta, y = rng.standard_normal(2), rng.standard_normal(cs.m)
    sel = op.jacobian(theta, y)
    dt, dy = fd_joint(op, theta, y)
    np.testing.assert_allclose(sel.d_theta, dt, atol=1e-7)
    np.testing.assert_allclose(sel.d_x, dy, atol=1e-7)


def test_surjectivity_lost():
    f = QuadraticFunction(np.eye(2), p=1)
    cs = CompositeSpec(f, L1Prox(2, 1), AffineMatrix.constant([[1.0, 0.0], [2.0, 0.0]], 1))
    with pytest.raises(SurjectivityLost):
        solve_dual_and_differentiate(cs, [0.0])
    tall = CompositeSpec(QuadraticFunction(np.eye(1), p=1), L1Prox(2, 1), AffineMatrix.constant([[1.0], [1.0]], 1))
    with pytest.raises(SurjectivityLost):
        solve_dual_and_differentiate(tall, [0.0])
