import numpy as np
import pytest

from monodiff.bilevel import (
    bilevel_train,
    hypergradient,
    read_dataset,
    sparsity_composite,
    sparsity_prior_hypergradient,
    sparsity_prior_loss,
    sparsity_prior_lower_solve,
    synthetic_dataset,
    unroll_compare,
    unroll_trace,
    unrolled_jacobian,
)
from monodiff.core import SurjectivityLost
from monodiff.duality import dual_residual
from monodiff.implicit import differentiate
from monodiff.operators import soft_threshold
from monodiff.solver import fixed_point_solve
from oracles import random_spd
from problems import lasso, quadratic, random_lasso


def test_hypergradient_quadratic(rng):
    Q = random_spd(rng, 3)
    theta, u = rng.standard_normal(3), rng.standard_normal(3)
    hg = hypergradient(quadratic(Q), theta, lambda x: x - u)
    x = np.linalg.solve(Q, theta)
    np.testing.assert_allclose(hg.grad, np.linalg.solve(Q.T, x - u), atol=1e-9)
    assert hg.extreme_set_size == 1


def test_hypergradient_inactive_coordinate_is_zero():
    hg = hypergradient(lasso(0.5, 2), [2.0, 0.1], lambda x: x - np.array([3.0, 3.0]))
    assert hg.grad[1] == 0.0 and hg.grad[0] == pytest.approx(-1.5)


def test_hypergradient_zero_outer_gradient(rng):
    spec = random_lasso(rng)
    assert not hypergradient(spec, rng.standard_normal(spec.p), lambda x: np.zeros_like(x)).grad.any()


def test_hypergradient_flags_kink():
    assert hypergradient(lasso(0.5), [0.5], lambda x: x).extreme_set_size == 2


def test_hypergradient_matches_fd_of_outer_loss(rng):
    for _ in range(5):
        spec = random_lasso(rng)
        theta, u = rng.standard_normal(spec.p), rng.standard_normal(spec.n)
        _, ij, _ = differentiate(spec, theta, tol=1e-12)
        if ij.blocks.at_kink:
            continue
        loss = lambda th: 0.5 * np.sum((differentiate(spec, th, tol=1e-12)[0].x_star - u) ** 2)  # noqa: E731
        hg = hypergradient(spec, theta, lambda x: x - u).grad
        h = 1e-5
        fd = np.array([(loss(theta + h * e) - loss(theta - h * e)) / (2 * h) for e in np.eye(spec.p)])
        assert np.linalg.norm(hg - fd) <= 1e-4 * max(1.0, np.linalg.norm(fd))


def test_lower_solve_identity_operator_is_lasso(rng):
    uhat = [3 * rng.standard_normal(3) for _ in range(4)]
    for lo, u in zip(sparsity_prior_lower_solve(uhat, np.eye(3).ravel(), 3, 3), uhat):
        np.testing.assert_allclose(lo.x_star, soft_threshold(u, 1.0), atol=1e-10)


def test_lower_solve_zero_data(rng):
    lo = sparsity_prior_lower_solve([np.zeros(3)], rng.standard_normal(6), 2, 3)[0]
    assert not lo.y_star.any() and not lo.x_star.any()


def test_lower_solve_fenchel_equality(rng):
    for _ in range(5):
        theta = rng.standard_normal(6)
        uhat = rng.standard_normal(3)
        lo = sparsity_prior_lower_solve([uhat], theta, 2, 3, tol=1e-12)[0]
        K = theta.reshape(2, 3)
        gamma = lo.sol.report.gamma_used
        assert np.linalg.norm(dual_residual(lo.cspec, theta, lo.y_star, gamma)) <= 1e-10
        Kx = K @ lo.x_star
        assert Kx @ lo.y_star == pytest.approx(np.abs(Kx).sum(), abs=1e-6)
        np.testing.assert_allclose(lo.x_star, uhat - K.T @ lo.y_star, atol=1e-10)
        assert np.max(np.abs(lo.y_star)) <= 1 + 1e-12


def test_lower_solve_needs_surjective_operator():
    with pytest.raises(SurjectivityLost):
        sparsity_prior_lower_solve([np.ones(3)], np.zeros(6), 2, 3)


def test_sparsity_hypergradient_1x1_fd():
    data = np.array([[0.3, 2.0]])
    for theta in (0.4, 1.3):
        g = sparsity_prior_hypergradient(data, [theta], 1, 1).grad[0]
        h = 1e-5
        fd = (sparsity_prior_loss(data, [theta + h], 1, 1) - sparsity_prior_loss(data, [theta - h], 1, 1)) / (2 * h)
        assert g == pytest.approx(fd, rel=1e-4, abs=1e-8)
        # closed form: x = uhat - |theta|, loss derivative (x - u) * (-sign theta)
        assert g == pytest.approx(-(2.0 - theta - 0.3), abs=1e-9)


def test_sparsity_hypergradient_2x3_fd(rng):
    data = synthetic_dataset(2, 3, 4, rng)
    theta = (np.eye(2, 3) + 0.1 * rng.standard_normal((2, 3))).ravel()
    g = sparsity_prior_hypergradient(data, theta, 2, 3).grad
    h = 1e-5
    fd = np.array([(sparsity_prior_loss(data, theta + h * e, 2, 3) - sparsity_prior_loss(data, theta - h * e, 2, 3))
                   / (2 * h) for e in np.eye(6)])
    assert np.linalg.norm(g - fd) <= 1e-4 * np.linalg.norm(fd)


def test_sparsity_hypergradient_vanishes_at_outer_optimum(rng):
    theta = rng.standard_normal(6)
    uhat = rng.standard_normal((3, 3))
    xs = [lo.x_star for lo in sparsity_prior_lower_solve(list(uhat), theta, 2, 3)]
    data = np.hstack([np.array(xs), uhat])
    ev = sparsity_prior_hypergradient(data, theta, 2, 3)
    assert ev.loss <= 1e-20 and np.max(np.abs(ev.grad)) <= 1e-10


def test_training_strictly_decreases(rng):
    data = synthetic_dataset(2, 3, 4, rng)
    trace = bilevel_train(data, 2, 3, steps=50, lr=0.5, rng=rng)
    assert len(trace.losses) == 51
    assert all(b < a for a, b in zip(trace.losses, trace.losses[1:]))


def test_read_dataset_skips_header(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("u0,uhat0\n1.5,2\n-1,0.25\n")
    np.testing.assert_array_equal(read_dataset(p), [[1.5, 2.0], [-1.0, 0.25]])


def test_sparsity_composite_shapes():
    cs = sparsity_composite(np.ones(3), 2, 3)
    assert (cs.m, cs.n, cs.p) == (2, 3, 6)


# ---------------------------------------------------------------- unrolling

def test_unrolled_fixed_point_of_recursion(rng):
    spec = random_lasso(rng)
    theta = rng.standard_normal(spec.p)
    rep, ij, _ = differentiate(spec, theta, tol=1e-13)
    if ij.blocks.at_kink:
        pytest.skip("kink draw")
    Jk = unrolled_jacobian(spec, theta, rep.x_star, ij.J, rep.gamma_used, 25)
    np.testing.assert_allclose(Jk, ij.J, atol=1e-10)


def test_unrolled_quadratic_decays_at_tau():
    spec = quadratic([[1.0]])
    out = unroll_compare(spec, [2.0], 60, gamma=0.25)
    errs = np.array(out["errors"])
    # J_k - 1 = -(0.75)^k exactly
    np.testing.assert_allclose(errs, 0.75 ** np.arange(61), rtol=1e-9, atol=1e-15)


def test_unrolled_error_within_measured_rate(rng):
    for _ in range(5):
        Q = np.diag(rng.uniform(0.5, 3.0, 3))
        spec = quadratic(Q)
        out = unroll_compare(spec, rng.standard_normal(3), 80)
        tau = out["measured_rate"]
        e0 = out["errors"][0]
        for k, e in enumerate(out["errors"]):
            assert e <= e0 * tau ** k * 1.1 + 1e-14


def test_unrolled_lasso_reaches_implicit(rng):
    for _ in range(3):
        spec = random_lasso(rng)
        theta = rng.standard_normal(spec.p)
        tau = fixed_point_solve(spec, theta, tol=1e-12).measured_rate
        k0 = int(np.ceil(np.log(1e-7) / np.log(tau)))
        out = unroll_compare(spec, theta, 3 * k0)
        start = k0 + (out["switches"][-1] if out["switches"] else 0)
        assert start < 3 * k0
        assert max(out["errors"][start:]) <= 1e-6


def test_unroll_records_selection_switches():
    # starting far from the active set, the soft-threshold selection flips once
    trace = unroll_trace(lasso(0.5), [2.0], [-5.0], [[0.0]], 0.25, 50)
    assert len(trace.switches) >= 1
