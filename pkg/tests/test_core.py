import numpy as np
import pytest

from monodiff.core import (
    DimensionMismatch,
    NonPositiveModulus,
    ProblemSpec,
    Selection,
    block_diagonal_selection,
    separable_selection,
    validate,
)
from monodiff.implicit import differentiate
from monodiff.operators import AffineOperator, L1Prox, ZeroProx
from monodiff.solver import fixed_point_solve
from problems import lasso, quadratic, random_lasso


def _spec(alpha=1.0, beta=1.0, part="B", forward=None):
    forward = forward or AffineOperator(np.eye(2), C=np.ones((2, 1)))
    return ProblemSpec(2, 1, ZeroProx(2, 1), forward, alpha, beta, part)


def test_validate_accepts_consistent_spec():
    validate(_spec())


def test_validate_rejects_zero_modulus_with_declared_part():
    with pytest.raises(NonPositiveModulus):
        validate(_spec(alpha=0.0, part="A"))


def test_validate_probes_shapes():
    class Wrong(AffineOperator):
        def __call__(self, theta, x):
            return np.zeros(3)

    with pytest.raises(DimensionMismatch):
        validate(_spec(forward=Wrong(np.eye(2), C=np.ones((2, 1)))))


def test_validate_rejects_bad_dimensions_and_moduli():
    with pytest.raises(DimensionMismatch):
        validate(ProblemSpec(2, 0, ZeroProx(2, 0), AffineOperator(np.eye(2), p=0), 1, 1, "B"))
    with pytest.raises(NonPositiveModulus):
        validate(_spec(beta=-1.0))
    with pytest.raises(ValueError):
        validate(_spec(part="C"))


def test_solve_report_residual_is_recomputable(rng):
    for spec in [quadratic(np.diag([1.0, 3.0])), lasso(0.5, 3), random_lasso(rng)]:
        for _ in range(5):
            theta = 2 * rng.standard_normal(spec.p)
            rep = fixed_point_solve(spec, theta, tol=1e-9)
            recomputed = np.linalg.norm(rep.x_star - spec.H(theta, rep.x_star, rep.gamma_used))
            assert rep.residual_norm <= 1e-9
            assert recomputed <= 2 * rep.residual_norm + 1e-300
            assert 0.0 <= rep.measured_rate < 1.0
            d = rep.to_dict()
            assert d["iterations"] == rep.iterations and d["x_star"] == rep.x_star.tolist()


def test_blocks_store_exact_evaluation_points(rng):
    spec = random_lasso(rng)
    theta = rng.standard_normal(spec.p)
    rep, ij, _ = differentiate(spec, theta)
    b = ij.blocks
    g = rep.gamma_used
    np.testing.assert_array_equal(b.at_forward_point, rep.x_star)
    np.testing.assert_array_equal(b.at_resolvent_point, rep.x_star - g * spec.forward(theta, rep.x_star))
    np.testing.assert_array_equal(b.theta, theta)


def test_separable_selection_enumerates_products():
    sel = separable_selection(np.zeros((3, 1)), np.array([1.0, 0.0, 0.0]),
                              [(1, ((np.zeros(1), 0.0), (np.ones(1), 1.0))),
                               (2, ((np.zeros(1), 0.0), (np.ones(1), 1.0)))])
    assert sel.at_kink and len(sel.extremes) == 4
    diags = {tuple(np.diag(dx)) for _, dx in sel.extremes}
    assert diags == {(1, 0, 0), (1, 1, 0), (1, 0, 1), (1, 1, 1)}
    assert len(sel.candidates()) == 4  # canonical duplicates one extreme


def test_block_diagonal_selection_stacks():
    a = Selection(np.ones((1, 2)), np.array([[2.0]]))
    b = L1Prox(2, 2, 1.0).jacobian(np.zeros(2), np.array([1.0, 3.0]), 1.0)
    sel = block_diagonal_selection([a, b])
    assert sel.d_x.shape == (3, 3) and sel.d_theta.shape == (3, 2)
    np.testing.assert_array_equal(np.diag(sel.d_x), [2, 0, 1])
    assert len(sel.extremes) == 2
