import math

import numpy as np
import pytest

from monodiff.core import SpecViolation
from monodiff.counterexamples import (
    GaugeSquareGradient,
    SmoothedSquare,
    contraction_factor_measure,
    convergence_rate,
    corner_direction,
    face_direction,
    firm_nonexpansiveness_check,
    gauge,
    h_grad,
    hessian,
    prox_counterexample,
    report,
    singularity_probe,
)
from oracles import bisection_gauge

SQ = SmoothedSquare()
DISK = SmoothedSquare(1.0, 1.0)


def _fd_grad(fn, x, h=1e-6):
    return np.array([(fn(x + h * e) - fn(x - h * e)) / (2 * h) for e in np.eye(2)])


def test_gauge_examples():
    assert gauge(SQ, [1, 0]) == 1.0
    assert gauge(SQ, [2, 0]) == 2.0
    assert gauge(SQ, [0, 0]) == 0.0
    # corner apex of the rounded square lies at b + r / sqrt(2) along the diagonal
    apex = SQ.inner + SQ.corner_radius / math.sqrt(2)
    assert gauge(SQ, [apex, apex]) == pytest.approx(1.0, abs=1e-14)


def test_gauge_matches_bisection(rng):
    for sq in (SQ, SmoothedSquare(2.0, 0.7), DISK):
        for _ in range(200):
            x = 3 * rng.standard_normal(2)
            assert gauge(sq, x) == pytest.approx(bisection_gauge(sq.contains, x), rel=1e-10, abs=1e-12)


def test_gauge_homogeneity(rng):
    for _ in range(100):
        x = rng.standard_normal(2)
        for t in (0.5, 2.0, 10.0):
            assert gauge(SQ, t * x) == pytest.approx(t * gauge(SQ, x), rel=1e-12)
            np.testing.assert_allclose(h_grad(SQ, t * x)[1], t * h_grad(SQ, x)[1], rtol=1e-12, atol=1e-15)


def test_h_grad_examples_and_fd(rng):
    assert h_grad(SQ, [0, 0]) == (0.0, pytest.approx(np.zeros(2)))
    # right face: h = scale x1^2 / 2 locally
    val, g = h_grad(SQ, [0.8, 0.1])
    assert val == pytest.approx(SQ.scale * 0.32)
    np.testing.assert_allclose(g, [SQ.scale * 0.8, 0.0])
    for _ in range(200):
        x = 2 * rng.standard_normal(2)
        if SQ.region(x, 1e-4) == "boundary":
            continue
        fd = _fd_grad(lambda z: h_grad(SQ, z)[0], x)
        np.testing.assert_allclose(h_grad(SQ, x)[1], fd, atol=1e-6)


def test_h_grad_is_continuous_across_regions():
    t = SQ.face_angle
    for eps in (1e-6, 1e-9):
        a = h_grad(SQ, [math.cos(t - eps), math.sin(t - eps)])[1]
        b = h_grad(SQ, [math.cos(t + eps), math.sin(t + eps)])[1]
        assert np.linalg.norm(a - b) <= 10 * eps


def test_hessian_matches_fd(rng):
    for _ in range(100):
        x = 2 * rng.standard_normal(2)
        if SQ.region(x, 1e-3) == "boundary":
            continue
        fd = np.column_stack([(h_grad(SQ, x + 1e-6 * e)[1] - h_grad(SQ, x - 1e-6 * e)[1]) / 2e-6 for e in np.eye(2)])
        np.testing.assert_allclose(hessian(SQ, x).d_x, fd, atol=1e-6)


def test_hessian_extremes_on_switching_ray():
    t = SQ.face_angle
    sel = hessian(SQ, [math.cos(t), math.sin(t)])
    assert sel.at_kink and len(sel.extremes) == 2
    assert hessian(SQ, [0, 0]).at_kink


def test_convexity_witness(rng):
    for _ in range(10_000):
        x, y = 2 * rng.standard_normal((2, 2))
        assert (h_grad(SQ, x)[1] - h_grad(SQ, y)[1]) @ (x - y) >= -1e-12


def test_contraction_measure_square():
    m = contraction_factor_measure(SQ, 2048)
    assert m.lipschitz_hat <= 1 + 1e-6
    assert m.rho_hat < 1
    assert m.rho_hat <= m.cocoercive_bound + 1e-12 <= m.stated_bound + 1e-12


def test_contraction_measure_disk():
    m = contraction_factor_measure(DISK, 512)
    # grad h = scale * x on the unit disk, rescaled to slope 1: rho = |1 - c'| with c' = 1
    assert DISK.scale == pytest.approx(1.0)
    assert m.rho_hat == pytest.approx(abs(1 - DISK.scale), abs=1e-12)


def test_face_quotients_follow_region_algebra():
    m = contraction_factor_measure(SQ, 4096)
    face = np.abs(np.tan(m.angles)) < SQ.inner / SQ.half_width - 1e-3
    face &= np.cos(m.angles) > 0
    # on the right face x - grad h = ((1 - c) x1, x2)
    c = SQ.scale / SQ.half_width ** 2
    expected = np.hypot((1 - c) * np.cos(m.angles[face]), np.sin(m.angles[face]))
    np.testing.assert_allclose(m.quotients[face], expected, atol=1e-14)


def test_singularity_probe():
    assert singularity_probe(SQ, face_direction(SQ)) <= 1e-10
    assert singularity_probe(SQ, corner_direction(SQ)) > 1e-3
    for t in np.linspace(0, 2 * math.pi, 17):
        assert singularity_probe(DISK, [math.cos(t), math.sin(t)]) == pytest.approx(DISK.scale, rel=1e-9)


def test_prox_counterexample():
    assert not prox_counterexample(SQ, [0, 0]).any()
    x = 0.7 * face_direction(SQ)
    c = SQ.scale / SQ.half_width ** 2
    np.testing.assert_allclose(prox_counterexample(SQ, x), [(1 - c) * x[0], x[1]])
    V = np.eye(2) - hessian(SQ, x, kink_tol=0.0).d_x
    assert np.linalg.svd(np.eye(2) - V, compute_uv=False)[-1] <= 1e-10
    assert firm_nonexpansiveness_check(SQ, 10_000) <= 1e-12


def test_prox_is_contractive_on_norms(rng):
    rho = contraction_factor_measure(SQ, 2048).rho_hat
    for _ in range(200):
        x = rng.standard_normal(2)
        assert np.linalg.norm(prox_counterexample(SQ, x)) <= rho * np.linalg.norm(x) * (1 + 1e-12)


def test_linear_convergence_despite_singularity(rng):
    rho = contraction_factor_measure(SQ, 2048).rho_hat
    rate, norms = convergence_rate(SQ, rng.standard_normal(2))
    assert 0 < rate <= rho + 0.02
    assert norms[-1] < 1e-5 * norms[0]


def test_firm_check_catches_expansive_map():
    class Bad(SmoothedSquare):
        pass

    bad = Bad()
    object.__setattr__(bad, "scale", -1.0)  # x + grad h is expansive
    with pytest.raises(SpecViolation):
        firm_nonexpansiveness_check(bad, 100)


def test_invalid_square():
    with pytest.raises(SpecViolation):
        SmoothedSquare(1.0, 1.5)
    with pytest.raises(SpecViolation):
        SmoothedSquare(-1.0, 0.1)


def test_forward_operator_wrapper():
    op = GaugeSquareGradient(SQ, p=2)
    np.testing.assert_allclose(op([0.1, 0.2], [1.1, 0.2]), h_grad(SQ, [1.0, 0.0])[1])
    sel = op.jacobian([0.0, 0.0], [0.8, 0.1])
    np.testing.assert_allclose(sel.d_theta, -sel.d_x)


def test_report_keys():
    r = report(samples=512)
    for key in ("rho_hat", "lipschitz_hat", "face_sigma_min", "corner_sigma_min", "convergence_rate"):
        assert key in r
    assert r["face_sigma_min"] <= 1e-10 and r["residual_sigma_min"] <= 1e-10
