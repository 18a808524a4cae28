"""Desk-scale acceptance suite shared by the test-suite and ``monodiff selftest``.

Each ``criterion_*`` function returns a :class:`CriterionResult`. Two fault
injection knobs exist so the suite can be shown to fail when it should:
``gamma_scale`` multiplies the step size in the contraction criterion and
``jacobian_shift`` is added to the forward Jacobian in the smooth oracle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, List, Optional

import numpy as np

from .bilevel import (
    bilevel_train,
    default_theta0,
    sparsity_prior_hypergradient,
    sparsity_prior_loss,
    synthetic_dataset,
    unroll_compare,
)
from .core import InadmissibleStepSize, MonodiffError, ProblemSpec, Selection, op_norm
from .counterexamples import (
    SmoothedSquare,
    corner_direction,
    hessian,
    report as counterexample_report,
    singularity_probe,
)
from .duality import (
    CompositeSpec,
    DualGradient,
    QuadraticFunction,
    dual_constants,
    dual_problem,
    primal_from_dual,
    solve_dual_and_differentiate,
)
from .implicit import contraction_certificate, differentiate, fd_jacobian, theory_bound
from .operators import (
    AffineMatrix,
    AffineOperator,
    BoxProjection,
    BoxSupportProx,
    ForwardOperator,
    HuberConjugateProx,
    HuberProx,
    L1Prox,
    LinfBallProjection,
    OriginIndicator,
    QuadraticConjugateProx,
    QuadraticResolvent,
    SquaredNorm,
    SquaredNormConjugate,
    ZeroOperator,
    ZeroProx,
    make_prox,
    PROX_REGISTRY,
)
from .saddle import MinMaxSpec, PrimalDualSpec, minmax_solve_and_differentiate, pd_solve_and_differentiate
from .solver import admissible_upper, fixed_point_solve, step_size_default


@dataclass(frozen=True)
class CriterionResult:
    number: int
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.number:2d} {self.name}: {self.detail}"


def _random_spd(rng, n, lo=0.5, hi=3.0):
    Qm, _ = np.linalg.qr(rng.standard_normal((n, n)))
    return (Qm * rng.uniform(lo, hi, n)) @ Qm.T


class ShiftedJacobian(ForwardOperator):
    """Wraps a forward operator and adds ``shift`` to every entry of its x-Jacobian."""

    def __init__(self, base: ForwardOperator, shift: float):
        self.base, self.shift = base, shift
        self.n, self.p = base.n, base.p
        self.lipschitz, self.modulus = base.lipschitz, base.modulus

    def __call__(self, theta, x):
        return self.base(theta, x)

    def jacobian(self, theta, x):
        s = self.base.jacobian(theta, x)
        return Selection(s.d_theta, s.d_x + self.shift, s.extremes)


# --------------------------------------------------------------------------


def criterion_smooth(rng, jacobian_shift: float = 0.0, instances: int = 20) -> CriterionResult:
    worst_rel, worst_fd = 0.0, 0.0
    for _ in range(instances):
        n = int(rng.integers(1, 11))
        Q = _random_spd(rng, n)
        fwd = AffineOperator(Q, C=-np.eye(n), p=n)
        if jacobian_shift:
            fwd = ShiftedJacobian(fwd, jacobian_shift)
        eig = np.linalg.eigvalsh(Q)
        spec = ProblemSpec(n, n, ZeroProx(n, n), fwd, float(eig[0]), float(eig[-1]), "B")
        theta = rng.standard_normal(n)
        _, ij, _ = differentiate(spec, theta, tol=1e-12)
        Qi = np.linalg.inv(Q)
        worst_rel = max(worst_rel, float(np.linalg.norm(ij.J - Qi) / np.linalg.norm(Qi)))
        fd = fd_jacobian(spec, theta, h=1e-5)
        worst_fd = max(worst_fd, float(np.max(np.abs(ij.J - fd))))
    ok = worst_rel <= 1e-8 and worst_fd <= 1e-5
    return CriterionResult(1, "smooth oracle", ok, f"max rel err vs Q^-1 {worst_rel:.2e} (<=1e-8), "
                                                    f"max |J - FD| {worst_fd:.2e} (<=1e-5)")


def lasso_problem(lam: float) -> ProblemSpec:
    """``min_x (x - theta)^2/2 + lam |x|`` as a forward-backward problem."""
    return ProblemSpec(1, 1, L1Prox(1, 1, lam), AffineOperator(np.eye(1), C=-np.eye(1), p=1), 1.0, 1.0, "B")


def criterion_lasso(rng, lam: float = 0.7, points: int = 100) -> CriterionResult:
    spec = lasso_problem(lam)
    bad = 0
    thetas = rng.uniform(-3, 3, points)
    thetas = thetas[np.abs(np.abs(thetas) - lam) > 1e-3]
    for t in thetas:
        _, ij, _ = differentiate(spec, [t], tol=1e-12)
        expect = 1.0 if abs(t) > lam else 0.0
        bad += int(ij.J[0, 0] != expect or ij.extreme_set_size != 1)
    _, ij, _ = differentiate(spec, [lam], tol=1e-12)
    kink = sorted(float(J[0, 0]) for J in ij.alternatives)
    kink_ok = len(kink) == 2 and kink[0] == 0.0 and kink[1] == 1.0
    ok = bad == 0 and kink_ok
    return CriterionResult(2, "lasso oracle", ok, f"{len(thetas) - bad}/{len(thetas)} generic points exact; "
                                                   f"extreme set at kink {kink}")


def _regime_instance(rng, part):
    n = int(rng.integers(1, 8))
    p = n
    if part == "B":
        S = _random_spd(rng, n)
        A = rng.standard_normal((n, n))
        M = S + 0.5 * (A - A.T)
        fwd = AffineOperator(M, C=rng.standard_normal((n, p)), p=p)
        prox = (L1Prox(n, p, rng.uniform(0.1, 1.0)) if rng.random() < 0.5
                else BoxProjection(n, p, -rng.uniform(0.2, 2.0), rng.uniform(0.2, 2.0)))
        alpha = float(np.linalg.eigvalsh(0.5 * (M + M.T))[0])
        beta = op_norm(M)
    else:
        A = rng.standard_normal((n, n))
        M = 0.5 * (A - A.T) + 0.1 * np.eye(n)
        fwd = AffineOperator(M, C=rng.standard_normal((n, p)), p=p)
        alpha = rng.uniform(0.5, 2.0)
        prox = SquaredNorm(n, p, alpha, C=rng.standard_normal((n, p)),
                           lo=-rng.uniform(0.5, 2.0), hi=rng.uniform(0.5, 2.0))
        beta = op_norm(M)
    return ProblemSpec(n, p, prox, fwd, alpha, beta, part)


def criterion_contraction(rng, gamma_scale: float = 1.0, instances: int = 50) -> CriterionResult:
    fails = []
    worst_gap, worst_rate_gap = -math.inf, -math.inf
    for part in ("B", "A"):
        for _ in range(instances):
            spec = _regime_instance(rng, part)
            gamma = gamma_scale * step_size_default(spec.alpha, spec.beta)
            bound = theory_bound(gamma, spec.alpha, spec.beta, part)
            admissible = gamma < admissible_upper(spec.alpha, spec.beta) and bound < 1.0
            theta = rng.standard_normal(spec.p)
            try:
                report, ij, cert = differentiate(spec, theta, gamma=gamma, tol=1e-10, max_iter=200_000)
            except MonodiffError as exc:
                fails.append(f"{part}: {type(exc).__name__}")
                continue
            worst_gap = max(worst_gap, cert.sampled_norm - bound)
            worst_rate_gap = max(worst_rate_gap, report.measured_rate - bound)
            if not (admissible and cert.verdict and cert.sampled_norm <= bound + 1e-9
                    and report.measured_rate <= bound + 0.02):
                fails.append(part)
    ok = not fails
    detail = (f"max(sampled - bound) {worst_gap:.2e}, max(rate - bound) {worst_rate_gap:.2e}, "
              f"gamma scale {gamma_scale:g}, failures {len(fails)}")
    return CriterionResult(3, "contraction bounds", ok, detail)


def _composite_pair(rng, kind):
    """A composite problem with diagonal constant K and the equivalent direct problem."""
    n = int(rng.integers(1, 6))
    p = int(rng.integers(1, 4))
    P = _random_spd(rng, n)
    C, c = rng.standard_normal((n, p)), rng.standard_normal(n)
    f = QuadraticFunction(P, C, c, p=p)
    eig = np.linalg.eigvalsh(P)
    d = rng.uniform(0.5, 2.0, n) * rng.choice([-1.0, 1.0], n)
    if kind == "l1":
        w = rng.uniform(0.1, 1.0)
        g, direct = L1Prox(n, p, w), L1Prox(n, p, w * np.abs(d))
    elif kind == "box":
        lo, hi = -rng.uniform(0.2, 1.0), rng.uniform(0.2, 1.0)
        d = np.abs(d)
        g, direct = BoxProjection(n, p, lo, hi), BoxProjection(n, p, lo / d, hi / d)
    else:
        d = np.full(n, d[0])
        w = rng.uniform(0.2, 2.0)
        g, direct = SquaredNorm(n, p, w), SquaredNorm(n, p, w * d[0] ** 2)
    K = AffineMatrix.constant(np.diag(d), p)
    cspec = CompositeSpec(f, g, K)
    dspec = ProblemSpec(n, p, direct, f.gradient(), float(eig[0]), float(eig[-1]), "B")
    return cspec, dspec


def criterion_duality(rng, instances: int = 20) -> CriterionResult:
    worst_x, worst_const, worst_witness = 0.0, 0.0, math.inf
    kinds = ("l1", "box", "squared")
    for k in range(instances):
        cspec, dspec = _composite_pair(rng, kinds[k % 3])
        theta = rng.standard_normal(cspec.p)
        sol = solve_dual_and_differentiate(cspec, theta, tol=1e-12)
        x_dual, _ = primal_from_dual(cspec, theta, sol.y_star)
        x_direct = fixed_point_solve(dspec, theta, tol=1e-12).x_star
        worst_x = max(worst_x, float(np.linalg.norm(x_dual - x_direct)))
        s = np.linalg.svd(cspec.K(theta), compute_uv=False)
        a, b = cspec.moduli()
        _, (a_d, b_d, _) = dual_problem(cspec, theta)
        worst_const = max(worst_const, abs(a_d - s[-1] ** 2 / b), abs(b_d - s[0] ** 2 / a))
        grad = DualGradient(cspec.f, cspec.K, a_d, b_d)
        for _ in range(100):
            y1, y2 = rng.standard_normal((2, cspec.m)) * 2
            dy = y1 - y2
            lhs = float((grad(theta, y1) - grad(theta, y2)) @ dy)
            worst_witness = min(worst_witness, lhs - a_d * float(dy @ dy) + 1e-12 * (1 + abs(lhs)))
    ok = worst_x <= 1e-8 and worst_const <= 1e-12 and worst_witness >= 0
    return CriterionResult(4, "duality pipeline", ok, f"max |x_dual - x_direct| {worst_x:.2e} (<=1e-8), "
                                                       f"constant error {worst_const:.1e}, "
                                                       f"min witness slack {worst_witness:.2e} (>=0)")


def random_primal_dual(rng):
    n, m, p = int(rng.integers(1, 5)), int(rng.integers(1, 5)), int(rng.integers(1, 4))
    alpha = rng.uniform(0.5, 2.0)
    prox_g = SquaredNorm(n, p, alpha, C=rng.standard_normal((n, p)), c=rng.standard_normal(n),
                         lo=-rng.uniform(1.0, 3.0), hi=rng.uniform(1.0, 3.0))
    prox_f = SquaredNorm(m, p, alpha * rng.uniform(1.0, 2.0), C=rng.standard_normal((m, p)),
                         lo=-rng.uniform(0.3, 1.5), hi=rng.uniform(0.3, 1.5))
    K = AffineMatrix(rng.standard_normal((m, n)), 0.3 * rng.standard_normal((p, m, n)))
    theta = rng.standard_normal(p)
    beta = 1.05 * op_norm(K(theta))
    return PrimalDualSpec(prox_g, prox_f, K, alpha, beta), theta


def _generic(ij, spec, theta, gamma, margin=1e-3):
    """True when every separable prox coordinate is at least ``margin`` away from a kink."""
    from .operators import BlockDiagonalProx

    b = ij.blocks
    u = b.at_resolvent_point
    parts = spec.resolvent.parts if isinstance(spec.resolvent, BlockDiagonalProx) else [spec.resolvent]
    off = 0
    for part in parts:
        seg = u[off:off + part.n]
        off += part.n
        if isinstance(part, SquaredNorm):
            gm = gamma * part.weight
            v = (seg + gm * part._center(theta)) / (1 + gm)
            if np.any(np.minimum(np.abs(v - part.lo), np.abs(v - part.hi)) < margin):
                return False
    return True


def criterion_primal_dual(rng, instances: int = 20) -> CriterionResult:
    worst_fd, worst_spread, done = 0.0, 0.0, 0
    while done < instances:
        pds, theta = random_primal_dual(rng)
        sol = pd_solve_and_differentiate(pds, theta, tol=1e-12)
        spec = pds.problem()
        gamma = sol.report.gamma_used
        if not _generic(sol.J, spec, theta, gamma):
            continue
        fd = fd_jacobian(spec, theta, gamma=gamma, h=1e-5)
        worst_fd = max(worst_fd, float(np.max(np.abs(sol.J.J - fd))))
        for _ in range(10):
            z0 = 5 * rng.standard_normal(spec.n)
            z = pd_solve_and_differentiate(pds, theta, tol=1e-12, z0=z0).z_star
            worst_spread = max(worst_spread, float(np.linalg.norm(z - sol.z_star)))
        done += 1
    ok = worst_fd <= 1e-4 and worst_spread <= 1e-8
    return CriterionResult(5, "primal-dual", ok, f"max |J - FD| {worst_fd:.2e} (<=1e-4), "
                                                  f"init spread {worst_spread:.2e} (<=1e-8)")


def separable_minmax(alpha: float = 1.0) -> MinMaxSpec:
    """``Phi = |x - theta|^2/2 - |y + theta|^2/2`` on ``R x [-1, 1]``."""
    prox_x = SquaredNorm(1, 1, alpha, C=np.eye(1))
    prox_y = SquaredNorm(1, 1, alpha, C=-np.eye(1), lo=-1.0, hi=1.0)
    return MinMaxSpec.separable(prox_x, prox_y, alpha)


def criterion_minmax(rng, points: int = 100) -> CriterionResult:
    mm = separable_minmax()
    bad = 0
    thetas = rng.uniform(-3, 3, points)
    thetas = thetas[np.abs(np.abs(thetas) - 1) > 1e-3]
    for t in thetas:
        sol = minmax_solve_and_differentiate(mm, [t], tol=1e-12)
        J = sol.J.J[:, 0]
        expect_J = np.array([1.0, -1.0 if abs(t) < 1 else 0.0])
        expect_z = np.array([t, np.clip(-t, -1, 1)])
        if np.max(np.abs(J - expect_J)) > 1e-12 or np.max(np.abs(sol.z_star - expect_z)) > 1e-9:
            bad += 1
    enforced = 0
    for g in (1.0, 1.5, 0.0, -0.1):
        try:
            minmax_solve_and_differentiate(mm, [0.3], gamma=g)
        except InadmissibleStepSize:
            enforced += 1
    ok = bad == 0 and enforced == 4
    return CriterionResult(6, "min-max", ok, f"{len(thetas) - bad}/{len(thetas)} points match closed form; "
                                             f"{enforced}/4 inadmissible step sizes rejected")


def criterion_unrolling(rng, instances: int = 10) -> CriterionResult:
    worst = -math.inf
    checked = 0
    cases = []
    for _ in range(instances):
        n = int(rng.integers(1, 6))
        Q = _random_spd(rng, n)
        eig = np.linalg.eigvalsh(Q)
        cases.append((ProblemSpec(n, n, ZeroProx(n, n), AffineOperator(Q, C=-np.eye(n), p=n),
                                  float(eig[0]), float(eig[-1]), "B"), rng.standard_normal(n)))
        lam = rng.uniform(0.2, 1.0)
        spec = ProblemSpec(n, n, L1Prox(n, n, lam), AffineOperator(Q, C=-np.eye(n), p=n),
                           float(eig[0]), float(eig[-1]), "B")
        cases.append((spec, 2 * rng.standard_normal(n)))
    for spec, theta in cases:
        res = unroll_compare(spec, theta, k=3000, tol=1e-13)
        gamma = res["gamma"]
        # lasso instances must sit away from the threshold to count as generic
        if isinstance(spec.resolvent, L1Prox):
            xs = res["x_star"]
            u = xs - gamma * spec.forward(theta, xs)
            level = gamma * spec.resolvent.weight
            if np.min(np.abs(np.abs(u) - level)) < 1e-3:
                continue
        tau = res["measured_rate"]
        errs = np.asarray(res["errors"])
        e0 = errs[0]
        if tau <= 0 or e0 == 0:
            k0 = 1
        else:
            k0 = int(math.ceil(math.log(1e-7 / e0) / math.log(tau))) if e0 > 1e-7 else 0
        if k0 >= errs.size:
            worst = math.inf
            continue
        checked += 1
        worst = max(worst, float(errs[k0:].max()))
    ok = checked > 0 and worst <= 1e-6
    return CriterionResult(7, "unrolling", ok, f"max |J_k - J_implicit| past the threshold {worst:.2e} (<=1e-6) "
                                               f"on {checked} instances")


def criterion_counterexample(rng, samples: int = 4096) -> CriterionResult:
    r = counterexample_report(samples=samples, seed=int(rng.integers(1 << 31)))
    sq = SmoothedSquare()
    face_points = []
    for t in np.linspace(-0.95, 0.95, 9) * sq.face_angle:
        for k in range(4):
            ang = t + k * math.pi / 2
            face_points.append((rng.uniform(0.1, 5.0), np.array([math.cos(ang), math.sin(ang)])))
    face_sigma = max(singularity_probe(sq, d, rad) for rad, d in face_points)
    resid_sigma = max(float(np.linalg.svd(hessian(sq, rad * d, 0.0).d_x, compute_uv=False)[-1])
                      for rad, d in face_points)
    corner_sigma = singularity_probe(sq, corner_direction(sq))
    a = r["lipschitz_hat"] <= 1 + 1e-6
    b = r["rho_hat"] < 1 and r["convergence_rate"] <= r["rho_hat"] + 0.02
    c = face_sigma <= 1e-10 and corner_sigma > 1e-3
    d = r["firm_violation"] <= 1e-12 and resid_sigma <= 1e-10
    detail = (f"(a) Lip {r['lipschitz_hat']:.6f} (b) rho {r['rho_hat']:.4f} rate {r['convergence_rate']:.4f} "
              f"(c) face sigma {face_sigma:.1e} corner sigma {corner_sigma:.3f} "
              f"(d) firm {r['firm_violation']:.1e} residual sigma {resid_sigma:.1e}")
    return CriterionResult(8, "counterexample", a and b and c and d, detail)


def criterion_bilevel(rng, steps: int = 50) -> CriterionResult:
    s, n = 2, 3
    data = synthetic_dataset(s, n, 4, rng)
    theta = default_theta0(s, n, rng)
    ev = sparsity_prior_hypergradient(data, theta, s, n)
    h = 1e-5
    fd = np.array([(sparsity_prior_loss(data, theta + h * e, s, n) - sparsity_prior_loss(data, theta - h * e, s, n))
                   / (2 * h) for e in np.eye(s * n)])
    rel = float(np.linalg.norm(ev.grad - fd) / max(np.linalg.norm(fd), 1e-12))
    trace = bilevel_train(data, s, n, theta, steps=steps, lr=0.5)
    losses = trace.losses
    strict = len(losses) == steps + 1 and all(b < a for a, b in zip(losses, losses[1:]))
    ok = rel <= 1e-4 and strict
    return CriterionResult(9, "bilevel sparsity prior", ok, f"hypergradient rel err {rel:.2e} (<=1e-4); "
                                                            f"loss {losses[0]:.4f} -> {losses[-1]:.4f} over "
                                                            f"{len(losses) - 1} strictly decreasing steps")


def conjugate_pairs(rng, n: int = 3, p: int = 2):
    """Every prox with an explicit conjugate, plus every registry entry with its conjugate."""
    Q = _random_spd(rng, n)
    C = rng.standard_normal((n, p))
    lo, hi = -rng.uniform(0.1, 2.0, n), rng.uniform(0.1, 2.0, n)
    explicit = [
        ZeroProx(n, p),
        L1Prox(n, p, rng.uniform(0.1, 2.0, n)),
        L1Prox(n, p, 0.7, theta_index=0),
        BoxProjection(n, p, lo, hi),
        SquaredNorm(n, p, 1.7, C=C, c=rng.standard_normal(n)),
        SquaredNorm(n, p, 0.8, C=C, lo=lo, hi=hi),
        HuberProx(n, p, 0.6, C=C),
        QuadraticResolvent(Q, rng.standard_normal(n), C, p),
    ]
    registry = [make_prox(name, n, p) for name in sorted(PROX_REGISTRY)]
    out = []
    for g in explicit + registry:
        gc = g.conjugate()
        out.append((g, gc))
        out.append((gc, gc.conjugate()))
    return out


def criterion_moreau(rng, points: int = 100) -> CriterionResult:
    worst = 0.0
    pairs = conjugate_pairs(rng)
    for g, gc in pairs:
        for _ in range(points):
            theta = rng.standard_normal(g.p)
            if getattr(g, "theta_index", None) is not None:
                theta[g.theta_index] = abs(theta[g.theta_index]) + 0.1
            y = 3 * rng.standard_normal(g.n)
            gamma = float(np.exp(rng.uniform(-2, 2)))
            lhs = g(theta, y, gamma) + gamma * gc(theta, y / gamma, 1.0 / gamma)
            worst = max(worst, float(np.max(np.abs(lhs - y))))
    ok = worst <= 1e-10
    return CriterionResult(10, "Moreau identity", ok, f"max deviation {worst:.2e} (<=1e-10) over {len(pairs)} pairs")


CRITERIA: List[Callable] = [
    criterion_smooth,
    criterion_lasso,
    criterion_contraction,
    criterion_duality,
    criterion_primal_dual,
    criterion_minmax,
    criterion_unrolling,
    criterion_counterexample,
    criterion_bilevel,
    criterion_moreau,
]


def run_all(seed: int = 0, gamma_scale: float = 1.0, jacobian_shift: float = 0.0,
            echo: Optional[Callable[[str], None]] = None) -> List[CriterionResult]:
    results = []
    for k, fn in enumerate(CRITERIA):
        rng = np.random.default_rng([seed, k])
        if fn is criterion_contraction:
            res = fn(rng, gamma_scale=gamma_scale)
        elif fn is criterion_smooth:
            res = fn(rng, jacobian_shift=jacobian_shift)
        else:
            res = fn(rng)
        if echo is not None:
            echo(res.line())
        results.append(res)
    return results
