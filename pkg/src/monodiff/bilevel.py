"""Hypergradients through solution maps, the sparsity-prior learning problem and unrolling."""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.optimize import nnls

from .core import (
    DivergenceDetected,
    MaxIterationsExceeded,
    ProblemSpec,
    SurjectivityLost,
    as_vector,
    parallel_map,
)
from .duality import CompositeSpec, QuadraticFunction, primal_from_dual, primal_vjp, solve_dual_and_differentiate
from .implicit import assemble_blocks, implicit_jacobian, vjp
from .operators import AffineMatrix, L1Prox
from .solver import check_step, fixed_point_solve, resolve_gamma

INNER_TOL = 1e-12


@dataclass(frozen=True)
class Hypergradient:
    grad: np.ndarray
    x_star: np.ndarray
    extreme_set_size: int


def hypergradient(problem: Union[ProblemSpec, CompositeSpec], theta, outer_grad: Callable,
                  gamma: Optional[float] = None, tol: float = INNER_TOL, x0=None,
                  max_iter: int = 1_000_000) -> Hypergradient:
    """``J^T grad l(x*(theta))`` for the canonical selection.

    ``problem`` is either a forward-backward ``ProblemSpec`` or a
    ``CompositeSpec`` handled through its dual. ``extreme_set_size`` counts the
    distinct Jacobians at a kink (1 at smooth points).
    """
    if isinstance(problem, CompositeSpec):
        sol = solve_dual_and_differentiate(problem, theta, gamma=gamma, tol=tol, y0=x0, max_iter=max_iter)
        x_star, _ = primal_from_dual(problem, theta, sol.y_star)
        g = primal_vjp(problem, sol, theta, np.asarray(outer_grad(x_star), dtype=float))
        return Hypergradient(g, x_star, sol.J_dual.extreme_set_size)
    report = fixed_point_solve(problem, theta, x0=x0, tol=tol, gamma=gamma, max_iter=max_iter)
    g_used = report.gamma_used
    blocks = assemble_blocks(problem, theta, report.x_star, g_used, tol=max(tol, report.residual_norm))
    size = implicit_jacobian(blocks, g_used).extreme_set_size
    v = np.asarray(outer_grad(report.x_star), dtype=float)
    return Hypergradient(vjp(blocks, g_used, v), report.x_star, size)


# --------------------------------------------------------------------------
# sparsity prior: min_theta sum_i ||u_i - x_i(theta)||^2 / 2 with
# x_i(theta) = argmin_x ||x - uhat_i||^2 / 2 + ||K_theta x||_1


def sparsity_composite(uhat, s: int, n: int) -> CompositeSpec:
    """Lower problem for one datum: ``f = ||x - uhat||^2/2``, ``g = ||.||_1``, ``K_theta = theta.reshape(s, n)``."""
    p = s * n
    f = QuadraticFunction(np.eye(n), c=as_vector(uhat, n, "uhat"), p=p)
    return CompositeSpec(f, L1Prox(s, p, 1.0), AffineMatrix.from_theta(s, n), alpha=1.0, beta=1.0)


@dataclass(frozen=True)
class LowerSolution:
    y_star: np.ndarray
    x_star: np.ndarray
    sol: object = field(repr=False)
    cspec: CompositeSpec = field(repr=False)


def _lower_one(uhat, theta, s, n, gamma, tol, y0, max_iter) -> LowerSolution:
    cspec = sparsity_composite(uhat, s, n)
    sol = solve_dual_and_differentiate(cspec, theta, gamma=gamma, tol=tol, y0=y0, max_iter=max_iter)
    x = np.asarray(uhat, dtype=float) - cspec.K(theta).T @ sol.y_star
    return LowerSolution(sol.y_star, x, sol, cspec)


def sparsity_prior_lower_solve(data: Sequence, theta, s: int, n: int, gamma: Optional[float] = None,
                               tol: float = INNER_TOL, warm: Optional[Sequence] = None,
                               max_iter: int = 1_000_000) -> List[LowerSolution]:
    """Per-datum dual fixed point ``y = proj(y - gamma K (K^T y - uhat))`` and ``x = uhat - K^T y``.

    Raises ``SurjectivityLost`` if ``K_theta`` is not onto.
    """
    theta = as_vector(theta, s * n, "theta")
    warm = [None] * len(data) if warm is None else list(warm)
    items = list(zip(data, warm))
    return parallel_map(lambda it: _lower_one(it[0], theta, s, n, gamma, tol, it[1], max_iter), items)


def _split_dataset(dataset, n):
    arr = np.atleast_2d(np.asarray(dataset, dtype=float))
    if arr.shape[1] != 2 * n:
        raise ValueError(f"each datum needs {2 * n} columns (u then uhat), got {arr.shape[1]}")
    return arr[:, :n], arr[:, n:]


@dataclass(frozen=True)
class OuterEvaluation:
    loss: float
    grad: np.ndarray
    lower: List[LowerSolution]


def sparsity_prior_loss(dataset, theta, s: int, n: int, gamma: Optional[float] = None,
                        tol: float = INNER_TOL) -> float:
    u, uhat = _split_dataset(dataset, n)
    lower = sparsity_prior_lower_solve(list(uhat), theta, s, n, gamma, tol)
    return float(sum(0.5 * np.sum((ui - lo.x_star) ** 2) for ui, lo in zip(u, lower)))


def sparsity_prior_hypergradient(dataset, theta, s: int, n: int, gamma: Optional[float] = None,
                                 tol: float = INNER_TOL, warm: Optional[Sequence] = None,
                                 max_iter: int = 1_000_000) -> OuterEvaluation:
    """Outer loss ``sum_i ||u_i - x_i(theta)||^2 / 2`` and its gradient.

    ``dataset`` rows are ``(u_i, uhat_i)`` concatenated. Per-datum gradients
    are summed in dataset order.
    """
    theta = as_vector(theta, s * n, "theta")
    u, uhat = _split_dataset(dataset, n)
    lower = sparsity_prior_lower_solve(list(uhat), theta, s, n, gamma, tol, warm, max_iter)
    grads = [primal_vjp(lo.cspec, lo.sol, theta, lo.x_star - ui) for ui, lo in zip(u, lower)]
    loss = float(sum(0.5 * np.sum((ui - lo.x_star) ** 2) for ui, lo in zip(u, lower)))
    total = np.zeros(s * n)
    for g in grads:
        total = total + g
    return OuterEvaluation(loss, total, lower)


@dataclass(frozen=True)
class TrainTrace:
    theta: np.ndarray
    losses: List[float]
    grad_norms: List[float]
    steps_taken: List[float]


def synthetic_dataset(s: int, n: int, count: int, rng: np.random.Generator, noise: float = 0.3):
    """Pairs ``(u, uhat)`` with ``u`` sparse under a hidden analysis operator plus noise."""
    K_true = np.eye(s, n) + 0.2 * rng.standard_normal((s, n))
    rows = []
    for _ in range(count):
        u = np.linalg.pinv(K_true) @ (rng.standard_normal(s) * (rng.random(s) < 0.5))
        u = u + 0.1 * rng.standard_normal(n)
        rows.append(np.concatenate([u, u + noise * rng.standard_normal(n)]))
    return np.array(rows)


def default_theta0(s: int, n: int, rng: np.random.Generator) -> np.ndarray:
    return (np.eye(s, n) + 0.1 * rng.standard_normal((s, n))).ravel()


def _hull_min_norm(G: np.ndarray) -> np.ndarray:
    """Minimum-norm point of the convex hull of the rows of ``G``."""
    if G.shape[0] == 1:
        return G[0]
    big = 1e3 * max(1.0, float(np.max(np.abs(G))))
    A = np.vstack([G.T, big * np.ones(G.shape[0])])
    b = np.concatenate([np.zeros(G.shape[1]), [big]])
    w, _ = nnls(A, b)
    return G.T @ (w / w.sum())


def conservative_hypergradients(dataset, ev: OuterEvaluation, theta, n: int, cap: int = 256) -> np.ndarray:
    """Outer gradients for every combination of per-datum extreme Jacobians (rows)."""
    u, _ = _split_dataset(dataset, n)
    per_datum = []
    for ui, lo in zip(u, ev.lower):
        x, (_, alts) = primal_from_dual(lo.cspec, theta, lo.y_star, lo.sol.J_dual)
        per_datum.append([J.T @ (x - ui) for J in alts])
    rows = [np.sum(combo, axis=0) for combo in itertools.islice(itertools.product(*per_datum), cap)]
    return np.array(rows)


def bilevel_train(dataset, s: int, n: int, theta0=None, steps: int = 50, lr: float = 0.1,
                  gamma: Optional[float] = None, tol: float = INNER_TOL, shrink: float = 0.5,
                  armijo: float = 1e-4, max_backtracks: int = 40, inner_max_iter: int = 100_000,
                  rng: Optional[np.random.Generator] = None) -> TrainTrace:
    """Gradient descent on the outer loss with Armijo backtracking from ``lr``.

    Each accepted step strictly decreases the loss; lower solves are warm
    started from the previous duals. When the canonical hypergradient is not
    a descent direction (a lower solution sits on a kink), the step follows
    the minimum-norm element of the hull of all extreme hypergradients
    instead; training stops early only if that element vanishes too.
    Candidates whose lower problems do not converge within
    ``inner_max_iter`` iterations (nearly rank-deficient ``K``) are rejected.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    theta = default_theta0(s, n, rng) if theta0 is None else as_vector(theta0, s * n, "theta0").copy()
    ev = sparsity_prior_hypergradient(dataset, theta, s, n, gamma, tol)
    losses, norms, taken = [ev.loss], [float(np.linalg.norm(ev.grad))], []

    def search(direction):
        dd = float(direction @ direction)
        warm = [lo.y_star for lo in ev.lower]
        t = lr
        for _ in range(max_backtracks):
            cand = theta - t * direction
            try:
                new = sparsity_prior_hypergradient(dataset, cand, s, n, gamma, tol, warm, inner_max_iter)
            except (SurjectivityLost, MaxIterationsExceeded, DivergenceDetected, np.linalg.LinAlgError):
                new = None
            if new is not None and new.loss <= ev.loss - armijo * t * dd and new.loss < ev.loss:
                return cand, new, t
            t *= shrink
        return None

    for _ in range(steps):
        if not ev.grad.any():
            break
        step = search(ev.grad)
        if step is None:
            d = _hull_min_norm(conservative_hypergradients(dataset, ev, theta, n))
            if float(np.linalg.norm(d)) <= 1e-12 * max(1.0, norms[-1]):
                break
            step = search(d)
            if step is None:
                break
        theta, ev, t = step
        losses.append(ev.loss)
        norms.append(float(np.linalg.norm(ev.grad)))
        taken.append(t)
    return TrainTrace(theta, losses, norms, taken)


def read_dataset(path) -> np.ndarray:
    """CSV with one datum per row, columns ``u`` then ``uhat``; a non-numeric header row is skipped."""
    rows = []
    with open(path, newline="") as fh:
        for k, row in enumerate(csv.reader(fh)):
            if not row:
                continue
            try:
                rows.append([float(v) for v in row])
            except ValueError:
                if k == 0:
                    continue
                raise
    return np.array(rows)


# --------------------------------------------------------------------------
# unrolled differentiation of the forward-backward iterations


@dataclass(frozen=True)
class UnrollTrace:
    J: np.ndarray
    x: np.ndarray
    switches: List[int]
    iterates: int


def _same(a, b):
    return a.shape == b.shape and np.array_equal(a, b)


def unroll_trace(spec: ProblemSpec, theta, x0, J0, gamma: Optional[float], k: int,
                 callback: Optional[Callable[[int, np.ndarray], None]] = None) -> UnrollTrace:
    """Propagate ``J_{t+1} = V_t (I - gamma Z_t) J_t + (U_t - gamma V_t W_t)`` alongside ``x_{t+1} = H(x_t)``.

    ``switches`` lists the iterations at which the selected ``V_t`` or ``Z_t``
    changed, i.e. where an iterate crossed a kink.
    """
    gamma = resolve_gamma(spec, gamma)
    theta = as_vector(theta, spec.p, "theta")
    x = as_vector(x0, spec.n, "x0").copy()
    J = np.array(J0, dtype=float).reshape(spec.n, spec.p)
    eye = np.eye(spec.n)
    prev = None
    switches = []
    for t in range(k):
        u = x - gamma * spec.forward(theta, x)
        fw = spec.forward.jacobian(theta, x)
        rs = spec.resolvent.jacobian(theta, u, gamma)
        U, V = np.asarray(rs.d_theta, float), np.asarray(rs.d_x, float)
        W, Z = np.asarray(fw.d_theta, float), np.asarray(fw.d_x, float)
        if prev is not None and not (_same(prev[0], V) and _same(prev[1], Z)):
            switches.append(t)
        prev = (V, Z)
        J = V @ (eye - gamma * Z) @ J + (U - gamma * V @ W)
        x = spec.resolvent(theta, u, gamma)
        if callback is not None:
            callback(t + 1, J)
    return UnrollTrace(J, x, switches, k)


def unrolled_jacobian(spec: ProblemSpec, theta, x0, J0, gamma: Optional[float], k: int) -> np.ndarray:
    return unroll_trace(spec, theta, x0, J0, gamma, k).J


def unroll_compare(spec: ProblemSpec, theta, k: int, gamma: Optional[float] = None, x0=None, J0=None,
                   tol: float = INNER_TOL):
    """Distance ``||J_t - J_implicit||_max`` along ``k`` unrolled iterations from ``x0`` (default 0)."""
    gamma = resolve_gamma(spec, gamma)
    check_step(gamma)
    report = fixed_point_solve(spec, theta, tol=tol, gamma=gamma)
    blocks = assemble_blocks(spec, theta, report.x_star, gamma, tol=max(tol, report.residual_norm))
    J_impl = implicit_jacobian(blocks, gamma).J
    x0 = np.zeros(spec.n) if x0 is None else x0
    J0 = np.zeros((spec.n, spec.p)) if J0 is None else J0
    errors = [float(np.max(np.abs(np.asarray(J0) - J_impl), initial=0.0))]
    trace = unroll_trace(spec, theta, x0, J0, gamma, k,
                         callback=lambda t, J: errors.append(float(np.max(np.abs(J - J_impl), initial=0.0))))
    return {"J_implicit": J_impl, "J_unrolled": trace.J, "errors": errors, "switches": trace.switches,
            "measured_rate": report.measured_rate, "gamma": gamma, "x_star": report.x_star}
