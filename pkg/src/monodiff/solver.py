"""Forward-backward fixed-point solver for ``x = R_{gamma A}(x - gamma B(x))``."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import (
    DivergenceDetected,
    InadmissibleStepSize,
    InvarianceViolated,
    MaxIterationsExceeded,
    NonPositiveModulus,
    ProblemSpec,
    SolveReport,
    as_vector,
)

DIVERGENCE_NORM = 1e12
RATE_WINDOW = 10
ROUNDOFF_STEPS = 64


def step_size_default(alpha: float, beta: float) -> float:
    """``alpha / (alpha + beta)^2``, inside the contractive range ``(0, 2 alpha/(alpha+beta)^2)``."""
    if alpha <= 0:
        raise NonPositiveModulus(f"default step size needs alpha > 0, got {alpha}")
    if beta < 0:
        raise NonPositiveModulus(f"beta must be non-negative, got {beta}")
    return alpha / (alpha + beta) ** 2


def admissible_upper(alpha: float, beta: float) -> float:
    return 2.0 * alpha / (alpha + beta) ** 2


def check_step(gamma: float) -> float:
    gamma = float(gamma)
    if not gamma > 0 or not np.isfinite(gamma):
        raise InadmissibleStepSize(f"step size must be positive and finite, got {gamma}")
    return gamma


def resolve_gamma(spec: ProblemSpec, gamma: Optional[float]) -> float:
    if gamma is not None:
        return check_step(gamma)
    if spec.strongly_monotone_part == "none" or spec.alpha <= 0:
        raise InadmissibleStepSize("no step size given and the problem declares no strong monotonicity")
    return step_size_default(spec.alpha, spec.beta)


def apply_H(spec: ProblemSpec, theta, x, gamma) -> np.ndarray:
    """Backward step after forward step: ``R_{gamma A_theta}(x - gamma B_theta(x))``."""
    theta = as_vector(theta, spec.p, "theta")
    x = as_vector(x, spec.n, "x")
    return spec.H(theta, x, check_step(gamma))


def residual(spec: ProblemSpec, theta, x, gamma) -> np.ndarray:
    return np.asarray(x, dtype=float) - apply_H(spec, theta, x, gamma)


def geometric_rate(steps) -> float:
    """Geometric mean of successive step ratios over the trailing window."""
    s = np.asarray(steps[-(RATE_WINDOW + 1):], dtype=float)
    if s.size < 2 or np.any(s == 0.0):
        return 0.0
    return _clip_rate(float(np.exp(np.mean(np.log(s[1:] / s[:-1])))))


def _clip_rate(rate: float) -> float:
    return min(max(rate, 0.0), float(np.nextafter(1.0, 0.0)))


class _RateTracker:
    """Incremental version of :func:`geometric_rate`."""

    def __init__(self):
        self.logs = deque(maxlen=RATE_WINDOW + 1)

    def push(self, r: float):
        self.logs.append(math.log(r) if r > 0 else -math.inf)

    def rate(self) -> float:
        if len(self.logs) < 2:
            return 0.0
        first, last = self.logs[0], self.logs[-1]
        if math.isinf(first) or math.isinf(last) or any(math.isinf(v) for v in self.logs):
            return 0.0
        return _clip_rate(math.exp((last - first) / (len(self.logs) - 1)))


def fixed_point_solve(spec: ProblemSpec, theta, x0=None, tol: float = 1e-10,
                      max_iter: int = 100_000, gamma: Optional[float] = None) -> SolveReport:
    """Plain Picard iteration ``x <- H(theta, x)``.

    The residual ``||x - H(x)||`` equals the next step length, so a single
    test covers both: stop at the first iterate with residual at most
    ``tol * (1 - rate)``, ``rate`` being the running geometric estimate. This
    keeps the distance to the true fixed point near ``tol`` even for slow
    contractions. Once the residual is below ``tol`` and down at the
    rounding floor the iteration also stops, and such steps are kept out of
    the rate estimate. The stopping iterate itself is returned, so
    ``residual_norm`` is exact for ``x_star``.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    gamma = resolve_gamma(spec, gamma)
    theta = as_vector(theta, spec.p, "theta")
    x = np.zeros(spec.n) if x0 is None else as_vector(x0, spec.n, "x0").copy()
    tracker = _RateTracker()
    best, best_res = x, np.inf
    for k in range(max_iter + 1):
        hx = spec.H(theta, x, gamma)
        r = float(np.linalg.norm(x - hx))
        if not np.isfinite(r) or np.linalg.norm(hx) > DIVERGENCE_NORM:
            raise DivergenceDetected(
                f"iterate norm exceeded {DIVERGENCE_NORM:g} after {k} iterations", iterate=x, iterations=k)
        if r < best_res:
            best, best_res = x, r
        rate = tracker.rate()
        # steps at the rounding floor carry no rate information and cannot shrink further
        noise = ROUNDOFF_STEPS * np.finfo(float).eps * (1.0 + float(np.linalg.norm(hx)))
        if r <= tol * (1.0 - rate) or (r <= tol and r <= noise):
            return SolveReport(x, r, k, rate, gamma)
        if r > noise:
            tracker.push(r)
        x = hx
    raise MaxIterationsExceeded(
        f"no convergence to tol={tol:g} within {max_iter} iterations (best residual {best_res:.3e})",
        best=best, residual_norm=best_res, iterations=max_iter)


@dataclass(frozen=True)
class InvarianceReport:
    x_first: np.ndarray
    x_second: np.ndarray
    gap: float
    gammas: tuple


def solution_gamma_invariance(spec: ProblemSpec, theta, gamma1: float, gamma2: float,
                              tol: float = 1e-10, max_iter: int = 100_000) -> InvarianceReport:
    """Solve with two step sizes and require the fixed points to agree within ``10 tol``."""
    a = fixed_point_solve(spec, theta, tol=tol, max_iter=max_iter, gamma=gamma1)
    b = fixed_point_solve(spec, theta, tol=tol, max_iter=max_iter, gamma=gamma2)
    gap = float(np.linalg.norm(a.x_star - b.x_star))
    if gap > 10 * tol:
        raise InvarianceViolated(f"fixed points for gamma={gamma1} and gamma={gamma2} differ by {gap:.3e}")
    return InvarianceReport(a.x_star, b.x_star, gap, (gamma1, gamma2))
