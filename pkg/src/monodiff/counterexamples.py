"""Linear convergence without contractivity: the squared gauge of a smoothed square.

``Q`` is the square ``[-a, a]^2`` with corners rounded by quarter circles of
radius ``r``; equivalently ``Q = [-b, b]^2 + r * disk`` with ``b = a - r``.
``h = Psi_Q^2 / (2 L)`` is convex, 2-homogeneous and has a 1-Lipschitz
gradient (``L`` is the largest Hessian eigenvalue of ``Psi_Q^2 / 2``).
Fixed-point iteration of ``x -> x - grad h(x)`` converges linearly to 0, yet
on the flat-face sectors the Hessian of ``h`` is ``diag(c, 0)`` and therefore
singular.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.optimize import minimize_scalar

from .core import NotContractive, Selection, SpecViolation, as_vector, frozen
from .operators import DEFAULT_KINK_TOL, ForwardOperator, _theta_matrix

SWEEP_POINTS = 2001


def _unit(angle):
    return np.array([math.cos(angle), math.sin(angle)])


@dataclass(frozen=True)
class SmoothedSquare:
    """Square of half-width ``half_width`` whose corners are arcs of radius ``corner_radius``.

    ``corner_radius == half_width`` gives the disk, kept as a contrast case.
    """

    half_width: float = 1.0
    corner_radius: float = 0.25
    scale: float = field(init=False)

    def __post_init__(self):
        a, r = float(self.half_width), float(self.corner_radius)
        if not a > 0:
            raise SpecViolation("half_width must be positive")
        if not 0 < r <= a:
            raise SpecViolation("corner_radius must lie in (0, half_width]")
        object.__setattr__(self, "half_width", a)
        object.__setattr__(self, "corner_radius", r)
        object.__setattr__(self, "scale", 1.0)
        object.__setattr__(self, "scale", 1.0 / _max_curvature(self))

    @property
    def inner(self) -> float:
        """Half-width ``b`` of the inner square whose r-neighbourhood is Q."""
        return self.half_width - self.corner_radius

    @property
    def face_angle(self) -> float:
        """Angle (first quadrant, from the x-axis) where the right face ends."""
        return math.atan2(self.inner, self.half_width)

    def contains(self, z) -> bool:
        z = np.abs(np.asarray(z, dtype=float))
        return float(np.linalg.norm(np.maximum(z - self.inner, 0.0))) <= self.corner_radius

    def region(self, x, kink_tol: float = 0.0) -> str:
        """``"face"``, ``"corner"``, ``"boundary"`` (within ``kink_tol`` of a switch) or ``"origin"``."""
        x = np.abs(np.asarray(x, dtype=float))
        nx = float(np.linalg.norm(x))
        if nx == 0.0:
            return "origin"
        a, b = self.half_width, self.inner
        if b == 0.0:
            return "corner"  # the disk has no flat faces
        lo, hi = min(x), max(x)
        # signed gap to the face/corner switching ray, scaled to unit norm
        gap = (lo * a - hi * b) / (nx * math.hypot(a, b))
        if abs(gap) <= kink_tol:
            return "boundary"
        return "face" if gap < 0 else "corner"


def _corner_parts(sq: SmoothedSquare, x):
    s = np.where(x < 0, -1.0, 1.0)
    c = s * sq.inner
    A = float(c @ c) - sq.corner_radius ** 2
    xc = float(x @ c)
    xx = float(x @ x)
    disc = max(xc * xc - A * xx, 0.0)
    lam = xx / (xc + math.sqrt(disc))
    w = x - lam * c
    D = xc - lam * A
    return lam, c, A, w, D


def _gauge_raw(sq: SmoothedSquare, x) -> float:
    x = np.asarray(x, dtype=float)
    reg = sq.region(x)
    if reg == "origin":
        return 0.0
    if reg == "face":
        return float(np.max(np.abs(x))) / sq.half_width
    return _corner_parts(sq, x)[0]


def _face_hessian(sq: SmoothedSquare, x):
    H = np.zeros((2, 2))
    i = int(np.argmax(np.abs(x)))
    H[i, i] = 1.0 / sq.half_width ** 2
    return H


def _corner_hessian(sq: SmoothedSquare, x):
    lam, c, A, w, D = _corner_parts(sq, x)
    q = w / D
    H = np.outer(q, q) + lam * (np.eye(2) - np.outer(c, q)) / D - lam * np.outer(w, c - A * q) / D ** 2
    return 0.5 * (H + H.T)


def _raw_hessian(sq: SmoothedSquare, x, region: Optional[str] = None):
    region = sq.region(x) if region is None else region
    return _face_hessian(sq, x) if region == "face" else _corner_hessian(sq, x)


def _max_curvature(sq: SmoothedSquare) -> float:
    """Largest eigenvalue of the Hessian of ``Psi^2 / 2`` over all directions."""
    best = 1.0 / sq.half_width ** 2
    lo, hi = sq.face_angle, math.pi / 4
    if hi - lo <= 0:
        return best

    def neg_eig(t):
        return -float(np.linalg.eigvalsh(_corner_hessian(sq, _unit(t)))[-1])

    grid = np.linspace(lo, hi, SWEEP_POINTS)
    vals = np.array([-neg_eig(t) for t in grid])
    k = int(np.argmax(vals))
    best = max(best, float(vals[k]))
    a, b = grid[max(k - 1, 0)], grid[min(k + 1, grid.size - 1)]
    if b > a:
        res = minimize_scalar(neg_eig, bounds=(a, b), method="bounded", options={"xatol": 1e-13})
        best = max(best, -float(res.fun))
    return best


def gauge(sq: SmoothedSquare, x) -> float:
    """``inf {lambda > 0 : x in lambda Q}`` in closed form per angular region."""
    return _gauge_raw(sq, as_vector(x, 2, "x"))


def h_grad(sq: SmoothedSquare, x):
    """``(h(x), grad h(x))`` with ``h = scale * Psi^2 / 2``."""
    x = as_vector(x, 2, "x")
    reg = sq.region(x)
    if reg == "origin":
        return 0.0, np.zeros(2)
    if reg == "face":
        lam = float(np.max(np.abs(x))) / sq.half_width
        grad = np.zeros(2)
        i = int(np.argmax(np.abs(x)))
        grad[i] = x[i] / sq.half_width ** 2
    else:
        lam, _, _, w, D = _corner_parts(sq, x)
        grad = lam * w / D
    return sq.scale * 0.5 * lam * lam, sq.scale * grad


def hessian(sq: SmoothedSquare, x, kink_tol: float = DEFAULT_KINK_TOL) -> Selection:
    """Jacobian selection of ``grad h`` (the d_x part; d_theta is empty).

    On a face/corner switching ray both one-sided Hessians are listed as
    extremes. At the origin the canonical element is the face Hessian and the
    extremes are the face Hessians of both axes and the diagonal corner Hessian.
    """
    x = as_vector(x, 2, "x")
    reg = sq.region(x, kink_tol)
    empty = np.zeros((2, 0))
    if reg == "origin":
        faces = [_face_hessian(sq, np.array([1.0, 0.0])), _face_hessian(sq, np.array([0.0, 1.0]))]
        mats = faces + [_corner_hessian(sq, np.array([1.0, 1.0]))]
        mats = [sq.scale * M for M in mats]
        return Selection(empty, mats[0], tuple((empty, M) for M in mats))
    if reg == "boundary":
        face = sq.scale * _face_hessian(sq, x)
        corner = sq.scale * _corner_hessian(sq, x)
        return Selection(empty, face, ((empty, face), (empty, corner)))
    return Selection(empty, sq.scale * _raw_hessian(sq, x, reg))


class GaugeSquareGradient(ForwardOperator):
    """``B_theta(x) = grad h(x - C theta)``: convex, 1-Lipschitz, not strongly monotone."""

    def __init__(self, sq: SmoothedSquare, p: int = 0, C=None, kink_tol: float = DEFAULT_KINK_TOL):
        self.sq = sq
        self.n, self.p = 2, p
        self.C = frozen(_theta_matrix(C, 2, p, default_identity=True))
        self.kink_tol = kink_tol
        self.lipschitz = 1.0
        self.modulus = 0.0

    def _shift(self, theta, x):
        return as_vector(x, 2, "x") - self.C @ as_vector(theta, self.p, "theta")

    def __call__(self, theta, x):
        return h_grad(self.sq, self._shift(theta, x))[1]

    def jacobian(self, theta, x):
        sel = hessian(self.sq, self._shift(theta, x), self.kink_tol)
        ext = tuple((-dx @ self.C, dx) for _, dx in sel.extremes)
        return Selection(-sel.d_x @ self.C, sel.d_x, ext)


@dataclass(frozen=True)
class ContractionMeasure:
    rho_hat: float
    lipschitz_hat: float
    c_min: float
    cocoercive_bound: float
    stated_bound: float
    angles: np.ndarray
    quotients: np.ndarray


def _angles(samples: int) -> np.ndarray:
    return np.linspace(0.0, 2 * math.pi, samples, endpoint=False)


def contraction_factor_measure(sq: SmoothedSquare, samples: int = 4096,
                               rng: Optional[np.random.Generator] = None) -> ContractionMeasure:
    """``rho_hat = max ||x - grad h(x)|| / ||x||`` over unit vectors.

    Also measures the Lipschitz constant of ``grad h`` (Hessian norms on the
    sweep and random pairs) and ``c = min h`` on the unit circle. The
    cocoercivity argument gives ``rho <= sqrt(1 - 2c) <= 1/sqrt(1 + 2c)``;
    both bounds are checked.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    angles = _angles(samples)
    quot = np.empty(samples)
    hvals = np.empty(samples)
    lip = 0.0
    for k, t in enumerate(angles):
        x = _unit(t)
        val, g = h_grad(sq, x)
        quot[k] = float(np.linalg.norm(x - g))
        hvals[k] = val
        lip = max(lip, float(np.linalg.norm(hessian(sq, x).d_x, 2)))
    for _ in range(samples):
        x = rng.standard_normal(2) * 2
        y = x + rng.standard_normal(2) * rng.choice([1e-4, 1e-2, 1.0])
        d = np.linalg.norm(h_grad(sq, x)[1] - h_grad(sq, y)[1]) / np.linalg.norm(x - y)
        lip = max(lip, float(d))
    rho = float(quot.max())
    c = float(hvals.min())
    coco = math.sqrt(max(0.0, 1.0 - 2.0 * c))
    stated = 1.0 / math.sqrt(1.0 + 2.0 * c)
    if not rho < 1.0 or rho > coco + 1e-12:
        raise NotContractive(f"rho_hat = {rho:.6g} violates the bound {coco:.6g}")
    return ContractionMeasure(rho, lip, c, coco, stated, angles, quot)


def singularity_probe(sq: SmoothedSquare, direction, radius: float = 1.0) -> float:
    """Smallest singular value of the Hessian of ``h`` at ``radius * direction``."""
    d = as_vector(direction, 2, "direction")
    d = d / np.linalg.norm(d)
    H = hessian(sq, radius * d, kink_tol=0.0).d_x
    return float(np.linalg.svd(H, compute_uv=False)[-1])


def face_direction(sq: SmoothedSquare) -> np.ndarray:
    """A unit direction in the middle of the right face sector."""
    return _unit(0.5 * sq.face_angle)


def corner_direction(sq: SmoothedSquare) -> np.ndarray:
    """A unit direction in the middle of the first-quadrant corner sector."""
    return _unit(0.5 * (sq.face_angle + math.pi / 4) if sq.face_angle < math.pi / 4 else math.pi / 4)


def prox_counterexample(sq: SmoothedSquare, x) -> np.ndarray:
    """``x - grad h(x)``, the prox of a convex function that is never formed."""
    x = as_vector(x, 2, "x")
    return x - h_grad(sq, x)[1]


def firm_nonexpansiveness_check(sq: SmoothedSquare, samples: int = 10_000,
                                rng: Optional[np.random.Generator] = None, atol: float = 1e-12) -> float:
    """Largest ``||P x - P y||^2 - <P x - P y, x - y>`` over random pairs; raises if above ``atol``."""
    rng = np.random.default_rng(0) if rng is None else rng
    worst = -math.inf
    for _ in range(samples):
        x = rng.standard_normal(2)
        y = x + rng.standard_normal(2) * rng.choice([1e-3, 1e-1, 1.0])
        d = prox_counterexample(sq, x) - prox_counterexample(sq, y)
        worst = max(worst, float(d @ d - d @ (x - y)))
    if worst > atol:
        raise SpecViolation(f"firm nonexpansiveness fails by {worst:.3e}")
    return worst


def convergence_rate(sq: SmoothedSquare, x0=None, iters: int = 200, floor: float = 1e-200):
    """Run ``x <- x - grad h(x)`` and return ``(rate, norms)``; rate is the geometric mean ratio."""
    x = np.array([1.0, 0.3]) if x0 is None else as_vector(x0, 2, "x0").copy()
    norms = [float(np.linalg.norm(x))]
    for _ in range(iters):
        x = prox_counterexample(sq, x)
        norms.append(float(np.linalg.norm(x)))
        if norms[-1] <= floor:
            break
    n = np.asarray(norms)
    n = n[n > 0]
    if n.size < 2:
        return 0.0, np.asarray(norms)
    rate = float(np.exp(np.log(n[-1] / n[0]) / (n.size - 1)))
    return rate, np.asarray(norms)


def report(half_width: float = 1.0, corner_radius: float = 0.25, samples: int = 4096, seed: int = 0) -> dict:
    """All headline measurements for one smoothed square."""
    sq = SmoothedSquare(half_width, corner_radius)
    rng = np.random.default_rng(seed)
    meas = contraction_factor_measure(sq, samples, rng)
    rate, _ = convergence_rate(sq, rng.standard_normal(2))
    face = face_direction(sq)
    face_sigma = singularity_probe(sq, face)
    corner_sigma = singularity_probe(sq, corner_direction(sq))
    firm = firm_nonexpansiveness_check(sq, samples, rng)
    # residual Jacobian of the prox fixed-point equation: I - (I - Hess h) = Hess h
    residual_jac = np.eye(2) - (np.eye(2) - hessian(sq, face, kink_tol=0.0).d_x)
    return {
        "half_width": sq.half_width,
        "corner_radius": sq.corner_radius,
        "scale": sq.scale,
        "rho_hat": meas.rho_hat,
        "lipschitz_hat": meas.lipschitz_hat,
        "c_min": meas.c_min,
        "cocoercive_bound": meas.cocoercive_bound,
        "stated_bound": meas.stated_bound,
        "face_sigma_min": face_sigma,
        "corner_sigma_min": corner_sigma,
        "residual_sigma_min": float(np.linalg.svd(residual_jac, compute_uv=False)[-1]),
        "convergence_rate": rate,
        "firm_violation": firm,
        "angles": meas.angles.tolist(),
        "quotients": meas.quotients.tolist(),
    }
