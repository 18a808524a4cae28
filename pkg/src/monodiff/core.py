"""Shared types, errors and small numeric helpers.

Everything here is dense double-precision numpy. Problem objects are frozen
dataclasses; operator handles are expected to be stateless so a single
``ProblemSpec`` can be solved from several threads at once.
"""

from __future__ import annotations

import itertools
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Optional, Sequence, Tuple

import numpy as np

MAX_COMBINATIONS = 2 ** 8
STRONG_PARTS = ("A", "B", "none")


class MonodiffError(Exception):
    """Base class for all errors raised by this package."""


class DimensionMismatch(MonodiffError, ValueError):
    pass


class NonPositiveModulus(MonodiffError, ValueError):
    pass


class InadmissibleStepSize(MonodiffError, ValueError):
    pass


class UnknownRegistryName(MonodiffError, KeyError):
    pass


class SingularSystem(MonodiffError, np.linalg.LinAlgError):
    pass


class StalePoint(MonodiffError):
    """Jacobian blocks requested at a point that is not a fixed point."""


class SurjectivityLost(MonodiffError):
    pass


class SpecViolation(MonodiffError):
    pass


class NotContractive(MonodiffError):
    pass


class InvarianceViolated(MonodiffError):
    pass


class DivergenceDetected(MonodiffError):
    def __init__(self, message, iterate=None, iterations=0):
        super().__init__(message)
        self.iterate = iterate
        self.iterations = iterations


class MaxIterationsExceeded(MonodiffError):
    """Raised by the solver; ``best`` holds the lowest-residual iterate."""

    def __init__(self, message, best=None, residual_norm=np.inf, iterations=0):
        super().__init__(message)
        self.best = best
        self.residual_norm = residual_norm
        self.iterations = iterations


def as_vector(v, size: Optional[int] = None, name: str = "vector") -> np.ndarray:
    out = np.atleast_1d(np.asarray(v, dtype=float))
    if out.ndim != 1:
        raise DimensionMismatch(f"{name} must be one-dimensional, got shape {out.shape}")
    if size is not None and out.shape[0] != size:
        raise DimensionMismatch(f"{name} must have length {size}, got {out.shape[0]}")
    return out


def as_matrix(a, shape: Optional[Tuple[int, int]] = None, name: str = "matrix") -> np.ndarray:
    """Coerce nested lists or a flat row-major list to a 2-D float array."""
    out = np.asarray(a, dtype=float)
    if shape is not None:
        if out.ndim == 1 or out.ndim == 0:
            if out.size != shape[0] * shape[1]:
                raise DimensionMismatch(f"{name}: {out.size} entries cannot fill {shape}")
            out = out.reshape(shape)
        if out.shape != tuple(shape):
            raise DimensionMismatch(f"{name} must have shape {shape}, got {out.shape}")
    elif out.ndim != 2:
        raise DimensionMismatch(f"{name} must be two-dimensional, got shape {out.shape}")
    return out


def frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


def op_norm(m: np.ndarray) -> float:
    """Spectral norm by dense SVD (0 for empty matrices)."""
    if m.size == 0:
        return 0.0
    return float(np.linalg.svd(m, compute_uv=False)[0])


def sigma_min(m: np.ndarray) -> float:
    if m.size == 0:
        return 0.0
    return float(np.linalg.svd(m, compute_uv=False)[-1])


def thread_count() -> int:
    """Worker cap from ``MONODIFF_THREADS`` (default 1)."""
    try:
        return max(1, int(os.environ.get("MONODIFF_THREADS", "1")))
    except ValueError:
        return 1


def parallel_map(fn: Callable, items: Sequence) -> list:
    """Order-preserving map, threaded when ``MONODIFF_THREADS`` > 1."""
    workers = min(thread_count(), len(items))
    if workers <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


@dataclass(frozen=True)
class Selection:
    """One element ``[d_theta d_x]`` of a joint Clarke Jacobian.

    ``extremes`` is empty at points of differentiability. At kinks it lists
    the one-sided limits (as ``(d_theta, d_x)`` pairs) whose convex hull the
    Clarke Jacobian is; the canonical pair is always one of them.
    """

    d_theta: np.ndarray
    d_x: np.ndarray
    extremes: Tuple[Tuple[np.ndarray, np.ndarray], ...] = ()

    def candidates(self) -> Tuple[Tuple[np.ndarray, np.ndarray], ...]:
        """Canonical pair first, then the remaining extremes."""
        out = [(self.d_theta, self.d_x)]
        for dt, dx in self.extremes:
            if not any(np.array_equal(dt, a) and np.array_equal(dx, b) for a, b in out):
                out.append((dt, dx))
        return tuple(out)

    @property
    def at_kink(self) -> bool:
        return len(self.extremes) > 0


def separable_selection(
    d_theta: np.ndarray,
    diag: np.ndarray,
    kinks: Sequence[Tuple[int, Sequence[Tuple[np.ndarray, float]]]],
    cap: int = MAX_COMBINATIONS,
) -> Selection:
    """Selection for a coordinate-wise map.

    ``kinks`` holds, for each kinked coordinate ``i``, the alternative
    ``(row of d_theta, diagonal entry)`` one-sided limits. The extreme set is
    the product over kinked coordinates, truncated to ``cap`` elements.
    """
    d_theta = np.asarray(d_theta, dtype=float)
    diag = np.asarray(diag, dtype=float)
    canonical = (d_theta, np.diag(diag))
    if not kinks:
        return Selection(*canonical)
    extremes = []
    idx = [i for i, _ in kinks]
    for combo in itertools.islice(itertools.product(*[opts for _, opts in kinks]), cap):
        dt = d_theta.copy()
        dg = diag.copy()
        for i, (row, val) in zip(idx, combo):
            dt[i] = row
            dg[i] = val
        extremes.append((dt, np.diag(dg)))
    return Selection(canonical[0], canonical[1], tuple(extremes))


def block_diagonal_selection(parts: Sequence[Selection], cap: int = MAX_COMBINATIONS) -> Selection:
    """Stack selections of maps acting on disjoint blocks of the variable."""

    def stack(pairs):
        d_theta = np.vstack([dt for dt, _ in pairs])
        sizes = [dx.shape[0] for _, dx in pairs]
        d_x = np.zeros((sum(sizes), sum(sizes)))
        k = 0
        for (_, dx), s in zip(pairs, sizes):
            d_x[k:k + s, k:k + s] = dx
            k += s
        return d_theta, d_x

    canonical = stack([(s.d_theta, s.d_x) for s in parts])
    if not any(s.at_kink for s in parts):
        return Selection(*canonical)
    options = [s.candidates() for s in parts]
    extremes = tuple(stack(c) for c in itertools.islice(itertools.product(*options), cap))
    return Selection(canonical[0], canonical[1], extremes)


@dataclass(frozen=True)
class ProblemSpec:
    """Parametric inclusion ``0 in A_theta(x) + B_theta(x)``.

    ``resolvent`` maps ``(theta, u, gamma)`` to ``(I + gamma A_theta)^{-1}(u)``
    and ``forward`` maps ``(theta, x)`` to ``B_theta(x)``; both expose a
    ``jacobian`` method with the same arguments returning a ``Selection``.
    """

    n: int
    p: int
    resolvent: object
    forward: object
    alpha: float = 0.0
    beta: float = 0.0
    strongly_monotone_part: str = "none"

    def H(self, theta, x, gamma) -> np.ndarray:
        return self.resolvent(theta, x - gamma * self.forward(theta, x), gamma)


def validate(spec: ProblemSpec, rng: Optional[np.random.Generator] = None, gamma: float = 0.1) -> None:
    """Check invariants of ``spec`` and probe operator shapes at a random point."""
    if int(spec.n) < 1 or int(spec.p) < 1:
        raise DimensionMismatch(f"need n >= 1 and p >= 1, got n={spec.n}, p={spec.p}")
    if spec.alpha < 0 or spec.beta < 0:
        raise NonPositiveModulus("alpha and beta must be non-negative")
    if spec.strongly_monotone_part not in STRONG_PARTS:
        raise ValueError(f"strongly_monotone_part must be one of {STRONG_PARTS}")
    if spec.strongly_monotone_part != "none" and spec.alpha <= 0:
        raise NonPositiveModulus(
            f"part {spec.strongly_monotone_part} declared strongly monotone with alpha={spec.alpha}")
    rng = np.random.default_rng(0) if rng is None else rng
    theta = rng.standard_normal(spec.p)
    x = rng.standard_normal(spec.n)
    checks = [
        ("forward value", spec.forward(theta, x), (spec.n,)),
        ("resolvent value", spec.resolvent(theta, x, gamma), (spec.n,)),
    ]
    fj = spec.forward.jacobian(theta, x)
    rj = spec.resolvent.jacobian(theta, x, gamma)
    checks += [
        ("forward d_theta", fj.d_theta, (spec.n, spec.p)),
        ("forward d_x", fj.d_x, (spec.n, spec.n)),
        ("resolvent d_theta", rj.d_theta, (spec.n, spec.p)),
        ("resolvent d_x", rj.d_x, (spec.n, spec.n)),
    ]
    for name, value, shape in checks:
        if np.shape(value) != shape:
            raise DimensionMismatch(f"{name} has shape {np.shape(value)}, expected {shape}")


@dataclass(frozen=True)
class SolveReport:
    x_star: np.ndarray
    residual_norm: float
    iterations: int
    measured_rate: float
    gamma_used: float

    def to_dict(self) -> dict:
        return {
            "x_star": self.x_star.tolist(),
            "residual_norm": self.residual_norm,
            "iterations": self.iterations,
            "measured_rate": self.measured_rate,
            "gamma_used": self.gamma_used,
        }


@dataclass(frozen=True)
class JacobianBlocks:
    """``[U V]`` from the resolvent and ``[W Z]`` from the forward operator.

    The ``*_extremes`` tuples hold alternative ``(d_theta, d_x)`` pairs at
    kinks; they are empty at smooth points.
    """

    U: np.ndarray
    V: np.ndarray
    W: np.ndarray
    Z: np.ndarray
    at_resolvent_point: np.ndarray
    at_forward_point: np.ndarray
    theta: np.ndarray
    resolvent_extremes: Tuple[Tuple[np.ndarray, np.ndarray], ...] = ()
    forward_extremes: Tuple[Tuple[np.ndarray, np.ndarray], ...] = ()

    @property
    def n(self) -> int:
        return self.V.shape[0]

    @property
    def at_kink(self) -> bool:
        return bool(self.resolvent_extremes or self.forward_extremes)

    def combinations(self, cap: int = MAX_COMBINATIONS) -> Iterator[Tuple[np.ndarray, ...]]:
        """Yield ``(U, V, W, Z)``: the canonical choice, then every extreme pairing."""
        res = Selection(self.U, self.V, self.resolvent_extremes).candidates()
        fwd = Selection(self.W, self.Z, self.forward_extremes).candidates()
        for (u, v), (w, z) in itertools.islice(itertools.product(res, fwd), cap):
            yield u, v, w, z


@dataclass(frozen=True)
class ContractionCertificate:
    sampled_norm: float
    theory_bound: float
    verdict: bool
    n_selections: int = 1

    def to_dict(self) -> dict:
        return {
            "sampled_norm": self.sampled_norm,
            "theory_bound": self.theory_bound if np.isfinite(self.theory_bound) else None,
            "verdict": "pass" if self.verdict else "fail",
            "n_selections": self.n_selections,
        }


@dataclass(frozen=True)
class ImplicitJacobian:
    """Implicit conservative Jacobian of the solution map.

    ``alternatives`` lists the distinct Jacobians obtained from every extreme
    selection at a kink, canonical first; it is ``(J,)`` at smooth points.
    """

    J: np.ndarray
    condition_estimate: float
    blocks: JacobianBlocks
    alternatives: Tuple[np.ndarray, ...] = field(default=())

    @property
    def extreme_set_size(self) -> int:
        return max(1, len(self.alternatives))


def residual_matrices(U, V, W, Z, gamma):
    """``(I - V(I - gamma Z), U - gamma V W)`` for one selection."""
    n = V.shape[0]
    lhs = np.eye(n) - V @ (np.eye(n) - gamma * Z)
    rhs = U - gamma * V @ W
    return lhs, rhs


def dedupe_matrices(mats: Iterable[np.ndarray], atol: float = 1e-12) -> Tuple[np.ndarray, ...]:
    out = []
    for m in mats:
        if not any(m.shape == o.shape and np.allclose(m, o, rtol=0, atol=atol) for o in out):
            out.append(m)
    return tuple(out)
