"""JSON problem files.

Forward-backward problem (``solve``, ``diff``, ``unroll-compare``)::

    {"n": 1, "p": 1,
     "operator": "quadratic", "params": {"Q": [[1]]},     # forward B
     "resolvent": {"operator": "l1", "params": {"weight": 1}},
     "alpha": 1, "beta": 1, "strongly_monotone_part": "B", "gamma": 0.25}

``resolvent`` defaults to the zero prox; ``alpha``/``beta`` default to the
moduli of the forward operator (or of the resolvent when ``B`` is zero) and
``strongly_monotone_part`` to whichever part has a positive modulus.

Composite problem (``dual-solve``)::

    {"p": 2, "f": {"P": ..., "C": ..., "c": ...},
     "g": {"operator": "l1", "params": {}},
     "K": {"base": [[...]], "coeffs": [[[...]]]}   # or {"matrix": ...} or {"from_theta": [s, n]}
     "alpha": ..., "beta": ..., "lambda_min": ..., "lambda_max": ..., "gamma": ...}

Saddle problems (``saddle-solve``): ``{"kind": "pd", "p", "prox_g", "prox_f_conj",
"K", "alpha", "beta"}`` or ``{"kind": "minmax", "p", "prox_x", "prox_y", "alpha"}``
where each prox entry is ``{"operator", "params", "n"}``.

Arrays are nested lists or flat row-major lists.
"""

from __future__ import annotations

import json
from typing import Optional, Tuple

import numpy as np

from .core import MonodiffError, ProblemSpec
from .duality import CompositeSpec, QuadraticFunction
from .operators import AffineMatrix, make_forward, make_prox
from .saddle import MinMaxSpec, PrimalDualSpec


class SpecFileError(MonodiffError):
    """Malformed or incomplete problem file."""


def load(path) -> dict:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except FileNotFoundError:
        raise SpecFileError(f"spec file not found: {path}")
    except json.JSONDecodeError as exc:
        raise SpecFileError(f"spec file {path} is not valid JSON: {exc}")
    if not isinstance(data, dict):
        raise SpecFileError("spec file must hold a JSON object")
    return data


def _require(d, key):
    if key not in d:
        raise SpecFileError(f"missing field {key!r}")
    return d[key]


def _int(d, key, default=None):
    v = d.get(key, default)
    if v is None:
        raise SpecFileError(f"missing field {key!r}")
    return int(v)


def problem_from_dict(d: dict) -> Tuple[ProblemSpec, Optional[float]]:
    """Build the forward-backward problem and the requested step size (or ``None``)."""
    n, p = _int(d, "n"), _int(d, "p", 0)
    fwd = make_forward(d.get("operator", "zero"), n, p, d.get("params"))
    res = d.get("resolvent", {"operator": "zero"})
    prox = make_prox(_require(res, "operator"), n, p, res.get("params"))
    fmod, pmod = float(fwd.modulus or 0.0), float(prox.modulus or 0.0)
    part = d.get("strongly_monotone_part")
    if part is None:
        part = "B" if fmod > 0 else ("A" if pmod > 0 else "none")
    if part not in ("A", "B", "none"):
        raise SpecFileError("strongly_monotone_part must be 'A', 'B' or 'none'")
    default_alpha = fmod if part == "B" else pmod if part == "A" else 0.0
    alpha = float(d.get("alpha", default_alpha))
    beta = d.get("beta", fwd.lipschitz)
    if beta is None:
        raise SpecFileError("beta is required when the forward operator has no known Lipschitz bound")
    gamma = d.get("gamma")
    return ProblemSpec(n, p, prox, fwd, alpha, float(beta), part), (None if gamma is None else float(gamma))


def matrix_from_dict(d: dict, p: int) -> AffineMatrix:
    if "from_theta" in d:
        s, n = d["from_theta"]
        return AffineMatrix.from_theta(int(s), int(n))
    if "matrix" in d:
        return AffineMatrix.constant(np.atleast_2d(np.asarray(d["matrix"], dtype=float)), p)
    base = np.atleast_2d(np.asarray(_require(d, "base"), dtype=float))
    coeffs = d.get("coeffs")
    coeffs = np.zeros((p,) + base.shape) if coeffs is None else np.asarray(coeffs, dtype=float).reshape((p,) + base.shape)
    return AffineMatrix(base, coeffs)


def composite_from_dict(d: dict) -> Tuple[CompositeSpec, Optional[float]]:
    p = _int(d, "p", 0)
    K = matrix_from_dict(_require(d, "K"), p)
    fd = _require(d, "f")
    P = np.asarray(fd.get("P", np.eye(K.n)), dtype=float).reshape(K.n, K.n)
    f = QuadraticFunction(P, fd.get("C"), fd.get("c"), p=p)
    gd = _require(d, "g")
    g = make_prox(_require(gd, "operator"), K.m, p, gd.get("params"))
    opt = {k: (None if d.get(k) is None else float(d[k])) for k in ("alpha", "beta", "lambda_min", "lambda_max")}
    gamma = d.get("gamma")
    return CompositeSpec(f, g, K, **opt), (None if gamma is None else float(gamma))


def _prox(d: dict, key: str, p: int):
    e = _require(d, key)
    return make_prox(_require(e, "operator"), _int(e, "n"), p, e.get("params"))


def saddle_from_dict(d: dict, kind: Optional[str] = None):
    """``(PrimalDualSpec or MinMaxSpec, gamma)``; ``kind`` overrides the file's ``kind``."""
    kind = kind or d.get("kind", "pd")
    p = _int(d, "p", 0)
    gamma = d.get("gamma")
    gamma = None if gamma is None else float(gamma)
    if kind == "pd":
        K = matrix_from_dict(_require(d, "K"), p)
        spec = PrimalDualSpec(_prox(d, "prox_g", p), _prox(d, "prox_f_conj", p), K,
                              float(_require(d, "alpha")), float(_require(d, "beta")))
        return spec, gamma
    if kind == "minmax":
        spec = MinMaxSpec.separable(_prox(d, "prox_x", p), _prox(d, "prox_y", p), float(_require(d, "alpha")))
        return spec, gamma
    raise SpecFileError(f"unknown saddle kind {kind!r}; use 'pd' or 'minmax'")
