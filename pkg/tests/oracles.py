"""Independent reference computations used by the tests.

Nothing here calls into the package's closed forms: proxes are found by
brute-force minimization, Jacobians by central differences and gauges by
bisection on set membership.
"""

import numpy as np
from scipy.optimize import minimize, minimize_scalar


def prox_1d(phi, u, gamma, lo=-20.0, hi=20.0, grid=40001):
    """argmin_t phi(t) + (t - u)^2 / (2 gamma) by a fine grid and a bounded local polish."""
    ts = np.linspace(lo, hi, grid)
    vals = phi(ts) + (ts - u) ** 2 / (2 * gamma)
    k = int(np.argmin(vals))
    a, b = ts[max(k - 1, 0)], ts[min(k + 1, grid - 1)]
    with np.errstate(invalid="ignore"):
        res = minimize_scalar(lambda t: float(phi(np.array(t))) + (t - u) ** 2 / (2 * gamma),
                              bounds=(a, b), method="bounded", options={"xatol": 1e-12})
    return float(res.x) if res.fun <= vals[k] else float(ts[k])


def prox_nd(g, u, gamma, bounds=None):
    """argmin_x g(x) + ||x - u||^2 / (2 gamma) for smooth g (optionally box constrained)."""
    res = minimize(lambda x: g(x) + float((x - u) @ (x - u)) / (2 * gamma), np.array(u, dtype=float),
                   method="L-BFGS-B", bounds=bounds, options={"ftol": 1e-15, "gtol": 1e-12, "maxiter": 10000})
    return res.x


def fd_joint(fn, theta, x, h=1e-6):
    """Central differences of (theta, x) -> fn(theta, x): returns (d_theta, d_x)."""
    theta = np.asarray(theta, dtype=float)
    x = np.asarray(x, dtype=float)
    cols_t = [(fn(theta + h * e, x) - fn(theta - h * e, x)) / (2 * h) for e in np.eye(theta.size)]
    cols_x = [(fn(theta, x + h * e) - fn(theta, x - h * e)) / (2 * h) for e in np.eye(x.size)]
    n = np.asarray(fn(theta, x)).size
    dt = np.column_stack(cols_t) if cols_t else np.zeros((n, 0))
    return dt, np.column_stack(cols_x)


def near_kink(jac, theta, x, margin=1e-3, rng=None, probes=8):
    """True if the Jacobian jumps somewhere within ``margin`` of (theta, x)."""
    rng = np.random.default_rng(0) if rng is None else rng
    base = jac(theta, x)
    for _ in range(probes):
        dt = rng.uniform(-margin, margin, np.size(theta))
        dx = rng.uniform(-margin, margin, np.size(x))
        other = jac(np.asarray(theta) + dt, np.asarray(x) + dx)
        if not (np.allclose(other.d_x, base.d_x, atol=1e-2) and np.allclose(other.d_theta, base.d_theta, atol=1e-2)):
            return True
    for i in range(np.size(x)):
        for s in (-margin, margin):
            e = np.zeros(np.size(x))
            e[i] = s
            other = jac(theta, np.asarray(x) + e)
            if not np.allclose(other.d_x, base.d_x, atol=1e-2):
                return True
    return False


def bisection_gauge(contains, x, lo=0.0, hi=None, tol=1e-14):
    """inf{lam > 0 : x / lam in Q} by bisection on membership."""
    x = np.asarray(x, dtype=float)
    if not np.any(x):
        return 0.0
    hi = 1.0 if hi is None else hi
    while not contains(x / hi):
        hi *= 2
    lo = max(lo, 1e-300)
    while contains(x / lo) and lo > 1e-300:
        lo /= 2
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if contains(x / mid):
            hi = mid
        else:
            lo = mid
        if hi - lo <= tol * hi:
            break
    return hi


def random_spd(rng, n, lo=0.5, hi=3.0):
    Q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    return (Q * rng.uniform(lo, hi, n)) @ Q.T
