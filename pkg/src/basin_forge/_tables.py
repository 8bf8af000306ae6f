"""One-time numeric tables for the smooth primitives.

The smooth step ``zeta`` is defined by an integral with no closed form:
``zeta(x) = c * integral_0^x chi`` with ``c = 1 / integral_0^1 chi``.  Both
backends evaluate it from a cumulative Gauss-Legendre table with monotone
Hermite-cubic interpolation; the normalizer itself comes from adaptive
quadrature (QUADPACK) and the table is validated against it.

Everything here is computed once per process under an import-time guard and
is immutable afterwards, so the tables can be shared freely across threads.
"""

import numpy as np
from scipy.integrate import quad

TABLE_N = 4096  # panels on [0, 1]


def chi_array(x):
    """The C-infinity bump exp(1/(x(x-1))) on (0,1), zero elsewhere."""
    x = np.asarray(x, dtype=float)
    out = np.zeros_like(x)
    inside = (x > 0.0) & (x < 1.0)
    with np.errstate(under="ignore"):
        xi = x[inside]
        out[inside] = np.exp(1.0 / (xi * (xi - 1.0)))
    return out


def _build():
    # Adaptive quadrature for the normalizer (relative error well under 1e-10).
    total, err = quad(lambda t: float(chi_array(t)), 0.0, 1.0,
                      epsabs=0.0, epsrel=1e-13, limit=200)
    if not (err <= 1e-10 * total):
        raise RuntimeError("zeta normalizer quadrature did not converge")
    c_zeta = 1.0 / total

    # Cumulative integral on an equispaced mesh via per-panel Gauss-Legendre.
    nodes, weights = np.polynomial.legendre.leggauss(15)
    h = 1.0 / TABLE_N
    left = np.arange(TABLE_N) * h
    pts = left[:, None] + (nodes[None, :] + 1.0) * (h / 2.0)
    panel = (chi_array(pts) @ weights) * (h / 2.0)
    cum = np.concatenate(([0.0], np.cumsum(panel)))

    vals = cum * c_zeta
    # chi is symmetric about 1/2, so zeta(1-x) = 1 - zeta(x); enforce the
    # mirror exactly so that zeta(1/2) = 1/2 holds to machine precision.
    mid = TABLE_N // 2
    if abs(vals[mid] - 0.5) > 1e-11:
        raise RuntimeError("zeta table disagrees with quadrature normalizer")
    vals[mid] = 0.5
    vals[mid + 1:] = 1.0 - vals[mid - 1::-1]
    vals[-1] = 1.0

    xs = np.linspace(0.0, 1.0, TABLE_N + 1)
    dvals = c_zeta * chi_array(xs)
    return c_zeta, np.ascontiguousarray(vals), np.ascontiguousarray(dvals)


C_ZETA, ZETA_VALS, ZETA_DERIVS = _build()
