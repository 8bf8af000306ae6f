"""Infinitely differentiable building blocks for the machine embeddings.

Everything here is a composition of the classical bump e^{1/(x(x-1))} and
its normalized integral, so all functions are C-infinity.  The rounding and
modulus maps agree exactly with their integer counterparts on a plateau of
radius 1/4 around each integer (not merely to rounding error: the bump
branch is bypassed there), which is what makes the machine simulation
tolerant of bounded state noise.

Each operation comes with a hand-derived first derivative (d_*).  Values
and derivatives are delegated to the active numeric backend; this module
adds argument validation and the array-broadcasting convenience.
"""

import numpy as np

from . import _backend as _b
from .errors import DegenerateWindow, MachineFormatError

__all__ = [
    "chi", "d_chi",
    "zeta", "d_zeta",
    "zeta_ab", "d_zeta_ab",
    "phi", "d_phi",
    "phi_bar", "d_phi_bar",
    "smooth_round", "d_smooth_round",
    "smooth_mod", "d_smooth_mod",
    "smooth_div", "d_smooth_div",
    "PHI_INTEGRAL",
]

_K = _b.kernels

# integral of phi over one period, by adaptive quadrature on its support
PHI_INTEGRAL = 0.006271635947863714


def _vectorize(fn, x):
    if np.ndim(x) == 0:
        return fn(float(x))
    arr = np.asarray(x, dtype=float)
    out = np.empty(arr.shape)
    flat_in, flat_out = arr.ravel(), out.ravel()
    for i in range(flat_in.size):
        flat_out[i] = fn(flat_in[i])
    return out


def chi(x):
    """Bump supported exactly on (0,1), peak value e^{-4} at 1/2."""
    return _vectorize(_K.chi, x)


def d_chi(x):
    return _vectorize(_K.d_chi, x)


def zeta(x):
    """Monotone C-infinity step: 0 for x <= 0, 1 for x >= 1."""
    return _vectorize(_K.zeta, x)


def d_zeta(x):
    return _vectorize(_K.d_zeta, x)


def zeta_ab(a, b, x):
    """zeta rescaled to switch on over the window (a, b)."""
    a, b = float(a), float(b)
    if not a < b:
        raise DegenerateWindow(f"window [{a}, {b}] has nonpositive width")
    return _vectorize(lambda t: _K.zeta_ab(a, b, t), x)


def d_zeta_ab(a, b, x):
    a, b = float(a), float(b)
    if not a < b:
        raise DegenerateWindow(f"window [{a}, {b}] has nonpositive width")
    return _vectorize(lambda t: _K.d_zeta_ab(a, b, t), x)


def phi(t):
    """Period-1 pulse supported exactly on (1/4, 1/2) mod 1; its peak, at
    t = 3/8, is zeta(1 - 1/sqrt(2)) which is about 0.0707."""
    return _vectorize(_K.phi, t)


def d_phi(t):
    return _vectorize(_K.d_phi, t)


def phi_bar(t, v3, m):
    """The pulse, forced to the constant 1 once v3 exceeds about m - 1/4.

    Used as a clock gate: while the simulated state coordinate v3 stays
    below m - 1/4 this is phi(t); as v3 crosses into [m - 1/4, m - 3/16]
    the gate blends to being open for all t.
    """
    m = float(m)
    if np.ndim(t) == 0 and np.ndim(v3) == 0:
        return _K.phi_bar(float(t), float(v3), m)
    t_arr, v_arr = np.broadcast_arrays(np.asarray(t, float), np.asarray(v3, float))
    out = np.empty(t_arr.shape)
    fi, fv, fo = t_arr.ravel(), v_arr.ravel(), out.ravel()
    for i in range(fi.size):
        fo[i] = _K.phi_bar(fi[i], fv[i], m)
    return out


def d_phi_bar(t, v3, m):
    """Partial derivatives (d/dt, d/dv3) of phi_bar."""
    m = float(m)
    return (_K.d_phi_bar_dt(float(t), float(v3), m),
            _K.d_phi_bar_dv3(float(t), float(v3), m))


def smooth_round(x):
    """C-infinity rounding; equals the nearest integer k exactly whenever
    |x - k| <= 1/4."""
    return _vectorize(_K.smooth_round, x)


def d_smooth_round(x):
    return _vectorize(_K.d_smooth_round, x)


def _check_base(b):
    if not isinstance(b, (int, np.integer)) or b < 2:
        raise MachineFormatError(f"base must be an integer >= 2, got {b!r}")
    return int(b)


def smooth_mod(x, b):
    """C-infinity extension of (round x) mod b; exact on the plateaus."""
    b = _check_base(b)
    return _vectorize(lambda t: _K.smooth_mod(t, b), x)


def d_smooth_mod(x, b):
    b = _check_base(b)
    return _vectorize(lambda t: _K.d_smooth_mod(t, b), x)


def smooth_div(x, b):
    """C-infinity extension of (round x) div b: (r(x) - mod(x,b)) / b."""
    b = _check_base(b)
    return _vectorize(lambda t: _K.smooth_div(t, b), x)


def d_smooth_div(x, b):
    b = _check_base(b)
    return _vectorize(lambda t: _K.d_smooth_div(t, b), x)
