import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import quad

from basin_forge import smooth_kit as sk
from basin_forge.errors import DegenerateWindow


def central(fn, x, h=1e-6):
    return (fn(x + h) - fn(x - h)) / (2 * h)


def test_chi_values():
    assert sk.chi(0.5) == pytest.approx(math.exp(-4.0), rel=1e-15)
    assert sk.chi(0.0) == 0.0
    assert sk.chi(1.0) == 0.0
    assert sk.chi(-3.0) == 0.0
    assert sk.chi(1.7) == 0.0
    assert sk.chi(0.25) > 0.0


def test_zeta_saturation_and_midpoint():
    assert sk.zeta(-0.5) == 0.0
    assert sk.zeta(0.0) == 0.0
    assert sk.zeta(1.0) == 1.0
    assert sk.zeta(2.0) == 1.0
    assert sk.zeta(0.5) == pytest.approx(0.5, abs=1e-12)


def test_zeta_symmetry():
    for x in np.linspace(0.01, 0.99, 57):
        assert sk.zeta(x) + sk.zeta(1.0 - x) == pytest.approx(1.0, abs=1e-9)


def test_zeta_monotone_dense():
    xs = np.linspace(-0.25, 1.25, 100_001)
    vals = sk.zeta(xs)
    assert np.all(np.diff(vals) >= 0.0)
    assert np.all(vals >= 0.0) and np.all(vals <= 1.0)


@settings(max_examples=300, deadline=None)
@given(st.floats(-1, 2), st.floats(-1, 2))
def test_zeta_monotone_pairs(a, b):
    lo, hi = min(a, b), max(a, b)
    assert sk.zeta(lo) <= sk.zeta(hi)


@pytest.mark.parametrize("x", np.linspace(0.03, 0.97, 19))
def test_d_zeta_matches_fd(x):
    assert sk.d_zeta(x) == pytest.approx(central(sk.zeta, x), abs=1e-6)


def test_zeta_ab():
    assert sk.zeta_ab(2.0, 3.0, 1.5) == 0.0
    assert sk.zeta_ab(2.0, 3.0, 2.5) == pytest.approx(0.5, abs=1e-12)
    assert sk.zeta_ab(2.0, 3.0, 3.5) == 1.0
    with pytest.raises(DegenerateWindow):
        sk.zeta_ab(3.0, 3.0, 2.5)
    with pytest.raises(DegenerateWindow):
        sk.zeta_ab(4.0, 3.0, 2.5)


def test_d_zeta_ab_scaling():
    # chain rule: derivative picks up the 1/(b-a) factor
    a, b = 1.0, 5.0
    for x in (1.5, 2.7, 4.2):
        want = central(lambda u: sk.zeta_ab(a, b, u), x)
        assert sk.d_zeta_ab(a, b, x) == pytest.approx(want, abs=1e-6)


def test_phi_support_and_period():
    for t in (0.0, 0.25, 0.5, 0.8, 1.0, 1.25):
        assert sk.phi(t) == 0.0
    assert sk.phi(0.3) > 0.0
    assert sk.phi(0.375) == pytest.approx(sk.zeta(1.0 - 1.0 / math.sqrt(2)), rel=1e-12)
    for t in np.linspace(0, 1, 41):
        assert sk.phi(t + 1.0) == pytest.approx(sk.phi(t), abs=1e-12)
        assert sk.phi(t - 3.0) == pytest.approx(sk.phi(t), abs=1e-12)


def test_phi_integral_matches_quadrature():
    val, err = quad(sk.phi, 0.25, 0.5, epsabs=1e-14, epsrel=1e-12)
    assert err < 1e-12
    assert sk.PHI_INTEGRAL == pytest.approx(val, abs=1e-12)
    # support is exactly (1/4, 1/2), so the full-period integral is the same
    full, _ = quad(sk.phi, 0.0, 1.0, points=[0.25, 0.5], epsabs=1e-14, limit=200)
    assert full == pytest.approx(sk.PHI_INTEGRAL, abs=1e-12)


@pytest.mark.parametrize("t", np.linspace(0.26, 0.49, 12))
def test_d_phi_matches_fd(t):
    assert sk.d_phi(t) == pytest.approx(central(sk.phi, t), abs=1e-6)


def test_phi_bar_gate():
    # second argument near m forces the output to saturate at >= 1
    assert sk.phi_bar(0.0, 2.0, 2) == 1.0
    assert sk.phi_bar(0.7, 3.0, 3) == 1.0
    # far below the gate threshold it reduces to phi
    assert sk.phi_bar(0.3, 1.0, 2) == pytest.approx(sk.phi(0.3), rel=1e-15)
    assert sk.phi_bar(0.1, 1.0, 2) == 0.0


def test_phi_bar_broadcasts():
    t = np.linspace(0, 1, 7)
    out = sk.phi_bar(t, 1.0, 2)
    assert out.shape == t.shape
    assert out[0] == 0.0


def test_d_phi_bar_matches_fd():
    m = 2
    for t, v3 in [(0.3, 1.0), (0.42, 1.83), (0.1, 1.9), (0.3, 1.85)]:
        dt, dv = sk.d_phi_bar(t, v3, m)
        assert dt == pytest.approx(central(lambda u: sk.phi_bar(u, v3, m), t), abs=1e-6)
        assert dv == pytest.approx(central(lambda u: sk.phi_bar(t, u, m), v3), abs=1e-6)


@settings(max_examples=200, deadline=None)
@given(st.integers(-10 ** 6, 10 ** 6), st.floats(-0.25, 0.25))
def test_smooth_round_plateau_exact(k, d):
    assert sk.smooth_round(k + d) == float(k)


def test_smooth_round_between():
    xs = np.linspace(-3, 3, 2001)
    vals = sk.smooth_round(xs)
    assert np.all(np.diff(vals) >= -1e-15)
    assert sk.smooth_round(0.5) == pytest.approx(0.5, abs=1e-12)


@pytest.mark.parametrize("x", [-1.37, -0.3, 0.31, 0.5, 1.62, 2.49])
def test_d_smooth_round_matches_fd(x):
    assert sk.d_smooth_round(x) == pytest.approx(central(sk.smooth_round, x), abs=1e-6)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 10 ** 9), st.integers(2, 12), st.floats(-0.25, 0.25))
def test_smooth_mod_div_plateau(k, b, d):
    x = k + d
    assert sk.smooth_mod(x, b) == float(k % b)
    assert sk.smooth_div(x, b) == float(k // b)


def test_smooth_mod_examples():
    assert sk.smooth_mod(35.0, 10) == 5.0
    assert sk.smooth_div(35.0, 10) == 3.0
    assert sk.smooth_mod(7.1, 3) == 1.0
    assert sk.smooth_div(7.1, 3) == 2.0


def test_smooth_mod_rejects_bad_base():
    from basin_forge.errors import MachineFormatError

    with pytest.raises(MachineFormatError):
        sk.smooth_mod(1.0, 1)
    with pytest.raises(MachineFormatError):
        sk.smooth_div(1.0, 0)


@pytest.mark.parametrize("x", [3.3, 3.5, 6.71, -2.42])
@pytest.mark.parametrize("b", [2, 3, 10])
def test_d_smooth_mod_div_match_fd(x, b):
    assert sk.d_smooth_mod(x, b) == pytest.approx(
        central(lambda u: sk.smooth_mod(u, b), x), abs=1e-6)
    assert sk.d_smooth_div(x, b) == pytest.approx(
        central(lambda u: sk.smooth_div(u, b), x), abs=1e-6)


def test_smoothness_across_plateau_edges():
    # derivative continuity at the plateau boundary x = k + 1/4
    eps = 1e-7
    for fn, dfn in [(sk.smooth_round, sk.d_smooth_round), (sk.zeta, sk.d_zeta)]:
        for edge in (0.25, 0.0):
            left = dfn(edge - eps)
            right = dfn(edge + eps)
            assert abs(left - right) < 1e-4
