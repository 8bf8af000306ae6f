import json
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest

from basin_forge import integrator as itg, ode_system as osys, smooth_kit as sk, tm_core
from basin_forge.errors import BadLambda, BadStage, ZeroGateIntegral
from basin_forge.tm_core import Rule, TuringMachine


def test_targeting_spec_validation():
    with pytest.raises(ValueError):
        osys.TargetingSpec(1.0, t0=1.0, t1=0.5)
    with pytest.raises(ValueError):
        osys.TargetingSpec(1.0, gamma=0.0)


def test_gate_integral_default_phi():
    spec = osys.TargetingSpec(0.0, t0=0.0, t1=1.0)
    assert spec.gate_integral() == pytest.approx(sk.PHI_INTEGRAL, abs=1e-13)


def test_gate_integral_constant_gate():
    spec = osys.TargetingSpec(0.0, t0=0.0, t1=1.0, gate=lambda t: 0.1)
    assert spec.gate_integral() == pytest.approx(0.1, rel=1e-12)


def test_choose_c_arithmetic():
    spec = osys.TargetingSpec(0.0, t0=0.0, t1=1.0, gamma=0.25, gate=lambda t: 0.1)
    assert osys.choose_c(spec) == pytest.approx(80.0, rel=1e-12)
    assert osys.choose_c(spec, robust=True) == pytest.approx(60.0, rel=1e-12)


def test_choose_c_robust_default_gate():
    spec = osys.TargetingSpec(0.0, gamma=1.0 / 16.0)
    want = 3.0 / (8.0 * (1.0 / 256.0) * sk.PHI_INTEGRAL)
    assert osys.choose_c(spec, robust=True) == pytest.approx(want, rel=1e-10)


def test_choose_c_floor_at_one():
    spec = osys.TargetingSpec(0.0, gamma=100.0, gate=lambda t: 1.0)
    assert osys.choose_c(spec) == 1.0


def test_choose_c_zero_gate():
    spec = osys.TargetingSpec(0.0, gate=lambda t: 0.0)
    with pytest.raises(ZeroGateIntegral):
        osys.choose_c(spec)


@pytest.mark.parametrize("stage,dim", [("pair", 2), ("six", 6), ("full", 7)])
def test_build_field_dims(erase, stage, dim):
    f = osys.build_field(erase, stage, 100.0)
    assert f.dim == dim
    assert f.stage == stage


def test_build_field_validation(erase):
    with pytest.raises(BadStage):
        osys.build_field(erase, "quad", 100.0)
    with pytest.raises(BadLambda):
        osys.build_field(erase, "full", 100.0, lam=1.0)


def test_halting_point_values(erase):
    assert np.array_equal(osys.halting_point(erase),
                          np.array([0.0, 0.0, 2.0, 0.0, 0.0, 2.0, 0.0]))
    for m in (3, 5):
        M = TuringMachine(m, 2, {(q, a): Rule(0, "S", m)
                                 for q in range(1, m) for a in range(2)})
        assert np.array_equal(osys.halting_point(M),
                              np.array([0, 0, m, 0, 0, m, 0], dtype=float))


def test_full_field_equilibrium(all_machines):
    for M in all_machines.values():
        f = osys.build_field(M, "full", 500.0)
        out = f.eval(0.0, osys.halting_point(M))
        assert np.array_equal(out, np.zeros(7))


def test_clock_component_values(erase):
    f = osys.build_field(erase, "full", 500.0)
    m = float(erase.m)
    # gate saturated at v3 = m stops the clock at z = 0
    x = np.array([0.0, 0.0, m, 0.0, 0.0, m, 0.0])
    assert f.eval(0.0, x)[6] == 0.0
    # far below the gate the clock runs at unit rate
    x = np.array([0.0, 35.0, 1.0, 0.0, 35.0, 1.0, 0.0])
    assert f.eval(0.0, x)[6] == 1.0


def test_jacobian_at_halt_is_minus_identity(all_machines):
    for M in all_machines.values():
        f = osys.build_field(M, "full", 1500.0)
        J = osys.jacobian_at_halt(f)
        assert np.array_equal(J, -np.eye(7))


def test_jacobian_at_halt_requires_full(erase):
    with pytest.raises(BadStage):
        osys.jacobian_at_halt(osys.build_field(erase, "six", 100.0))


@pytest.mark.parametrize("stage", ["pair", "six", "full"])
def test_jacobian_matches_fd(erase, stage):
    f = osys.build_field(erase, stage, 50.0)
    rng = np.random.default_rng(3)
    for _ in range(6):
        x = rng.uniform(0.3, 1.7, size=f.dim)
        t = rng.uniform(0.0, 1.0)
        J = f.jacobian(t, x)
        h = 1e-6
        for j in range(f.dim):
            e = np.zeros(f.dim)
            e[j] = h
            col = (f.eval(t, x + e) - f.eval(t, x - e)) / (2 * h)
            assert J[:, j] == pytest.approx(col, rel=1e-5, abs=1e-5)


def test_dissipativity_near_sink(erase):
    # 10^4 samples with both gates saturated: the field points inward at
    # least as strongly as the radial distance
    f = osys.build_field(erase, "full", 1500.0)
    xh = osys.halting_point(erase)
    m = float(erase.m)
    rng = np.random.default_rng(11)
    for _ in range(10_000):
        x = xh + rng.uniform(-0.25, 0.25, size=7)
        x[5] = m + rng.uniform(-0.125, 0.25)
        d = x - xh
        val = f.eval(0.0, x)
        assert float(np.dot(val, d)) <= -float(np.dot(d, d)) + 1e-12


def test_pair_field_tracks_integer_division(erase):
    # the 2-D stage iterates y -> y div b; starting from 987654 each period
    # strips one decimal digit
    spec = osys.TargetingSpec(0.0, gamma=0.25)
    # any c at or above the bound is admissible; 10% headroom keeps the
    # endpoint error strictly inside gamma against solver noise
    c = 1.1 * osys.choose_c(spec)
    f = osys.build_field(erase, "pair", c)
    w = 987654
    x = np.array([float(w), float(w)])
    expect = w
    for k in range(1, 31):
        tr = itg.integrate(f, x, 1.0, t0=float(k - 1), h_max=itg.GATE_SAFE_H,
                           dense=False)
        x = tr.y
        expect = expect // 10
        assert abs(x[0] - expect) <= 0.25, (k, x, expect)
        assert abs(x[1] - expect) <= 0.25, (k, x, expect)
    assert expect == 0


def test_six_field_performs_one_machine_step(erase):
    spec = osys.TargetingSpec(0.0, gamma=0.25)
    c = 1.1 * osys.choose_c(spec)
    f = osys.build_field(erase, "six", c)
    cfg0 = np.array([0.0, 35.0, 1.0])
    cfg1 = np.array([0.0, 3.0, 1.0])
    x0 = np.concatenate([cfg0, cfg0])
    tr = itg.integrate(f, x0, 1.0, h_max=itg.GATE_SAFE_H, dense=False)
    assert np.max(np.abs(tr.y[:3] - cfg1)) <= 0.25
    assert np.max(np.abs(tr.y[3:] - cfg1)) <= 0.25


def test_manifest_round_trip_inline(erase):
    f = osys.build_field(erase, "full", 321.5, lam=0.25)
    doc = osys.field_manifest(f)
    f2 = osys.field_from_manifest(doc)
    rng = np.random.default_rng(5)
    for _ in range(5):
        x = rng.uniform(0, 3, size=7)
        t = rng.uniform(0, 1)
        assert np.array_equal(f.eval(t, x), f2.eval(t, x))
    assert f2.c == f.c and f2.lam == f.lam and f2.stage == f.stage


def test_manifest_round_trip_machine_path(erase, tmp_path):
    mp = tmp_path / "erase.json"
    mp.write_text(json.dumps(tm_core.dump_machine(erase)))
    f = osys.build_field(erase, "six", 88.0)
    doc = osys.field_manifest(f, machine_path="erase.json")
    assert doc["machine_path"] == "erase.json"
    p = tmp_path / "field.json"
    p.write_text(json.dumps(doc))
    f2 = osys.field_from_manifest(p)
    x = np.linspace(0.1, 2.0, 6)
    assert np.array_equal(f.eval(0.3, x), f2.eval(0.3, x))


def test_concurrent_evaluation(erase):
    f = osys.build_field(erase, "full", 700.0)
    rng = np.random.default_rng(9)
    xs = [rng.uniform(0, 2, size=7) for _ in range(64)]
    serial = [f.eval(0.1, x) for x in xs]
    with ThreadPoolExecutor(max_workers=8) as ex:
        parallel = list(ex.map(lambda x: f.eval(0.1, x), xs))
    for a, b in zip(serial, parallel):
        assert np.array_equal(a, b)
