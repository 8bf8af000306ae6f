import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose
from scipy.spatial import cKDTree

from basin_forge import integrator
from basin_forge import planar_basin as pb
from basin_forge.errors import (AmbiguousHint, GridMismatch,
                                IncompleteInventory, NewtonMiss,
                                NoOrbitInHint, NonHyperbolicEquilibrium,
                                SaddleConnectionSuspected)


@pytest.fixture(scope="module")
def f2():
    return pb.bundled_field("f2")


@pytest.fixture(scope="module")
def rot():
    return pb.bundled_field("rotated_linear")


@pytest.fixture(scope="module")
def vdp():
    return pb.bundled_field("vdp")


@pytest.fixture(scope="module")
def rev():
    return pb.bundled_field("vdp_reversed")


@pytest.fixture(scope="module")
def f2_boxes(f2):
    return pb.find_equilibria(f2)


@pytest.fixture(scope="module")
def f2_inventory(f2_boxes):
    return pb.Inventory(f2_boxes, [])


@pytest.fixture(scope="module")
def vdp_annuli(vdp):
    return pb.locate_periodic_annuli(vdp, vdp.meta["hints"])


@pytest.fixture(scope="module")
def rev_inventory(rev):
    eqs = pb.find_equilibria(rev)
    ann = pb.locate_periodic_annuli(rev, rev.meta["hints"])
    return pb.Inventory(eqs, ann)


# ---------------------------------------------------------------------------
# fields
# ---------------------------------------------------------------------------

def test_field_eval_and_jacobian(f2):
    p = np.array([0.5, 0.25])
    assert_allclose(f2.eval(p), [0.5 - 0.125, -0.25], rtol=1e-14)
    assert_allclose(f2.jacobian(p), [[1 - 3 * 0.25, 0.0], [0.0, -1.0]],
                    rtol=1e-9, atol=1e-9)


def test_outward_rim_rejected():
    with pytest.raises(ValueError):
        pb.field_from_expressions("x", "y", 1.5)


def test_reversed_field(f2):
    back = f2.reversed()
    for p in ([0.3, 0.4], [-1.2, 0.9], [0.0, -1.0]):
        assert_allclose(back.eval(np.asarray(p)), -f2.eval(np.asarray(p)),
                        rtol=1e-14)


def test_grid_field_matches_expressions(f2):
    xs = np.arange(-2.4, 2.4001, 0.05)
    X, Y = np.meshgrid(xs, xs, indexing="ij")
    vals = np.stack([X - X**3, -Y])
    gf = pb.field_from_grid(-2.4, -2.4, 0.05, 0.05, vals, 2.0)
    rng = np.random.default_rng(0)
    for p in rng.uniform(-1.8, 1.8, size=(50, 2)):
        assert_allclose(gf.eval(p), f2.eval(p), atol=1e-4)
        assert_allclose(gf.jacobian(p), f2.jacobian(p), atol=1e-2)


def test_manifest_roundtrip(tmp_path):
    doc = {"kind": "expr", "x": "-x", "y": "-y", "radius": 1.0,
           "hints": [], "name": "node"}
    f = pb.field_from_manifest(doc)
    assert f.R == 1.0 and f.meta["name"] == "node"
    path = tmp_path / "field.json"
    path.write_text(json.dumps(doc), encoding="utf-8")
    g = pb.field_from_manifest(path)
    assert_allclose(g.eval(np.array([0.25, -0.5])), [-0.25, 0.5], rtol=1e-14)
    with pytest.raises(ValueError):
        pb.field_from_manifest({"kind": "spline", "radius": 1.0})


@pytest.mark.parametrize("name,R,n_hints", [
    ("f2", 2.0, 0),
    ("rotated_linear", 2.0, 0),
    ("vdp", 4.0, 1),
    ("vdp_reversed", 4.0, 2),
])
def test_bundled_fields(name, R, n_hints):
    f = pb.bundled_field(name)
    assert f.R == R
    assert len(f.meta.get("hints", [])) == n_hints
    with pytest.raises(ValueError):
        pb.bundled_field("missing")


# ---------------------------------------------------------------------------
# equilibrium inventory
# ---------------------------------------------------------------------------

def test_find_equilibria_f2(f2_boxes):
    assert [b.kind for b in f2_boxes] == [pb.SINK, pb.SADDLE, pb.SINK]
    assert_allclose([b.equilibrium for b in f2_boxes],
                    [[-1, 0], [0, 0], [1, 0]], atol=1e-9)
    for b in f2_boxes:
        want = [-2, -1] if b.kind == pb.SINK else [-1, 1]
        assert_allclose(sorted(np.real(b.eigvals)), want, atol=1e-9)
        assert_allclose(np.imag(b.eigvals), 0.0, atol=1e-9)


def test_sink_count_is_two(f2_inventory):
    assert len(f2_inventory.sinks) == 2
    assert len(f2_inventory.saddles) == 1
    assert len(f2_inventory.sources) == 0


def test_find_equilibria_rotated(rot):
    boxes = pb.find_equilibria(rot)
    assert len(boxes) == 1 and boxes[0].kind == pb.SINK
    assert_allclose(boxes[0].equilibrium, [0.0, 0.0], atol=1e-12)
    assert_allclose(sorted(np.real(boxes[0].eigvals)), [-1, -1], atol=1e-12)
    assert_allclose(sorted(np.imag(boxes[0].eigvals)), [-1, 1], atol=1e-12)


def test_box_geometry(f2, f2_boxes):
    for b in f2_boxes:
        assert 0.0 < b.radius <= b.bound
        assert b.side == pytest.approx(2.0 * b.radius)
        assert b.contains(b.center)
        assert not b.contains(b.center + np.array([2.0 * b.bound, 0.0]))
        assert_allclose(b.form(b.boundary(96)), b.s**2, rtol=1e-9)


def test_sink_boundary_flux_inward(f2, f2_boxes):
    # certified regions are forward invariant: the field crosses the
    # boundary ellipse strictly inward at every sample
    for b in f2_boxes:
        if b.kind != pb.SINK:
            continue
        for p in b.boundary(240):
            assert float(np.dot(f2.eval(p), b.P @ (p - b.center))) < 0.0


def test_nonhyperbolic_rejected():
    f = pb.field_from_expressions("-x^3", "-y", 2.0)
    with pytest.raises(NonHyperbolicEquilibrium):
        pb.find_equilibria(f)


def test_newton_miss():
    f = pb.field_from_expressions("1 + 0*x", "1 + 0*y", 2.0,
                                  check_boundary=False)
    with pytest.raises(NewtonMiss):
        pb.find_equilibria(f)


@pytest.mark.parametrize("fx,fy", [
    ("x - x^3 + 0.03", "-y - 0.02"),
    ("x - x^3 + 0.05*sin(y)", "-y + 0.05*cos(x)"),
])
def test_perturbation_stability(fx, fy):
    # structural stability: small perturbations keep two sinks and one
    # saddle, each within 0.1 of its unperturbed position
    boxes = pb.find_equilibria(pb.field_from_expressions(fx, fy, 2.0))
    sinks = [b for b in boxes if b.kind == pb.SINK]
    saddles = [b for b in boxes if b.kind == pb.SADDLE]
    assert len(sinks) == 2 and len(saddles) == 1
    for ref in ([-1.0, 0.0], [1.0, 0.0]):
        d = min(float(np.hypot(*(b.equilibrium - ref))) for b in sinks)
        assert d < 0.1
    assert float(np.hypot(*saddles[0].equilibrium)) < 0.1


# ---------------------------------------------------------------------------
# periodic annuli
# ---------------------------------------------------------------------------

def test_locate_annuli_vdp(vdp_annuli):
    assert len(vdp_annuli) == 1
    a = vdp_annuli[0]
    assert a.kind == pb.ATTRACTING
    assert a.section_radius == pytest.approx(2.008066, abs=5e-4)
    assert a.margin > 0.0
    for curve in (a.ib, a.ob, a.orbit):
        assert_allclose(curve[0], curve[-1], atol=1e-8)
        r = np.hypot(curve[:, 0], curve[:, 1])
        assert 1.4 < r.min() and r.max() < 2.9


def test_locate_annuli_reversed(rev_inventory):
    ann = rev_inventory.annuli
    assert [a.kind for a in ann] == [pb.REPELLING, pb.ATTRACTING]
    assert ann[0].section_radius == pytest.approx(2.009197, abs=5e-4)
    assert ann[1].section_radius == pytest.approx(3.646363, abs=5e-4)


def test_locate_annuli_no_hints(f2):
    assert pb.locate_periodic_annuli(f2, []) == []


def test_no_orbit_in_hint(rot):
    with pytest.raises(NoOrbitInHint):
        pb.locate_periodic_annuli(rot, [{"center": [0, 0],
                                         "radii": [0.5, 1.5]}])


def test_tangent_section_ambiguous(f2):
    # the x-axis is invariant for f2, so the radial section is tangent
    with pytest.raises(AmbiguousHint):
        pb.locate_periodic_annuli(f2, [{"center": [0, 0],
                                        "radii": [0.5, 1.5]}])


@pytest.mark.parametrize("radii", [[1.5, 0.5], [-0.2, 1.0], [1.0, 1.0]])
def test_bad_hint_radii(vdp, radii):
    with pytest.raises(ValueError):
        pb.locate_periodic_annuli(vdp, [{"center": [0, 0], "radii": radii}])


def test_margin_zone_invariance(vdp, vdp_annuli):
    # points perturbed off the orbit by margin/2 flow back to within the
    # detection margin after roughly one period
    a = vdp_annuli[0]
    tree = cKDTree(a.orbit)
    for p in a.orbit[:-1:200]:
        u = p / np.hypot(*p)
        for sgn in (1.0, -1.0):
            tr = integrator.integrate(vdp, p + sgn * 0.5 * a.margin * u,
                                      7.0, rtol=1e-9, atol=1e-9, dense=False)
            assert tree.query(np.asarray(tr.ys)[-1])[0] <= a.margin


# ---------------------------------------------------------------------------
# point classification
# ---------------------------------------------------------------------------

def test_classify_point_examples(f2, f2_inventory):
    status, idx, t = pb.classify_point(np.array([0.5, 0.5]), f2_inventory,
                                       f2, 80.0, target_sink=1)
    assert (status, idx) == (pb.STATUS_I, None) and t > 0.0
    status, idx, t2 = pb.classify_point(np.array([-0.5, 0.5]), f2_inventory,
                                        f2, 80.0, target_sink=1)
    assert (status, idx) == (pb.STATUS_II, 0)
    assert t2 == pytest.approx(t, rel=1e-9)  # mirror trajectories
    status, idx, t = pb.classify_point(np.array([1.0, 0.0]), f2_inventory,
                                       f2, 80.0, target_sink=1)
    assert (status, idx, t) == (pb.STATUS_I, None, 0.0)


def test_classify_point_orbit_and_timeout(rev, rev_inventory):
    status, idx, _ = pb.classify_point(np.array([3.0, 0.0]), rev_inventory,
                                       rev, 80.0, target_sink=0)
    assert (status, idx) == (pb.STATUS_III, 0)
    status, idx, t = pb.classify_point(np.array([2.01, 0.0]), rev_inventory,
                                       rev, 0.5, target_sink=0)
    assert (status, idx, t) == (pb.TIMEOUT, None, 0.5)


def test_classify_point_target_range(f2, f2_inventory):
    with pytest.raises(ValueError):
        pb.classify_point(np.array([0.5, 0.5]), f2_inventory, f2, 80.0,
                          target_sink=2)


def test_statuses_mutually_exclusive(f2, f2_inventory):
    rng = np.random.default_rng(3)
    pts = rng.uniform(-1.9, 1.9, size=(40, 2))
    pts = pts[np.hypot(pts[:, 0], pts[:, 1]) < 1.9]
    for p in pts:
        status, idx, t = pb.classify_point(p, f2_inventory, f2, 80.0, 1)
        assert status in (pb.STATUS_I, pb.STATUS_II, pb.STATUS_III,
                          pb.TIMEOUT)
        assert (idx is None) == (status in (pb.STATUS_I, pb.TIMEOUT))
        assert 0.0 <= t <= 80.0


# ---------------------------------------------------------------------------
# stable manifolds
# ---------------------------------------------------------------------------

def test_stable_manifold_f2(f2, f2_boxes):
    saddle = [b for b in f2_boxes if b.kind == pb.SADDLE][0]
    g = pb.stable_manifold_curve(saddle, f2)
    assert np.abs(g[:, 0]).max() < 1e-9  # exactly the y-axis
    assert np.hypot(*g[0]) >= 0.999 * f2.R
    assert np.hypot(*g[-1]) >= 0.999 * f2.R
    assert np.any(np.all(g == saddle.equilibrium, axis=1))


def test_stable_manifold_linear_saddle():
    lin = pb.field_from_expressions("x", "-y", 2.0, check_boundary=False)
    boxes = pb.find_equilibria(lin)
    g = pb.stable_manifold_curve(boxes[0], lin)
    assert np.abs(g[:, 0]).max() < 1e-9
    assert abs(g[0, 1]) >= 1.999 and abs(g[-1, 1]) >= 1.999


def test_stable_manifold_needs_saddle(f2_boxes):
    sink = [b for b in f2_boxes if b.kind == pb.SINK][0]
    with pytest.raises(ValueError):
        pb.stable_manifold_curve(sink, pb.bundled_field("f2"))


def test_saddle_connection_suspected():
    # heteroclinic orbit along y = 0 between the saddles at (-1,0), (1,0)
    f = pb.field_from_expressions("1 - x^2", "x*y - y^3", 2.0,
                                  check_boundary=False)
    with pytest.raises(SaddleConnectionSuspected):
        pb.compute_basin(f, 0, k=4)


# ---------------------------------------------------------------------------
# basin rasters
# ---------------------------------------------------------------------------

def test_compute_basin_f2_right_half(f2):
    r = pb.compute_basin(f2, 1, k=8)
    assert r.l == 5 and r.h == 2.0**-5
    target = r.codes == pb.CELL_SINK_BASE + 1
    other = r.codes == pb.CELL_SINK_BASE
    assert target.sum() > 0 and target.sum() == other.sum()
    assert r.centers()[..., 0][target].min() > 0.0
    # the basin picture is mirror symmetric in x
    assert np.array_equal(target[::-1], other)
    assert r.meta["timeout_cells"] == 0


def test_compute_basin_rotated_whole_disk(rot):
    r = pb.compute_basin(rot, 0, k=8)
    cnt = r.counts()
    in_disk = sum(v for c, v in cnt.items() if c != pb.CELL_OUTSIDE)
    decided = cnt.get(pb.CELL_SINK_BASE, 0)
    assert decided + cnt.get(pb.CELL_MARGIN, 0) == in_disk
    assert cnt.get(pb.CELL_UNKNOWN, 0) == 0
    assert decided > 0.8 * in_disk


def test_compute_basin_reversed_structure(rev, rev_inventory):
    r = pb.compute_basin(rev, 0, k=4, inventory=rev_inventory)
    cnt = r.counts()
    assert cnt.get(pb.CELL_EXCLUDED, 0) > 0
    assert cnt.get(pb.CELL_ORBIT_BASE, 0) > 0
    assert cnt.get(pb.CELL_UNKNOWN, 0) == 0
    rr = np.hypot(r.centers()[..., 0], r.centers()[..., 1])
    assert rr[r.codes == pb.CELL_SINK_BASE].max() < 2.85
    assert rr[r.codes == pb.CELL_ORBIT_BASE].min() > 1.5


def test_compute_basin_validation(f2, f2_inventory):
    with pytest.raises(ValueError):
        pb.compute_basin(f2, 2, k=8, inventory=f2_inventory)
    with pytest.raises(ValueError):
        pb.compute_basin(f2, 0, k=0, inventory=f2_inventory)


def test_incomplete_inventory(rev, rev_inventory):
    # dropping the annuli leaves orbit-bound cells with nowhere to land
    bare = pb.Inventory(rev_inventory.equilibria, [])
    with pytest.raises(IncompleteInventory):
        pb.compute_basin(rev, 0, k=2, T_max=20.0, inventory=bare)


def test_refinement_keeps_labels(f2, f2_inventory):
    r5 = pb.compute_basin(f2, 1, k=8, inventory=f2_inventory)
    r6 = pb.compute_basin(f2, 1, k=8, l=6, inventory=f2_inventory)
    idx5 = np.arange(r5.codes.shape[0])
    idx6 = 2 * (idx5 - r5.n) + r6.n
    sub = r6.codes[np.ix_(idx6, idx6)]
    keep = (r5.codes >= pb.CELL_SINK_BASE) & (sub != pb.CELL_MARGIN)
    assert keep.sum() > 5000
    assert np.array_equal(r5.codes[keep], sub[keep])


def test_classify_point_matches_raster(f2, f2_inventory):
    r = pb.compute_basin(f2, 1, k=8, inventory=f2_inventory)
    centers = r.centers()
    decided = np.argwhere(r.codes >= pb.CELL_SINK_BASE)
    rng = np.random.default_rng(11)
    for i, j in decided[rng.choice(len(decided), 60, replace=False)]:
        status, idx, _ = pb.classify_point(centers[i, j], f2_inventory, f2,
                                           80.0, target_sink=1)
        code = int(r.codes[i, j])
        if status == pb.STATUS_I:
            assert code == pb.CELL_SINK_BASE + 1
        else:
            assert status == pb.STATUS_II
            assert code == pb.CELL_SINK_BASE + idx


def test_brute_force_oracle_agrees(f2, f2_inventory):
    r = pb.compute_basin(f2, 1, k=4, inventory=f2_inventory)
    att = [("sink", tuple(b.equilibrium)) for b in f2_inventory.sinks]
    br = pb.brute_force_classify(f2, r.l, 60.0, att, R=f2.R)
    sel = (br.codes >= pb.CELL_SINK_BASE) & (r.codes >= pb.CELL_SINK_BASE)
    assert sel.sum() > 2000
    assert (br.codes[sel] == r.codes[sel]).mean() >= 0.999


# ---------------------------------------------------------------------------
# raster containers and output
# ---------------------------------------------------------------------------

def test_raster_geometry():
    r = pb.BasinRaster.empty(3, 1.0, {})
    assert r.codes.shape == (17, 17) and r.h == 0.125
    c = r.centers()
    assert_allclose(c[r.n, r.n], [0.0, 0.0])
    assert_allclose(c[r.n + 1, r.n], [0.125, 0.0])
    assert np.all(r.codes == pb.CELL_OUTSIDE)


def test_raster_save_roundtrip(tmp_path, f2):
    r = pb.compute_basin(f2, 1, k=8)
    pgm = tmp_path / "basin.pgm"
    leg = tmp_path / "basin.json"
    r.save(pgm, leg)
    raw = pgm.read_bytes()
    header, dims, maxval, payload = raw.split(b"\n", 3)
    assert header == b"P5" and maxval == b"255"
    w, h = map(int, dims.split())
    assert (h, w) == r.codes.shape
    img = np.frombuffer(payload, dtype=np.uint8).reshape(h, w)
    assert np.array_equal(img, np.clip(r.codes.T[::-1], 0, 255))
    doc = json.loads(leg.read_text(encoding="utf-8"))
    assert doc["l"] == r.l and doc["R"] == r.R and doc["cell"] == r.h
    assert doc["k"] == 8 and doc["target_sink"] == 1
    assert doc["codes"][str(pb.CELL_SINK_BASE + 1)].startswith("sink 1")


def test_write_polyline_csv(tmp_path):
    poly = np.array([[0.0, 1.0], [0.5, -0.25], [1e-17, 3.0]])
    path = tmp_path / "curve.csv"
    pb.write_polyline_csv(path, poly)
    lines = path.read_text().splitlines()
    assert lines[0] == "x,y"
    back = np.loadtxt(path, delimiter=",", skiprows=1)
    assert_allclose(back, poly, rtol=0, atol=0)


# ---------------------------------------------------------------------------
# hausdorff
# ---------------------------------------------------------------------------

def _raster_pair():
    a = pb.BasinRaster.empty(3, 1.0, {})
    b = pb.BasinRaster.empty(3, 1.0, {})
    a.codes[8, 8] = pb.CELL_EXCLUDED
    b.codes[8, 8] = pb.CELL_EXCLUDED
    return a, b


def test_hausdorff_identical_rasters(f2):
    r = pb.compute_basin(f2, 1, k=8)
    assert pb.hausdorff(r, r) == 0.0


def test_hausdorff_single_cell():
    a, b = _raster_pair()
    b.codes[12, 8] = pb.CELL_EXCLUDED  # 4 cells away at h = 1/8
    assert pb.hausdorff(a, b) == pytest.approx(0.5)


def test_hausdorff_empty_sets():
    a, b = _raster_pair()
    assert pb.hausdorff(pb.BasinRaster.empty(3, 1.0, {}),
                        pb.BasinRaster.empty(3, 1.0, {})) == 0.0
    assert pb.hausdorff(a, pb.BasinRaster.empty(3, 1.0, {})) == np.inf


def test_hausdorff_ignores_uncertain_cells():
    a, b = _raster_pair()
    b.codes[12, 8] = pb.CELL_EXCLUDED
    a.codes[12, 8] = pb.CELL_MARGIN  # masks the extra cell in both sets
    assert pb.hausdorff(a, b) == 0.0


def test_hausdorff_grid_mismatch():
    a, _ = _raster_pair()
    with pytest.raises(GridMismatch):
        pb.hausdorff(a, pb.BasinRaster.empty(4, 1.0, {}))
    with pytest.raises(GridMismatch):
        pb.hausdorff(a, np.zeros((3, 2)))


def test_hausdorff_raw_points():
    assert pb.hausdorff(np.array([[0.0, 0.0]]),
                        np.array([[3.0, 4.0]])) == pytest.approx(5.0)


@settings(max_examples=150, deadline=None)
@given(st.lists(st.tuples(st.floats(-5, 5), st.floats(-5, 5)),
                min_size=1, max_size=8),
       st.lists(st.tuples(st.floats(-5, 5), st.floats(-5, 5)),
                min_size=1, max_size=8))
def test_hausdorff_matches_definition(pts_a, pts_b):
    a = np.asarray(pts_a)
    b = np.asarray(pts_b)
    d = pb.hausdorff(a, b)
    assert d == pb.hausdorff(b, a)
    ref = max(
        max(min(np.hypot(*(p - q)) for q in b) for p in a),
        max(min(np.hypot(*(p - q)) for q in a) for p in b))
    assert d == pytest.approx(ref, rel=1e-12, abs=1e-12)
    assert pb.hausdorff(a, a) == 0.0
