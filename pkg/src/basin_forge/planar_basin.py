"""Basins of attraction for structurally stable planar fields on a disk.

The pipeline: inventory the hyperbolic equilibria (multi-start Newton,
certified boxes) and the periodic orbits (Poincare return-map bisection
inside user-supplied annulus hints), exclude the repelling objects and a
tube around each saddle's stable manifold, then classify every remaining
grid cell by integrating until it enters a sink box or settles between an
annulus pair.  A fixed-horizon brute-force classifier serves as the
validation oracle.

Status meanings follow the three-way halting scheme: I = reached the
target sink's box, II(j) = reached the box of sink j, III(i) = trapped in
attracting annulus i.
"""

import dataclasses
import json
import math
from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy.linalg import solve_continuous_lyapunov
from scipy.spatial import cKDTree

from . import _backend as _b
from . import _expr, integrator
from .errors import (AmbiguousHint, GridMismatch, IncompleteInventory,
                     NewtonMiss, NonHyperbolicEquilibrium, NoOrbitInHint,
                     SaddleConnectionSuspected)

_K = _b.kernels

TOL_HYP = 1e-6
BOUNDARY_SAMPLES = 360

SINK, SOURCE, SADDLE = "sink", "source", "saddle"
ATTRACTING, REPELLING = "attracting", "repelling"

STATUS_I, STATUS_II, STATUS_III, TIMEOUT = "I", "II", "III", "TIMEOUT"

# raster cell codes (PGM bytes); legend JSON spells them out
CELL_UNKNOWN = 0
CELL_MARGIN = 1
CELL_EXCLUDED = 2
CELL_OUTSIDE = 3
CELL_SINK_BASE = 10
CELL_ORBIT_BASE = 40


class PlanarField:
    """C1 vector field on the closed disk of radius R, inward on the rim."""

    __slots__ = ("handle", "R", "meta", "dim")

    def __init__(self, handle, R, meta=None, check_boundary=True):
        self.handle = handle
        self.R = float(R)
        self.meta = meta or {}
        self.dim = 2
        if self.R <= 0:
            raise ValueError("disk radius must be positive")
        if check_boundary:
            self._check_inward()

    def _check_inward(self):
        th = np.linspace(0.0, 2.0 * np.pi, BOUNDARY_SAMPLES, endpoint=False)
        for t in th:
            p = np.array([self.R * math.cos(t), self.R * math.sin(t)])
            if float(np.dot(self.eval(p), p)) >= 0.0:
                raise ValueError(
                    f"field does not point inward at boundary angle {t:.4f}")

    def eval(self, x):
        return _K.field_eval(self.handle, 0.0, np.asarray(x, dtype=float))

    def jacobian(self, x):
        return _K.field_jac(self.handle, 0.0, np.asarray(x, dtype=float))

    def reversed(self):
        h = _K.make_field("scaled", base=self.handle, factor=-1.0)
        rev = PlanarField.__new__(PlanarField)
        rev.handle = h
        rev.R = self.R
        rev.meta = {"reversed_of": self.meta}
        rev.dim = 2
        return rev


def field_from_expressions(fx, fy, R, check_boundary=True):
    progs, jac_progs, consts = _expr.build_programs(fx, fy)
    h = _K.make_field("expr", progs=progs, jac_progs=jac_progs, consts=consts)
    return PlanarField(h, R, meta={"kind": "expr", "x": fx, "y": fy},
                       check_boundary=check_boundary)


def field_from_grid(x0, y0, hx, hy, values, R, check_boundary=True):
    """Tabulated field: values shape (2, nx, ny); bicubic interpolation."""
    vals = np.asarray(values, dtype=float)
    if vals.ndim != 3 or vals.shape[0] != 2:
        raise ValueError("grid values must have shape (2, nx, ny)")
    coeffs = _bicubic_coeffs(vals)
    nx, ny = vals.shape[1], vals.shape[2]
    h = _K.make_field("grid", x0=x0, y0=y0, hx=hx, hy=hy, nx=nx, ny=ny,
                      coeffs=coeffs)
    return PlanarField(h, R, meta={"kind": "grid"},
                       check_boundary=check_boundary)


def _bicubic_coeffs(vals):
    """Catmull-Rom patch coefficients, clamped tangents at the edges."""
    _, nx, ny = vals.shape
    g = np.empty((2, nx + 2, ny + 2))
    g[:, 1:-1, 1:-1] = vals
    g[:, 0, 1:-1] = 2 * vals[:, 0] - vals[:, 1]
    g[:, -1, 1:-1] = 2 * vals[:, -1] - vals[:, -2]
    g[:, :, 0] = 2 * g[:, :, 1] - g[:, :, 2]
    g[:, :, -1] = 2 * g[:, :, -2] - g[:, :, -3]
    m = np.array([[0.0, 1.0, 0.0, 0.0],
                  [-0.5, 0.0, 0.5, 0.0],
                  [1.0, -2.5, 2.0, -0.5],
                  [-0.5, 1.5, -1.5, 0.5]])
    coeffs = np.empty((2, nx - 1, ny - 1, 4, 4))
    for k in range(2):
        for i in range(nx - 1):
            for j in range(ny - 1):
                patch = g[k, i:i + 4, j:j + 4]
                coeffs[k, i, j] = m @ patch @ m.T
    return coeffs


def field_from_manifest(doc, base_dir=None):
    """Planar field from a JSON manifest (dict or path)."""
    if not isinstance(doc, dict):
        import os
        src = os.fspath(doc)
        with open(src, encoding="utf-8") as fh:
            doc = json.load(fh)
    kind = doc.get("kind", "expr")
    R = float(doc["radius"])
    if kind == "expr":
        f = field_from_expressions(doc["x"], doc["y"], R)
    elif kind == "grid":
        f = field_from_grid(doc["x0"], doc["y0"], doc["hx"], doc["hy"],
                            np.asarray(doc["values"], dtype=float), R)
    else:
        raise ValueError(f"unknown planar field kind {kind!r}")
    if "hints" in doc:
        f.meta["hints"] = doc["hints"]
    if "name" in doc:
        f.meta["name"] = doc["name"]
    return f


def bundled_field(name):
    """Load one of the packaged demo fields by short name."""
    from importlib import resources
    ref = resources.files("basin_forge").joinpath(f"data/planar/{name}.json")
    if not ref.is_file():
        have = sorted(p.name[:-5] for p in ref.parent.iterdir()
                      if p.name.endswith(".json"))
        raise ValueError(f"no bundled field {name!r}; available: {have}")
    return field_from_manifest(json.loads(ref.read_text(encoding="utf-8")))


@dataclass(frozen=True)
class EquilibriumBox:
    """Certified isolating region: the ellipse (x-c)^T P (x-c) <= s^2.

    Sinks and sources carry a Lyapunov form P (J^T P + P J = -/+ I), so
    the ellipse boundary has strictly signed flux even for spirals;
    saddles use P = I (plain disk) since only hyperbolicity is certified.
    """
    center: np.ndarray
    P: np.ndarray
    s: float
    kind: str
    equilibrium: np.ndarray
    eigvals: np.ndarray
    eigvecs: np.ndarray

    @property
    def radius(self):
        """Inscribed-disk radius: entering it implies entering the
        invariant ellipse."""
        return self.s / math.sqrt(float(np.linalg.eigvalsh(self.P)[-1]))

    @property
    def bound(self):
        """Circumscribed-disk radius."""
        return self.s / math.sqrt(float(np.linalg.eigvalsh(self.P)[0]))

    @property
    def side(self):
        """Diameter of the inscribed disk (the classification test uses
        distance < side/2)."""
        return 2.0 * self.radius

    def form(self, pts):
        d = np.asarray(pts, dtype=float) - self.center
        if d.ndim == 1:
            return float(d @ self.P @ d)
        return np.einsum("ni,ij,nj->n", d, self.P, d)

    def contains(self, p):
        return bool(np.all(self.form(np.atleast_2d(p)) <= self.s ** 2))

    def boundary(self, n=96):
        w, V = np.linalg.eigh(self.P)
        th = np.linspace(0.0, 2.0 * np.pi, n, endpoint=False)
        circ = np.stack([np.cos(th), np.sin(th)], axis=1)
        return self.center + self.s * (circ / np.sqrt(w)) @ V.T


@dataclass(frozen=True)
class PeriodicAnnulus:
    ib: np.ndarray
    ob: np.ndarray
    margin: float
    kind: str
    orbit: np.ndarray
    section_radius: float
    center: np.ndarray


@dataclass
class Inventory:
    equilibria: list
    annuli: list = dc_field(default_factory=list)

    @property
    def sinks(self):
        return [e for e in self.equilibria if e.kind == SINK]

    @property
    def saddles(self):
        return [e for e in self.equilibria if e.kind == SADDLE]

    @property
    def sources(self):
        return [e for e in self.equilibria if e.kind == SOURCE]


# ---------------------------------------------------------------------------
# equilibria
# ---------------------------------------------------------------------------

def _newton_root(field, seed, iters=60):
    x = np.asarray(seed, dtype=float).copy()
    for _ in range(iters):
        fx = field.eval(x)
        if not np.all(np.isfinite(fx)):
            return None
        J = field.jacobian(x)
        try:
            dx = np.linalg.solve(J, fx)
        except np.linalg.LinAlgError:
            return None
        step = float(np.max(np.abs(dx)))
        if step > 0.5 * field.R:  # damp wild steps from bad seeds
            dx *= (0.5 * field.R) / step
        x -= dx
        if not np.all(np.isfinite(x)) or float(np.hypot(*x)) > 4.0 * field.R:
            return None
        if step <= 1e-13 * (1.0 + float(np.max(np.abs(x)))):
            break
    if float(np.max(np.abs(field.eval(x)))) > 1e-9:
        return None
    if float(np.hypot(*x)) >= field.R:
        return None
    return x


def _classify_eigs(J):
    vals, vecs = np.linalg.eig(J)
    re = np.real(vals)
    if np.any(np.abs(re) <= TOL_HYP):
        raise NonHyperbolicEquilibrium(
            f"eigenvalue real parts {re} within {TOL_HYP} of the axis")
    if np.all(re < 0):
        kind = SINK
    elif np.all(re > 0):
        kind = SOURCE
    else:
        kind = SADDLE
    return kind, vals, vecs


def _region_samples(box, n=9):
    """Interior sample points of the certified ellipse."""
    b = box.bound
    xs = np.linspace(box.center[0] - b, box.center[0] + b, n)
    ys = np.linspace(box.center[1] - b, box.center[1] + b, n)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    pts = np.stack([gx.ravel(), gy.ravel()], axis=1)
    return pts[box.form(pts) <= box.s ** 2]


def _certified(field, box):
    if box.bound >= field.R - float(np.hypot(*box.center)):
        return False
    for p in _region_samples(box):
        J = field.jacobian(p)
        det = J[0, 0] * J[1, 1] - J[0, 1] * J[1, 0]
        tr = J[0, 0] + J[1, 1]
        if box.kind == SADDLE:
            if det >= 0.0:
                return False
        elif det <= 0.0:
            return False
        # Bendixson: one-signed divergence rules out cycles in the region
        elif box.kind == SINK and tr >= 0.0:
            return False
        elif box.kind == SOURCE and tr <= 0.0:
            return False
    if box.kind == SADDLE:
        return True
    sign = -1.0 if box.kind == SINK else 1.0
    for p in box.boundary():
        flux = float(np.dot(field.eval(p), box.P @ (p - box.center)))
        if sign * flux <= 0.0:
            return False
    return True


def find_equilibria(field, seed_resolution=24):
    """Multi-start Newton inventory with certified boxes.

    Raises NonHyperbolicEquilibrium for out-of-scope fields and NewtonMiss
    when no equilibrium is found (retry with a finer seed grid).
    """
    R = field.R
    xs = np.linspace(-R, R, int(seed_resolution))
    seeds = [(a, b) for a in xs for b in xs if math.hypot(a, b) <= 0.999 * R]
    seeds.append((0.0, 0.0))
    roots = []
    for s in seeds:
        r = _newton_root(field, s)
        if r is None:
            continue
        if not any(np.max(np.abs(r - q)) < 1e-7 * max(1.0, R) for q in roots):
            roots.append(r)
    if not roots:
        raise NewtonMiss(
            f"no equilibria from {len(seeds)} seeds; refine seed_resolution")
    roots.sort(key=lambda p: (round(p[0], 9), round(p[1], 9)))
    boxes = []
    for r in roots:
        J = field.jacobian(r)
        kind, vals, vecs = _classify_eigs(J)
        if kind == SADDLE:
            P = np.eye(2)
        elif kind == SINK:
            P = solve_continuous_lyapunov(J.T, -np.eye(2))
        else:
            P = solve_continuous_lyapunov(-J.T, -np.eye(2))
        P = 0.5 * (P + P.T)
        others = [q for q in roots if q is not r]
        cap = min(0.25, 0.4 * (R - float(np.hypot(*r))))
        if others:
            sep = min(float(np.hypot(*(r - q))) for q in others)
            cap = min(cap, 0.4 * sep)
        s = cap * math.sqrt(float(np.linalg.eigvalsh(P)[0]))
        box = EquilibriumBox(center=r.copy(), P=P, s=float(s), kind=kind,
                             equilibrium=r, eigvals=vals, eigvecs=vecs)
        while box.s > 1e-8 and not _certified(field, box):
            box = EquilibriumBox(center=r.copy(), P=P, s=box.s / 1.5,
                                 kind=kind, equilibrium=r, eigvals=vals,
                                 eigvecs=vecs)
        if box.s <= 1e-8:
            raise NewtonMiss(f"could not certify a region around {r}")
        boxes.append(box)
    return boxes


# ---------------------------------------------------------------------------
# periodic orbits
# ---------------------------------------------------------------------------

def _resample(poly, max_seg):
    """Insert vertices so every segment is at most max_seg long."""
    out = [poly[0]]
    for a, b in zip(poly[:-1], poly[1:]):
        d = float(np.hypot(b[0] - a[0], b[1] - a[1]))
        if d > max_seg:
            n = int(math.ceil(d / max_seg))
            for i in range(1, n):
                out.append(a + (b - a) * (i / n))
        out.append(b)
    return np.asarray(out)


def _return_crossing(fld, center, r, direction, t_cap=80.0, collect=False):
    """First return of the section ray {y = cy, x > cx} in a fixed direction.

    Returns (radius, polyline or None).  None radius when the orbit fails
    to come back within the time cap.
    """
    cx, cy = center
    x0 = np.array([cx + r, cy])
    want = [integrator.coord_crossing(1, cy, direction=direction,
                                      terminal=True)]
    away = [integrator.coord_crossing(1, cy, direction=-direction,
                                      terminal=True)]
    state = {"t": 0.0, "x": x0}
    burn = 1e-2  # leave the section before arming a crossing event
    pts = [x0] if collect else None

    def leg(ev):
        lead = integrator.integrate(fld, state["x"], burn, t0=state["t"],
                                    rtol=1e-10, atol=1e-10, dense=False)
        state["t"], state["x"] = lead.t, lead.y
        if collect:
            pts.append(state["x"])
        if state["t"] >= t_cap:
            return False
        tr = integrator.integrate_with_events(
            fld, state["x"], t_cap - state["t"], ev, t0=state["t"],
            rtol=1e-10, atol=1e-10, dense=collect)
        if collect:
            pts.extend(np.asarray(tr.ys)[1:])
        if tr.status != 1:
            return False
        state["t"], state["x"] = tr.t, tr.y
        return True

    for _ in range(24):
        # cross the section the other way first so the wanted crossing is
        # a genuine return, not the immediate re-fire at the start point
        if (state["x"][1] - cy) * direction >= 0.0:
            if not leg(away):
                return None, None
        if not leg(want):
            return None, None
        if state["x"][0] > cx:
            poly = None
            if collect:
                poly = np.asarray(pts)
                poly[-1] = state["x"]
            return float(state["x"][0] - cx), poly
    return None, None


def locate_periodic_annuli(field, hints):
    """Refine annulus hints into certified isolating annuli.

    Each hint is {"center": [cx, cy], "radii": [r0, r1]}.  The return map
    on the horizontal ray through the center is bisected for a fixed
    point; the sign of P(r) - r flipping exactly once certifies a single
    crossing orbit inside the hint.
    """
    out = []
    for hint in hints:
        center = np.asarray(hint.get("center", (0.0, 0.0)), dtype=float)
        r0, r1 = (float(v) for v in hint["radii"])
        if not 0.0 < r0 < r1:
            raise ValueError(f"bad annulus radii {hint['radii']}")
        mid = np.array([center[0] + 0.5 * (r0 + r1), center[1]])
        fy = float(field.eval(mid)[1])
        if abs(fy) < 1e-12:
            raise AmbiguousHint("flow is tangent to the section at the hint")
        direction = 1 if fy > 0 else -1

        def pmap(r):
            val, _ = _return_crossing(field, center, r, direction)
            return val

        rs = np.linspace(r0, r1, 17)
        gs = []
        for r in rs:
            p = pmap(r)
            if p is None:
                raise NoOrbitInHint(
                    f"orbit from radius {r:.4f} does not return to the section")
            gs.append(p - r)
        signs = np.sign(gs)
        flips = np.nonzero(np.diff(signs) != 0)[0]
        if len(flips) == 0:
            raise NoOrbitInHint(f"no return-map fixed point in [{r0}, {r1}]")
        if len(flips) > 1:
            raise AmbiguousHint(
                f"{len(flips)} return-map crossings in [{r0}, {r1}]")
        lo, hi = rs[flips[0]], rs[flips[0] + 1]
        glo = gs[flips[0]]
        for _ in range(60):
            mid_r = 0.5 * (lo + hi)
            gm = pmap(mid_r) - mid_r
            if gm == 0.0 or hi - lo < 1e-11:
                lo = hi = mid_r
                break
            if (gm > 0) == (glo > 0):
                lo, glo = mid_r, gm
            else:
                hi = mid_r
        r_star = 0.5 * (lo + hi)
        dh = max(1e-6, 1e-4 * (r1 - r0))
        dp = (pmap(r_star + dh) - pmap(r_star - dh)) / (2.0 * dh)
        kind = ATTRACTING if abs(dp) < 1.0 else REPELLING
        _, orbit = _return_crossing(field, center, r_star, direction,
                                    collect=True)

        # spiral + section-segment closed curves bracketing the orbit;
        # for strongly attracting orbits the spirals land within solver
        # noise of the cycle, so side checks carry a small tolerance
        walker = field if kind == ATTRACTING else field.reversed()
        wdir = direction if kind == ATTRACTING else -direction
        delta = 0.05 * (r1 - r0)
        ib = ob = None
        while delta > 1e-6 and (ib is None or ob is None):
            ri, ro = r_star - delta, r_star + delta
            pi_, poly_i = _return_crossing(walker, center, ri, wdir,
                                           collect=True)
            po_, poly_o = _return_crossing(walker, center, ro, wdir,
                                           collect=True)
            if (pi_ is not None and po_ is not None
                    and ri < pi_ <= r_star + 1e-9
                    and r_star - 1e-9 <= po_ < ro):
                ib = _close_spiral(poly_i, center, ri, pi_)
                ob = _close_spiral(poly_o, center, ro, po_)
                break
            delta *= 0.5
        if ib is None or ob is None:
            raise NoOrbitInHint(
                f"could not bracket the orbit at radius {r_star:.6f}")
        # detection margin: the bracketing offset is dynamically verified
        # to lie in the orbit's basin, so reaching within 0.8 delta of
        # both curves certifies capture
        out.append(PeriodicAnnulus(ib=_resample(ib, 0.01),
                                   ob=_resample(ob, 0.01),
                                   margin=0.8 * delta, kind=kind,
                                   orbit=_resample(orbit, 0.01),
                                   section_radius=r_star, center=center))
    return out


def _close_spiral(poly, center, r_from, r_to):
    """Close a one-revolution spiral with the radial gap on the section."""
    a = np.array([center[0] + r_from, center[1]])
    b = np.array([center[0] + r_to, center[1]])
    gap = np.linspace(0.0, 1.0, 16)[1:-1]
    seg = b + (a - b) * gap[:, None]
    return np.vstack([poly, seg, poly[:1]])


# ---------------------------------------------------------------------------
# classification
# ---------------------------------------------------------------------------

def _pack_inventory(inventory):
    sinks = inventory.sinks
    sk = np.array([[s.equilibrium[0], s.equilibrium[1], s.radius]
                   for s in sinks], dtype=float).reshape(-1, 3)
    curves = []
    ann_ib, ann_ob, ann_m = [], [], []
    for a in inventory.annuli:
        if a.kind != ATTRACTING:
            continue
        ann_ib.append(len(curves))
        curves.append(a.ib)
        ann_ob.append(len(curves))
        curves.append(a.ob)
        ann_m.append(a.margin)
    if curves:
        xy = np.vstack(curves)
        starts = np.cumsum([0] + [len(c) for c in curves])
    else:
        xy = np.zeros((0, 2))
        starts = np.array([0])
    return (sk, xy, np.asarray(starts, dtype=np.int64),
            np.asarray(ann_ib, dtype=np.int64),
            np.asarray(ann_ob, dtype=np.int64),
            np.asarray(ann_m, dtype=float))


def classify_point(x, inventory, field, T_max, target_sink,
                   rtol=1e-8, atol=1e-8):
    """Single-point version of the grid classifier.

    Returns (status, index, time): (STATUS_I, None, t), (STATUS_II, j, t),
    (STATUS_III, i, t) or (TIMEOUT, None, T_max).
    """
    sinks = inventory.sinks
    if not 0 <= target_sink < len(sinks):
        raise ValueError(f"target sink index {target_sink} out of range")
    sk, xy, starts, aib, aob, am = _pack_inventory(inventory)
    labels, times = _K.classify_grid(
        field.handle, np.asarray([x], dtype=float), sk, int(target_sink),
        xy, starts, aib, aob, am, float(T_max), rtol, atol, np.inf)
    lab = int(labels[0])
    t = float(times[0])
    if lab == 0:
        return STATUS_I, None, t
    if 1000 <= lab < 2000:
        return STATUS_II, lab - 1000, t
    if lab >= 2000:
        return STATUS_III, lab - 2000, t
    return TIMEOUT, None, float(T_max)


# ---------------------------------------------------------------------------
# stable manifolds
# ---------------------------------------------------------------------------

def stable_manifold_curve(saddle, field, T=60.0, seed_offset=1e-4):
    """Polyline through the saddle along its stable manifold.

    Both branches are grown by backward integration until they leave the
    disk or the time budget runs out.  Approaching a different saddle's
    box raises SaddleConnectionSuspected.
    """
    if saddle.kind != SADDLE:
        raise ValueError("stable_manifold_curve needs a saddle box")
    re = np.real(saddle.eigvals)
    s_idx = int(np.argmin(re))
    if re[s_idx] >= 0:
        raise ValueError("saddle has no stable direction")
    v = np.real(saddle.eigvecs[:, s_idx])
    v = v / float(np.hypot(*v))
    rev = field.reversed()
    R = field.R
    ev = [integrator.ball_exit(np.zeros(2), R, norm="euclid", terminal=True)]
    branches = []
    for sgn in (1.0, -1.0):
        x0 = saddle.equilibrium + sgn * seed_offset * v
        tr = integrator.integrate_with_events(rev, x0, T, ev, rtol=1e-10,
                                              atol=1e-10)
        pts = np.asarray(tr.ys)
        branches.append(pts)
    gamma = np.vstack([branches[0][::-1], saddle.equilibrium[None, :],
                       branches[1]])
    return gamma


def _check_saddle_connections(gamma, saddles, current):
    for s in saddles:
        if s is current:
            continue
        if np.any(s.form(gamma) <= s.s ** 2):
            raise SaddleConnectionSuspected(
                f"stable manifold passes through the saddle box at "
                f"{s.equilibrium}")


# ---------------------------------------------------------------------------
# rasters
# ---------------------------------------------------------------------------

class BasinRaster:
    """Square cell grid of spacing [2^-l] covering the disk."""

    def __init__(self, l, R, codes, legend, meta=None):
        self.l = int(l)
        self.h = 2.0 ** (-self.l)
        self.R = float(R)
        self.codes = np.asarray(codes, dtype=np.int16)
        self.legend = dict(legend)
        self.meta = meta or {}
        self.n = (self.codes.shape[0] - 1) // 2

    @classmethod
    def empty(cls, l, R, legend, meta=None):
        n = int(math.floor(R * 2.0 ** l))
        codes = np.full((2 * n + 1, 2 * n + 1), CELL_OUTSIDE, dtype=np.int16)
        return cls(l, R, codes, legend, meta)

    def centers(self):
        """All cell centers as an (N, N, 2) array aligned with codes."""
        idx = np.arange(-self.n, self.n + 1) * self.h
        gx, gy = np.meshgrid(idx, idx, indexing="ij")
        return np.stack([gx, gy], axis=-1)

    def cells_with(self, code):
        pts = self.centers()[self.codes == code]
        return pts.reshape(-1, 2)

    def cells_without(self, code):
        mask = (self.codes != code) & (self.codes != CELL_OUTSIDE)
        return self.centers()[mask].reshape(-1, 2)

    def complement_cells(self, target_code=None):
        """Centers of cells certainly outside the target's basin.

        Other-attractor and excluded cells qualify; margin and timeout
        cells are uncertain and belong to neither the basin set nor its
        complement.
        """
        if target_code is None:
            target_code = self.meta.get("target_code", CELL_SINK_BASE)
        mask = ((self.codes == CELL_EXCLUDED)
                | ((self.codes >= CELL_SINK_BASE)
                   & (self.codes != target_code)))
        return self.centers()[mask].reshape(-1, 2)

    def counts(self):
        vals, cnt = np.unique(self.codes, return_counts=True)
        return {int(v): int(c) for v, c in zip(vals, cnt)}

    def to_pgm(self, path):
        data = np.clip(self.codes.T[::-1], 0, 255).astype(np.uint8)
        with open(path, "wb") as fh:
            fh.write(f"P5\n{data.shape[1]} {data.shape[0]}\n255\n".encode())
            fh.write(data.tobytes())

    def legend_doc(self):
        return {"l": self.l, "R": self.R, "cell": self.h,
                "codes": {str(k): v for k, v in sorted(self.legend.items())},
                **self.meta}

    def save(self, pgm_path, legend_path):
        self.to_pgm(pgm_path)
        with open(legend_path, "w", encoding="utf-8") as fh:
            json.dump(self.legend_doc(), fh, indent=1, sort_keys=True)
            fh.write("\n")


def _base_legend(inventory):
    legend = {CELL_UNKNOWN: "unclassified (timeout)",
              CELL_MARGIN: "boundary margin",
              CELL_EXCLUDED: "excluded repelling set",
              CELL_OUTSIDE: "outside the disk"}
    for j, s in enumerate(inventory.sinks):
        legend[CELL_SINK_BASE + j] = (
            f"sink {j} at ({s.equilibrium[0]:.6g}, {s.equilibrium[1]:.6g})")
    att = [a for a in inventory.annuli if a.kind == ATTRACTING]
    for i, a in enumerate(att):
        legend[CELL_ORBIT_BASE + i] = (
            f"attracting orbit {i}, section radius {a.section_radius:.6g}")
    return legend


def _inside_closed(poly, pts):
    """Even-odd rule point-in-polygon, vectorized over pts."""
    x, y = pts[:, 0], pts[:, 1]
    inside = np.zeros(len(pts), dtype=bool)
    px, py = poly[:, 0], poly[:, 1]
    n = len(poly)
    j = n - 1
    for i in range(n):
        xi, yi = px[i], py[i]
        xj, yj = px[j], py[j]
        hit = ((yi > y) != (yj > y)) & (
            x < (xj - xi) * (y - yi) / (yj - yi + 1e-300) + xi)
        inside ^= hit
        j = i
    return inside


def compute_basin(field, target_sink, k, hints=(), T_max=80.0,
                  inventory=None, seed_resolution=24, rtol=1e-8, atol=1e-8,
                  threads=None, l=None):
    """Raster of the target sink's basin at Hausdorff accuracy 1/k.

    Grid spacing 2^-l <= 1/(4k); cells inside repelling objects are
    excluded; a 1/k tube around saddle stable manifolds and around all
    inventory boundaries becomes the margin band; the rest is classified
    by forward integration.  l overrides the resolution while keeping the
    1/k margin width (refinement studies).
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if inventory is None:
        eq = find_equilibria(field, seed_resolution)
        ann = locate_periodic_annuli(field, hints or
                                     field.meta.get("hints", ()))
        inventory = Inventory(eq, ann)
    sinks = inventory.sinks
    if not 0 <= target_sink < len(sinks):
        raise ValueError(f"target sink {target_sink} out of range "
                         f"({len(sinks)} sinks)")
    if l is None:
        l = int(math.ceil(math.log2(4.0 * k)))
    legend = _base_legend(inventory)
    raster = BasinRaster.empty(l, field.R, legend,
                               meta={"k": k, "target_sink": int(target_sink),
                                     "target_code":
                                         CELL_SINK_BASE + int(target_sink)})
    centers = raster.centers()
    flat = centers.reshape(-1, 2)
    rr = np.hypot(flat[:, 0], flat[:, 1])
    in_disk = rr <= field.R
    codes = np.full(len(flat), CELL_OUTSIDE, dtype=np.int16)

    margin_r = 1.0 / float(k)
    margin_pts = []

    # saddle manifolds: excluded as a margin tube
    gammas = []
    for s in inventory.saddles:
        g = stable_manifold_curve(s, field)
        _check_saddle_connections(g, inventory.saddles, s)
        gammas.append(_resample(g, min(raster.h, margin_r) / 2.0))
    margin_pts.extend(gammas)

    # region boundaries and annulus curves contribute to the margin band;
    # saddle and source regions are shrunk to one cell so the tube around
    # them stays within the 1/k + cell-diagonal approximation budget
    shrunk = []
    for e in inventory.equilibria:
        if e.kind != SINK and e.bound > raster.h:
            e = dataclasses.replace(e, s=e.s * raster.h / e.bound)
        shrunk.append(e)
    for e in shrunk:
        n = max(64, int(8.0 * e.bound / raster.h))
        margin_pts.append(e.boundary(n))
    for a in inventory.annuli:
        margin_pts.append(a.ib)
        margin_pts.append(a.ob)

    excluded = np.zeros(len(flat), dtype=bool)
    for e in shrunk:
        if e.kind == SOURCE:
            excluded |= e.form(flat) <= e.s * e.s
    for a in inventory.annuli:
        if a.kind == REPELLING:
            excluded |= (_inside_closed(a.ob, flat)
                         & ~_inside_closed(a.ib, flat))

    margin = np.zeros(len(flat), dtype=bool)
    if margin_pts:
        tree = cKDTree(np.vstack(margin_pts))
        d, _ = tree.query(flat, workers=-1)
        margin = d <= margin_r

    todo = in_disk & ~excluded & ~margin
    codes[in_disk & excluded] = CELL_EXCLUDED
    codes[in_disk & margin & ~excluded] = CELL_MARGIN

    sk, xy, starts, aib, aob, am = _pack_inventory(inventory)
    if threads is None:
        threads = _b.default_threads()
    labels, _times = _K.classify_grid(
        field.handle, flat[todo], sk, int(target_sink), xy, starts,
        aib, aob, am, float(T_max), rtol, atol, np.inf, threads=threads)
    mapped = np.full(len(labels), CELL_UNKNOWN, dtype=np.int16)
    mapped[labels == 0] = CELL_SINK_BASE + int(target_sink)
    other = labels >= 1000
    ann_hit = labels >= 2000
    mapped[other & ~ann_hit] = CELL_SINK_BASE + (labels[other & ~ann_hit]
                                                 - 1000)
    mapped[ann_hit] = CELL_ORBIT_BASE + (labels[ann_hit] - 2000)
    codes[todo] = mapped

    n_todo = int(np.count_nonzero(todo))
    n_timeout = int(np.count_nonzero(mapped == CELL_UNKNOWN))
    if n_todo and n_timeout > 0.001 * n_todo:
        raise IncompleteInventory(
            f"{n_timeout} of {n_todo} cells timed out; inventory is missing "
            f"an attractor or T_max={T_max} is too small")

    raster.codes = codes.reshape(centers.shape[:2])
    raster.meta["timeout_cells"] = n_timeout
    raster.meta["classified_cells"] = n_todo
    return raster


def brute_force_classify(field, l, T, attractors, snap=0.05, rtol=1e-8,
                         atol=1e-8, R=None, threads=None):
    """Fixed-horizon oracle: integrate every cell for time T and snap the
    endpoint to the nearest attractor.

    attractors: list of ("sink", (x, y)) and ("orbit", polyline) entries;
    labels reuse the compute_basin code scheme so rasters compare directly.
    """
    R = float(R if R is not None else field.R)
    sinks = [np.asarray(p, dtype=float) for kind, p in attractors
             if kind == "sink"]
    orbits = [np.asarray(p, dtype=float) for kind, p in attractors
              if kind == "orbit"]
    legend = {CELL_UNKNOWN: "unresolved at horizon", CELL_OUTSIDE:
              "outside the disk"}
    for j, s in enumerate(sinks):
        legend[CELL_SINK_BASE + j] = f"sink {j} at ({s[0]:.6g}, {s[1]:.6g})"
    for i in range(len(orbits)):
        legend[CELL_ORBIT_BASE + i] = f"attracting orbit {i}"
    raster = BasinRaster.empty(l, R, legend, meta={"horizon": T})
    centers = raster.centers()
    flat = centers.reshape(-1, 2)
    in_disk = np.hypot(flat[:, 0], flat[:, 1]) <= R
    codes = np.full(len(flat), CELL_OUTSIDE, dtype=np.int16)

    if orbits:
        xy = np.vstack(orbits)
        starts = np.cumsum([0] + [len(c) for c in orbits])
    else:
        xy = np.zeros((0, 2))
        starts = np.array([0])
    if threads is None:
        threads = _b.default_threads()
    labels = _K.brute_grid(
        field.handle, flat[in_disk],
        np.asarray(sinks, dtype=float).reshape(-1, 2), float(snap),
        xy, np.asarray(starts, dtype=np.int64),
        np.arange(len(orbits), dtype=np.int64), float(T), rtol, atol,
        np.inf, threads=threads)
    mapped = np.full(len(labels), CELL_UNKNOWN, dtype=np.int16)
    is_sink = (labels >= 0) & (labels < 1000)
    mapped[is_sink] = CELL_SINK_BASE + labels[is_sink]
    is_orb = labels >= 1000
    mapped[is_orb] = CELL_ORBIT_BASE + (labels[is_orb] - 1000)
    codes[in_disk] = mapped
    raster.codes = codes.reshape(centers.shape[:2])
    return raster


def _complement_mask(raster, target_code):
    return ((raster.codes == CELL_EXCLUDED)
            | ((raster.codes >= CELL_SINK_BASE)
               & (raster.codes != target_code)))


def hausdorff(A, B):
    """Symmetric Hausdorff distance between two cell-center sets.

    Accepts (n, 2) arrays, or two BasinRasters compared on their basin
    complements.  For rasters, a cell counts toward a complement when it
    is certainly outside the target basin (other attractor or excluded);
    cells that either raster leaves uncertain (margin or timeout) carry
    no information and are removed from both sets before measuring.
    Rasters must share resolution and extent.
    """
    if isinstance(A, BasinRaster) or isinstance(B, BasinRaster):
        if not (isinstance(A, BasinRaster) and isinstance(B, BasinRaster)):
            raise GridMismatch("cannot mix rasters and raw point sets")
        if A.l != B.l or A.codes.shape != B.codes.shape or A.R != B.R:
            raise GridMismatch(
                f"raster grids differ: l={A.l}/{B.l}, "
                f"shape={A.codes.shape}/{B.codes.shape}")
        ta = A.meta.get("target_code", CELL_SINK_BASE)
        tb = B.meta.get("target_code", ta)
        uncertain = ((A.codes == CELL_MARGIN) | (A.codes == CELL_UNKNOWN)
                     | (B.codes == CELL_MARGIN) | (B.codes == CELL_UNKNOWN))
        pa = A.centers()[_complement_mask(A, ta) & ~uncertain].reshape(-1, 2)
        pb = B.centers()[_complement_mask(B, tb) & ~uncertain].reshape(-1, 2)
    else:
        pa = np.asarray(A, dtype=float).reshape(-1, 2)
        pb = np.asarray(B, dtype=float).reshape(-1, 2)
    if len(pa) == 0 and len(pb) == 0:
        return 0.0
    if len(pa) == 0 or len(pb) == 0:
        return float("inf")
    d_ab = cKDTree(pb).query(pa, workers=-1)[0].max()
    d_ba = cKDTree(pa).query(pb, workers=-1)[0].max()
    return float(max(d_ab, d_ba))


def write_polyline_csv(path, poly):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("x,y\n")
        for p in np.asarray(poly, dtype=float):
            fh.write(f"{p[0]:.17g},{p[1]:.17g}\n")
