"""Adaptive integration with dense output, events and certified disturbance.

The solver is an explicit embedded 5(4) Runge-Kutta pair with PI step
control; dense output is cubic Hermite on accepted steps, and event times
are located by bisection on the dense polynomial to 1e-9.  Defaults put
the local tolerance at 1e-10, three orders below the coarsest constant
(1/16) any experiment here depends on.

One caveat the step controller cannot see: several fields are exactly zero
outside short gate windows.  A trial step longer than a window can sample
only the dead zone, report zero local error and stride over the pulse
entirely.  Machine-simulation runs therefore cap the step at h_max below
the gate width (the tracking helpers here do this themselves).
"""

import csv
import math
from dataclasses import dataclass

import numpy as np

from . import _backend as _b
from . import ode_system, tm_core
from .errors import (BudgetExceeded, IntegratorError, RegionExit,
                     StepUnderflow)

__all__ = [
    "Trajectory", "integrate", "integrate_with_events",
    "ball_enter", "ball_exit", "coord_crossing",
    "PerturbationSpec", "perturb_field", "divergence_bound",
    "lipschitz_estimate", "track_against_discrete", "TrackReport",
    "write_track_csv", "GATE_SAFE_H",
]

_K = _b.kernels

# largest step that cannot stride over a width-1/4 gate window
GATE_SAFE_H = 0.1

_STATUS_NAMES = {0: "done", 1: "event", 2: "underflow", 3: "region",
                 4: "maxsteps"}


# ---------------------------------------------------------------------------
# events
# ---------------------------------------------------------------------------

def ball_enter(center, radius, norm="max", terminal=False):
    """Fires when the state enters the closed ball around center."""
    return {"kind": 0, "center": np.asarray(center, dtype=float),
            "value": float(radius), "norm": 0 if norm == "max" else 1,
            "coord": 0, "direction": 0, "terminal": bool(terminal)}


def ball_exit(center, radius, norm="max", terminal=False):
    return {"kind": 1, "center": np.asarray(center, dtype=float),
            "value": float(radius), "norm": 0 if norm == "max" else 1,
            "coord": 0, "direction": 0, "terminal": bool(terminal)}


def coord_crossing(coord, value, direction=1, terminal=False):
    """Fires when state[coord] crosses value (direction +1 upward, -1
    downward)."""
    return {"kind": 2, "center": None, "value": float(value),
            "norm": 0, "coord": int(coord), "direction": int(direction),
            "terminal": bool(terminal)}


def _pack_events(events, dim):
    if not events:
        return None
    ne = len(events)
    if ne > 32:
        raise ValueError("at most 32 events per integration")
    pack = {
        "kind": np.array([e["kind"] for e in events], dtype=np.int32),
        "coord": np.array([e["coord"] for e in events], dtype=np.int32),
        "direction": np.array([e["direction"] for e in events], dtype=np.int32),
        "terminal": np.array([1 if e["terminal"] else 0 for e in events],
                             dtype=np.int32),
        "value": np.array([e["value"] for e in events], dtype=np.float64),
        "norm": np.array([e["norm"] for e in events], dtype=np.int32),
        "center": np.zeros((ne, dim), dtype=np.float64),
    }
    for i, e in enumerate(events):
        if e["center"] is not None:
            pack["center"][i, :] = np.asarray(e["center"], dtype=float)[:dim]
    return pack


# ---------------------------------------------------------------------------
# trajectories
# ---------------------------------------------------------------------------

class Trajectory:
    """Accepted-step samples plus derivatives; interpolates between them.

    events is a list of (time, event index, state) in firing order; for a
    terminal event the trajectory ends at the event time.
    """

    __slots__ = ("ts", "ys", "fs", "events", "status", "t", "y", "dim")

    def __init__(self, res, dim):
        self.ts = np.asarray(res["ts"], dtype=float)
        self.ys = np.asarray(res["ys"], dtype=float)
        self.fs = np.asarray(res["fs"], dtype=float)
        self.events = [(float(t), int(i), np.asarray(y, dtype=float))
                       for t, i, y in zip(res["ev_t"], res["ev_idx"],
                                          res["ev_y"])]
        self.status = int(res["status"])
        self.t = float(res["t"])
        self.y = np.asarray(res["y"], dtype=float)
        self.dim = dim

    @property
    def t0(self):
        return float(self.ts[0])

    def sample(self, t):
        """Cubic Hermite interpolation at time t (scalar or array)."""
        if np.ndim(t) > 0:
            return np.array([self.sample(float(tt)) for tt in t])
        t = float(t)
        ts = self.ts
        if not ts[0] <= t <= ts[-1]:
            raise ValueError(f"t={t} outside [{ts[0]}, {ts[-1]}]")
        k = int(np.searchsorted(ts, t, side="right") - 1)
        if k >= len(ts) - 1:
            return self.ys[-1].copy()
        h = ts[k + 1] - ts[k]
        s = (t - ts[k]) / h
        y0, y1 = self.ys[k], self.ys[k + 1]
        f0, f1 = self.fs[k] * h, self.fs[k + 1] * h
        s2, s3 = s * s, s * s * s
        return ((2 * s3 - 3 * s2 + 1) * y0 + (s3 - 2 * s2 + s) * f0
                + (3 * s2 - 2 * s3) * y1 + (s3 - s2) * f1)

    def to_csv(self, path):
        """t, x1..xd rows; event rows carry the event index in the last
        column, sample rows leave it empty."""
        ev_by_time = sorted(self.events, key=lambda e: e[0])
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["t"] + [f"x{i + 1}" for i in range(self.dim)]
                        + ["event"])
            ei = 0
            for t, y in zip(self.ts, self.ys):
                while ei < len(ev_by_time) and ev_by_time[ei][0] <= t:
                    et, eidx, eys = ev_by_time[ei]
                    wr.writerow([f"{et:.17g}"] + [f"{v:.17g}" for v in eys]
                                + [eidx])
                    ei += 1
                wr.writerow([f"{t:.17g}"] + [f"{v:.17g}" for v in y] + [""])
            for et, eidx, eys in ev_by_time[ei:]:
                wr.writerow([f"{et:.17g}"] + [f"{v:.17g}" for v in eys]
                            + [eidx])

    def __repr__(self):
        return (f"<Trajectory {_STATUS_NAMES.get(self.status)} "
                f"t=[{self.ts[0]:.6g},{self.t:.6g}] n={len(self.ts)} "
                f"events={len(self.events)}>")


def _handle_of(field):
    return field.handle if hasattr(field, "handle") else field


def _run(field, x0, T, rtol, atol, t0, h_max, max_steps, events, region,
         dense):
    fh = _handle_of(field)
    dim = _K.field_dim(fh)
    pack = _pack_events(events, dim)
    lo = hi = None
    if region is not None:
        lo = np.asarray(region[0], dtype=float)
        hi = np.asarray(region[1], dtype=float)
    res = _K.integrate(fh, float(t0), np.asarray(x0, dtype=float), float(T),
                       float(rtol), float(atol), h_max=float(h_max),
                       max_steps=int(max_steps), events=pack,
                       region_lo=lo, region_hi=hi, dense=bool(dense))
    tr = Trajectory(res, dim)
    if tr.status == 2:
        raise StepUnderflow(
            f"step size collapsed below 1e-14 at t={tr.t:.6g}")
    if tr.status == 3:
        raise RegionExit(f"state left the admissible box at t={tr.t:.6g}")
    if tr.status == 4:
        raise IntegratorError(f"step budget exhausted at t={tr.t:.6g}")
    return tr


def integrate(field, x0, T, rtol=1e-10, atol=1e-10, t0=0.0, h_max=np.inf,
              max_steps=10_000_000, region=None, dense=True):
    """Flow x0 forward for time T; returns a Trajectory.

    region, when given, is a (lo, hi) box; leaving it raises RegionExit.
    """
    return _run(field, x0, T, rtol, atol, t0, h_max, max_steps, None,
                region, dense)


def integrate_with_events(field, x0, T, events, rtol=1e-10, atol=1e-10,
                          t0=0.0, h_max=np.inf, max_steps=10_000_000,
                          region=None, dense=True):
    """integrate plus event detection; a terminal event stops the run.

    An event already satisfied at t0 fires immediately at t0.
    """
    return _run(field, x0, T, rtol, atol, t0, h_max, max_steps, events,
                region, dense)


# ---------------------------------------------------------------------------
# certified disturbances
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PerturbationSpec:
    """Analytic disturbance family with certified C0/C1 bounds.

    kinds: 'const' (p = alpha in every component), 'sin'
    (p_i = alpha sin(x_i)), 'gauss' (p = alpha_vec e^{-alpha(1+|x|^2)}),
    'bump' (compactly supported around center, radius rho), 'time_sin'
    (p_i = alpha sin(omega t), zero spatial derivative).
    """
    kind: str
    alpha: float = 0.0
    center: tuple = ()
    rho: float = 1.0
    omega: float = 1.0
    seed: int = 0

    def build(self, dim):
        a = float(self.alpha)
        ones = np.full(dim, a)
        if self.kind == "const":
            return _K.make_perturbation(_K.PERT_CONST, vec=ones), abs(a), 0.0
        if self.kind == "sin":
            jidx = np.arange(dim, dtype=np.int64)
            ph = np.zeros(dim)
            h = _K.make_perturbation(_K.PERT_SIN, vec=ones, jidx=jidx,
                                     phase=ph)
            return h, abs(a), abs(a)
        if self.kind == "gauss":
            vec = np.full(dim, 1.0)
            h = _K.make_perturbation(_K.PERT_GAUSS, alpha=abs(a), vec=vec)
            c0 = math.exp(-abs(a))
            c1 = math.sqrt(2.0 * abs(a) * dim) * math.exp(-abs(a) - 0.5)
            return h, c0, c1
        if self.kind == "bump":
            center = np.asarray(self.center, dtype=float)
            if center.size != dim:
                center = np.zeros(dim)
            vec = np.full(dim, a)
            h = _K.make_perturbation(_K.PERT_BUMP, vec=vec, center=center,
                                     rho=self.rho)
            s = np.linspace(0.0, 1.0, 20001)[:-1]
            shape = np.exp(1.0 - 1.0 / (1.0 - s)) * np.sqrt(s) / (1.0 - s) ** 2
            c1 = abs(a) * 2.0 * math.sqrt(dim) / self.rho * float(shape.max())
            return h, abs(a), c1
        if self.kind == "time_sin":
            ph = np.zeros(dim)
            h = _K.make_perturbation(_K.PERT_TSIN, vec=ones, phase=ph,
                                     omega=self.omega)
            return h, abs(a), 0.0
        raise ValueError(f"unknown perturbation kind {self.kind!r}")


def perturb_field(field, spec, c0_budget=0.25, c1_budget=1.0 / 16.0):
    """Attach a certified disturbance to a field.

    The returned field evaluates f(x) + p(x) and carries meta entries
    'c0_bound' and 'c1_bound'.  BudgetExceeded when the analytic bounds do
    not fit the experiment budget (C0 within 1/4 everywhere, C1 within
    1/16 by default).
    """
    fh = _handle_of(field)
    dim = _K.field_dim(fh)
    ph, c0, c1 = spec.build(dim)
    if c0 > c0_budget or c1 > c1_budget:
        raise BudgetExceeded(
            f"disturbance bounds C0={c0:.4g}, C1={c1:.4g} exceed budget "
            f"({c0_budget:.4g}, {c1_budget:.4g})")
    handle = _K.make_field("perturbed", base=fh, pert=ph)
    out = ode_system.Field(handle, getattr(field, "stage", "perturbed"),
                           machine=getattr(field, "machine", None),
                           c=getattr(field, "c", None),
                           lam=getattr(field, "lam", None),
                           gamma=getattr(field, "gamma", None),
                           meta=getattr(field, "meta", None))
    out.meta.update(c0_bound=c0, c1_bound=c1, kind=spec.kind,
                    alpha=spec.alpha)
    return out


# ---------------------------------------------------------------------------
# divergence bound
# ---------------------------------------------------------------------------

def lipschitz_estimate(field, region, samples_per_axis=9, t_samples=(0.0,)):
    """Certified-style sup of the Jacobian max-norm over a box region.

    Grid sup padded by the Jacobian's own observed variation between
    neighboring nodes (covering-radius argument); not interval arithmetic,
    but every downstream bound has orders-of-magnitude slack.
    """
    lo = np.asarray(region[0], dtype=float)
    hi = np.asarray(region[1], dtype=float)
    d = lo.size
    axes = [np.linspace(lo[i], hi[i], samples_per_axis) for i in range(d)]
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([m.ravel() for m in mesh], axis=-1)
    sup = 0.0
    norms = np.empty((len(t_samples), pts.shape[0]))
    for ti, t in enumerate(t_samples):
        for pi, p in enumerate(pts):
            J = field.jacobian(t, p) if hasattr(field, "jacobian") \
                else _K.field_jac(field, t, p)
            n = float(np.max(np.sum(np.abs(J), axis=1)))
            norms[ti, pi] = n
            sup = max(sup, n)
    # covering-radius padding from the observed variation along axis 0 strips
    h = float(np.max((hi - lo) / max(samples_per_axis - 1, 1)))
    grid_shape = tuple([len(t_samples)] + [samples_per_axis] * d)
    cube = norms.reshape(grid_shape)
    var = 0.0
    for ax in range(1, d + 1):
        var = max(var, float(np.max(np.abs(np.diff(cube, axis=ax)))))
    return sup + var * math.sqrt(d) / 2.0 + 1e-12


def divergence_bound(field, region, x, y, t, L=None):
    """Worst-case separation ||x-y|| e^{Lt} of two flows started at x, y."""
    if L is None:
        L = lipschitz_estimate(field, region)
    dist = float(np.max(np.abs(np.asarray(x, float) - np.asarray(y, float))))
    return dist * math.exp(L * float(t))


# ---------------------------------------------------------------------------
# tracking against the exact discrete orbit
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrackReport:
    max_dev: float
    rows: tuple          # (k, clock time, deviation) per completed cycle
    halted: bool         # clock shut down before k_max cycles
    k_last: int

    def __float__(self):
        return float(self.max_dev)


def track_against_discrete(field, M, w, k_max, x0=None, rtol=1e-10,
                           atol=1e-10, h_max=GATE_SAFE_H, detail=False):
    """Deviation of the flow's v-copy from the exact machine orbit.

    Integrates the full-stage field segment by segment, stopping each
    segment at the internal clock's next integer tick (an event on the z
    coordinate, so perturbed runs are measured on their own clock, not wall
    time).  At tick k the machine copy (v1,v2,v3) is compared with the
    exact configuration after k steps.  Returns the max deviation, or the
    full TrackReport with detail=True.
    """
    cfg = tm_core.encode_input(M, w)
    if x0 is None:
        x0 = np.array([0.0, float(w), 1.0, 0.0, float(w), 1.0, 0.0])
    x = np.asarray(x0, dtype=float).copy()
    t = 0.0
    rows = []
    dev0 = max(abs(x[3]), abs(x[4] - float(cfg[1])), abs(x[5] - float(cfg[2])))
    rows.append((0, 0.0, dev0))
    max_dev = dev0
    halted = False
    k_last = 0
    for k in range(1, k_max + 1):
        ev = [coord_crossing(6, float(k), direction=1, terminal=True)]
        # pre-halt the clock rate sits in [3/4, 5/4], so a unit tick arrives
        # within 4/3 time units; a miss within T=4 means the clock shut down
        tr = integrate_with_events(field, x, 4.0, ev, rtol=rtol, atol=atol,
                                   t0=t, h_max=h_max, dense=False)
        if tr.status != 1:
            halted = True
            break
        t, x = tr.t, tr.y.copy()
        cfg = tm_core.step(M, cfg)
        dev = max(abs(x[3] - float(cfg[0])), abs(x[4] - float(cfg[1])),
                  abs(x[5] - float(cfg[2])))
        rows.append((k, t, dev))
        max_dev = max(max_dev, dev)
        k_last = k
    rep = TrackReport(max_dev, tuple(rows), halted, k_last)
    return rep if detail else rep.max_dev


def write_track_csv(path, report):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["k", "t_clock", "dev"])
        for k, t, dev in report.rows:
            wr.writerow([k, f"{t:.17g}", f"{dev:.17g}"])
