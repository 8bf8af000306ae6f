"""Discrete machine dynamics extended to the whole of R^3.

build_extension turns a rule table into a map f that agrees exactly with
the machine's transition on integer configurations and, around every
configuration x0, acts as x |-> f(x0) + lam*(x - x0) on the radius-1/4
plateau.  Iterating f therefore simulates the machine while contracting
state noise by lam per step, which is what lets a perturbed copy keep
tracking the true computation.

PerturbedMap wraps f with an additive disturbance of certified sup-norm
delta and derivative bound theta; iterate_tracked and basin_membership run
the tracking and halting experiments on it.
"""

import csv

import numpy as np

from . import _backend as _b
from . import tm_core
from .errors import BadLambda, NewtonDiverged, NotASink

__all__ = [
    "RobustMap", "PerturbedMap", "build_extension",
    "make_disturbance", "iterate_tracked", "find_sink",
    "basin_membership", "IN", "NOT_YET", "ESCAPED",
    "write_tracking_csv", "write_membership_csv", "membership_sweep",
]

_K = _b.kernels

IN = "IN"
NOT_YET = "NOT_YET"
ESCAPED = "ESCAPED"

ESCAPE_BOUND = 1e9


class RobustMap:
    """The machine's transition extended to R^3; callable, immutable."""

    __slots__ = ("machine", "lam", "_mh")

    def __init__(self, machine, lam):
        if not 0.0 < lam < 1.0:
            raise BadLambda(f"contraction factor must lie in (0,1), got {lam}")
        self.machine = machine
        self.lam = float(lam)
        write, move, nxt = machine.to_arrays()
        self._mh = _K.make_machine(machine.m, machine.b,
                                   np.asarray(write, dtype=np.int64),
                                   np.asarray(move, dtype=np.int64),
                                   np.asarray(nxt, dtype=np.int64))

    @property
    def halt_config(self):
        return np.array([0.0, 0.0, float(self.machine.m)])

    def __call__(self, x):
        return _K.map_eval(self._mh, self.lam, np.asarray(x, dtype=float))

    def jacobian(self, x):
        return _K.map_jac(self._mh, self.lam, np.asarray(x, dtype=float))

    def iterate(self, x0, n):
        """All n+1 states of the orbit from x0."""
        return _K.map_iterate(self._mh, self.lam, np.asarray(x0, float), int(n))

    def __repr__(self):
        return f"<RobustMap {self.machine!r} lam={self.lam}>"


def build_extension(M, lam=0.5):
    return RobustMap(M, lam)


class _Disturbance:
    """Additive perturbation with certified bounds.

    delta bounds sup |p|, theta bounds sup |Dp| (both max-norm); the
    analytic families below make the bounds exact rather than sampled.
    """

    __slots__ = ("handle", "delta", "theta", "label")

    def __init__(self, handle, delta, theta, label):
        self.handle = handle
        self.delta = float(delta)
        self.theta = float(theta)
        self.label = label

    def __call__(self, x, t=0.0):
        return _K.pert_eval(self.handle, np.asarray(x, float), float(t))

    def jacobian(self, x, t=0.0):
        return _K.pert_jac(self.handle, np.asarray(x, float), float(t))


def make_disturbance(kind, **kw):
    """Construct a bounded disturbance from an analytic family.

    kind 'const': p(x) = vec; delta = max|vec_i|, theta = 0.
    kind 'sin':   p_i(x) = vec_i * sin(x_{jidx_i} + phase_i);
                  delta = theta = max|vec_i|.
    kind 'gauss': p(x) = vec * exp(-alpha*(1 + |x|^2)); delta =
                  max|vec_i|*e^{-alpha}, theta = max|vec_i| *
                  sqrt(2*alpha*d) * e^{-alpha - 1/2} (row-sum norm, exact).
    kind 'bump':  p(x) = vec * e^{1 - 1/(1 - |x-center|^2/rho^2)}, compact
                  support; delta = max|vec_i|, theta maximized numerically.
    """
    if kind == "const":
        vec = np.asarray(kw["vec"], dtype=float)
        h = _K.make_perturbation(_K.PERT_CONST, vec=vec)
        return _Disturbance(h, np.max(np.abs(vec)), 0.0, "const")
    if kind == "sin":
        vec = np.asarray(kw["vec"], dtype=float)
        jidx = np.asarray(kw.get("jidx", np.arange(len(vec))), dtype=np.int64)
        phase = np.asarray(kw.get("phase", np.zeros(len(vec))), dtype=float)
        h = _K.make_perturbation(_K.PERT_SIN, vec=vec, jidx=jidx, phase=phase)
        a = np.max(np.abs(vec))
        return _Disturbance(h, a, a, "sin")
    if kind == "gauss":
        alpha = float(kw["alpha"])
        vec = np.asarray(kw["vec"], dtype=float)
        d = int(kw.get("dim", len(vec)))
        h = _K.make_perturbation(_K.PERT_GAUSS, alpha=alpha, vec=vec)
        a = np.max(np.abs(vec))
        theta = a * np.sqrt(2.0 * alpha * d) * np.exp(-alpha - 0.5)
        return _Disturbance(h, a * np.exp(-alpha), theta, "gauss")
    if kind == "bump":
        vec = np.asarray(kw["vec"], dtype=float)
        center = np.asarray(kw["center"], dtype=float)
        rho = float(kw.get("rho", 1.0))
        d = len(center)
        h = _K.make_perturbation(_K.PERT_BUMP, vec=vec, center=center, rho=rho)
        s = np.linspace(0.0, 1.0, 20001)[:-1]
        shape = np.exp(1.0 - 1.0 / (1.0 - s)) * np.sqrt(s) / (1.0 - s) ** 2
        theta = np.max(np.abs(vec)) * 2.0 * np.sqrt(d) / rho * shape.max()
        return _Disturbance(h, np.max(np.abs(vec)), theta, "bump")
    raise ValueError(f"unknown disturbance kind {kind!r}")


class PerturbedMap:
    """g(x) = f(x) + p(x) for a base extension f and bounded disturbance p.

    theta + lam < 1 keeps g a contraction on the plateaus, which is the
    regime every experiment below assumes.
    """

    __slots__ = ("base", "disturbance")

    def __init__(self, base, disturbance=None):
        self.base = base
        self.disturbance = disturbance

    @property
    def delta(self):
        return 0.0 if self.disturbance is None else self.disturbance.delta

    @property
    def theta(self):
        return 0.0 if self.disturbance is None else self.disturbance.theta

    @property
    def lam(self):
        return self.base.lam

    def __call__(self, x, t=0.0):
        y = self.base(x)
        if self.disturbance is not None:
            y = y + self.disturbance(x, t)
        return y

    def jacobian(self, x, t=0.0):
        J = self.base.jacobian(x)
        if self.disturbance is not None:
            J = J + self.disturbance.jacobian(x, t)
        return J

    def iterate(self, x0, n):
        h = None if self.disturbance is None else self.disturbance.handle
        return _K.map_iterate(self.base._mh, self.base.lam,
                              np.asarray(x0, float), int(n), h)


def _as_perturbed(g):
    if isinstance(g, PerturbedMap):
        return g
    if isinstance(g, RobustMap):
        return PerturbedMap(g)
    raise TypeError(f"expected RobustMap or PerturbedMap, got {type(g)!r}")


def iterate_tracked(g, xbar0, x0, j_max):
    """Deviation of the perturbed orbit from the exact machine run.

    xbar0 is the (real) start of the g orbit; x0 the exact integer
    configuration it shadows.  Returns a list of (j, deviation) with
    deviation = max-norm distance at step j.
    """
    g = _as_perturbed(g)
    M = g.base.machine
    orbit = g.iterate(np.asarray(xbar0, dtype=float), int(j_max))
    exact = list(x0)
    out = []
    cfg = tuple(int(v) for v in x0)
    for j in range(j_max + 1):
        dev = max(abs(orbit[j][i] - float(cfg[i])) for i in range(3))
        out.append((j, dev))
        cfg = tm_core.step(M, cfg)
    return out


def find_sink(g, seed, tol=1e-10):
    """Newton solve for a fixed point of g, certified attracting.

    Raises NewtonDiverged when 100 iterations do not reach tol, NotASink
    when some eigenvalue of Dg at the fixed point has modulus >= 1.
    """
    x = np.asarray(seed, dtype=float).copy()
    jac = g.jacobian if hasattr(g, "jacobian") else None
    if jac is None:
        raise TypeError("find_sink needs a map exposing .jacobian")
    n = x.size
    eye = np.eye(n)
    for _ in range(100):
        r = np.asarray(g(x), dtype=float) - x
        if np.max(np.abs(r)) <= tol:
            J = np.asarray(jac(x), dtype=float)
            mods = np.abs(np.linalg.eigvals(J))
            if np.max(mods) >= 1.0:
                raise NotASink(
                    f"fixed point at {x} has spectral radius {np.max(mods):.6f}")
            return x
        A = np.asarray(jac(x), dtype=float) - eye
        try:
            h = np.linalg.solve(A, r)
        except np.linalg.LinAlgError as exc:
            raise NewtonDiverged(f"singular update at {x}") from exc
        x = x - h
        if not np.all(np.isfinite(x)) or np.max(np.abs(x)) > ESCAPE_BOUND:
            raise NewtonDiverged(f"iterates unbounded near {x}")
    raise NewtonDiverged(f"no fixed point within tol={tol} after 100 steps")


def basin_membership(g, w, eps, j_max):
    """Decide whether the orbit of (0,w,1) under g visibly reaches the sink.

    IN once an iterate comes within eps/5 of the sink near the halting
    configuration (the contraction then traps it); ESCAPED if the orbit
    leaves max-norm radius 1e9; NOT_YET when the step budget runs out.
    """
    g = _as_perturbed(g)
    sink = g.base.halt_config
    if g.disturbance is not None:
        sink = find_sink(g, sink)
    orbit = g.iterate(np.array([0.0, float(w), 1.0]), int(j_max))
    thresh = eps / 5.0
    for j in range(j_max + 1):
        if np.max(np.abs(orbit[j] - sink)) <= thresh:
            return IN, j
        if np.max(np.abs(orbit[j])) > ESCAPE_BOUND:
            return ESCAPED, j
    return NOT_YET, j_max


def membership_sweep(g, inputs, eps, j_max):
    """basin_membership over many inputs; list of (w, verdict, steps)."""
    return [(w, *basin_membership(g, w, eps, j_max)) for w in inputs]


def write_tracking_csv(path, pairs):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["j", "dev"])
        for j, dev in pairs:
            wr.writerow([j, f"{dev:.17g}"])


def write_membership_csv(path, rows):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["w", "verdict", "steps"])
        for w, verdict, steps in rows:
            wr.writerow([w, verdict, steps])
