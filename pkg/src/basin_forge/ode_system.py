"""Continuous-time embeddings of the discrete machine dynamics.

Three stages of the same idea, each integrable with the shared solver:

  pair: two coupled scalar equations that alternately shoot z1 at a
      rounded image of z2 and z2 at a rounded copy of z1, gated by a
      half-period pulse; one full period advances the pair by one map step.
  six: the componentwise version for the three-coordinate machine map,
      u targeting f(r(v)) on the first half-period, v copying r(u) on the
      second.
  full: the autonomous 7-dimensional system whose seventh coordinate z is
      a self-regulating clock; the pulse gates read z instead of wall time,
      and once v3 settles at the halting state the clock shuts down, making
      the halting point (0,0,m,0,0,m,0) a genuine sink.

choose_c sizes the targeting gain from the gate integral and the wanted
per-window error gamma; the robust variant leaves room for the extra
half-window used by perturbed runs.
"""

import json
import os
from dataclasses import dataclass

import numpy as np
from scipy.integrate import quad

from . import _backend as _b
from . import smooth_kit, tm_core
from .errors import BadLambda, BadStage, ZeroGateIntegral

__all__ = [
    "TargetingSpec", "choose_c", "Field", "build_field",
    "build_targeting_field", "halting_point", "jacobian_at_halt",
    "field_manifest", "field_from_manifest", "GAMMA_DEFAULT", "GAMMA_ROBUST",
]

_K = _b.kernels

GAMMA_DEFAULT = 0.25
GAMMA_ROBUST = 1.0 / 16.0

STAGES = ("pair", "six", "full")
_STAGE_KIND = {"pair": "tm_pair", "six": "tm_six", "full": "tm_full"}
_STAGE_DIM = {"pair": 2, "six": 6, "full": 7}


@dataclass(frozen=True)
class TargetingSpec:
    """One shooting window: drive x toward target within [t0, t1].

    gamma is the allowed endpoint error, rho an anticipated bound on
    additive disturbance of the right-hand side.
    """
    target: float
    t0: float = 0.0
    t1: float = 1.0
    gamma: float = GAMMA_DEFAULT
    rho: float = 0.0
    gate: object = None

    def __post_init__(self):
        if not self.t1 > self.t0:
            raise ValueError(f"window [{self.t0}, {self.t1}] is empty")
        if not self.gamma > 0.0:
            raise ValueError(f"gamma must be positive, got {self.gamma}")
        if self.rho < 0.0:
            raise ValueError(f"rho must be nonnegative, got {self.rho}")

    def gate_fn(self):
        return self.gate if self.gate is not None else smooth_kit.phi

    def gate_integral(self):
        g = self.gate_fn()
        if self.t1 <= self.t0:
            raise ZeroGateIntegral(f"empty window [{self.t0}, {self.t1}]")
        # the gate is supported on short sub-windows; split at quarter-integer
        # breakpoints so adaptive quadrature cannot step over the pulse
        brk = np.arange(np.floor(self.t0 * 4), np.ceil(self.t1 * 4) + 1) / 4.0
        pts = [self.t0] + [b for b in brk if self.t0 < b < self.t1] + [self.t1]
        total = 0.0
        for a, b in zip(pts[:-1], pts[1:]):
            val, _ = quad(g, a, b, epsabs=1e-14, epsrel=1e-12, limit=200)
            total += val
        return total


def choose_c(spec, robust=False):
    """Smallest admissible targeting gain for the window, floored at 1.

    1/(2 gamma^2 I) guarantees endpoint error below gamma from any start;
    the robust variant 3/(8 gamma^2 I) achieves the same using only half the
    gate mass, leaving the other half as margin for perturbed runs.
    """
    I = spec.gate_integral()
    if I <= 0.0:
        raise ZeroGateIntegral(f"gate integral {I} over [{spec.t0}, {spec.t1}]")
    g2 = spec.gamma * spec.gamma
    c = 3.0 / (8.0 * g2 * I) if robust else 1.0 / (2.0 * g2 * I)
    return max(1.0, c)


class Field:
    """Evaluator/Jacobian pair around a backend handle, plus metadata.

    eval(t, x) and jacobian(t, x) take explicit time even for autonomous
    stages (the argument is ignored there).  dim is 1, 2, 6 or 7.
    """

    __slots__ = ("handle", "dim", "stage", "machine", "c", "lam", "gamma",
                 "meta")

    def __init__(self, handle, stage, machine=None, c=None, lam=None,
                 gamma=None, meta=None):
        self.handle = handle
        self.dim = _K.field_dim(handle)
        self.stage = stage
        self.machine = machine
        self.c = c
        self.lam = lam
        self.gamma = gamma
        self.meta = dict(meta or {})

    def eval(self, t, x):
        return _K.field_eval(self.handle, float(t), np.asarray(x, dtype=float))

    def __call__(self, t, x):
        return self.eval(t, x)

    def jacobian(self, t, x):
        return _K.field_jac(self.handle, float(t), np.asarray(x, dtype=float))

    def __repr__(self):
        return f"<Field stage={self.stage} dim={self.dim} c={self.c}>"


def build_field(M, stage, c, lam=0.5, gamma=None):
    """Embed machine M at the requested stage with targeting gain c."""
    if stage not in STAGES:
        raise BadStage(f"stage must be one of {STAGES}, got {stage!r}")
    if not 0.0 < lam < 1.0:
        raise BadLambda(f"contraction factor must lie in (0,1), got {lam}")
    if not c > 0.0:
        raise ValueError(f"targeting gain must be positive, got {c}")
    write, move, nxt = M.to_arrays()
    mh = _K.make_machine(M.m, M.b,
                         np.asarray(write, dtype=np.int64),
                         np.asarray(move, dtype=np.int64),
                         np.asarray(nxt, dtype=np.int64))
    handle = _K.make_field(_STAGE_KIND[stage], machine=mh, c=float(c),
                           lam=float(lam))
    return Field(handle, stage, machine=M, c=float(c), lam=float(lam),
                 gamma=gamma)


def build_targeting_field(spec, c):
    """The 1-D shooting equation x' = c (target - x)^3 phi(t)."""
    handle = _K.make_field("targeting", target=float(spec.target), c=float(c))
    return Field(handle, "targeting", c=float(c), gamma=spec.gamma,
                 meta={"target": float(spec.target)})


def halting_point(M):
    """(0, 0, m, 0, 0, m, 0): both machine copies parked at the halting
    configuration with the clock at zero."""
    m = float(M.m)
    return np.array([0.0, 0.0, m, 0.0, 0.0, m, 0.0])


def jacobian_at_halt(field):
    """Analytic Jacobian of the full-stage field at the halting point.

    Every targeting term contributes exactly -1 on the diagonal (the gain c
    scales only the cubic, which vanishes to second order) and the clock row
    contributes -1 once the shutdown gate is saturated.
    """
    if field.stage != "full":
        raise BadStage(f"need stage 'full', got {field.stage!r}")
    return field.jacobian(0.0, halting_point(field.machine))


def field_manifest(field, machine_path=None):
    """JSON-ready description sufficient to rebuild the field bit-identically.

    The machine is embedded inline unless machine_path is given, in which
    case only the path is recorded.
    """
    if field.stage not in STAGES:
        raise BadStage(f"only machine stages have manifests, got {field.stage!r}")
    doc = {
        "stage": field.stage,
        "c": field.c,
        "lam": field.lam,
        "gamma": field.gamma,
        "m": field.machine.m,
    }
    if machine_path is not None:
        doc["machine_path"] = str(machine_path)
    else:
        doc["machine"] = tm_core.dump_machine(field.machine)
    return doc


def field_from_manifest(doc, base_dir=None):
    if not isinstance(doc, dict):
        src = os.fspath(doc)
        if base_dir is None:
            base_dir = os.path.dirname(src)
        with open(src, encoding="utf-8") as fh:
            doc = json.load(fh)
    if "machine" in doc:
        M = tm_core.load_machine(doc["machine"])
    else:
        path = doc["machine_path"]
        if base_dir:
            path = os.path.join(base_dir, path)
        M = tm_core.load_machine(path)
    return build_field(M, doc["stage"], doc["c"], doc.get("lam", 0.5),
                       doc.get("gamma"))
