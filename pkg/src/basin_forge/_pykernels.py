"""Pure-Python backend.

Mirrors the API of the compiled extension ``basin_forge._core`` exactly; the
package selects one of the two at import time (see ``_backend``).  Everything
here favors clarity over speed, but the semantics (branch structure, exact
integer paths, RK coefficients, event bisection) are the reference that the
compiled backend reproduces.
"""

import math

import numpy as np

from ._tables import C_ZETA, TABLE_N, ZETA_DERIVS, ZETA_VALS

BACKEND = "python"
HAS_OPENMP = False

_TWO_PI = 2.0 * math.pi
_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_PHASE = math.pi / 4.0
_MAX_EXACT = 2.0 ** 53


# ---------------------------------------------------------------------------
# scalar smooth primitives
# ---------------------------------------------------------------------------

def chi(x):
    if not (x > 0.0 and x < 1.0):  # inverted so NaN lands in the zero branch
        return 0.0
    try:
        return math.exp(1.0 / (x * (x - 1.0)))
    except OverflowError:  # 1/(x(x-1)) -> -inf at the edges, exp underflows
        return 0.0


def d_chi(x):
    if not (x > 0.0 and x < 1.0):
        return 0.0
    u = x * (x - 1.0)
    try:
        return -math.exp(1.0 / u) * (2.0 * x - 1.0) / (u * u)
    except OverflowError:
        return 0.0


def zeta(x):
    if not x > 0.0:  # inverted so NaN lands in the zero branch
        return 0.0
    if x >= 1.0:
        return 1.0
    u = x * TABLE_N
    i = int(u)
    if i >= TABLE_N:
        return 1.0
    if i < 0:
        return 0.0
    s = u - i
    h = 1.0 / TABLE_N
    v0 = ZETA_VALS[i]
    v1 = ZETA_VALS[i + 1]
    if v1 - v0 < 1e-12:
        # nearly flat interval: the cubic's rounding noise (~1 ulp) exceeds
        # the true slope, so use linear interpolation, which round-to-nearest
        # keeps monotone; accuracy is irrelevant at derivatives below 1e-8
        val = v0 + s * (v1 - v0)
    else:
        d0 = ZETA_DERIVS[i] * h
        d1 = ZETA_DERIVS[i + 1] * h
        s2 = s * s
        s3 = s2 * s
        val = ((2.0 * s3 - 3.0 * s2 + 1.0) * v0 + (s3 - 2.0 * s2 + s) * d0
               + (3.0 * s2 - 2.0 * s3) * v1 + (s3 - s2) * d1)
        if val < v0:
            val = v0
        elif val > v1:
            val = v1
    # flush the deep tail to exact zero
    if val < 1e-18:
        return 0.0
    return val


def d_zeta(x):
    return C_ZETA * chi(x)


def zeta_ab(a, b, x):
    return zeta((x - a) / (b - a))


def d_zeta_ab(a, b, x):
    return C_ZETA * chi((x - a) / (b - a)) / (b - a)


def phi(t):
    return zeta(math.sin(_TWO_PI * t - _PHASE) - _INV_SQRT2)


def d_phi(t):
    s = math.sin(_TWO_PI * t - _PHASE) - _INV_SQRT2
    if s <= 0.0 or s >= 1.0:
        return 0.0
    return C_ZETA * chi(s) * math.cos(_TWO_PI * t - _PHASE) * _TWO_PI


def phi_bar(t, v3, m):
    return phi(t) + zeta_ab(m - 0.25, m - 0.1875, v3)


def d_phi_bar_dt(t, v3, m):
    return d_phi(t)


def d_phi_bar_dv3(t, v3, m):
    return d_zeta_ab(m - 0.25, m - 0.1875, v3)


def smooth_round(y):
    if not math.isfinite(y):
        return y
    k = math.floor(y)
    f = y - k
    if f <= 0.25:
        return k
    if f >= 0.75:
        return k + 1.0
    return k + zeta(2.0 * f - 0.5)


def d_smooth_round(y):
    if not math.isfinite(y):
        return 0.0
    f = y - math.floor(y)
    if f <= 0.25 or f >= 0.75:
        return 0.0
    return 2.0 * C_ZETA * chi(2.0 * f - 0.5)


def _is_integral(y):
    return math.isfinite(y) and y == math.floor(y) and abs(y) < _MAX_EXACT


def _kernels(y, b):
    """Values of the b residue kernels K_0..K_{b-1} at y.

    Exact one-hot at integral y; trigonometric interpolant elsewhere.
    """
    if _is_integral(y):
        out = [0.0] * b
        out[int(y) % b] = 1.0
        return out
    cs = [math.cos(_TWO_PI * k * y / b) for k in range(b)]
    sn = [math.sin(_TWO_PI * k * y / b) for k in range(b)]
    out = []
    for a in range(b):
        acc = 0.0
        for k in range(b):
            w = _TWO_PI * k * a / b
            acc += cs[k] * math.cos(w) + sn[k] * math.sin(w)
        out.append(acc / b)
    return out


def _kernel_derivs(y, b):
    out = []
    for a in range(b):
        acc = 0.0
        for k in range(b):
            acc -= math.sin(_TWO_PI * k * (y - a) / b) * (_TWO_PI * k / b)
        out.append(acc / b)
    return out


def smooth_mod(x, b):
    y = smooth_round(x)
    if _is_integral(y):
        return float(int(y) % b)
    ks = _kernels(y, b)
    return sum(j * ks[j] for j in range(b))


def d_smooth_mod(x, b):
    dr = d_smooth_round(x)
    if dr == 0.0:
        return 0.0
    y = smooth_round(x)
    kd = _kernel_derivs(y, b)
    return sum(j * kd[j] for j in range(b)) * dr


def smooth_div(x, b):
    return (smooth_round(x) - smooth_mod(x, b)) / b


def d_smooth_div(x, b):
    return (d_smooth_round(x) - d_smooth_mod(x, b)) / b


# ---------------------------------------------------------------------------
# robust map
# ---------------------------------------------------------------------------

MOVE_S, MOVE_R, MOVE_L = 0, 1, 2


class PyMachine:
    __slots__ = ("m", "b", "write", "move", "nxt")

    def __init__(self, m, b, write, move, nxt):
        self.m = int(m)
        self.b = int(b)
        self.write = np.asarray(write, dtype=np.int64)
        self.move = np.asarray(move, dtype=np.int64)
        self.nxt = np.asarray(nxt, dtype=np.int64)


def make_machine(m, b, write, move, nxt):
    return PyMachine(m, b, write, move, nxt)


def _lagrange(y, q, m):
    acc = 1.0
    for j in range(1, m + 1):
        if j != q:
            acc *= (y - j) / (q - j)
    return acc


def _d_lagrange(y, q, m):
    acc = 0.0
    for i in range(1, m + 1):
        if i == q:
            continue
        term = 1.0 / (q - i)
        for j in range(1, m + 1):
            if j != q and j != i:
                term *= (y - j) / (q - j)
        acc += term
    return acc


def _step_exact(mh, w1, w2, q):
    """Exact integer transition; arguments and results are Python ints."""
    if q == mh.m:
        return w1, w2, q
    b = mh.b
    a = w2 % b
    idx = (q - 1) * b + a
    aw = int(mh.write[idx])
    mv = int(mh.move[idx])
    qn = int(mh.nxt[idx])
    if mv == MOVE_S:
        w2 = w2 - a + aw
    elif mv == MOVE_R:
        w1 = b * w1 + aw
        w2 = (w2 - a) // b
    else:
        w2 = b * (w2 - a + aw) + (w1 % b)
        w1 = w1 // b
    return w1, w2, qn


def _rule_apply(mh, y1, y2, y3):
    m, b = mh.m, mh.b
    if (_is_integral(y1) and _is_integral(y2) and _is_integral(y3)
            and 0.0 <= y1 and 0.0 <= y2 and 1.0 <= y3 <= m):
        w1, w2, q = _step_exact(mh, int(y1), int(y2), int(y3))
        return np.array([float(w1), float(w2), float(q)])

    out = np.zeros(3)
    ks = None
    for q in range(1, m + 1):
        lq = _lagrange(y3, q, m)
        if lq == 0.0:
            continue
        if q == m:
            out += lq * np.array([y1, y2, float(m)])
            continue
        if ks is None:
            ks = _kernels(y2, b)
        g = np.zeros(3)
        for a in range(b):
            ka = ks[a]
            if ka == 0.0:
                continue
            idx = (q - 1) * b + a
            aw = float(mh.write[idx])
            mv = int(mh.move[idx])
            qn = float(mh.nxt[idx])
            if mv == MOVE_S:
                t = (y1, y2 - a + aw, qn)
            elif mv == MOVE_R:
                t = (b * y1 + aw, (y2 - a) / b, qn)
            else:
                t = (smooth_div(y1, b), b * (y2 - a + aw) + smooth_mod(y1, b), qn)
            g[0] += ka * t[0]
            g[1] += ka * t[1]
            g[2] += ka * t[2]
        out += lq * g
    return out


def _rule_apply_jac(mh, y1, y2, y3):
    m, b = mh.m, mh.b
    jac = np.zeros((3, 3))
    ks = _kernels(y2, b)
    kd = _kernel_derivs(y2, b)
    dsd = d_smooth_div(y1, b)
    dsm = d_smooth_mod(y1, b)
    sd = smooth_div(y1, b)
    sm = smooth_mod(y1, b)
    for q in range(1, m + 1):
        lq = _lagrange(y3, q, m)
        dlq = _d_lagrange(y3, q, m)
        if q == m:
            g = np.array([y1, y2, float(m)])
            jac[0, 0] += lq
            jac[1, 1] += lq
            jac[:, 2] += dlq * g
            continue
        g = np.zeros(3)
        dg1 = np.zeros(3)  # d/dy1
        dg2 = np.zeros(3)  # d/dy2
        for a in range(b):
            idx = (q - 1) * b + a
            aw = float(mh.write[idx])
            mv = int(mh.move[idx])
            qn = float(mh.nxt[idx])
            if mv == MOVE_S:
                t = np.array([y1, y2 - a + aw, qn])
                t1 = np.array([1.0, 0.0, 0.0])
                t2 = np.array([0.0, 1.0, 0.0])
            elif mv == MOVE_R:
                t = np.array([b * y1 + aw, (y2 - a) / b, qn])
                t1 = np.array([float(b), 0.0, 0.0])
                t2 = np.array([0.0, 1.0 / b, 0.0])
            else:
                t = np.array([sd, b * (y2 - a + aw) + sm, qn])
                t1 = np.array([dsd, dsm, 0.0])
                t2 = np.array([0.0, float(b), 0.0])
            g += ks[a] * t
            dg1 += ks[a] * t1
            dg2 += kd[a] * t + ks[a] * t2
        jac[:, 0] += lq * dg1
        jac[:, 1] += lq * dg2
        jac[:, 2] += dlq * g
    return jac


def map_eval(mh, lam, x):
    x = np.asarray(x, dtype=float)
    r = np.array([smooth_round(v) for v in x])
    return _rule_apply(mh, r[0], r[1], r[2]) + lam * (x - r)


def map_jac(mh, lam, x):
    x = np.asarray(x, dtype=float)
    dr = np.array([d_smooth_round(v) for v in x])
    if not dr.any():
        return lam * np.eye(3)
    r = np.array([smooth_round(v) for v in x])
    df = _rule_apply_jac(mh, r[0], r[1], r[2])
    return df * dr[None, :] + lam * (np.eye(3) - np.diag(dr))


def map_iterate(mh, lam, x0, n, pert=None):
    """Iterate the robust map n times, returning all n+1 states."""
    out = np.empty((n + 1, 3))
    x = np.asarray(x0, dtype=float).copy()
    out[0] = x
    for j in range(1, n + 1):
        if pert is not None:
            # g(x) = f(x) + p(x): perturbation sampled at the pre-step point
            x = map_eval(mh, lam, x) + _pert_eval(pert, x, float(j - 1))
        else:
            x = map_eval(mh, lam, x)
        out[j] = x
        if np.max(np.abs(x)) > 1e12:
            out[j + 1:] = x
            break
    return out


# ---------------------------------------------------------------------------
# perturbations
# ---------------------------------------------------------------------------

PERT_CONST, PERT_SIN, PERT_GAUSS, PERT_BUMP, PERT_TSIN = 0, 1, 2, 3, 4


class PyPerturbation:
    __slots__ = ("kind", "alpha", "vec", "jidx", "phase", "center", "rho", "omega")

    def __init__(self, kind, alpha=0.0, vec=None, jidx=None, phase=None,
                 center=None, rho=1.0, omega=1.0):
        self.kind = kind
        self.alpha = float(alpha)
        self.vec = None if vec is None else np.asarray(vec, dtype=float)
        self.jidx = None if jidx is None else np.asarray(jidx, dtype=np.int64)
        self.phase = None if phase is None else np.asarray(phase, dtype=float)
        self.center = None if center is None else np.asarray(center, dtype=float)
        self.rho = float(rho)
        self.omega = float(omega)


def make_perturbation(kind, **kw):
    return PyPerturbation(kind, **kw)


def _pert_eval(p, x, t=0.0):
    d = len(x)
    if p.kind == PERT_CONST:
        return p.vec[:d]
    if p.kind == PERT_SIN:
        return np.array([p.vec[i] * math.sin(x[p.jidx[i]] + p.phase[i])
                         for i in range(d)])
    if p.kind == PERT_GAUSS:
        r2 = float(np.dot(x, x))
        return p.vec[:d] * math.exp(-p.alpha * (1.0 + r2))
    if p.kind == PERT_BUMP:
        dx = np.asarray(x) - p.center[:d]
        s = float(np.dot(dx, dx)) / (p.rho * p.rho)
        if s >= 1.0:
            return np.zeros(d)
        return p.vec[:d] * math.exp(1.0 - 1.0 / (1.0 - s))
    if p.kind == PERT_TSIN:
        return np.array([p.vec[i] * math.sin(p.omega * t + p.phase[i])
                         for i in range(d)])
    raise ValueError("unknown perturbation kind")


def pert_eval(p, x, t=0.0):
    return np.asarray(_pert_eval(p, np.asarray(x, dtype=float), t), dtype=float)


def pert_jac(p, x, t=0.0):
    return _pert_jac(p, np.asarray(x, dtype=float))


def _pert_jac(p, x):
    d = len(x)
    out = np.zeros((d, d))
    if p.kind == PERT_SIN:
        for i in range(d):
            out[i, p.jidx[i]] = p.vec[i] * math.cos(x[p.jidx[i]] + p.phase[i])
    elif p.kind == PERT_GAUSS:
        r2 = float(np.dot(x, x))
        e = math.exp(-p.alpha * (1.0 + r2))
        for i in range(d):
            out[i, :] = p.vec[i] * e * (-2.0 * p.alpha) * np.asarray(x)
    elif p.kind == PERT_BUMP:
        dx = np.asarray(x) - p.center[:d]
        s = float(np.dot(dx, dx)) / (p.rho * p.rho)
        if s < 1.0:
            g = math.exp(1.0 - 1.0 / (1.0 - s)) * (-1.0 / (1.0 - s) ** 2)
            for i in range(d):
                out[i, :] = p.vec[i] * g * 2.0 * dx / (p.rho * p.rho)
    return out


# ---------------------------------------------------------------------------
# fields
# ---------------------------------------------------------------------------

class _Field:
    dim = 0

    def eval(self, t, x):  # pragma: no cover - interface
        raise NotImplementedError

    def jac(self, t, x):  # pragma: no cover - interface
        raise NotImplementedError


class TargetField(_Field):
    dim = 1

    def __init__(self, target, c):
        self.target = float(target)
        self.c = float(c)

    def eval(self, t, x):
        d = self.target - x[0]
        return np.array([self.c * d * d * d * phi(t)])

    def jac(self, t, x):
        d = self.target - x[0]
        return np.array([[-3.0 * self.c * d * d * phi(t)]])


class PairField(_Field):
    dim = 2

    def __init__(self, mh, c, lam):
        self.mh = mh
        self.c = float(c)
        self.lam = float(lam)

    def _ftilde(self, y):
        return smooth_div(y, self.mh.b) + self.lam * (y - smooth_round(y))

    def _d_ftilde(self, y):
        return d_smooth_div(y, self.mh.b) + self.lam * (1.0 - d_smooth_round(y))

    def eval(self, t, x):
        z1, z2 = x
        tgt = self._ftilde(smooth_round(z2))
        d1 = tgt - z1
        d2 = smooth_round(z1) - z2
        return np.array([self.c * d1 ** 3 * phi(t),
                         self.c * d2 ** 3 * phi(t + 0.5)])

    def jac(self, t, x):
        z1, z2 = x
        p1 = phi(t)
        p2 = phi(t + 0.5)
        r2 = smooth_round(z2)
        d1 = self._ftilde(r2) - z1
        d2 = smooth_round(z1) - z2
        j = np.zeros((2, 2))
        j[0, 0] = -3.0 * self.c * d1 * d1 * p1
        j[0, 1] = 3.0 * self.c * d1 * d1 * p1 * self._d_ftilde(r2) * d_smooth_round(z2)
        j[1, 0] = 3.0 * self.c * d2 * d2 * p2 * d_smooth_round(z1)
        j[1, 1] = -3.0 * self.c * d2 * d2 * p2
        return j


class SixField(_Field):
    dim = 6

    def __init__(self, mh, c, lam):
        self.mh = mh
        self.c = float(c)
        self.lam = float(lam)

    def eval(self, t, x):
        u = x[:3]
        v = x[3:]
        rv = np.array([smooth_round(w) for w in v])
        tgt = map_eval(self.mh, self.lam, rv)
        p1 = phi(t)
        p2 = phi(t + 0.5)
        out = np.empty(6)
        for i in range(3):
            d = tgt[i] - u[i]
            out[i] = self.c * d ** 3 * p1
            e = smooth_round(u[i]) - v[i]
            out[3 + i] = self.c * e ** 3 * p2
        return out

    def jac(self, t, x):
        u = x[:3]
        v = x[3:]
        rv = np.array([smooth_round(w) for w in v])
        drv = np.array([d_smooth_round(w) for w in v])
        tgt = map_eval(self.mh, self.lam, rv)
        jf = map_jac(self.mh, self.lam, rv)
        p1 = phi(t)
        p2 = phi(t + 0.5)
        j = np.zeros((6, 6))
        for i in range(3):
            d = tgt[i] - u[i]
            s = 3.0 * self.c * d * d * p1
            j[i, i] = -s
            for k in range(3):
                j[i, 3 + k] = s * jf[i, k] * drv[k]
            e = smooth_round(u[i]) - v[i]
            se = 3.0 * self.c * e * e * p2
            j[3 + i, i] = se * d_smooth_round(u[i])
            j[3 + i, 3 + i] = -se
        return j


class FullField(_Field):
    dim = 7

    def __init__(self, mh, c, lam):
        self.mh = mh
        self.c = float(c)
        self.lam = float(lam)
        self.m = mh.m

    def eval(self, t, x):
        m = float(self.m)
        u = x[:3]
        v = x[3:6]
        z = x[6]
        rv = np.array([smooth_round(w) for w in v])
        tgt = map_eval(self.mh, self.lam, rv)
        p1 = phi_bar(z, v[2], m)
        p2 = phi_bar(z + 0.5, v[2], m)
        out = np.empty(7)
        # c scales the cubic only, so the linearization at the halting point
        # is exactly -identity regardless of c
        for i in range(3):
            d = tgt[i] - u[i]
            out[i] = (self.c * d ** 3 + d) * p1
            e = smooth_round(u[i]) - v[i]
            out[3 + i] = (self.c * e ** 3 + e) * p2
        out[6] = 1.0 - zeta_ab(m - 0.1875, m - 0.125, v[2]) * (z + 1.0)
        return out

    def jac(self, t, x):
        m = float(self.m)
        u = x[:3]
        v = x[3:6]
        z = x[6]
        rv = np.array([smooth_round(w) for w in v])
        drv = np.array([d_smooth_round(w) for w in v])
        tgt = map_eval(self.mh, self.lam, rv)
        jf = map_jac(self.mh, self.lam, rv)
        p1 = phi_bar(z, v[2], m)
        p2 = phi_bar(z + 0.5, v[2], m)
        dp1_z = d_phi_bar_dt(z, v[2], m)
        dp2_z = d_phi_bar_dt(z + 0.5, v[2], m)
        dp_v3 = d_phi_bar_dv3(z, v[2], m)
        j = np.zeros((7, 7))
        for i in range(3):
            d = tgt[i] - u[i]
            cub = self.c * d ** 3 + d
            s = (3.0 * self.c * d * d + 1.0) * p1
            j[i, i] = -s
            for k in range(3):
                j[i, 3 + k] = s * jf[i, k] * drv[k]
            j[i, 5] += cub * dp_v3
            j[i, 6] = cub * dp1_z
            e = smooth_round(u[i]) - v[i]
            cub_e = self.c * e ** 3 + e
            se = (3.0 * self.c * e * e + 1.0) * p2
            j[3 + i, i] = se * d_smooth_round(u[i])
            j[3 + i, 3 + i] = -se
            j[3 + i, 5] += cub_e * dp_v3
            j[3 + i, 6] = cub_e * dp2_z
        j[6, 5] = -d_zeta_ab(m - 0.1875, m - 0.125, v[2]) * (z + 1.0)
        j[6, 6] = -zeta_ab(m - 0.1875, m - 0.125, v[2])
        return j


# expression programs: opcodes for a little stack machine
OP_CONST, OP_X, OP_Y, OP_ADD, OP_SUB, OP_MUL, OP_DIV, OP_NEG = 0, 1, 2, 3, 4, 5, 6, 7
OP_SIN, OP_COS, OP_EXP, OP_POWI, OP_POW = 8, 9, 10, 11, 12


def _run_prog(prog, consts, x, y):
    ops, args = prog
    stack = []
    for op, arg in zip(ops, args):
        if op == OP_CONST:
            stack.append(consts[int(arg)])
        elif op == OP_X:
            stack.append(x)
        elif op == OP_Y:
            stack.append(y)
        elif op == OP_NEG:
            stack[-1] = -stack[-1]
        elif op == OP_SIN:
            stack[-1] = math.sin(stack[-1])
        elif op == OP_COS:
            stack[-1] = math.cos(stack[-1])
        elif op == OP_EXP:
            stack[-1] = math.exp(min(stack[-1], 700.0))
        elif op == OP_POWI:
            stack[-1] = stack[-1] ** int(arg)
        else:
            b = stack.pop()
            a = stack.pop()
            if op == OP_ADD:
                stack.append(a + b)
            elif op == OP_SUB:
                stack.append(a - b)
            elif op == OP_MUL:
                stack.append(a * b)
            elif op == OP_DIV:
                stack.append(a / b)
            else:  # OP_POW
                stack.append(math.pow(a, b))
    return stack[-1]


class ExprField(_Field):
    dim = 2

    def __init__(self, progs, jac_progs, consts):
        # progs: 2 programs; jac_progs: 4 programs (row-major d f_i / d x_j)
        self.progs = progs
        self.jac_progs = jac_progs
        self.consts = np.asarray(consts, dtype=float)

    def eval(self, t, x):
        return np.array([_run_prog(p, self.consts, x[0], x[1]) for p in self.progs])

    def jac(self, t, x):
        vals = [_run_prog(p, self.consts, x[0], x[1]) for p in self.jac_progs]
        return np.array(vals).reshape(2, 2)


class GridField(_Field):
    """Bicubic (Catmull-Rom) interpolation of a tabulated planar field."""

    dim = 2

    def __init__(self, x0, y0, hx, hy, nx, ny, coeffs):
        self.x0, self.y0, self.hx, self.hy = x0, y0, hx, hy
        self.nx, self.ny = nx, ny
        self.coeffs = coeffs  # (2, nx-1, ny-1, 4, 4)

    def _locate(self, x, y):
        u = (x - self.x0) / self.hx
        v = (y - self.y0) / self.hy
        if not u > 0.0:  # inverted comparisons also canonicalize NaN
            u = 0.0
        elif u > self.nx - 1.0:
            u = self.nx - 1.0
        if not v > 0.0:
            v = 0.0
        elif v > self.ny - 1.0:
            v = self.ny - 1.0
        i = min(int(math.floor(u)), self.nx - 2)
        j = min(int(math.floor(v)), self.ny - 2)
        return i, j, u - i, v - j

    def eval(self, t, xy):
        i, j, u, v = self._locate(xy[0], xy[1])
        up = np.array([1.0, u, u * u, u ** 3])
        vp = np.array([1.0, v, v * v, v ** 3])
        return np.array([up @ self.coeffs[k, i, j] @ vp for k in range(2)])

    def jac(self, t, xy):
        i, j, u, v = self._locate(xy[0], xy[1])
        up = np.array([1.0, u, u * u, u ** 3])
        vp = np.array([1.0, v, v * v, v ** 3])
        du = np.array([0.0, 1.0, 2.0 * u, 3.0 * u * u]) / self.hx
        dv = np.array([0.0, 1.0, 2.0 * v, 3.0 * v * v]) / self.hy
        out = np.empty((2, 2))
        for k in range(2):
            c = self.coeffs[k, i, j]
            out[k, 0] = du @ c @ vp
            out[k, 1] = up @ c @ dv
        return out


class PerturbedField(_Field):
    def __init__(self, base, pert):
        self.base = base
        self.pert = pert
        self.dim = base.dim

    def eval(self, t, x):
        return self.base.eval(t, x) + _pert_eval(self.pert, x, t)

    def jac(self, t, x):
        return self.base.jac(t, x) + _pert_jac(self.pert, x)


class ScaledField(_Field):
    def __init__(self, base, factor):
        self.base = base
        self.factor = float(factor)
        self.dim = base.dim

    def eval(self, t, x):
        return self.factor * self.base.eval(t, x)

    def jac(self, t, x):
        return self.factor * self.base.jac(t, x)


def make_field(kind, **kw):
    if kind == "targeting":
        return TargetField(kw["target"], kw["c"])
    if kind == "tm_pair":
        return PairField(kw["machine"], kw["c"], kw["lam"])
    if kind == "tm_six":
        return SixField(kw["machine"], kw["c"], kw["lam"])
    if kind == "tm_full":
        return FullField(kw["machine"], kw["c"], kw["lam"])
    if kind == "expr":
        return ExprField(kw["progs"], kw["jac_progs"], kw["consts"])
    if kind == "grid":
        return GridField(kw["x0"], kw["y0"], kw["hx"], kw["hy"],
                         kw["nx"], kw["ny"], kw["coeffs"])
    if kind == "perturbed":
        return PerturbedField(kw["base"], kw["pert"])
    if kind == "scaled":
        return ScaledField(kw["base"], kw["factor"])
    raise ValueError(f"unknown field kind {kind!r}")


def field_eval(fh, t, x):
    return fh.eval(t, np.asarray(x, dtype=float))


def field_jac(fh, t, x):
    return fh.jac(t, np.asarray(x, dtype=float))


def field_dim(fh):
    return fh.dim


# ---------------------------------------------------------------------------
# Dormand-Prince 5(4) with PI control, Hermite dense output, event bisection
# ---------------------------------------------------------------------------

_A = (
    (1 / 5,),
    (3 / 40, 9 / 40),
    (44 / 45, -56 / 15, 32 / 9),
    (19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729),
    (9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656),
)
_B = (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84)
_C = (1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0)
_E = (71 / 57600, 0.0, -71 / 16695, 71 / 1920, -17253 / 339200, 22 / 525, -1 / 40)

STATUS_DONE, STATUS_EVENT, STATUS_UNDERFLOW, STATUS_REGION, STATUS_MAXSTEPS = 0, 1, 2, 3, 4

_H_MIN = 1e-14


def _hermite(y0, f0, y1, f1, h, s):
    s2 = s * s
    s3 = s2 * s
    return ((2 * s3 - 3 * s2 + 1) * y0 + (s3 - 2 * s2 + s) * h * f0
            + (3 * s2 - 2 * s3) * y1 + (s3 - s2) * h * f1)


def _event_g(ev, i, t, y):
    kind = ev["kind"][i]
    if kind == 0 or kind == 1:  # ball enter / exit
        c = ev["center"][i, :len(y)]
        if ev["norm"][i] == 0:
            dist = float(np.max(np.abs(y - c)))
        else:
            dist = float(np.linalg.norm(y - c))
        g = ev["value"][i] - dist
        return g if kind == 0 else -g
    # coordinate crossing
    g = y[ev["coord"][i]] - ev["value"][i]
    return g if ev["direction"][i] >= 0 else -g


def integrate(fh, t0, x0, T, rtol, atol, h_max=np.inf, max_steps=10_000_000,
              events=None, region_lo=None, region_hi=None, dense=True,
              checker=None):
    """Adaptive RK45 drive.

    Returns a dict with status, endpoint, optional dense samples (t, y, f per
    accepted step) and event records.  ``checker(t, y)`` is an internal hook
    (grid classification); a nonzero return stops integration with that code
    in ``check_code``.
    """
    d = fh.dim
    t = float(t0)
    y = np.asarray(x0, dtype=float).copy()
    if len(y) != d:
        raise ValueError("initial state dimension mismatch")
    f = fh.eval(t, y)
    t_end = t0 + T

    ts, ys, fs = [t], [y.copy()], [f.copy()]
    ev_t, ev_idx, ev_y = [], [], []
    g_prev = None
    status = STATUS_DONE
    check_code = 0

    if events is not None:
        ne = len(events["kind"])
        g_prev = np.empty(ne)
        for i in range(ne):
            g_prev[i] = _event_g(events, i, t, y)
            if g_prev[i] >= 0.0:
                ev_t.append(t)
                ev_idx.append(i)
                ev_y.append(y.copy())
                if events["terminal"][i]:
                    return dict(status=STATUS_EVENT, t=t, y=y, ts=np.array(ts),
                                ys=np.array(ys), fs=np.array(fs), ev_t=ev_t,
                                ev_idx=ev_idx, ev_y=ev_y, naccept=0, nfev=1,
                                check_code=0)

    # initial step size (Hairer's heuristic)
    sc = atol + rtol * np.abs(y)
    d0 = math.sqrt(float(np.mean((y / sc) ** 2)))
    d1 = math.sqrt(float(np.mean((f / sc) ** 2)))
    h = 1e-6 if (d0 < 1e-5 or d1 < 1e-5) else 0.01 * d0 / d1
    h = min(h, h_max, T)
    y1 = y + h * f
    f1 = fh.eval(t + h, y1)
    d2 = math.sqrt(float(np.mean(((f1 - f) / sc) ** 2))) / h
    if max(d1, d2) > 1e-15:
        h1 = (0.01 / max(d1, d2)) ** 0.2
        h = min(100 * h, h1, h_max, T)
    nfev = 2

    err_prev = 1.0
    naccept = 0
    nsteps = 0
    k = [None] * 7
    k[0] = f

    while t < t_end:
        if t_end - t <= 1e-12 * max(1.0, abs(t_end)):
            t = t_end
            break
        if nsteps >= max_steps:
            status = STATUS_MAXSTEPS
            break
        nsteps += 1
        h = min(h, t_end - t)
        if h < _H_MIN:
            status = STATUS_UNDERFLOW
            break

        for i in range(5):
            yi = y.copy()
            for j, a in enumerate(_A[i]):
                yi += h * a * k[j]
            k[i + 1] = fh.eval(t + _C[i] * h, yi)
        y5 = y + h * (_B[0] * k[0] + _B[2] * k[2] + _B[3] * k[3]
                      + _B[4] * k[4] + _B[5] * k[5])
        k[6] = fh.eval(t + h, y5)
        nfev += 6

        err_vec = h * (_E[0] * k[0] + _E[2] * k[2] + _E[3] * k[3]
                       + _E[4] * k[4] + _E[5] * k[5] + _E[6] * k[6])
        sc = atol + rtol * np.maximum(np.abs(y), np.abs(y5))
        err = math.sqrt(float(np.mean((err_vec / sc) ** 2)))

        if not err <= 1.0:  # reject; the inverted test also catches NaN
            if math.isfinite(err) and err > 1e-300:
                h *= max(0.2, 0.9 * err ** -0.2)
            else:
                h *= 0.2
            continue

        # accept
        t1 = t + h
        f1 = k[6]
        stop = False

        if events is not None:
            fired = []
            for i in range(len(events["kind"])):
                g1 = _event_g(events, i, t1, y5)
                if g_prev[i] < 0.0 <= g1:
                    lo, hi = 0.0, 1.0
                    for _ in range(60):
                        if (hi - lo) * h <= 1e-9:
                            break
                        mid = 0.5 * (lo + hi)
                        ym = _hermite(y, k[0], y5, f1, h, mid)
                        if _event_g(events, i, t + mid * h, ym) >= 0.0:
                            hi = mid
                        else:
                            lo = mid
                    tstar = t + hi * h
                    fired.append((tstar, i, _hermite(y, k[0], y5, f1, h, hi)))
                g_prev[i] = g1
            fired.sort(key=lambda r: r[0])
            for tstar, i, ystar in fired:
                ev_t.append(tstar)
                ev_idx.append(i)
                ev_y.append(ystar)
                if events["terminal"][i]:
                    t1, y5, f1 = tstar, ystar, fh.eval(tstar, ystar)
                    status = STATUS_EVENT
                    stop = True
                    break

        t, y = t1, y5
        k[0] = f1
        naccept += 1
        if dense:
            ts.append(t)
            ys.append(y.copy())
            fs.append(f1.copy())

        if not stop and region_lo is not None:
            if np.any(y < region_lo) or np.any(y > region_hi):
                status = STATUS_REGION
                stop = True
        if not stop and checker is not None:
            check_code = checker(t, y)
            if check_code:
                status = STATUS_EVENT
                stop = True
        if stop:
            break

        fac = 0.9 * err ** -0.14 * err_prev ** 0.08 if err > 1e-300 else 6.0
        h = h * min(6.0, max(0.2, fac))
        h = min(h, h_max)
        err_prev = max(err, 1e-10)

    return dict(status=status, t=t, y=y, ts=np.array(ts), ys=np.array(ys),
                fs=np.array(fs), ev_t=ev_t, ev_idx=ev_idx, ev_y=ev_y,
                naccept=naccept, nfev=nfev, check_code=check_code)


# ---------------------------------------------------------------------------
# planar grid drivers
# ---------------------------------------------------------------------------

def _poly_min_dist(px, py, xy, lo, hi):
    """Min distance from point to the polyline xy[lo:hi] (closed or open)."""
    ax = xy[lo:hi - 1, 0]
    ay = xy[lo:hi - 1, 1]
    bx = xy[lo + 1:hi, 0]
    by = xy[lo + 1:hi, 1]
    dx = bx - ax
    dy = by - ay
    ln = dx * dx + dy * dy
    tt = ((px - ax) * dx + (py - ay) * dy) / np.where(ln > 0.0, ln, 1.0)
    tt = np.clip(tt, 0.0, 1.0)
    ex = ax + tt * dx - px
    ey = ay + tt * dy - py
    return float(np.sqrt(np.min(ex * ex + ey * ey)))


class _CurvePack:
    """Packed polylines: concatenated vertices plus start offsets.

    Caches a bounding annulus per curve (centroid, min/max vertex radius) so
    a cheap lower bound can skip most exact distance evaluations.
    """

    def __init__(self, xy, starts):
        self.xy = np.asarray(xy, dtype=float).reshape(-1, 2)
        self.starts = np.asarray(starts, dtype=np.int64)
        n = len(self.starts) - 1
        self.cx = np.empty(n)
        self.cy = np.empty(n)
        self.rmin = np.empty(n)
        self.rmax = np.empty(n)
        for i in range(n):
            seg = self.xy[self.starts[i]:self.starts[i + 1]]
            c = seg.mean(axis=0)
            r = np.hypot(seg[:, 0] - c[0], seg[:, 1] - c[1])
            self.cx[i], self.cy[i] = c
            self.rmin[i], self.rmax[i] = float(r.min()), float(r.max())

    def lower_bound(self, i, px, py):
        rc = math.hypot(px - self.cx[i], py - self.cy[i])
        return max(0.0, self.rmin[i] - rc, rc - self.rmax[i])

    def min_dist(self, i, px, py):
        return _poly_min_dist(px, py, self.xy, int(self.starts[i]),
                              int(self.starts[i + 1]))


LABEL_TIMEOUT = -1


def classify_grid(fh, pts, sinks, target_idx, curves_xy, curves_starts,
                  ann_ib, ann_ob, ann_m, T_max, rtol, atol, h_max, threads=0):
    """Classify planar points against a sink/annulus inventory.

    Returns labels: 0 -> target sink; 1000+j -> other sink j; 2000+i ->
    attracting annulus i; -1 -> timeout.  Second array holds hit times.
    """
    pts = np.asarray(pts, dtype=float)
    n = len(pts)
    labels = np.full(n, LABEL_TIMEOUT, dtype=np.int64)
    times = np.full(n, np.nan)
    sinks = np.asarray(sinks, dtype=float).reshape(-1, 3)  # x, y, radius
    curves = _CurvePack(curves_xy, curves_starts)
    n_ann = len(ann_ib)

    for idx in range(n):
        result = {"code": None}

        def checker(t, y, result=result):
            for j in range(len(sinks)):
                if math.hypot(y[0] - sinks[j, 0], y[1] - sinks[j, 1]) < sinks[j, 2]:
                    result["code"] = 0 if j == target_idx else 1000 + j
                    return 1
            for i in range(n_ann):
                mi = ann_m[i]
                if (curves.lower_bound(int(ann_ib[i]), y[0], y[1]) <= mi
                        and curves.lower_bound(int(ann_ob[i]), y[0], y[1]) <= mi
                        and curves.min_dist(int(ann_ib[i]), y[0], y[1]) <= mi
                        and curves.min_dist(int(ann_ob[i]), y[0], y[1]) <= mi):
                    result["code"] = 2000 + i
                    return 1
            return 0

        if checker(0.0, pts[idx]):
            labels[idx] = result["code"]
            times[idx] = 0.0
            continue
        res = integrate(fh, 0.0, pts[idx], T_max, rtol, atol, h_max=h_max,
                        dense=False, checker=checker)
        if result["code"] is not None:
            labels[idx] = result["code"]
            times[idx] = res["t"]
    return labels, times


def brute_grid(fh, pts, sinks, snap, curves_xy, curves_starts, orbit_idx, T,
               rtol, atol, h_max, threads=0):
    """Fixed-horizon oracle: integrate for time T, label by endpoint.

    sinks: (ns, 2) positions; orbit_idx: curve indices of attracting orbits.
    Labels: 0..ns-1 sink; 1000+i orbit; -1 unknown.  Trajectories that come
    within snap/2 of a sink exit early; endpoint labels use radius snap.
    """
    pts = np.asarray(pts, dtype=float)
    sinks = np.asarray(sinks, dtype=float).reshape(-1, 2)
    curves = _CurvePack(curves_xy, curves_starts)
    n = len(pts)
    labels = np.full(n, -1, dtype=np.int64)
    deep = 0.5 * snap

    for idx in range(n):
        hit = {"j": -1}

        def checker(t, y, hit=hit):
            for j in range(len(sinks)):
                if math.hypot(y[0] - sinks[j, 0], y[1] - sinks[j, 1]) < deep:
                    hit["j"] = j
                    return 1
            return 0

        res = integrate(fh, 0.0, pts[idx], T, rtol, atol, h_max=h_max,
                        dense=False, checker=checker)
        if hit["j"] >= 0:
            labels[idx] = hit["j"]
            continue
        y = res["y"]
        best, best_j = np.inf, -1
        for j in range(len(sinks)):
            dj = math.hypot(y[0] - sinks[j, 0], y[1] - sinks[j, 1])
            if dj < best:
                best, best_j = dj, j
        if best < snap:
            labels[idx] = best_j
            continue
        for i, ci in enumerate(orbit_idx):
            if (curves.lower_bound(int(ci), y[0], y[1]) < snap
                    and curves.min_dist(int(ci), y[0], y[1]) < snap):
                labels[idx] = 1000 + i
                break
    return labels
