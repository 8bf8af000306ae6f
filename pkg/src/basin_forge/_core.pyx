# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled backend.

Same API as ``basin_forge._pykernels``; that module is the readable
reference for every branch here.  The hot paths (grid classification and
the brute-force oracle) release the GIL and fan out over OpenMP threads.
"""

import numpy as np

cimport openmp
from cython.parallel cimport prange
from libc.math cimport cos, exp, fabs, floor, fmax, fmin, hypot, isfinite, pow, sin, sqrt
from libc.stdlib cimport free, malloc, realloc

from ._tables import C_ZETA as _pyCZ
from ._tables import TABLE_N as _pyTABN
from ._tables import ZETA_DERIVS as _pyZD
from ._tables import ZETA_VALS as _pyZV

BACKEND = "c"
HAS_OPENMP = True

MOVE_S, MOVE_R, MOVE_L = 0, 1, 2
PERT_CONST, PERT_SIN, PERT_GAUSS, PERT_BUMP, PERT_TSIN = 0, 1, 2, 3, 4
OP_CONST, OP_X, OP_Y, OP_ADD, OP_SUB, OP_MUL, OP_DIV, OP_NEG = 0, 1, 2, 3, 4, 5, 6, 7
OP_SIN, OP_COS, OP_EXP, OP_POWI, OP_POW = 8, 9, 10, 11, 12
STATUS_DONE, STATUS_EVENT, STATUS_UNDERFLOW, STATUS_REGION, STATUS_MAXSTEPS = 0, 1, 2, 3, 4
LABEL_TIMEOUT = -1

cdef int ST_DONE = 0
cdef int ST_EVENT = 1
cdef int ST_UNDERFLOW = 2
cdef int ST_REGION = 3
cdef int ST_MAXSTEPS = 4

cdef double TWO_PI = 6.283185307179586476925287
cdef double INV_SQRT2 = 0.7071067811865475244008444
cdef double PHASE = 0.7853981633974483096156608
cdef double MAX_EXACT = 9007199254740992.0
cdef double H_MIN = 1e-14

# zeta lookup table, copied from _tables at import
cdef int TABN = 0
cdef double CZ = 0.0
cdef double ZVALS[4100]
cdef double ZDERS[4100]

TABN = int(_pyTABN)
CZ = float(_pyCZ)
if TABN + 1 > 4100:
    raise RuntimeError("zeta table larger than the compiled buffer")
cdef Py_ssize_t _ti
for _ti in range(TABN + 1):
    ZVALS[_ti] = _pyZV[_ti]
    ZDERS[_ti] = _pyZD[_ti]


# ---------------------------------------------------------------------------
# scalar smooth primitives
# ---------------------------------------------------------------------------

cdef double c_chi(double x) noexcept nogil:
    if not (x > 0.0 and x < 1.0):  # inverted so NaN lands in the zero branch
        return 0.0
    return exp(1.0 / (x * (x - 1.0)))


cdef double c_dchi(double x) noexcept nogil:
    cdef double u
    if not (x > 0.0 and x < 1.0):
        return 0.0
    u = x * (x - 1.0)
    return -exp(1.0 / u) * (2.0 * x - 1.0) / (u * u)


cdef double c_zeta(double x) noexcept nogil:
    cdef double u, s, h, v0, v1, d0, d1, s2, s3, val
    cdef int i
    if not x > 0.0:  # inverted so NaN lands in the zero branch
        return 0.0
    if x >= 1.0:
        return 1.0
    u = x * TABN
    i = <int>u
    if i >= TABN:
        return 1.0
    if i < 0:
        return 0.0
    s = u - i
    h = 1.0 / TABN
    v0 = ZVALS[i]
    v1 = ZVALS[i + 1]
    if v1 - v0 < 1e-12:
        # nearly flat interval: the cubic's rounding noise (~1 ulp) exceeds
        # the true slope, so use linear interpolation, which round-to-nearest
        # keeps monotone; accuracy is irrelevant at derivatives below 1e-8
        val = v0 + s * (v1 - v0)
    else:
        d0 = ZDERS[i] * h
        d1 = ZDERS[i + 1] * h
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


cdef double c_dzeta(double x) noexcept nogil:
    return CZ * c_chi(x)


cdef double c_zeta_ab(double a, double b, double x) noexcept nogil:
    return c_zeta((x - a) / (b - a))


cdef double c_dzeta_ab(double a, double b, double x) noexcept nogil:
    return CZ * c_chi((x - a) / (b - a)) / (b - a)


cdef double c_phi(double t) noexcept nogil:
    return c_zeta(sin(TWO_PI * t - PHASE) - INV_SQRT2)


cdef double c_dphi(double t) noexcept nogil:
    cdef double s = sin(TWO_PI * t - PHASE) - INV_SQRT2
    if s <= 0.0 or s >= 1.0:
        return 0.0
    return CZ * c_chi(s) * cos(TWO_PI * t - PHASE) * TWO_PI


cdef double c_phi_bar(double t, double v3, double m) noexcept nogil:
    return c_phi(t) + c_zeta_ab(m - 0.25, m - 0.1875, v3)


cdef double c_smooth_round(double y) noexcept nogil:
    cdef double k = floor(y)
    cdef double f = y - k
    if f <= 0.25:
        return k
    if f >= 0.75:
        return k + 1.0
    return k + c_zeta(2.0 * f - 0.5)


cdef double c_d_smooth_round(double y) noexcept nogil:
    cdef double f = y - floor(y)
    if f <= 0.25 or f >= 0.75:
        return 0.0
    return 2.0 * CZ * c_chi(2.0 * f - 0.5)


cdef bint c_is_integral(double y) noexcept nogil:
    return y == floor(y) and fabs(y) < MAX_EXACT


cdef void c_kernels(double y, int b, double* out) noexcept nogil:
    cdef double cs[16]
    cdef double sn[16]
    cdef double acc, w
    cdef int a, k
    cdef long long kk
    if c_is_integral(y):
        for a in range(b):
            out[a] = 0.0
        kk = (<long long>y) % b
        if kk < 0:
            kk += b
        out[<int>kk] = 1.0
        return
    for k in range(b):
        cs[k] = cos(TWO_PI * k * y / b)
        sn[k] = sin(TWO_PI * k * y / b)
    for a in range(b):
        acc = 0.0
        for k in range(b):
            w = TWO_PI * k * a / b
            acc += cs[k] * cos(w) + sn[k] * sin(w)
        out[a] = acc / b


cdef void c_kernel_derivs(double y, int b, double* out) noexcept nogil:
    cdef double acc
    cdef int a, k
    for a in range(b):
        acc = 0.0
        for k in range(b):
            acc -= sin(TWO_PI * k * (y - a) / b) * (TWO_PI * k / b)
        out[a] = acc / b


cdef double c_smooth_mod(double x, int b) noexcept nogil:
    cdef double y = c_smooth_round(x)
    cdef double ks[16]
    cdef double acc
    cdef int j
    cdef long long kk
    if c_is_integral(y):
        kk = (<long long>y) % b
        if kk < 0:
            kk += b
        return <double>kk
    c_kernels(y, b, ks)
    acc = 0.0
    for j in range(b):
        acc += j * ks[j]
    return acc


cdef double c_d_smooth_mod(double x, int b) noexcept nogil:
    cdef double dr = c_d_smooth_round(x)
    cdef double kd[16]
    cdef double acc, y
    cdef int j
    if dr == 0.0:
        return 0.0
    y = c_smooth_round(x)
    c_kernel_derivs(y, b, kd)
    acc = 0.0
    for j in range(b):
        acc += j * kd[j]
    return acc * dr


cdef double c_smooth_div(double x, int b) noexcept nogil:
    return (c_smooth_round(x) - c_smooth_mod(x, b)) / b


cdef double c_d_smooth_div(double x, int b) noexcept nogil:
    return (c_d_smooth_round(x) - c_d_smooth_mod(x, b)) / b


def chi(double x):
    return c_chi(x)


def d_chi(double x):
    return c_dchi(x)


def zeta(double x):
    return c_zeta(x)


def d_zeta(double x):
    return c_dzeta(x)


def zeta_ab(double a, double b, double x):
    return c_zeta_ab(a, b, x)


def d_zeta_ab(double a, double b, double x):
    return c_dzeta_ab(a, b, x)


def phi(double t):
    return c_phi(t)


def d_phi(double t):
    return c_dphi(t)


def phi_bar(double t, double v3, double m):
    return c_phi_bar(t, v3, m)


def d_phi_bar_dt(double t, double v3, double m):
    return c_dphi(t)


def d_phi_bar_dv3(double t, double v3, double m):
    return c_dzeta_ab(m - 0.25, m - 0.1875, v3)


def smooth_round(double y):
    return c_smooth_round(y)


def d_smooth_round(double y):
    return c_d_smooth_round(y)


def smooth_mod(double x, int b):
    return c_smooth_mod(x, b)


def d_smooth_mod(double x, int b):
    return c_d_smooth_mod(x, b)


def smooth_div(double x, int b):
    return c_smooth_div(x, b)


def d_smooth_div(double x, int b):
    return c_d_smooth_div(x, b)


# ---------------------------------------------------------------------------
# robust map
# ---------------------------------------------------------------------------

cdef class Machine:
    cdef public int m
    cdef public int b
    cdef object _refs
    cdef long long* tw
    cdef long long* tmv
    cdef long long* tnx

    def __init__(self, m, b, write, move, nxt):
        cdef long long[::1] w, mv, nx
        self.m = int(m)
        self.b = int(b)
        if self.b > 16:
            raise ValueError("alphabet size capped at 16 in the compiled backend")
        wa = np.ascontiguousarray(write, dtype=np.int64)
        ma = np.ascontiguousarray(move, dtype=np.int64)
        na = np.ascontiguousarray(nxt, dtype=np.int64)
        self._refs = (wa, ma, na)
        w = wa
        mv = ma
        nx = na
        self.tw = &w[0]
        self.tmv = &mv[0]
        self.tnx = &nx[0]


def make_machine(m, b, write, move, nxt):
    return Machine(m, b, write, move, nxt)


cdef void c_rule_apply(int m, int b, long long* tw, long long* tmv, long long* tnx,
                       double y1, double y2, double y3, double* out) noexcept nogil:
    cdef long long w1, w2, a, idx, q
    cdef double ks[16]
    cdef bint have_k = False
    cdef double lq, ka, g0, g1, g2, aw, qn, t0, t1
    cdef int qq, aa, j, mv
    if (c_is_integral(y1) and c_is_integral(y2) and c_is_integral(y3)
            and y1 >= 0.0 and y2 >= 0.0 and 1.0 <= y3 and y3 <= m):
        w1 = <long long>y1
        w2 = <long long>y2
        q = <long long>y3
        if q == m:
            out[0] = y1
            out[1] = y2
            out[2] = y3
            return
        a = w2 % b
        idx = (q - 1) * b + a
        mv = <int>tmv[idx]
        if mv == 0:
            w2 = w2 - a + tw[idx]
        elif mv == 1:
            w1 = b * w1 + tw[idx]
            w2 = (w2 - a) / b
        else:
            w2 = b * (w2 - a + tw[idx]) + (w1 % b)
            w1 = w1 / b
        out[0] = <double>w1
        out[1] = <double>w2
        out[2] = <double>tnx[idx]
        return

    out[0] = 0.0
    out[1] = 0.0
    out[2] = 0.0
    for qq in range(1, m + 1):
        lq = 1.0
        for j in range(1, m + 1):
            if j != qq:
                lq *= (y3 - j) / <double>(qq - j)
        if lq == 0.0:
            continue
        if qq == m:
            out[0] += lq * y1
            out[1] += lq * y2
            out[2] += lq * m
            continue
        if not have_k:
            c_kernels(y2, b, ks)
            have_k = True
        g0 = 0.0
        g1 = 0.0
        g2 = 0.0
        for aa in range(b):
            ka = ks[aa]
            if ka == 0.0:
                continue
            idx = (qq - 1) * b + aa
            aw = <double>tw[idx]
            mv = <int>tmv[idx]
            qn = <double>tnx[idx]
            if mv == 0:
                t0 = y1
                t1 = y2 - aa + aw
            elif mv == 1:
                t0 = b * y1 + aw
                t1 = (y2 - aa) / b
            else:
                t0 = c_smooth_div(y1, b)
                t1 = b * (y2 - aa + aw) + c_smooth_mod(y1, b)
            g0 += ka * t0
            g1 += ka * t1
            g2 += ka * qn
        out[0] += lq * g0
        out[1] += lq * g1
        out[2] += lq * g2


cdef void c_rule_jac(int m, int b, long long* tw, long long* tmv, long long* tnx,
                     double y1, double y2, double y3, double* jac) noexcept nogil:
    # jac is 3x3 row-major, zeroed by the caller
    cdef double ks[16]
    cdef double kd[16]
    cdef double dsd = c_d_smooth_div(y1, b)
    cdef double dsm = c_d_smooth_mod(y1, b)
    cdef double sd = c_smooth_div(y1, b)
    cdef double sm = c_smooth_mod(y1, b)
    cdef double lq, dlq, term, aw, qn
    cdef double g[3]
    cdef double dg1[3]
    cdef double dg2[3]
    cdef double t[3]
    cdef double t1v[3]
    cdef double t2v[3]
    cdef int qq, aa, i, j, mv
    c_kernels(y2, b, ks)
    c_kernel_derivs(y2, b, kd)
    for qq in range(1, m + 1):
        lq = 1.0
        for j in range(1, m + 1):
            if j != qq:
                lq *= (y3 - j) / <double>(qq - j)
        dlq = 0.0
        for i in range(1, m + 1):
            if i == qq:
                continue
            term = 1.0 / <double>(qq - i)
            for j in range(1, m + 1):
                if j != qq and j != i:
                    term *= (y3 - j) / <double>(qq - j)
            dlq += term
        if qq == m:
            jac[0] += lq
            jac[4] += lq
            jac[2] += dlq * y1
            jac[5] += dlq * y2
            jac[8] += dlq * m
            continue
        for i in range(3):
            g[i] = 0.0
            dg1[i] = 0.0
            dg2[i] = 0.0
        for aa in range(b):
            idx = (qq - 1) * b + aa
            aw = <double>tw[idx]
            mv = <int>tmv[idx]
            qn = <double>tnx[idx]
            if mv == 0:
                t[0] = y1
                t[1] = y2 - aa + aw
                t[2] = qn
                t1v[0] = 1.0
                t1v[1] = 0.0
                t1v[2] = 0.0
                t2v[0] = 0.0
                t2v[1] = 1.0
                t2v[2] = 0.0
            elif mv == 1:
                t[0] = b * y1 + aw
                t[1] = (y2 - aa) / b
                t[2] = qn
                t1v[0] = <double>b
                t1v[1] = 0.0
                t1v[2] = 0.0
                t2v[0] = 0.0
                t2v[1] = 1.0 / b
                t2v[2] = 0.0
            else:
                t[0] = sd
                t[1] = b * (y2 - aa + aw) + sm
                t[2] = qn
                t1v[0] = dsd
                t1v[1] = dsm
                t1v[2] = 0.0
                t2v[0] = 0.0
                t2v[1] = <double>b
                t2v[2] = 0.0
            for i in range(3):
                g[i] += ks[aa] * t[i]
                dg1[i] += ks[aa] * t1v[i]
                dg2[i] += kd[aa] * t[i] + ks[aa] * t2v[i]
        for i in range(3):
            jac[3 * i + 0] += lq * dg1[i]
            jac[3 * i + 1] += lq * dg2[i]
            jac[3 * i + 2] += dlq * g[i]


cdef void c_map_eval(int m, int b, long long* tw, long long* tmv, long long* tnx,
                     double lam, double* x, double* out) noexcept nogil:
    cdef double r0 = c_smooth_round(x[0])
    cdef double r1 = c_smooth_round(x[1])
    cdef double r2 = c_smooth_round(x[2])
    cdef double F[3]
    c_rule_apply(m, b, tw, tmv, tnx, r0, r1, r2, F)
    out[0] = F[0] + lam * (x[0] - r0)
    out[1] = F[1] + lam * (x[1] - r1)
    out[2] = F[2] + lam * (x[2] - r2)


cdef void c_map_jacf(int m, int b, long long* tw, long long* tmv, long long* tnx,
                     double lam, double* x, double* jac) noexcept nogil:
    cdef double dr[3]
    cdef double r[3]
    cdef double df[9]
    cdef int i, j
    dr[0] = c_d_smooth_round(x[0])
    dr[1] = c_d_smooth_round(x[1])
    dr[2] = c_d_smooth_round(x[2])
    if dr[0] == 0.0 and dr[1] == 0.0 and dr[2] == 0.0:
        for i in range(9):
            jac[i] = 0.0
        jac[0] = lam
        jac[4] = lam
        jac[8] = lam
        return
    r[0] = c_smooth_round(x[0])
    r[1] = c_smooth_round(x[1])
    r[2] = c_smooth_round(x[2])
    for i in range(9):
        df[i] = 0.0
    c_rule_jac(m, b, tw, tmv, tnx, r[0], r[1], r[2], df)
    for i in range(3):
        for j in range(3):
            jac[3 * i + j] = df[3 * i + j] * dr[j]
            if i == j:
                jac[3 * i + j] += lam * (1.0 - dr[j])


def map_eval(Machine mh, double lam, x):
    cdef double xi[3]
    cdef double out[3]
    cdef double[::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    xi[0] = xv[0]
    xi[1] = xv[1]
    xi[2] = xv[2]
    c_map_eval(mh.m, mh.b, mh.tw, mh.tmv, mh.tnx, lam, xi, out)
    return np.array([out[0], out[1], out[2]])


def map_jac(Machine mh, double lam, x):
    cdef double xi[3]
    cdef double out[9]
    cdef double[::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    xi[0] = xv[0]
    xi[1] = xv[1]
    xi[2] = xv[2]
    c_map_jacf(mh.m, mh.b, mh.tw, mh.tmv, mh.tnx, lam, xi, out)
    res = np.empty((3, 3))
    cdef double[:, ::1] rv = res
    cdef int i, j
    for i in range(3):
        for j in range(3):
            rv[i, j] = out[3 * i + j]
    return res


# ---------------------------------------------------------------------------
# perturbations
# ---------------------------------------------------------------------------

ctypedef struct CPert:
    int kind
    double alpha
    double rho
    double omega
    double* vec
    long long* jidx
    double* phase
    double* center


cdef class Perturbation:
    cdef CPert p
    cdef public int kind
    cdef object _refs

    def __init__(self, kind, alpha=0.0, vec=None, jidx=None, phase=None,
                 center=None, rho=1.0, omega=1.0):
        cdef double[::1] v, ph, ce
        cdef long long[::1] ji
        self.kind = int(kind)
        self.p.kind = int(kind)
        self.p.alpha = float(alpha)
        self.p.rho = float(rho)
        self.p.omega = float(omega)
        self.p.vec = NULL
        self.p.jidx = NULL
        self.p.phase = NULL
        self.p.center = NULL
        refs = []
        if vec is not None:
            va = np.ascontiguousarray(vec, dtype=np.float64)
            refs.append(va)
            v = va
            self.p.vec = &v[0]
        if jidx is not None:
            ja = np.ascontiguousarray(jidx, dtype=np.int64)
            refs.append(ja)
            ji = ja
            self.p.jidx = &ji[0]
        if phase is not None:
            pa = np.ascontiguousarray(phase, dtype=np.float64)
            refs.append(pa)
            ph = pa
            self.p.phase = &ph[0]
        if center is not None:
            ca = np.ascontiguousarray(center, dtype=np.float64)
            refs.append(ca)
            ce = ca
            self.p.center = &ce[0]
        self._refs = refs


def make_perturbation(kind, **kw):
    return Perturbation(kind, **kw)


def pert_eval(Perturbation p, x, double t=0.0):
    cdef double[::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef int d = xv.shape[0]
    out = np.empty(d)
    cdef double[::1] ov = out
    c_pert_eval(&p.p, t, &xv[0], d, &ov[0])
    return out


def pert_jac(Perturbation p, x, double t=0.0):
    cdef double[::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef int d = xv.shape[0]
    out = np.zeros((d, d))
    cdef double[:, ::1] ov = out
    c_pert_jac(&p.p, &xv[0], d, &ov[0, 0])
    return out


cdef void c_pert_eval(CPert* p, double t, double* x, int d, double* out) noexcept nogil:
    cdef int i
    cdef double r2, s, e, dx
    if p.kind == 0:
        for i in range(d):
            out[i] = p.vec[i]
    elif p.kind == 1:
        for i in range(d):
            out[i] = p.vec[i] * sin(x[p.jidx[i]] + p.phase[i])
    elif p.kind == 2:
        r2 = 0.0
        for i in range(d):
            r2 += x[i] * x[i]
        e = exp(-p.alpha * (1.0 + r2))
        for i in range(d):
            out[i] = p.vec[i] * e
    elif p.kind == 3:
        s = 0.0
        for i in range(d):
            dx = x[i] - p.center[i]
            s += dx * dx
        s /= p.rho * p.rho
        if s >= 1.0:
            for i in range(d):
                out[i] = 0.0
        else:
            e = exp(1.0 - 1.0 / (1.0 - s))
            for i in range(d):
                out[i] = p.vec[i] * e
    else:
        for i in range(d):
            out[i] = p.vec[i] * sin(p.omega * t + p.phase[i])


cdef void c_pert_jac(CPert* p, double* x, int d, double* jac) noexcept nogil:
    cdef int i, j
    cdef double r2, s, e, g, dx
    for i in range(d * d):
        jac[i] = 0.0
    if p.kind == 1:
        for i in range(d):
            jac[d * i + <int>p.jidx[i]] = p.vec[i] * cos(x[p.jidx[i]] + p.phase[i])
    elif p.kind == 2:
        r2 = 0.0
        for i in range(d):
            r2 += x[i] * x[i]
        e = exp(-p.alpha * (1.0 + r2))
        for i in range(d):
            for j in range(d):
                jac[d * i + j] = p.vec[i] * e * (-2.0 * p.alpha) * x[j]
    elif p.kind == 3:
        s = 0.0
        for i in range(d):
            dx = x[i] - p.center[i]
            s += dx * dx
        s /= p.rho * p.rho
        if s < 1.0:
            g = exp(1.0 - 1.0 / (1.0 - s)) * (-1.0 / ((1.0 - s) * (1.0 - s)))
            for i in range(d):
                for j in range(d):
                    jac[d * i + j] = (p.vec[i] * g * 2.0 * (x[j] - p.center[j])
                                      / (p.rho * p.rho))


def map_iterate(Machine mh, double lam, x0, long n, Perturbation pert=None):
    out = np.empty((n + 1, 3))
    cdef double[:, ::1] ov = out
    cdef double y[3]
    cdef double nx[3]
    cdef double dp[3]
    cdef double[::1] xv = np.ascontiguousarray(x0, dtype=np.float64)
    cdef CPert* pp = NULL
    cdef long j, jj
    cdef int i
    cdef double mx
    if pert is not None:
        pp = &pert.p
    for i in range(3):
        y[i] = xv[i]
        ov[0, i] = y[i]
    for j in range(1, n + 1):
        c_map_eval(mh.m, mh.b, mh.tw, mh.tmv, mh.tnx, lam, y, nx)
        if pp != NULL:
            # g(x) = f(x) + p(x): perturbation sampled at the pre-step point
            c_pert_eval(pp, <double>(j - 1), y, 3, dp)
            for i in range(3):
                nx[i] += dp[i]
        mx = 0.0
        for i in range(3):
            y[i] = nx[i]
            ov[j, i] = y[i]
            if fabs(y[i]) > mx:
                mx = fabs(y[i])
        if mx > 1e12:
            for jj in range(j + 1, n + 1):
                for i in range(3):
                    ov[jj, i] = y[i]
            break
    return out


# ---------------------------------------------------------------------------
# fields
# ---------------------------------------------------------------------------

ctypedef struct CField:
    int kind            # 0 targeting 1 pair 2 six 3 full 4 expr 5 grid 6 perturbed 7 scaled
    int dim
    double c
    double lam
    double factor
    double target
    int m
    int b
    long long* tw
    long long* tmv
    long long* tnx
    int* eops[6]
    double* eargs[6]
    int eplen[6]
    double* consts
    double gx0
    double gy0
    double ghx
    double ghy
    int gnx
    int gny
    double* gcoef
    CPert pert
    CField* base


cdef double c_ftilde(double y, int b, double lam) noexcept nogil:
    return c_smooth_div(y, b) + lam * (y - c_smooth_round(y))


cdef double c_d_ftilde(double y, int b, double lam) noexcept nogil:
    return c_d_smooth_div(y, b) + lam * (1.0 - c_d_smooth_round(y))


cdef double c_powi(double x, int n) noexcept nogil:
    cdef double acc = 1.0
    cdef double base = x
    cdef int e = n
    if e < 0:
        base = 1.0 / x
        e = -e
    while e > 0:
        if e & 1:
            acc *= base
        base *= base
        e >>= 1
    return acc


cdef double c_run_prog(int* ops, double* args, int n, double* consts,
                       double x, double y) noexcept nogil:
    cdef double stack[64]
    cdef int sp = 0
    cdef int i, op
    cdef double a, bb
    for i in range(n):
        op = ops[i]
        if op == 0:
            stack[sp] = consts[<int>args[i]]
            sp += 1
        elif op == 1:
            stack[sp] = x
            sp += 1
        elif op == 2:
            stack[sp] = y
            sp += 1
        elif op == 7:
            stack[sp - 1] = -stack[sp - 1]
        elif op == 8:
            stack[sp - 1] = sin(stack[sp - 1])
        elif op == 9:
            stack[sp - 1] = cos(stack[sp - 1])
        elif op == 10:
            a = stack[sp - 1]
            if a > 700.0:
                a = 700.0
            stack[sp - 1] = exp(a)
        elif op == 11:
            stack[sp - 1] = c_powi(stack[sp - 1], <int>args[i])
        elif op == 12:
            sp -= 1
            stack[sp - 1] = pow(stack[sp - 1], stack[sp])
        else:
            sp -= 1
            bb = stack[sp]
            a = stack[sp - 1]
            if op == 3:
                stack[sp - 1] = a + bb
            elif op == 4:
                stack[sp - 1] = a - bb
            elif op == 5:
                stack[sp - 1] = a * bb
            else:
                stack[sp - 1] = a / bb
    return stack[0]


cdef void c_grid_locate(CField* fd, double x, double y, int* io, int* jo,
                        double* uo, double* vo) noexcept nogil:
    cdef double u = (x - fd.gx0) / fd.ghx
    cdef double v = (y - fd.gy0) / fd.ghy
    cdef int i, j
    # clamp before the int cast; non-finite u, v would be undefined behavior
    if not u > 0.0:
        u = 0.0
    elif u > fd.gnx - 1.0:
        u = fd.gnx - 1.0
    if not v > 0.0:
        v = 0.0
    elif v > fd.gny - 1.0:
        v = fd.gny - 1.0
    i = <int>floor(u)
    j = <int>floor(v)
    if i < 0:
        i = 0
    if i > fd.gnx - 2:
        i = fd.gnx - 2
    if j < 0:
        j = 0
    if j > fd.gny - 2:
        j = fd.gny - 2
    io[0] = i
    jo[0] = j
    uo[0] = u - i
    vo[0] = v - j


cdef void c_field_eval(CField* fd, double t, double* x, double* out) noexcept nogil:
    cdef double d0, p1, p2, e, rz2, z, m, acc
    cdef double rv[3]
    cdef double tgt[3]
    cdef double tmp[8]
    cdef double up[4]
    cdef double vp[4]
    cdef int i, k, gi, gj, a, bb
    cdef double u, v
    cdef long base

    if fd.kind == 0:
        d0 = fd.target - x[0]
        out[0] = fd.c * d0 * d0 * d0 * c_phi(t)
    elif fd.kind == 1:
        rz2 = c_smooth_round(x[1])
        d0 = c_ftilde(rz2, fd.b, fd.lam) - x[0]
        out[0] = fd.c * d0 * d0 * d0 * c_phi(t)
        d0 = c_smooth_round(x[0]) - x[1]
        out[1] = fd.c * d0 * d0 * d0 * c_phi(t + 0.5)
    elif fd.kind == 2:
        for i in range(3):
            rv[i] = c_smooth_round(x[3 + i])
        c_map_eval(fd.m, fd.b, fd.tw, fd.tmv, fd.tnx, fd.lam, rv, tgt)
        p1 = c_phi(t)
        p2 = c_phi(t + 0.5)
        for i in range(3):
            d0 = tgt[i] - x[i]
            out[i] = fd.c * d0 * d0 * d0 * p1
            d0 = c_smooth_round(x[i]) - x[3 + i]
            out[3 + i] = fd.c * d0 * d0 * d0 * p2
    elif fd.kind == 3:
        m = <double>fd.m
        z = x[6]
        for i in range(3):
            rv[i] = c_smooth_round(x[3 + i])
        c_map_eval(fd.m, fd.b, fd.tw, fd.tmv, fd.tnx, fd.lam, rv, tgt)
        p1 = c_phi_bar(z, x[5], m)
        p2 = c_phi_bar(z + 0.5, x[5], m)
        # c scales the cubic only: the linearization at the halting point is
        # exactly -identity regardless of c
        for i in range(3):
            d0 = tgt[i] - x[i]
            out[i] = (fd.c * d0 * d0 * d0 + d0) * p1
            d0 = c_smooth_round(x[i]) - x[3 + i]
            out[3 + i] = (fd.c * d0 * d0 * d0 + d0) * p2
        out[6] = 1.0 - c_zeta_ab(m - 0.1875, m - 0.125, x[5]) * (z + 1.0)
    elif fd.kind == 4:
        out[0] = c_run_prog(fd.eops[0], fd.eargs[0], fd.eplen[0], fd.consts, x[0], x[1])
        out[1] = c_run_prog(fd.eops[1], fd.eargs[1], fd.eplen[1], fd.consts, x[0], x[1])
    elif fd.kind == 5:
        c_grid_locate(fd, x[0], x[1], &gi, &gj, &u, &v)
        up[0] = 1.0
        up[1] = u
        up[2] = u * u
        up[3] = up[2] * u
        vp[0] = 1.0
        vp[1] = v
        vp[2] = v * v
        vp[3] = vp[2] * v
        for k in range(2):
            base = ((<long>k * (fd.gnx - 1) + gi) * (fd.gny - 1) + gj) * 16
            acc = 0.0
            for a in range(4):
                for bb in range(4):
                    acc += up[a] * fd.gcoef[base + 4 * a + bb] * vp[bb]
            out[k] = acc
    elif fd.kind == 6:
        c_field_eval(fd.base, t, x, out)
        c_pert_eval(&fd.pert, t, x, fd.dim, tmp)
        for i in range(fd.dim):
            out[i] += tmp[i]
    else:
        c_field_eval(fd.base, t, x, out)
        for i in range(fd.dim):
            out[i] *= fd.factor


cdef void c_field_jac(CField* fd, double t, double* x, double* jac) noexcept nogil:
    cdef double d0, p1, p2, s, se, rz2, z, m, acc, cub
    cdef double rv[3]
    cdef double drv[3]
    cdef double tgt[3]
    cdef double jf[9]
    cdef double tmp[64]
    cdef double up[4]
    cdef double vp[4]
    cdef double du[4]
    cdef double dv[4]
    cdef double dp1z, dp2z, dpv3
    cdef int i, j, k, gi, gj, a, bb, d
    cdef double u, v
    cdef long base

    d = fd.dim
    if fd.kind == 0:
        d0 = fd.target - x[0]
        jac[0] = -3.0 * fd.c * d0 * d0 * c_phi(t)
    elif fd.kind == 1:
        p1 = c_phi(t)
        p2 = c_phi(t + 0.5)
        rz2 = c_smooth_round(x[1])
        d0 = c_ftilde(rz2, fd.b, fd.lam) - x[0]
        jac[0] = -3.0 * fd.c * d0 * d0 * p1
        jac[1] = (3.0 * fd.c * d0 * d0 * p1
                  * c_d_ftilde(rz2, fd.b, fd.lam) * c_d_smooth_round(x[1]))
        d0 = c_smooth_round(x[0]) - x[1]
        jac[2] = 3.0 * fd.c * d0 * d0 * p2 * c_d_smooth_round(x[0])
        jac[3] = -3.0 * fd.c * d0 * d0 * p2
    elif fd.kind == 2:
        for i in range(36):
            jac[i] = 0.0
        for i in range(3):
            rv[i] = c_smooth_round(x[3 + i])
            drv[i] = c_d_smooth_round(x[3 + i])
        c_map_eval(fd.m, fd.b, fd.tw, fd.tmv, fd.tnx, fd.lam, rv, tgt)
        c_map_jacf(fd.m, fd.b, fd.tw, fd.tmv, fd.tnx, fd.lam, rv, jf)
        p1 = c_phi(t)
        p2 = c_phi(t + 0.5)
        for i in range(3):
            d0 = tgt[i] - x[i]
            s = 3.0 * fd.c * d0 * d0 * p1
            jac[6 * i + i] = -s
            for k in range(3):
                jac[6 * i + 3 + k] = s * jf[3 * i + k] * drv[k]
            d0 = c_smooth_round(x[i]) - x[3 + i]
            se = 3.0 * fd.c * d0 * d0 * p2
            jac[6 * (3 + i) + i] = se * c_d_smooth_round(x[i])
            jac[6 * (3 + i) + 3 + i] = -se
    elif fd.kind == 3:
        for i in range(49):
            jac[i] = 0.0
        m = <double>fd.m
        z = x[6]
        for i in range(3):
            rv[i] = c_smooth_round(x[3 + i])
            drv[i] = c_d_smooth_round(x[3 + i])
        c_map_eval(fd.m, fd.b, fd.tw, fd.tmv, fd.tnx, fd.lam, rv, tgt)
        c_map_jacf(fd.m, fd.b, fd.tw, fd.tmv, fd.tnx, fd.lam, rv, jf)
        p1 = c_phi_bar(z, x[5], m)
        p2 = c_phi_bar(z + 0.5, x[5], m)
        dp1z = c_dphi(z)
        dp2z = c_dphi(z + 0.5)
        dpv3 = c_dzeta_ab(m - 0.25, m - 0.1875, x[5])
        for i in range(3):
            d0 = tgt[i] - x[i]
            cub = fd.c * d0 * d0 * d0 + d0
            s = (3.0 * fd.c * d0 * d0 + 1.0) * p1
            jac[7 * i + i] = -s
            for k in range(3):
                jac[7 * i + 3 + k] = s * jf[3 * i + k] * drv[k]
            jac[7 * i + 5] += cub * dpv3
            jac[7 * i + 6] = cub * dp1z
            d0 = c_smooth_round(x[i]) - x[3 + i]
            cub = fd.c * d0 * d0 * d0 + d0
            se = (3.0 * fd.c * d0 * d0 + 1.0) * p2
            jac[7 * (3 + i) + i] = se * c_d_smooth_round(x[i])
            jac[7 * (3 + i) + 3 + i] = -se
            jac[7 * (3 + i) + 5] += cub * dpv3
            jac[7 * (3 + i) + 6] = cub * dp2z
        jac[7 * 6 + 5] = -c_dzeta_ab(m - 0.1875, m - 0.125, x[5]) * (z + 1.0)
        jac[7 * 6 + 6] = -c_zeta_ab(m - 0.1875, m - 0.125, x[5])
    elif fd.kind == 4:
        jac[0] = c_run_prog(fd.eops[2], fd.eargs[2], fd.eplen[2], fd.consts, x[0], x[1])
        jac[1] = c_run_prog(fd.eops[3], fd.eargs[3], fd.eplen[3], fd.consts, x[0], x[1])
        jac[2] = c_run_prog(fd.eops[4], fd.eargs[4], fd.eplen[4], fd.consts, x[0], x[1])
        jac[3] = c_run_prog(fd.eops[5], fd.eargs[5], fd.eplen[5], fd.consts, x[0], x[1])
    elif fd.kind == 5:
        c_grid_locate(fd, x[0], x[1], &gi, &gj, &u, &v)
        up[0] = 1.0
        up[1] = u
        up[2] = u * u
        up[3] = up[2] * u
        vp[0] = 1.0
        vp[1] = v
        vp[2] = v * v
        vp[3] = vp[2] * v
        du[0] = 0.0
        du[1] = 1.0 / fd.ghx
        du[2] = 2.0 * u / fd.ghx
        du[3] = 3.0 * u * u / fd.ghx
        dv[0] = 0.0
        dv[1] = 1.0 / fd.ghy
        dv[2] = 2.0 * v / fd.ghy
        dv[3] = 3.0 * v * v / fd.ghy
        for k in range(2):
            base = ((<long>k * (fd.gnx - 1) + gi) * (fd.gny - 1) + gj) * 16
            acc = 0.0
            for a in range(4):
                for bb in range(4):
                    acc += du[a] * fd.gcoef[base + 4 * a + bb] * vp[bb]
            jac[2 * k] = acc
            acc = 0.0
            for a in range(4):
                for bb in range(4):
                    acc += up[a] * fd.gcoef[base + 4 * a + bb] * dv[bb]
            jac[2 * k + 1] = acc
    elif fd.kind == 6:
        c_field_jac(fd.base, t, x, jac)
        c_pert_jac(&fd.pert, x, d, tmp)
        for i in range(d * d):
            jac[i] += tmp[i]
    else:
        c_field_jac(fd.base, t, x, jac)
        for i in range(d * d):
            jac[i] *= fd.factor


cdef class Field:
    cdef CField fd
    cdef object refs
    cdef Field base_ref

    property dim:
        def __get__(self):
            return self.fd.dim


_FIELD_KINDS = {"targeting": 0, "tm_pair": 1, "tm_six": 2, "tm_full": 3,
                "expr": 4, "grid": 5, "perturbed": 6, "scaled": 7}


def make_field(kind, **kw):
    cdef Field f = Field()
    cdef Field bf
    cdef Machine mh
    cdef Perturbation pt
    cdef int[::1] ov
    cdef double[::1] av, cv, gv
    cdef int k
    f.refs = []
    f.base_ref = None
    f.fd.base = NULL
    if kind not in _FIELD_KINDS:
        raise ValueError(f"unknown field kind {kind!r}")
    f.fd.kind = _FIELD_KINDS[kind]
    if kind == "targeting":
        f.fd.dim = 1
        f.fd.target = float(kw["target"])
        f.fd.c = float(kw["c"])
    elif kind in ("tm_pair", "tm_six", "tm_full"):
        mh = <Machine?>kw["machine"]
        f.refs.append(mh)
        f.fd.m = mh.m
        f.fd.b = mh.b
        f.fd.tw = mh.tw
        f.fd.tmv = mh.tmv
        f.fd.tnx = mh.tnx
        f.fd.c = float(kw["c"])
        f.fd.lam = float(kw["lam"])
        f.fd.dim = 2 if kind == "tm_pair" else (6 if kind == "tm_six" else 7)
    elif kind == "expr":
        progs = list(kw["progs"]) + list(kw["jac_progs"])
        if len(progs) != 6:
            raise ValueError("expr fields need 2 value and 4 jacobian programs")
        f.fd.dim = 2
        for k in range(6):
            oa = np.ascontiguousarray(progs[k][0], dtype=np.int32)
            aa = np.ascontiguousarray(progs[k][1], dtype=np.float64)
            f.refs.append(oa)
            f.refs.append(aa)
            ov = oa
            av = aa
            f.fd.eops[k] = &ov[0]
            f.fd.eargs[k] = &av[0]
            f.fd.eplen[k] = len(oa)
        ca = np.ascontiguousarray(kw["consts"], dtype=np.float64)
        if len(ca) == 0:
            ca = np.zeros(1)
        f.refs.append(ca)
        cv = ca
        f.fd.consts = &cv[0]
    elif kind == "grid":
        f.fd.dim = 2
        f.fd.gx0 = float(kw["x0"])
        f.fd.gy0 = float(kw["y0"])
        f.fd.ghx = float(kw["hx"])
        f.fd.ghy = float(kw["hy"])
        f.fd.gnx = int(kw["nx"])
        f.fd.gny = int(kw["ny"])
        ga = np.ascontiguousarray(np.asarray(kw["coeffs"], dtype=np.float64).ravel())
        if len(ga) != 2 * (f.fd.gnx - 1) * (f.fd.gny - 1) * 16:
            raise ValueError("grid coefficient block has the wrong size")
        f.refs.append(ga)
        gv = ga
        f.fd.gcoef = &gv[0]
    elif kind == "perturbed":
        bf = <Field?>kw["base"]
        pt = <Perturbation?>kw["pert"]
        f.base_ref = bf
        f.refs.append(pt)
        f.fd.base = &bf.fd
        f.fd.dim = bf.fd.dim
        f.fd.pert = pt.p
    else:  # scaled
        bf = <Field?>kw["base"]
        f.base_ref = bf
        f.fd.base = &bf.fd
        f.fd.dim = bf.fd.dim
        f.fd.factor = float(kw["factor"])
    if f.fd.dim > 8:
        raise ValueError("field dimension capped at 8")
    return f


def field_eval(Field fh, double t, x):
    cdef double xi[8]
    cdef double out[8]
    cdef double[::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef int i, d = fh.fd.dim
    for i in range(d):
        xi[i] = xv[i]
    c_field_eval(&fh.fd, t, xi, out)
    res = np.empty(d)
    for i in range(d):
        res[i] = out[i]
    return res


def field_jac(Field fh, double t, x):
    cdef double xi[8]
    cdef double out[64]
    cdef double[::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef int i, j, d = fh.fd.dim
    for i in range(d):
        xi[i] = xv[i]
    c_field_jac(&fh.fd, t, xi, out)
    res = np.empty((d, d))
    cdef double[:, ::1] rv = res
    for i in range(d):
        for j in range(d):
            rv[i, j] = out[d * i + j]
    return res


def field_dim(Field fh):
    return fh.fd.dim


# ---------------------------------------------------------------------------
# Dormand-Prince 5(4) driver
# ---------------------------------------------------------------------------

cdef double A21 = 1.0 / 5.0
cdef double A31 = 3.0 / 40.0
cdef double A32 = 9.0 / 40.0
cdef double A41 = 44.0 / 45.0
cdef double A42 = -56.0 / 15.0
cdef double A43 = 32.0 / 9.0
cdef double A51 = 19372.0 / 6561.0
cdef double A52 = -25360.0 / 2187.0
cdef double A53 = 64448.0 / 6561.0
cdef double A54 = -212.0 / 729.0
cdef double A61 = 9017.0 / 3168.0
cdef double A62 = -355.0 / 33.0
cdef double A63 = 46732.0 / 5247.0
cdef double A64 = 49.0 / 176.0
cdef double A65 = -5103.0 / 18656.0
cdef double B1 = 35.0 / 384.0
cdef double B3 = 500.0 / 1113.0
cdef double B4 = 125.0 / 192.0
cdef double B5 = -2187.0 / 6784.0
cdef double B6 = 11.0 / 84.0
cdef double E1 = 71.0 / 57600.0
cdef double E3 = -71.0 / 16695.0
cdef double E4 = 71.0 / 1920.0
cdef double E5 = -17253.0 / 339200.0
cdef double E6 = 22.0 / 525.0
cdef double E7 = -1.0 / 40.0
cdef double C2 = 1.0 / 5.0
cdef double C3 = 3.0 / 10.0
cdef double C4 = 4.0 / 5.0
cdef double C5 = 8.0 / 9.0


cdef void c_stages(CField* fd, double t, double h, double* y, double* k1,
                   double* k2, double* k3, double* k4, double* k5, double* k6,
                   double* y5, double* k7, double* errv, int d) noexcept nogil:
    cdef double yi[8]
    cdef int i
    for i in range(d):
        yi[i] = y[i] + h * A21 * k1[i]
    c_field_eval(fd, t + C2 * h, yi, k2)
    for i in range(d):
        yi[i] = y[i] + h * (A31 * k1[i] + A32 * k2[i])
    c_field_eval(fd, t + C3 * h, yi, k3)
    for i in range(d):
        yi[i] = y[i] + h * (A41 * k1[i] + A42 * k2[i] + A43 * k3[i])
    c_field_eval(fd, t + C4 * h, yi, k4)
    for i in range(d):
        yi[i] = y[i] + h * (A51 * k1[i] + A52 * k2[i] + A53 * k3[i] + A54 * k4[i])
    c_field_eval(fd, t + C5 * h, yi, k5)
    for i in range(d):
        yi[i] = y[i] + h * (A61 * k1[i] + A62 * k2[i] + A63 * k3[i]
                            + A64 * k4[i] + A65 * k5[i])
    c_field_eval(fd, t + h, yi, k6)
    for i in range(d):
        y5[i] = y[i] + h * (B1 * k1[i] + B3 * k3[i] + B4 * k4[i]
                            + B5 * k5[i] + B6 * k6[i])
    c_field_eval(fd, t + h, y5, k7)
    for i in range(d):
        errv[i] = h * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i]
                       + E6 * k6[i] + E7 * k7[i])


cdef double c_err_norm(double* errv, double* y, double* y5, double rtol,
                       double atol, int d) noexcept nogil:
    cdef double acc = 0.0, sc, r
    cdef int i
    for i in range(d):
        sc = atol + rtol * fmax(fabs(y[i]), fabs(y5[i]))
        r = errv[i] / sc
        acc += r * r
    return sqrt(acc / d)


cdef double c_init_step(CField* fd, double t, double* y, double* f, double rtol,
                        double atol, double h_max, double T, int d) noexcept nogil:
    cdef double d0 = 0.0, d1 = 0.0, d2 = 0.0, sc, r, h, h1
    cdef double y1[8]
    cdef double f1[8]
    cdef int i
    for i in range(d):
        sc = atol + rtol * fabs(y[i])
        r = y[i] / sc
        d0 += r * r
        r = f[i] / sc
        d1 += r * r
    d0 = sqrt(d0 / d)
    d1 = sqrt(d1 / d)
    if d0 < 1e-5 or d1 < 1e-5:
        h = 1e-6
    else:
        h = 0.01 * d0 / d1
    h = fmin(fmin(h, h_max), T)
    for i in range(d):
        y1[i] = y[i] + h * f[i]
    c_field_eval(fd, t + h, y1, f1)
    d2 = 0.0
    for i in range(d):
        sc = atol + rtol * fabs(y[i])
        r = (f1[i] - f[i]) / sc
        d2 += r * r
    d2 = sqrt(d2 / d) / h
    if fmax(d1, d2) > 1e-15:
        h1 = pow(0.01 / fmax(d1, d2), 0.2)
        h = fmin(fmin(100.0 * h, h1), fmin(h_max, T))
    return h


cdef double c_event_g(int kind, int coord, int direction, double value,
                      int norm, double* center, int d, double t,
                      double* y) noexcept nogil:
    cdef double dist, g, dd
    cdef int i
    if kind == 0 or kind == 1:
        dist = 0.0
        if norm == 0:
            for i in range(d):
                dd = fabs(y[i] - center[i])
                if dd > dist:
                    dist = dd
        else:
            for i in range(d):
                dd = y[i] - center[i]
                dist += dd * dd
            dist = sqrt(dist)
        g = value - dist
        return g if kind == 0 else -g
    g = y[coord] - value
    return g if direction >= 0 else -g


cdef void c_hermite(double* y0, double* f0, double* y1, double* f1, double h,
                    double s, int d, double* out) noexcept nogil:
    cdef double s2 = s * s
    cdef double s3 = s2 * s
    cdef double h00 = 2.0 * s3 - 3.0 * s2 + 1.0
    cdef double h10 = s3 - 2.0 * s2 + s
    cdef double h01 = 3.0 * s2 - 2.0 * s3
    cdef double h11 = s3 - s2
    cdef int i
    for i in range(d):
        out[i] = h00 * y0[i] + h10 * h * f0[i] + h01 * y1[i] + h11 * h * f1[i]


def integrate(Field fh, double t0, x0, double T, double rtol, double atol,
              double h_max=np.inf, long max_steps=10_000_000, events=None,
              region_lo=None, region_hi=None, dense=True, checker=None):
    """Adaptive RK45 drive; see the Python backend for the field semantics."""
    cdef CField* fd = &fh.fd
    cdef int d = fd.dim
    cdef double t = t0
    cdef double t_end = t0 + T
    cdef double y[8]
    cdef double f[8]
    cdef double y5[8]
    cdef double errv[8]
    cdef double k2[8]
    cdef double k3[8]
    cdef double k4[8]
    cdef double k5[8]
    cdef double k6[8]
    cdef double k7[8]
    cdef double ystar[8]
    cdef double ym[8]
    cdef double g_prev[32]
    cdef double fired_t[32]
    cdef int fired_i[32]
    cdef double fired_y[32 * 8]
    cdef int n_fired
    cdef double h, err, err_prev, fac, g1, lo, hi, mid, tstar, t1
    cdef long naccept = 0, nfev = 0, nsteps = 0
    cdef int status = STATUS_DONE
    cdef int i, j, ie, bi, swp
    cdef bint stop, want_dense = bool(dense), terminal_hit
    cdef double tswp
    cdef int check_code = 0

    cdef double[::1] xv = np.ascontiguousarray(x0, dtype=np.float64)
    if len(xv) != d:
        raise ValueError("initial state dimension mismatch")
    for i in range(d):
        y[i] = xv[i]

    # events
    cdef int ne = 0
    cdef int[::1] evkind, evcoord, evdir, evterm, evnorm
    cdef double[::1] evval
    cdef double[:, ::1] evcenter
    cdef int* p_kind = NULL
    cdef int* p_coord = NULL
    cdef int* p_dir = NULL
    cdef int* p_term = NULL
    cdef int* p_norm = NULL
    cdef double* p_val = NULL
    cdef double* p_center = NULL
    ev_keep = None
    if events is not None:
        ev_keep = (np.ascontiguousarray(events["kind"], dtype=np.int32),
                   np.ascontiguousarray(events["coord"], dtype=np.int32),
                   np.ascontiguousarray(events["direction"], dtype=np.int32),
                   np.ascontiguousarray(events["terminal"], dtype=np.int32),
                   np.ascontiguousarray(events["norm"], dtype=np.int32),
                   np.ascontiguousarray(events["value"], dtype=np.float64),
                   np.ascontiguousarray(events["center"], dtype=np.float64).reshape(len(events["kind"]), -1))
        evkind, evcoord, evdir, evterm, evnorm = ev_keep[0], ev_keep[1], ev_keep[2], ev_keep[3], ev_keep[4]
        evval = ev_keep[5]
        evcenter = ev_keep[6]
        ne = len(ev_keep[0])
        if ne > 32:
            raise ValueError("at most 32 simultaneous events")
        if ne > 0:
            p_kind = &evkind[0]
            p_coord = &evcoord[0]
            p_dir = &evdir[0]
            p_term = &evterm[0]
            p_norm = &evnorm[0]
            p_val = &evval[0]
            p_center = &evcenter[0, 0]

    # region box
    cdef double rlo[8]
    cdef double rhi[8]
    cdef bint have_region = region_lo is not None
    if have_region:
        lo_a = np.ascontiguousarray(region_lo, dtype=np.float64)
        hi_a = np.ascontiguousarray(region_hi, dtype=np.float64)
        for i in range(d):
            rlo[i] = lo_a[i]
            rhi[i] = hi_a[i]

    ev_t, ev_idx, ev_y = [], [], []
    ts_list = [t0]
    ys_list = [np.array([y[i] for i in range(d)])]

    c_field_eval(fd, t, y, f)
    nfev = 1
    fs_list = [np.array([f[i] for i in range(d)])]

    for ie in range(ne):
        g_prev[ie] = c_event_g(p_kind[ie], p_coord[ie], p_dir[ie], p_val[ie],
                               p_norm[ie], p_center + ie * d, d, t, y)
        if g_prev[ie] >= 0.0:
            ev_t.append(t)
            ev_idx.append(ie)
            ev_y.append(np.array([y[i] for i in range(d)]))
            if p_term[ie]:
                return dict(status=STATUS_EVENT, t=t,
                            y=np.array([y[i] for i in range(d)]),
                            ts=np.array(ts_list), ys=np.array(ys_list),
                            fs=np.array(fs_list), ev_t=ev_t, ev_idx=ev_idx,
                            ev_y=ev_y, naccept=0, nfev=1, check_code=0)

    h = c_init_step(fd, t, y, f, rtol, atol, h_max, T, d)
    nfev += 1
    err_prev = 1.0

    while t < t_end:
        if t_end - t <= 1e-12 * fmax(1.0, fabs(t_end)):
            t = t_end
            break
        if nsteps >= max_steps:
            status = STATUS_MAXSTEPS
            break
        nsteps += 1
        h = fmin(h, t_end - t)
        if h < H_MIN:
            status = STATUS_UNDERFLOW
            break

        c_stages(fd, t, h, y, f, k2, k3, k4, k5, k6, y5, k7, errv, d)
        nfev += 6
        err = c_err_norm(errv, y, y5, rtol, atol, d)

        if not err <= 1.0:
            if isfinite(err) and err > 1e-300:
                h *= fmax(0.2, 0.9 * pow(err, -0.2))
            else:
                h *= 0.2
            continue

        t1 = t + h
        stop = False
        terminal_hit = False

        if ne > 0:
            n_fired = 0
            for ie in range(ne):
                g1 = c_event_g(p_kind[ie], p_coord[ie], p_dir[ie], p_val[ie],
                               p_norm[ie], p_center + ie * d, d, t1, y5)
                if g_prev[ie] < 0.0 and g1 >= 0.0:
                    lo = 0.0
                    hi = 1.0
                    for bi in range(60):
                        if (hi - lo) * h <= 1e-9:
                            break
                        mid = 0.5 * (lo + hi)
                        c_hermite(y, f, y5, k7, h, mid, d, ym)
                        if c_event_g(p_kind[ie], p_coord[ie], p_dir[ie],
                                     p_val[ie], p_norm[ie], p_center + ie * d,
                                     d, t + mid * h, ym) >= 0.0:
                            hi = mid
                        else:
                            lo = mid
                    c_hermite(y, f, y5, k7, h, hi, d, ystar)
                    fired_t[n_fired] = t + hi * h
                    fired_i[n_fired] = ie
                    for i in range(d):
                        fired_y[n_fired * 8 + i] = ystar[i]
                    n_fired += 1
                g_prev[ie] = g1
            # insertion sort by firing time
            for ie in range(1, n_fired):
                j = ie
                while j > 0 and fired_t[j - 1] > fired_t[j]:
                    tswp = fired_t[j - 1]
                    fired_t[j - 1] = fired_t[j]
                    fired_t[j] = tswp
                    swp = fired_i[j - 1]
                    fired_i[j - 1] = fired_i[j]
                    fired_i[j] = swp
                    for i in range(d):
                        tswp = fired_y[(j - 1) * 8 + i]
                        fired_y[(j - 1) * 8 + i] = fired_y[j * 8 + i]
                        fired_y[j * 8 + i] = tswp
                    j -= 1
            for ie in range(n_fired):
                tstar = fired_t[ie]
                ev_t.append(tstar)
                ev_idx.append(fired_i[ie])
                ev_y.append(np.array([fired_y[ie * 8 + i] for i in range(d)]))
                if p_term[fired_i[ie]]:
                    t1 = tstar
                    for i in range(d):
                        y5[i] = fired_y[ie * 8 + i]
                    c_field_eval(fd, t1, y5, k7)
                    nfev += 1
                    status = STATUS_EVENT
                    stop = True
                    terminal_hit = True
                    break

        t = t1
        for i in range(d):
            y[i] = y5[i]
            f[i] = k7[i]
        naccept += 1
        if want_dense:
            ts_list.append(t)
            ys_list.append(np.array([y[i] for i in range(d)]))
            fs_list.append(np.array([f[i] for i in range(d)]))

        if not stop and have_region:
            for i in range(d):
                if y[i] < rlo[i] or y[i] > rhi[i]:
                    status = STATUS_REGION
                    stop = True
                    break
        if not stop and checker is not None:
            check_code = checker(t, np.array([y[i] for i in range(d)]))
            if check_code:
                status = STATUS_EVENT
                stop = True
        if stop:
            break

        if err > 1e-300:
            fac = 0.9 * pow(err, -0.14) * pow(err_prev, 0.08)
        else:
            fac = 6.0
        h = h * fmin(6.0, fmax(0.2, fac))
        h = fmin(h, h_max)
        err_prev = fmax(err, 1e-10)

    return dict(status=status, t=t, y=np.array([y[i] for i in range(d)]),
                ts=np.array(ts_list), ys=np.array(ys_list),
                fs=np.array(fs_list), ev_t=ev_t, ev_idx=ev_idx, ev_y=ev_y,
                naccept=naccept, nfev=nfev, check_code=check_code)


# ---------------------------------------------------------------------------
# planar grid drivers
# ---------------------------------------------------------------------------

ctypedef struct CheckCtx:
    int mode            # 1 classify, 2 brute
    int ns
    double* sinks       # stride 3 in classify mode, stride 2 in brute mode
    int target
    int n_ann
    long long* ann_ib
    long long* ann_ob
    double* ann_m
    double* cxy
    long long* cstarts
    double* ccx
    double* ccy
    double* crmin
    double* crmax
    int n_orb
    long long* orb_idx
    double snap
    double deep


cdef double _curve_lb(CheckCtx* ck, int ci, double px, double py) noexcept nogil:
    cdef double rc = hypot(px - ck.ccx[ci], py - ck.ccy[ci])
    cdef double lb = 0.0
    if ck.crmin[ci] - rc > lb:
        lb = ck.crmin[ci] - rc
    if rc - ck.crmax[ci] > lb:
        lb = rc - ck.crmax[ci]
    return lb


cdef double _curve_dist(CheckCtx* ck, int ci, double px, double py) noexcept nogil:
    cdef long s = ck.cstarts[ci]
    cdef long e = ck.cstarts[ci + 1]
    cdef double best = 1e300
    cdef double ax, ay, bx, by, dx, dy, ln, tt, ex, ey, d2
    cdef long i
    for i in range(s, e - 1):
        ax = ck.cxy[2 * i]
        ay = ck.cxy[2 * i + 1]
        bx = ck.cxy[2 * i + 2]
        by = ck.cxy[2 * i + 3]
        dx = bx - ax
        dy = by - ay
        ln = dx * dx + dy * dy
        if ln > 0.0:
            tt = ((px - ax) * dx + (py - ay) * dy) / ln
        else:
            tt = 0.0
        if tt < 0.0:
            tt = 0.0
        if tt > 1.0:
            tt = 1.0
        ex = ax + tt * dx - px
        ey = ay + tt * dy - py
        d2 = ex * ex + ey * ey
        if d2 < best:
            best = d2
    return sqrt(best)


cdef long long _classify_check(CheckCtx* ck, double px, double py) noexcept nogil:
    cdef int j, i, ib, ob
    cdef double mi
    for j in range(ck.ns):
        if hypot(px - ck.sinks[3 * j], py - ck.sinks[3 * j + 1]) < ck.sinks[3 * j + 2]:
            return 0 if j == ck.target else 1000 + j
    for i in range(ck.n_ann):
        mi = ck.ann_m[i]
        ib = <int>ck.ann_ib[i]
        ob = <int>ck.ann_ob[i]
        if _curve_lb(ck, ib, px, py) <= mi and _curve_lb(ck, ob, px, py) <= mi:
            if _curve_dist(ck, ib, px, py) <= mi and _curve_dist(ck, ob, px, py) <= mi:
                return 2000 + i
    return -1


cdef long long _brute_label(CheckCtx* ck, double px, double py) noexcept nogil:
    cdef double best = 1e300, dj
    cdef long long best_j = -1
    cdef int j, i, ci
    for j in range(ck.ns):
        dj = hypot(px - ck.sinks[2 * j], py - ck.sinks[2 * j + 1])
        if dj < best:
            best = dj
            best_j = j
    if best < ck.snap:
        return best_j
    for i in range(ck.n_orb):
        ci = <int>ck.orb_idx[i]
        if _curve_lb(ck, ci, px, py) < ck.snap and _curve_dist(ck, ci, px, py) < ck.snap:
            return 1000 + i
    return -1


cdef int _drive_lean(CField* fd, double* y, double T, double rtol, double atol,
                     double h_max, long max_steps, CheckCtx* ck,
                     double* t_out, long long* label_out) noexcept nogil:
    """RK45 loop stripped to the per-step inventory check.

    y is updated in place; returns the integrator status.  label_out is set
    when the classify / early-exit check hits.
    """
    cdef int d = fd.dim
    cdef double f[8]
    cdef double y5[8]
    cdef double errv[8]
    cdef double k2[8]
    cdef double k3[8]
    cdef double k4[8]
    cdef double k5[8]
    cdef double k6[8]
    cdef double k7[8]
    cdef double t = 0.0
    cdef double h, err, err_prev, fac
    cdef long nsteps = 0
    cdef int i, j
    cdef long long lab

    c_field_eval(fd, t, y, f)
    h = c_init_step(fd, t, y, f, rtol, atol, h_max, T, d)
    err_prev = 1.0

    while t < T:
        if T - t <= 1e-12 * fmax(1.0, fabs(T)):
            t = T
            break
        if nsteps >= max_steps:
            t_out[0] = t
            return ST_MAXSTEPS
        nsteps += 1
        h = fmin(h, T - t)
        if h < H_MIN:
            t_out[0] = t
            return ST_UNDERFLOW

        c_stages(fd, t, h, y, f, k2, k3, k4, k5, k6, y5, k7, errv, d)
        err = c_err_norm(errv, y, y5, rtol, atol, d)
        if not err <= 1.0:
            if isfinite(err) and err > 1e-300:
                h *= fmax(0.2, 0.9 * pow(err, -0.2))
            else:
                h *= 0.2
            continue

        t = t + h
        for i in range(d):
            y[i] = y5[i]
            f[i] = k7[i]

        if ck.mode == 1:
            lab = _classify_check(ck, y[0], y[1])
            if lab >= 0:
                label_out[0] = lab
                t_out[0] = t
                return ST_EVENT
        elif ck.mode == 2:
            for j in range(ck.ns):
                if hypot(y[0] - ck.sinks[2 * j], y[1] - ck.sinks[2 * j + 1]) < ck.deep:
                    label_out[0] = j
                    t_out[0] = t
                    return ST_EVENT

        if err > 1e-300:
            fac = 0.9 * pow(err, -0.14) * pow(err_prev, 0.08)
        else:
            fac = 6.0
        h = h * fmin(6.0, fmax(0.2, fac))
        h = fmin(h, h_max)
        err_prev = fmax(err, 1e-10)

    t_out[0] = t
    return ST_DONE


def _curve_caches(xy, starts):
    xy = np.ascontiguousarray(xy, dtype=np.float64).reshape(-1, 2)
    starts = np.ascontiguousarray(starts, dtype=np.int64)
    n = len(starts) - 1
    cx = np.empty(n)
    cy = np.empty(n)
    rmin = np.empty(n)
    rmax = np.empty(n)
    for i in range(n):
        seg = xy[starts[i]:starts[i + 1]]
        c = seg.mean(axis=0)
        r = np.hypot(seg[:, 0] - c[0], seg[:, 1] - c[1])
        cx[i], cy[i] = c
        rmin[i], rmax[i] = float(r.min()), float(r.max())
    return xy, starts, cx, cy, rmin, rmax


def classify_grid(Field fh, pts, sinks, target_idx, curves_xy, curves_starts,
                  ann_ib, ann_ob, ann_m, double T_max, double rtol, double atol,
                  double h_max, threads=0):
    """See the Python backend docstring; labels and hit times per point."""
    cdef CField* fd = &fh.fd
    pts_a = np.ascontiguousarray(pts, dtype=np.float64).reshape(-1, 2)
    sinks_a = np.ascontiguousarray(sinks, dtype=np.float64).reshape(-1, 3)
    xy, starts, ccx, ccy, crmin, crmax = _curve_caches(curves_xy, curves_starts)
    ib_a = np.ascontiguousarray(ann_ib, dtype=np.int64)
    ob_a = np.ascontiguousarray(ann_ob, dtype=np.int64)
    m_a = np.ascontiguousarray(ann_m, dtype=np.float64)

    cdef long n = len(pts_a)
    labels = np.full(n, LABEL_TIMEOUT, dtype=np.int64)
    times = np.full(n, np.nan)
    scratch = pts_a.copy()

    cdef double[:, ::1] pts_v = pts_a
    cdef double[:, ::1] scr_v = scratch
    cdef double[:, ::1] sinks_v = sinks_a
    cdef double[:, ::1] xy_v = xy
    cdef long long[::1] starts_v = starts
    cdef double[::1] ccx_v = ccx, ccy_v = ccy, crmin_v = crmin, crmax_v = crmax
    cdef long long[::1] ib_v = ib_a, ob_v = ob_a
    cdef double[::1] m_v = m_a
    cdef long long[::1] lab_v = labels
    cdef double[::1] tim_v = times
    cdef long long dummy_orb[1]

    cdef CheckCtx ck
    ck.mode = 1
    ck.ns = len(sinks_a)
    ck.sinks = &sinks_v[0, 0] if ck.ns > 0 else NULL
    ck.target = int(target_idx)
    ck.n_ann = len(ib_a)
    ck.ann_ib = &ib_v[0] if ck.n_ann > 0 else NULL
    ck.ann_ob = &ob_v[0] if ck.n_ann > 0 else NULL
    ck.ann_m = &m_v[0] if ck.n_ann > 0 else NULL
    ck.cxy = &xy_v[0, 0] if len(xy) > 0 else NULL
    ck.cstarts = &starts_v[0]
    ck.ccx = &ccx_v[0] if len(ccx) > 0 else NULL
    ck.ccy = &ccy_v[0] if len(ccx) > 0 else NULL
    ck.crmin = &crmin_v[0] if len(ccx) > 0 else NULL
    ck.crmax = &crmax_v[0] if len(ccx) > 0 else NULL
    ck.n_orb = 0
    ck.orb_idx = dummy_orb
    ck.snap = 0.0
    ck.deep = 0.0

    cdef int nthreads = int(threads)
    if nthreads > 0:
        openmp.omp_set_num_threads(nthreads)

    cdef long idx
    cdef long long lab
    cdef double thit
    cdef int st
    cdef long msteps = 100_000_000

    with nogil:
        for idx in prange(n, schedule="dynamic", chunksize=4):
            lab = _classify_check(&ck, pts_v[idx, 0], pts_v[idx, 1])
            if lab >= 0:
                lab_v[idx] = lab
                tim_v[idx] = 0.0
                continue
            scr_v[idx, 0] = pts_v[idx, 0]
            scr_v[idx, 1] = pts_v[idx, 1]
            thit = 0.0
            lab = -1
            st = _drive_lean(fd, &scr_v[idx, 0], T_max, rtol, atol, h_max,
                             msteps, &ck, &thit, &lab)
            if st == ST_EVENT and lab >= 0:
                lab_v[idx] = lab
                tim_v[idx] = thit
    return labels, times


def brute_grid(Field fh, pts, sinks, double snap, curves_xy, curves_starts,
               orbit_idx, double T, double rtol, double atol, double h_max,
               threads=0):
    """Fixed-horizon endpoint labeling; see the Python backend docstring."""
    cdef CField* fd = &fh.fd
    pts_a = np.ascontiguousarray(pts, dtype=np.float64).reshape(-1, 2)
    sinks_a = np.ascontiguousarray(sinks, dtype=np.float64).reshape(-1, 2)
    xy, starts, ccx, ccy, crmin, crmax = _curve_caches(curves_xy, curves_starts)
    orb_a = np.ascontiguousarray(orbit_idx, dtype=np.int64)

    cdef long n = len(pts_a)
    labels = np.full(n, -1, dtype=np.int64)
    scratch = pts_a.copy()

    cdef double[:, ::1] pts_v = pts_a
    cdef double[:, ::1] scr_v = scratch
    cdef double[:, ::1] sinks_v = sinks_a
    cdef double[:, ::1] xy_v = xy
    cdef long long[::1] starts_v = starts
    cdef double[::1] ccx_v = ccx, ccy_v = ccy, crmin_v = crmin, crmax_v = crmax
    cdef long long[::1] orb_v = orb_a
    cdef long long[::1] lab_v = labels
    cdef long long dummy_ann[1]
    cdef double dummy_m[1]

    cdef CheckCtx ck
    ck.mode = 2
    ck.ns = len(sinks_a)
    ck.sinks = &sinks_v[0, 0] if ck.ns > 0 else NULL
    ck.target = 0
    ck.n_ann = 0
    ck.ann_ib = dummy_ann
    ck.ann_ob = dummy_ann
    ck.ann_m = dummy_m
    ck.cxy = &xy_v[0, 0] if len(xy) > 0 else NULL
    ck.cstarts = &starts_v[0]
    ck.ccx = &ccx_v[0] if len(ccx) > 0 else NULL
    ck.ccy = &ccy_v[0] if len(ccx) > 0 else NULL
    ck.crmin = &crmin_v[0] if len(ccx) > 0 else NULL
    ck.crmax = &crmax_v[0] if len(ccx) > 0 else NULL
    ck.n_orb = len(orb_a)
    ck.orb_idx = &orb_v[0] if ck.n_orb > 0 else dummy_ann
    ck.snap = snap
    ck.deep = 0.5 * snap

    cdef int nthreads = int(threads)
    if nthreads > 0:
        openmp.omp_set_num_threads(nthreads)

    cdef long idx
    cdef long long lab
    cdef double thit
    cdef int st
    cdef long msteps = 100_000_000

    with nogil:
        for idx in prange(n, schedule="dynamic", chunksize=4):
            scr_v[idx, 0] = pts_v[idx, 0]
            scr_v[idx, 1] = pts_v[idx, 1]
            thit = 0.0
            lab = -1
            st = _drive_lean(fd, &scr_v[idx, 0], T, rtol, atol, h_max,
                             msteps, &ck, &thit, &lab)
            if st == ST_EVENT and lab >= 0:
                lab_v[idx] = lab
            else:
                lab_v[idx] = _brute_label(&ck, scr_v[idx, 0], scr_v[idx, 1])
    return labels
