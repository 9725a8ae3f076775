# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernel backend (Cython twin of ``_kernels_py``).

Same function signatures and semantics as the pure-NumPy reference module:
the RK45 integrator for the surrogate ODE system with sensitivities and
dense output, jump-process simulation (plain and auxiliary-block driven,
myopic and conditioned-hazard), and the Langevin propagators with residual
bridges. Draws come from the same splitmix64-seeded xoshiro256++ stream, so
both backends generate identical paths from identical seeds.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport erfc, exp, fabs, isfinite, log, sqrt
from libc.stdint cimport uint64_t

cnp.import_array()

BACKEND_NAME = "compiled"

JITTER_LADDER = (0.0, 1e-12, 1e-10, 1e-8, 1e-6)

cdef double[5] _LADDER = [0.0, 1e-12, 1e-10, 1e-8, 1e-6]
cdef double _HSTAR_LOG_CAP = 30.0
cdef double _PSI_DEGENERATE_RTOL = 1e-11
cdef double _LOG2PI = 1.8378770664093453
cdef double _SQRT2 = 1.4142135623730951

cdef int STATUS_OK = 0
cdef int STATUS_UNDERFLOW = 1
cdef int STATUS_MAXSTEPS = 2
cdef int STATUS_NONFINITE = 3


# ---------------------------------------------------------------------------
# PRNG

cdef inline uint64_t _splitmix_next(uint64_t* state) noexcept nogil:
    cdef uint64_t z
    state[0] = state[0] + <uint64_t>0x9E3779B97F4A7C15
    z = state[0]
    z = (z ^ (z >> 30)) * <uint64_t>0xBF58476D1CE4E5B9
    z = (z ^ (z >> 27)) * <uint64_t>0x94D049BB133111EB
    return z ^ (z >> 31)


cdef struct Xo:
    uint64_t s0
    uint64_t s1
    uint64_t s2
    uint64_t s3


cdef inline void xo_seed(Xo* xo, uint64_t seed) noexcept nogil:
    cdef uint64_t st = seed
    xo.s0 = _splitmix_next(&st)
    xo.s1 = _splitmix_next(&st)
    xo.s2 = _splitmix_next(&st)
    xo.s3 = _splitmix_next(&st)


cdef inline uint64_t _rotl(uint64_t x, int k) noexcept nogil:
    return (x << k) | (x >> (64 - k))


cdef inline uint64_t xo_next(Xo* xo) noexcept nogil:
    cdef uint64_t result = _rotl(xo.s0 + xo.s3, 23) + xo.s0
    cdef uint64_t t = xo.s1 << 17
    xo.s2 ^= xo.s0
    xo.s3 ^= xo.s1
    xo.s1 ^= xo.s2
    xo.s0 ^= xo.s3
    xo.s2 ^= t
    xo.s3 = _rotl(xo.s3, 45)
    return result


cdef inline double xo_uniform(Xo* xo) noexcept nogil:
    return ((xo_next(xo) >> 11) + 0.5) * (2.0 ** -53)


cdef inline double _phi(double z) noexcept nogil:
    return 0.5 * erfc(-z / _SQRT2)


cdef struct Stream:
    Xo xo
    uint64_t seed
    Py_ssize_t pos
    Py_ssize_t size
    bint fallback_started


cdef inline double stream_uniform(Stream* st, const double[:, :] blocks,
                                  Py_ssize_t row) noexcept nogil:
    cdef double z
    if st.pos < st.size:
        z = blocks[row, st.pos]
        st.pos += 1
        return _phi(z)
    if not st.fallback_started:
        xo_seed(&st.xo, st.seed)
        st.fallback_started = True
    return xo_uniform(&st.xo)


# ---------------------------------------------------------------------------
# small dense linear algebra (row-major, tiny sizes)

cdef int _cholesky(double[:, :] M, double[:, :] L, int n) noexcept nogil:
    cdef int i, j, k
    cdef double acc
    for j in range(n):
        acc = M[j, j]
        for k in range(j):
            acc -= L[j, k] * L[j, k]
        if acc <= 0.0 or not isfinite(acc):
            return -1
        L[j, j] = sqrt(acc)
        for i in range(j + 1, n):
            acc = M[i, j]
            for k in range(j):
                acc -= L[i, k] * L[j, k]
            L[i, j] = acc / L[j, j]
        for i in range(j):
            L[i, j] = 0.0
    return 0


cdef int chol_jitter_c(double[:, :] M, double[:, :] L, double[:, :] scratch,
                       int n) noexcept nogil:
    """Jitter-laddered Cholesky. 0 success, 1 zero matrix (L zeroed), -1 fail."""
    cdef int i, j, t
    cdef bint allzero = True
    for i in range(n):
        for j in range(n):
            if not isfinite(M[i, j]):
                return -1
            if M[i, j] != 0.0:
                allzero = False
    if allzero:
        for i in range(n):
            for j in range(n):
                L[i, j] = 0.0
        return 1
    for t in range(5):
        for i in range(n):
            for j in range(n):
                scratch[i, j] = M[i, j]
            scratch[i, i] += _LADDER[t]
        if _cholesky(scratch, L, n) == 0:
            return 0
    return -1


cdef inline void _forward_solve(double[:, :] L, double[:] b, double[:] out,
                                int n) noexcept nogil:
    cdef int i, k
    cdef double acc
    for i in range(n):
        acc = b[i]
        for k in range(i):
            acc -= L[i, k] * out[k]
        out[i] = acc / L[i, i]


cdef inline void _back_solve_t(double[:, :] L, double[:] b, double[:] out,
                               int n) noexcept nogil:
    # solves L' out = b
    cdef int i, k
    cdef double acc
    for i in range(n - 1, -1, -1):
        acc = b[i]
        for k in range(i + 1, n):
            acc -= L[k, i] * out[k]
        out[i] = acc / L[i, i]


cdef inline double _logdet_chol(double[:, :] L, int n) noexcept nogil:
    cdef double acc = 0.0
    cdef int i
    for i in range(n):
        acc += log(L[i, i])
    return 2.0 * acc


cdef double _mvn_logpdf_c(double[:] x, double[:] mean, double[:, :] L,
                          double[:] w1, double[:] w2, int n) noexcept nogil:
    cdef int i
    cdef double quad = 0.0
    for i in range(n):
        w1[i] = x[i] - mean[i]
    _forward_solve(L, w1, w2, n)
    for i in range(n):
        quad += w2[i] * w2[i]
    return -0.5 * (n * _LOG2PI + _logdet_chol(L, n) + quad)


# ---------------------------------------------------------------------------
# mass-action parts

cdef void _ma_parts(const long long[:, :] A, double[:] x, int order,
                    double[:, :] vals, double[:, :] d1s, double[:, :] d2s,
                    double[:] g, double[:, :] dg, double[:, :, :] d2g,
                    int r, int s) noexcept nogil:
    cdef int i, j, k, l, q, a
    cdef double v, d1, d2, f, inv, prod
    for i in range(r):
        for j in range(s):
            a = <int>A[i, j]
            if a == 0:
                vals[i, j] = 1.0
                d1s[i, j] = 0.0
                d2s[i, j] = 0.0
            elif a == 1:
                vals[i, j] = x[j]
                d1s[i, j] = 1.0
                d2s[i, j] = 0.0
            else:
                v = 1.0
                d1 = 0.0
                d2 = 0.0
                inv = 1.0
                for q in range(a):
                    f = x[j] - q
                    d2 = d2 * f + 2.0 * d1
                    d1 = d1 * f + v
                    v = v * f
                    inv /= (q + 1.0)
                vals[i, j] = v * inv
                d1s[i, j] = d1 * inv
                d2s[i, j] = d2 * inv
    for i in range(r):
        prod = 1.0
        for j in range(s):
            prod *= vals[i, j]
        g[i] = prod
    if order >= 1:
        for i in range(r):
            for j in range(s):
                prod = 1.0
                for k in range(s):
                    if k != j:
                        prod *= vals[i, k]
                dg[i, j] = d1s[i, j] * prod
    if order >= 2:
        for i in range(r):
            for j in range(s):
                for l in range(s):
                    if j == l:
                        prod = 1.0
                        for k in range(s):
                            if k != j:
                                prod *= vals[i, k]
                        d2g[i, j, j] = d2s[i, j] * prod
                    else:
                        prod = 1.0
                        for k in range(s):
                            if k != j and k != l:
                                prod *= vals[i, k]
                        d2g[i, j, l] = d1s[i, j] * d1s[i, l] * prod


# ---------------------------------------------------------------------------
# LNA right-hand side

def lna_dim(s, r, include_G, include_V, sens_mode):
    sv = s * (s + 1) // 2
    dim = s
    if include_G:
        dim += s * s
    if include_V:
        dim += sv
    if sens_mode >= 1:
        dim += r * s
    if sens_mode == 2:
        dim += r * sv
    return dim


cdef class _LnaScratch:
    cdef double[:, :] vals, d1s, d2s, dg, F, V, SV, BETA, DF, WORK, RT
    cdef double[:, :, :] d2g
    cdef double[:] g, h, dh, vec
    cdef long long[:] ii, jj

    def __init__(self, int r, int s):
        self.vals = np.empty((r, s))
        self.d1s = np.empty((r, s))
        self.d2s = np.empty((r, s))
        self.dg = np.empty((r, s))
        self.d2g = np.empty((r, s, s))
        self.F = np.empty((s, s))
        self.V = np.empty((s, s))
        self.SV = np.empty((s, s))
        self.BETA = np.empty((s, s))
        self.DF = np.empty((s, s))
        self.WORK = np.empty((s, s))
        self.RT = np.empty((r, s))
        self.g = np.empty(r)
        self.h = np.empty(r)
        self.dh = np.empty(r)
        self.vec = np.empty(s)
        ii, jj = np.tril_indices(s)
        self.ii = ii.astype(np.int64)
        self.jj = jj.astype(np.int64)


cdef void _lna_rhs(double[:] y, double[:] dy,
                   const long long[:, :] A, const double[:, :] Sf,
                   const double[:] c, int r, int s, int sv,
                   bint include_G, bint include_V, int sens_mode,
                   _LnaScratch sc) noexcept:
    cdef int i, j, k, l, m
    cdef int pos, goff, voff, seoff, svoff
    cdef double acc
    cdef bint need_F = include_G or include_V or (sens_mode >= 1)
    cdef int order = 2 if sens_mode == 2 else (1 if need_F else 0)
    cdef double[:, :] vals = sc.vals, d1s = sc.d1s, d2s = sc.d2s, dg = sc.dg
    cdef double[:, :] F = sc.F, V = sc.V, SV = sc.SV, BETA = sc.BETA
    cdef double[:, :] DF = sc.DF, WORK = sc.WORK, RT = sc.RT
    cdef double[:, :, :] d2g = sc.d2g
    cdef double[:] g = sc.g, h = sc.h, dh = sc.dh, vec = sc.vec
    cdef long long[:] ii = sc.ii, jj = sc.jj

    _ma_parts(A, y[:s], order, vals, d1s, d2s, g, dg, d2g, r, s)
    for i in range(r):
        h[i] = c[i] * g[i]
        if h[i] < 0.0:
            h[i] = 0.0
            g[i] = 0.0
            if order >= 1:
                for j in range(s):
                    dg[i, j] = 0.0
            if order >= 2:
                for j in range(s):
                    for l in range(s):
                        d2g[i, j, l] = 0.0

    if need_F:
        for j in range(s):
            for k in range(s):
                acc = 0.0
                for m in range(r):
                    acc += Sf[j, m] * c[m] * dg[m, k]
                F[j, k] = acc

    for j in range(s):
        acc = 0.0
        for m in range(r):
            acc += Sf[j, m] * h[m]
        dy[j] = acc
    pos = s
    goff = s
    if include_G:
        for j in range(s):
            for k in range(s):
                acc = 0.0
                for l in range(s):
                    acc += F[j, l] * y[goff + l * s + k]
                dy[pos + j * s + k] = acc
        pos += s * s
    voff = goff + (s * s if include_G else 0)
    if include_V:
        for k in range(sv):
            V[<int>ii[k], <int>jj[k]] = y[voff + k]
            V[<int>jj[k], <int>ii[k]] = y[voff + k]
        for j in range(s):
            for k in range(s):
                acc = 0.0
                for m in range(r):
                    acc += Sf[j, m] * h[m] * Sf[k, m]
                BETA[j, k] = acc
        for j in range(s):
            for k in range(s):
                acc = BETA[j, k]
                for l in range(s):
                    acc += F[j, l] * V[l, k] + V[j, l] * F[k, l]
                WORK[j, k] = acc
        for k in range(sv):
            dy[pos + k] = WORK[<int>ii[k], <int>jj[k]]
        pos += sv
    seoff = voff + (sv if include_V else 0)
    if sens_mode >= 1:
        for i in range(r):
            for j in range(s):
                acc = Sf[j, i] * g[i]
                for l in range(s):
                    acc += F[j, l] * y[seoff + i * s + l]
                dy[pos + i * s + j] = acc
        pos += r * s
    if sens_mode == 2:
        svoff = seoff + r * s
        for i in range(r):
            for j in range(s):
                vec[j] = y[seoff + i * s + j]          # s_eta_i
            # RT = d2g @ s_eta_i  (r x s)
            for m in range(r):
                for k in range(s):
                    acc = 0.0
                    for l in range(s):
                        acc += d2g[m, k, l] * vec[l]
                    RT[m, k] = acc
            # DF_i = outer(S_col_i, dg_i) + Sf @ (c * RT)
            for j in range(s):
                for k in range(s):
                    acc = Sf[j, i] * dg[i, k]
                    for m in range(r):
                        acc += Sf[j, m] * c[m] * RT[m, k]
                    DF[j, k] = acc
            # dh_m = c_m dg_m . s_eta_i (+ g_i at m = i)
            for m in range(r):
                acc = 0.0
                for l in range(s):
                    acc += dg[m, l] * vec[l]
                dh[m] = c[m] * acc
            dh[i] += g[i]
            # SV = unvech(sV_i)
            for k in range(sv):
                SV[<int>ii[k], <int>jj[k]] = y[svoff + i * sv + k]
                SV[<int>jj[k], <int>ii[k]] = y[svoff + i * sv + k]
            # WORK = F SV + SV F' + DF V + V DF' + Dbeta
            for j in range(s):
                for k in range(s):
                    acc = 0.0
                    for m in range(r):
                        acc += Sf[j, m] * dh[m] * Sf[k, m]
                    for l in range(s):
                        acc += F[j, l] * SV[l, k] + SV[j, l] * F[k, l]
                        acc += DF[j, l] * V[l, k] + V[j, l] * DF[k, l]
                    WORK[j, k] = acc
            for k in range(sv):
                dy[pos + k] = WORK[<int>ii[k], <int>jj[k]]
            pos += sv


# ---------------------------------------------------------------------------
# RK45 (Dormand-Prince) with cubic-Hermite dense output

cdef double[6] _DP_C = [0.0, 0.2, 0.3, 0.8, 8.0 / 9.0, 1.0]
cdef double[5][5] _DP_A = [
    [0.2, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0,
     -5103.0 / 18656.0],
]
cdef double[6] _DP_B = [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0,
                        -2187.0 / 6784.0, 11.0 / 84.0]
cdef double[7] _DP_E = [71.0 / 57600.0, 0.0, -71.0 / 16695.0, 71.0 / 1920.0,
                        -17253.0 / 339200.0, 22.0 / 525.0, -1.0 / 40.0]


def lna_integrate(A, Sf, c, y0, double t0, double t1, include_G, include_V,
                  sens_mode, dense_times=None, double rtol=1e-6,
                  double atol=1e-8, long max_steps=1000000):
    """Integrate the packed LNA (+sensitivity) system from t0 to t1.

    Returns (y_end, dense_out, status, t_fail, n_steps).
    """
    cdef cnp.ndarray[cnp.int64_t, ndim=2] A_arr = np.ascontiguousarray(A, dtype=np.int64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] S_arr = np.ascontiguousarray(Sf, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] c_arr = np.ascontiguousarray(c, dtype=np.float64)
    cdef int r = A_arr.shape[0]
    cdef int s = A_arr.shape[1]
    cdef int sv = s * (s + 1) // 2
    cdef bint iG = bool(include_G)
    cdef bint iV = bool(include_V)
    cdef int sm = int(sens_mode)
    if sm == 2 and not iV:
        raise ValueError("variance sensitivities require the V block")
    cdef int dim = lna_dim(s, r, iG, iV, sm)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] y = np.array(y0, dtype=np.float64, copy=True)
    if y.shape[0] != dim:
        raise ValueError(f"packed state has length {y.shape[0]}, expected {dim}")

    cdef double span = t1 - t0
    cdef cnp.ndarray[cnp.float64_t, ndim=1] dt_arr
    cdef Py_ssize_t n_dense = 0
    cdef cnp.ndarray[cnp.float64_t, ndim=2] dense_out = None
    if dense_times is not None:
        dt_arr = np.ascontiguousarray(dense_times, dtype=np.float64)
        n_dense = dt_arr.shape[0]
        dense_out = np.empty((n_dense, dim))
    else:
        dt_arr = np.empty(0)

    cdef Py_ssize_t di = 0
    cdef int e
    while di < n_dense and dt_arr[di] <= t0:
        for e in range(dim):
            dense_out[di, e] = y[e]
        di += 1
    if span <= 0:
        return y, dense_out, STATUS_OK, t1, 0

    sc = _LnaScratch(r, s)
    cdef double[:, :] _vals = sc.vals, _d1s = sc.d1s, _d2s = sc.d2s, _dg = sc.dg
    cdef double[:, :, :] _d2g = sc.d2g
    cdef double[:] _g = sc.g, _h = sc.h
    cdef const long long[:, :] A_mv = A_arr
    cdef const double[:, :] S_mv = S_arr
    cdef const double[:] c_mv = c_arr
    cdef double[:] y_mv = y
    cdef cnp.ndarray[cnp.float64_t, ndim=2] K = np.empty((7, dim))
    cdef double[:, :] K_mv = K
    cdef cnp.ndarray[cnp.float64_t, ndim=1] ytmp = np.empty(dim)
    cdef double[:] yt_mv = ytmp
    cdef cnp.ndarray[cnp.float64_t, ndim=1] ynew = np.empty(dim)
    cdef double[:] yn_mv = ynew

    cdef double t = t0
    cdef double h, d0, d1, d2, h0, h1, sc_e, err, acc, factor, tau, th, th2, th3
    cdef long n_steps = 0
    cdef double min_h = max(1e-13 * span, 1e-300)
    cdef int stage, jj
    cdef bint ok

    # initial right-hand side and step heuristic
    _lna_rhs(y_mv, K_mv[0], A_mv, S_mv, c_mv, r, s, sv, iG, iV, sm, sc)
    for e in range(dim):
        if not isfinite(K_mv[0, e]):
            return y, dense_out, STATUS_NONFINITE, t0, 0
    d0 = 0.0
    d1 = 0.0
    for e in range(dim):
        sc_e = atol + rtol * fabs(y_mv[e])
        d0 += (y_mv[e] / sc_e) ** 2
        d1 += (K_mv[0, e] / sc_e) ** 2
    d0 = sqrt(d0 / dim)
    d1 = sqrt(d1 / dim)
    h0 = 1e-6 if (d0 < 1e-5 or d1 < 1e-5) else 0.01 * d0 / d1
    if h0 > span:
        h0 = span
    for e in range(dim):
        yt_mv[e] = y_mv[e] + h0 * K_mv[0, e]
    _lna_rhs(yt_mv, K_mv[1], A_mv, S_mv, c_mv, r, s, sv, iG, iV, sm, sc)
    d2 = 0.0
    for e in range(dim):
        sc_e = atol + rtol * fabs(y_mv[e])
        d2 += ((K_mv[1, e] - K_mv[0, e]) / sc_e) ** 2
    d2 = sqrt(d2 / dim) / h0
    if d1 <= 1e-15 and d2 <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** 0.2
    h = min(100 * h0, h1)
    if h > span:
        h = span

    cdef double t_new
    while t < t1:
        if n_steps >= max_steps:
            return y, dense_out, STATUS_MAXSTEPS, t, n_steps
        if h > t1 - t:
            h = t1 - t
        if h < min_h:
            return y, dense_out, STATUS_UNDERFLOW, t, n_steps
        ok = True
        for stage in range(1, 6):
            for e in range(dim):
                acc = 0.0
                for jj in range(stage):
                    acc += _DP_A[stage - 1][jj] * K_mv[jj, e]
                yt_mv[e] = y_mv[e] + h * acc
            _lna_rhs(yt_mv, K_mv[stage], A_mv, S_mv, c_mv, r, s, sv, iG, iV,
                     sm, sc)
            for e in range(dim):
                if not isfinite(K_mv[stage, e]):
                    ok = False
                    break
            if not ok:
                break
        if ok:
            for e in range(dim):
                acc = 0.0
                for jj in range(6):
                    acc += _DP_B[jj] * K_mv[jj, e]
                yn_mv[e] = y_mv[e] + h * acc
                if not isfinite(yn_mv[e]):
                    ok = False
            if ok:
                _lna_rhs(yn_mv, K_mv[6], A_mv, S_mv, c_mv, r, s, sv, iG, iV,
                         sm, sc)
                for e in range(dim):
                    if not isfinite(K_mv[6, e]):
                        ok = False
                        break
        if not ok:
            h *= 0.2
            n_steps += 1
            continue
        err = 0.0
        for e in range(dim):
            acc = 0.0
            for jj in range(7):
                acc += _DP_E[jj] * K_mv[jj, e]
            acc *= h
            sc_e = atol + rtol * max(fabs(y_mv[e]), fabs(yn_mv[e]))
            err += (acc / sc_e) ** 2
        err = sqrt(err / dim)
        n_steps += 1
        if err <= 1.0:
            t_new = t + h
            while di < n_dense and dt_arr[di] <= t_new + 1e-12 * max(1.0, fabs(t_new)):
                tau = dt_arr[di]
                if tau > t_new:
                    tau = t_new
                th = (tau - t) / h
                th2 = th * th
                th3 = th2 * th
                for e in range(dim):
                    dense_out[di, e] = ((2 * th3 - 3 * th2 + 1) * y_mv[e]
                                        + (th3 - 2 * th2 + th) * h * K_mv[0, e]
                                        + (-2 * th3 + 3 * th2) * yn_mv[e]
                                        + (th3 - th2) * h * K_mv[6, e])
                di += 1
            for e in range(dim):
                y_mv[e] = yn_mv[e]
                K_mv[0, e] = K_mv[6, e]
            t = t_new
            if err == 0.0:
                factor = 10.0
            else:
                factor = 0.9 * err ** -0.2
                if factor > 10.0:
                    factor = 10.0
                elif factor < 0.2:
                    factor = 0.2
            h *= factor
        else:
            factor = 0.9 * err ** -0.2
            if factor < 0.2:
                factor = 0.2
            h *= factor
    while di < n_dense:
        for e in range(dim):
            dense_out[di, e] = y_mv[e]
        di += 1
    return y, dense_out, STATUS_OK, t1, n_steps


# ---------------------------------------------------------------------------
# Markov jump process simulation

def gillespie_path(A, Sf, c, x0, double t0, double t1, seed,
                   long max_events=10000000, record=True):
    """Gillespie's direct method; returns (times, types, end_state, status)."""
    cdef cnp.ndarray[cnp.int64_t, ndim=2] A_arr = np.ascontiguousarray(A, dtype=np.int64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] S_arr = np.ascontiguousarray(Sf, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] c_arr = np.ascontiguousarray(c, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] x = np.array(x0, dtype=np.float64, copy=True)
    cdef int r = A_arr.shape[0]
    cdef int s = A_arr.shape[1]
    cdef const long long[:, :] A_mv = A_arr
    cdef const double[:, :] S_mv = S_arr
    cdef const double[:] c_mv = c_arr
    cdef double[:] x_mv = x
    cdef bint rec = bool(record)

    sc = _LnaScratch(r, s)
    cdef double[:, :] _vals = sc.vals, _d1s = sc.d1s, _d2s = sc.d2s, _dg = sc.dg
    cdef double[:, :, :] _d2g = sc.d2g
    cdef double[:] _g = sc.g, _h = sc.h
    cdef Xo xo
    xo_seed(&xo, <uint64_t>(<unsigned long long>int(seed)))

    cdef Py_ssize_t cap = 1024 if rec else 0
    cdef cnp.ndarray[cnp.float64_t, ndim=1] times = np.empty(cap)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] types = np.empty(cap, dtype=np.int64)
    cdef double t = t0
    cdef long n = 0
    cdef int status = 0
    cdef int i, nu
    cdef double H, tau, target, accum

    while True:
        _ma_parts(A_mv, x_mv, 0, _vals, _d1s, _d2s, _g, _dg, _d2g,
                  r, s)
        H = 0.0
        for i in range(r):
            _h[i] = c_mv[i] * _g[i]
            if _h[i] < 0.0:
                _h[i] = 0.0
            H += _h[i]
        if H <= 0.0:
            break
        tau = -log(xo_uniform(&xo)) / H
        if t + tau > t1:
            break
        t += tau
        target = xo_uniform(&xo) * H
        accum = 0.0
        nu = r - 1
        for i in range(r):
            accum += _h[i]
            if target <= accum:
                nu = i
                break
        for i in range(s):
            x_mv[i] += S_mv[i, nu]
        if rec:
            if n >= cap:
                cap *= 2
                times = np.resize(times, cap)
                types = np.resize(types, cap)
            times[n] = t
            types[n] = nu
        n += 1
        if n >= max_events:
            status = 1
            break
    if rec:
        return times[:n].copy(), types[:n].copy(), x, status
    return (np.empty(0), np.empty(0, dtype=np.int64), x, status)


def mjp_interval_batch(A, Sf, c, states, double t0, double T, kind, blocks,
                       seeds, grid_t=None, Mg=None, bg=None, Psig=None,
                       long max_events=10000000):
    """Propagate N jump-process particles over one observation interval.

    See the reference backend for semantics; identical draw consumption.
    """
    cdef cnp.ndarray[cnp.int64_t, ndim=2] A_arr = np.ascontiguousarray(A, dtype=np.int64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] S_arr = np.ascontiguousarray(Sf, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] c_arr = np.ascontiguousarray(c, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] st_arr = np.ascontiguousarray(states, dtype=np.float64)
    cdef int N = st_arr.shape[0]
    cdef int r = A_arr.shape[0]
    cdef int s = A_arr.shape[1]
    cdef int use_ch = 1 if int(kind) == 1 else 0

    cdef cnp.ndarray[cnp.float64_t, ndim=2] end = np.empty((N, s))
    cdef cnp.ndarray[cnp.float64_t, ndim=1] logw = np.zeros(N)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] nev = np.zeros(N, dtype=np.int64)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] status = np.zeros(N, dtype=np.int64)

    cdef cnp.ndarray[cnp.float64_t, ndim=2] blk
    if blocks is None:
        blk = np.empty((N, 0))
    else:
        blk = np.ascontiguousarray(blocks, dtype=np.float64)
    cdef cnp.ndarray[cnp.uint64_t, ndim=1] sd
    if seeds is None:
        sd = np.zeros(N, dtype=np.uint64)
    else:
        sd = np.ascontiguousarray(seeds, dtype=np.uint64)

    cdef int m = 0, p = 0
    cdef double dtau = 0.0, g0 = 0.0
    cdef const double[:] gt_mv
    cdef const double[:, :, :, :] Mg_mv
    cdef const double[:, :, :] bg_mv
    cdef const double[:, :, :, :] Ps_mv
    cdef cnp.ndarray[cnp.float64_t, ndim=2] Mt_a, Pst_a, L_a, cs_a
    cdef cnp.ndarray[cnp.float64_t, ndim=1] bt_a, w1_a, w2_a, xp_a, hstar_a
    if use_ch:
        gt = np.ascontiguousarray(grid_t, dtype=np.float64)
        gt_mv = gt
        m = gt.shape[0] - 1
        g0 = gt[0]
        dtau = (gt[m] - g0) / m
        Mg_c = np.ascontiguousarray(Mg, dtype=np.float64)
        bg_c = np.ascontiguousarray(bg, dtype=np.float64)
        Ps_c = np.ascontiguousarray(Psig, dtype=np.float64)
        Mg_mv = Mg_c
        bg_mv = bg_c
        Ps_mv = Ps_c
        p = Mg_c.shape[2]
        Mt_a = np.empty((p, s))
        Pst_a = np.empty((p, p))
        L_a = np.empty((p, p))
        cs_a = np.empty((p, p))
        bt_a = np.empty(p)
        w1_a = np.empty(p)
        w2_a = np.empty(p)
        xp_a = np.empty(s)
        hstar_a = np.empty(r)
    else:
        Mt_a = np.empty((1, 1))
        Pst_a = np.empty((1, 1))
        L_a = np.empty((1, 1))
        cs_a = np.empty((1, 1))
        bt_a = np.empty(1)
        w1_a = np.empty(1)
        w2_a = np.empty(1)
        xp_a = np.empty(s)
        hstar_a = np.empty(r)

    cdef double[:, :] Mt = Mt_a
    cdef double[:, :] Pst = Pst_a
    cdef double[:, :] L = L_a
    cdef double[:, :] csc = cs_a
    cdef double[:] bt = bt_a
    cdef double[:] w1 = w1_a
    cdef double[:] w2 = w2_a
    cdef double[:] xp = xp_a
    cdef double[:] hstar = hstar_a

    sc = _LnaScratch(r, s)
    cdef double[:, :] _vals = sc.vals, _d1s = sc.d1s, _d2s = sc.d2s, _dg = sc.dg
    cdef double[:, :, :] _d2g = sc.d2g
    cdef double[:] _g = sc.g, _h = sc.h
    cdef const long long[:, :] A_mv = A_arr
    cdef const double[:, :] S_mv = S_arr
    cdef const double[:] c_mv = c_arr
    cdef double[:, :] end_mv = end
    cdef double[:] lw_mv = logw
    cdef const double[:, :] blk_mv = blk
    cdef cnp.ndarray[cnp.float64_t, ndim=1] xw = np.empty(s)
    cdef double[:] x = xw

    cdef Stream streamst
    cdef int kpt, i, j, idx, nu, cres
    cdef long n
    cdef double t, H, Hs, tau, target, accum, logp, logq, base, dlg, wgt

    for kpt in range(N):
        streamst.pos = 0
        streamst.size = blk.shape[1]
        streamst.seed = <uint64_t>sd[kpt]
        streamst.fallback_started = False
        for j in range(s):
            x[j] = st_arr[kpt, j]
        t = t0
        logp = 0.0
        logq = 0.0
        n = 0
        while True:
            _ma_parts(A_mv, x, 0, _vals, _d1s, _d2s, _g, _dg,
                      _d2g, r, s)
            H = 0.0
            for i in range(r):
                _h[i] = c_mv[i] * _g[i]
                if _h[i] < 0.0:
                    _h[i] = 0.0
                H += _h[i]
            if use_ch:
                idx = <int>((t - g0) / dtau)
                if idx < 0:
                    idx = 0
                elif idx > m - 1:
                    idx = m - 1
                wgt = (t - gt_mv[idx]) / dtau
                for i in range(p):
                    bt[i] = (1 - wgt) * bg_mv[kpt, idx, i] + wgt * bg_mv[kpt, idx + 1, i]
                    for j in range(s):
                        Mt[i, j] = (1 - wgt) * Mg_mv[kpt, idx, i, j] + wgt * Mg_mv[kpt, idx + 1, i, j]
                    for j in range(p):
                        Pst[i, j] = (1 - wgt) * Ps_mv[kpt, idx, i, j] + wgt * Ps_mv[kpt, idx + 1, i, j]
                cres = chol_jitter_c(Pst, L, csc, p)
                if cres != 0:
                    status[kpt] = 2
                    lw_mv[kpt] = -np.inf
                    break
                # base log-density at x
                for i in range(p):
                    accum = bt[i]
                    for j in range(s):
                        accum -= Mt[i, j] * x[j]
                    w1[i] = accum
                _forward_solve(L, w1, w2, p)
                base = 0.0
                for i in range(p):
                    base += w2[i] * w2[i]
                base = -0.5 * (p * _LOG2PI + _logdet_chol(L, p) + base)
                Hs = 0.0
                for i in range(r):
                    hstar[i] = 0.0
                    if _h[i] > 0.0:
                        for j in range(s):
                            xp[j] = x[j] + S_mv[j, i]
                        for j in range(p):
                            accum = bt[j]
                            for nu in range(s):
                                accum -= Mt[j, nu] * xp[nu]
                            w1[j] = accum
                        _forward_solve(L, w1, w2, p)
                        dlg = 0.0
                        for j in range(p):
                            dlg += w2[j] * w2[j]
                        dlg = -0.5 * (p * _LOG2PI + _logdet_chol(L, p) + dlg) - base
                        if dlg > _HSTAR_LOG_CAP:
                            dlg = _HSTAR_LOG_CAP
                        hstar[i] = _h[i] * exp(dlg)
                    Hs += hstar[i]
            else:
                for i in range(r):
                    hstar[i] = _h[i]
                Hs = H
            if Hs <= 0.0:
                logp -= H * (T - t)
                break
            tau = -log(stream_uniform(&streamst, blk_mv, kpt)) / Hs
            if t + tau > T:
                logq -= Hs * (T - t)
                logp -= H * (T - t)
                break
            if t + tau == t:
                status[kpt] = 3
                lw_mv[kpt] = -np.inf
                break
            target = stream_uniform(&streamst, blk_mv, kpt) * Hs
            accum = 0.0
            nu = r - 1
            for i in range(r):
                accum += hstar[i]
                if target <= accum:
                    nu = i
                    break
            logq += log(hstar[nu]) - Hs * tau
            logp += log(_h[nu]) - H * tau
            for j in range(s):
                x[j] += S_mv[j, nu]
            t += tau
            n += 1
            if n >= max_events:
                status[kpt] = 1
                lw_mv[kpt] = -np.inf
                break
        for j in range(s):
            end_mv[kpt, j] = x[j]
        nev[kpt] = n
        if status[kpt] == 0 and use_ch:
            lw_mv[kpt] = logp - logq
    return end, logw, nev, status


# ---------------------------------------------------------------------------
# discretised-CLE propagation

def cle_interval_batch(A, Sf, c, states, z, double dtau, kind,
                       eta_grid=None, rho_grid=None, P=None, Sigma_eff=None,
                       y=None, record_paths=False):
    """Propagate N CLE particles over one observation interval of m steps.

    Mirrors the reference backend, including the degenerate-step rules.
    """
    cdef cnp.ndarray[cnp.int64_t, ndim=2] A_arr = np.ascontiguousarray(A, dtype=np.int64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] S_arr = np.ascontiguousarray(Sf, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] c_arr = np.ascontiguousarray(c, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] st_arr = np.ascontiguousarray(states, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=3] z_arr = np.ascontiguousarray(z, dtype=np.float64)
    cdef int N = st_arr.shape[0]
    cdef int s = st_arr.shape[1]
    cdef int r = A_arr.shape[0]
    cdef int m = z_arr.shape[1]
    cdef int kd = int(kind)
    cdef bint rec = bool(record_paths)

    cdef cnp.ndarray[cnp.float64_t, ndim=2] end = np.empty((N, s))
    cdef cnp.ndarray[cnp.float64_t, ndim=1] logw = np.zeros(N)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] status = np.zeros(N, dtype=np.int64)
    cdef cnp.ndarray[cnp.float64_t, ndim=3] paths
    if rec:
        paths = np.empty((N, m + 1, s))
    else:
        paths = np.empty((1, 1, 1))

    cdef int p = 0
    cdef const double[:, :, :] eta_mv
    cdef const double[:, :, :] rho_mv
    cdef const double[:, :] P_mv
    cdef const double[:, :, :] Sig_mv
    cdef const double[:] y_mv
    cdef bint have_rho = rho_grid is not None
    if kd != 0:
        eta_c = np.ascontiguousarray(eta_grid, dtype=np.float64)
        eta_mv = eta_c
        P_c = np.ascontiguousarray(P, dtype=np.float64)
        P_mv = P_c
        p = P_c.shape[1]
        Sig_c = np.ascontiguousarray(Sigma_eff, dtype=np.float64)
        Sig_mv = Sig_c
        y_c = np.ascontiguousarray(y, dtype=np.float64)
        y_mv = y_c
        if have_rho:
            rho_c = np.ascontiguousarray(rho_grid, dtype=np.float64)
            rho_mv = rho_c

    sc = _LnaScratch(r, s)
    cdef double[:, :] _vals = sc.vals, _d1s = sc.d1s, _d2s = sc.d2s, _dg = sc.dg
    cdef double[:, :, :] _d2g = sc.d2g
    cdef double[:] _g = sc.g, _h = sc.h
    cdef const long long[:, :] A_mv = A_arr
    cdef const double[:, :] S_mv = S_arr
    cdef const double[:] c_mv = c_arr
    cdef double[:, :] end_mv = end
    cdef double[:] lw_mv = logw
    cdef const double[:, :, :] z_mv = z_arr
    cdef double[:, :, :] paths_mv = paths

    # scratch
    cdef cnp.ndarray[cnp.float64_t, ndim=1] xa = np.empty(s)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] xna = np.empty(s)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] alpha_a = np.empty(s)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] beta_a = np.empty((s, s))
    cdef cnp.ndarray[cnp.float64_t, ndim=2] Ls_a = np.empty((s, s))
    cdef cnp.ndarray[cnp.float64_t, ndim=2] sw_a = np.empty((s, s))
    cdef cnp.ndarray[cnp.float64_t, ndim=2] Psi_a = np.empty((s, s))
    cdef cnp.ndarray[cnp.float64_t, ndim=2] BP_a = np.empty((s, max(p, 1)))
    cdef cnp.ndarray[cnp.float64_t, ndim=2] W_a = np.empty((s, max(p, 1)))
    cdef cnp.ndarray[cnp.float64_t, ndim=2] Om_a = np.empty((max(p, 1), max(p, 1)))
    cdef cnp.ndarray[cnp.float64_t, ndim=2] Lo_a = np.empty((max(p, 1), max(p, 1)))
    cdef cnp.ndarray[cnp.float64_t, ndim=2] Osc_a = np.empty((max(p, 1), max(p, 1)))
    cdef cnp.ndarray[cnp.float64_t, ndim=2] Oinv_a = np.empty((max(p, 1), max(p, 1)))
    cdef cnp.ndarray[cnp.float64_t, ndim=1] pv1_a = np.empty(max(p, 1))
    cdef cnp.ndarray[cnp.float64_t, ndim=1] pv2_a = np.empty(max(p, 1))
    cdef cnp.ndarray[cnp.float64_t, ndim=1] sv1_a = np.empty(s)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] sv2_a = np.empty(s)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] mu_a = np.empty(s)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] mean_a = np.empty(s)

    cdef double[:] x = xa
    cdef double[:] xn = xna
    cdef double[:] alpha = alpha_a
    cdef double[:, :] beta = beta_a
    cdef double[:, :] Ls = Ls_a
    cdef double[:, :] ssc = sw_a
    cdef double[:, :] Psi = Psi_a
    cdef double[:, :] BP = BP_a
    cdef double[:, :] W = W_a
    cdef double[:, :] Om = Om_a
    cdef double[:, :] Lo = Lo_a
    cdef double[:, :] Osc = Osc_a
    cdef double[:, :] Oinv = Oinv_a
    cdef double[:] pv1 = pv1_a
    cdef double[:] pv2 = pv2_a
    cdef double[:] sv1 = sv1_a
    cdef double[:] sv2 = sv2_a
    cdef double[:] mu = mu_a
    cdef double[:] meanv = mean_a

    cdef int kpt, k, i, j, l, cres, mres
    cdef double lw, Dk, acc, trb, trp, lq_inc, lp_inc, diffv
    cdef bint bad, degen_match

    for kpt in range(N):
        for j in range(s):
            x[j] = st_arr[kpt, j]
        if rec:
            for j in range(s):
                paths_mv[kpt, 0, j] = x[j]
        lw = 0.0
        for k in range(m):
            # hazards, drift, diffusion at current state
            _ma_parts(A_mv, x, 0, _vals, _d1s, _d2s, _g, _dg,
                      _d2g, r, s)
            for i in range(r):
                _h[i] = c_mv[i] * _g[i]
                if _h[i] < 0.0:
                    _h[i] = 0.0
            for j in range(s):
                acc = 0.0
                for i in range(r):
                    acc += S_mv[j, i] * _h[i]
                alpha[j] = acc
            for i in range(s):
                for j in range(s):
                    acc = 0.0
                    for l in range(r):
                        acc += S_mv[i, l] * _h[l] * S_mv[j, l]
                    beta[i, j] = acc

            if kd == 0:
                for i in range(s):
                    for j in range(s):
                        Psi[i, j] = beta[i, j] * dtau
                mres = chol_jitter_c(Psi, Ls, ssc, s)
                if mres == -1:
                    status[kpt] = 2
                    lw = -np.inf
                    break
                for j in range(s):
                    acc = x[j] + alpha[j] * dtau
                    for l in range(s):
                        acc += Ls[j, l] * z_mv[kpt, k, l]
                    xn[j] = acc
            else:
                # residual-bridge step
                Dk = (m - k) * dtau
                # zeta_k, zeta_k1, anchor_T into sv1 / meanv / mu (reuse)
                for j in range(s):
                    sv1[j] = eta_mv[kpt, k, j]
                    sv2[j] = eta_mv[kpt, k + 1, j]
                    mu[j] = eta_mv[kpt, m, j]
                if kd == 2 and have_rho:
                    for j in range(s):
                        sv1[j] += rho_mv[kpt, k, j]
                        sv2[j] += rho_mv[kpt, k + 1, j]
                        mu[j] += rho_mv[kpt, m, j]
                # BP = beta P ; Omega = P' BP Dk + Sigma
                for j in range(s):
                    for i in range(p):
                        acc = 0.0
                        for l in range(s):
                            acc += beta[j, l] * P_mv[l, i]
                        BP[j, i] = acc
                for i in range(p):
                    for j in range(p):
                        acc = 0.0
                        for l in range(s):
                            acc += P_mv[l, i] * BP[l, j]
                        Om[i, j] = acc * Dk + Sig_mv[kpt, i, j]
                cres = chol_jitter_c(Om, Lo, Osc, p)
                if cres == -1:
                    status[kpt] = 2
                    lw = -np.inf
                    break
                if cres == 1:
                    for j in range(s):
                        for i in range(p):
                            W[j, i] = 0.0
                else:
                    # Oinv = Om^{-1} via chol solves, then W = BP dtau Oinv
                    for i in range(p):
                        for j in range(p):
                            pv1[j] = 1.0 if j == i else 0.0
                        _forward_solve(Lo, pv1, pv2, p)
                        _back_solve_t(Lo, pv2, pv1, p)
                        for j in range(p):
                            Oinv[j, i] = pv1[j]
                    for j in range(s):
                        for i in range(p):
                            acc = 0.0
                            for l in range(p):
                                acc += BP[j, l] * dtau * Oinv[l, i]
                            W[j, i] = acc
                # innov = y - P'(anchor + resid + (alpha - dzeta) Dk)
                for i in range(p):
                    acc = y_mv[i]
                    for j in range(s):
                        acc -= P_mv[j, i] * (mu[j] + (x[j] - sv1[j])
                                             + (alpha[j] - (sv2[j] - sv1[j]) / dtau) * Dk)
                    pv1[i] = acc
                # mean move in residual space and proposal covariance
                for j in range(s):
                    meanv[j] = (x[j] - sv1[j]) + (alpha[j] - (sv2[j] - sv1[j]) / dtau) * dtau
                    for i in range(p):
                        meanv[j] += W[j, i] * pv1[i]
                trb = 0.0
                trp = 0.0
                for i in range(s):
                    for j in range(s):
                        acc = beta[i, j] * dtau
                        for l in range(p):
                            acc -= W[i, l] * BP[j, l] * dtau
                        Psi[i, j] = acc
                for i in range(s):
                    for j in range(i + 1, s):
                        acc = 0.5 * (Psi[i, j] + Psi[j, i])
                        Psi[i, j] = acc
                        Psi[j, i] = acc
                    trp += Psi[i, i]
                    trb += beta[i, i] * dtau
                if trp <= _PSI_DEGENERATE_RTOL * max(trb, 1e-300):
                    for i in range(s):
                        for j in range(s):
                            Psi[i, j] = 0.0
                mres = chol_jitter_c(Psi, Ls, ssc, s)
                if mres == -1:
                    status[kpt] = 2
                    lw = -np.inf
                    break
                for j in range(s):
                    acc = sv2[j] + meanv[j]
                    for l in range(s):
                        acc += Ls[j, l] * z_mv[kpt, k, l]
                    xn[j] = acc
                if mres == 1:
                    # degenerate proposal step: only valid on the model's own
                    # degenerate move
                    degen_match = True
                    for j in range(s):
                        diffv = fabs(xn[j] - (x[j] + alpha[j] * dtau))
                        if diffv > 1e-9 + 1e-5 * fabs(x[j] + alpha[j] * dtau):
                            degen_match = False
                            break
                    if not degen_match:
                        lw = -np.inf
                        break
                else:
                    # proposal density
                    for j in range(s):
                        sv1[j] = sv2[j] + meanv[j]
                    lq_inc = _mvn_logpdf_c(xn, sv1, Ls, sv2, sv1, s)
                    # model density (jittered Euler covariance)
                    for i in range(s):
                        for j in range(s):
                            Psi[i, j] = beta[i, j] * dtau
                    mres = chol_jitter_c(Psi, Ls, ssc, s)
                    if mres == -1:
                        status[kpt] = 2
                        lw = -np.inf
                        break
                    if mres == 1:
                        lw = -np.inf
                        break
                    for j in range(s):
                        sv1[j] = x[j] + alpha[j] * dtau
                    lp_inc = _mvn_logpdf_c(xn, sv1, Ls, sv2, sv1, s)
                    lw += lp_inc - lq_inc
            bad = False
            for j in range(s):
                if not isfinite(xn[j]):
                    bad = True
                    break
            if bad:
                status[kpt] = 3
                lw = -np.inf
                break
            for j in range(s):
                x[j] = xn[j]
            if rec:
                for j in range(s):
                    paths_mv[kpt, k + 1, j] = x[j]
        for j in range(s):
            end_mv[kpt, j] = x[j]
        lw_mv[kpt] = lw
        if rec and status[kpt] != 0:
            for i in range(k + 1, m + 1):
                for j in range(s):
                    paths_mv[kpt, i, j] = x[j]
    return end, logw, status, (paths if rec else None)
