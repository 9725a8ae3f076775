"""Pure-NumPy kernel backend.

Reference implementations of the hot numerical loops: the adaptive RK45
integrator for the surrogate ODE system (with first-order sensitivities and
dense output), jump-process simulation driven either by a plain PRNG or by a
block of auxiliary normals, and the Langevin-discretisation propagators
(forward and bridge-conditioned). The compiled backend in ``_kernels_cy``
implements the same function signatures; either module can be selected at
import time via ``skmc._backend``.

All stochastic kernels draw through a shared xoshiro256++ generator so the
two backends produce bit-identical streams from the same seed.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

BACKEND_NAME = "python"

_MASK64 = (1 << 64) - 1
_LOG2PI = math.log(2.0 * math.pi)

# Cholesky jitter ladder shared by all kernels (first entry: try exact).
JITTER_LADDER = (0.0, 1e-12, 1e-10, 1e-8, 1e-6)
# conditioned-hazard ratio cap: keeps event times representable near the
# interval end where the predictive variance collapses
_HSTAR_LOG_CAP = 30.0
# below this relative size the bridge step covariance is treated as exactly
# degenerate (deterministic step), e.g. the final step under exact observation
_PSI_DEGENERATE_RTOL = 1e-11


# ---------------------------------------------------------------------------
# PRNG: splitmix64-seeded xoshiro256++ (bit-compatible with the compiled twin)

def _splitmix64(state):
    state = (state + 0x9E3779B97F4A7C15) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return state, (z ^ (z >> 31)) & _MASK64


def _rotl(x, k):
    return ((x << k) | (x >> (64 - k))) & _MASK64


class Xoshiro:
    """Minimal xoshiro256++ uniform generator."""

    __slots__ = ("s0", "s1", "s2", "s3")

    def __init__(self, seed):
        st = int(seed) & _MASK64
        st, self.s0 = _splitmix64(st)
        st, self.s1 = _splitmix64(st)
        st, self.s2 = _splitmix64(st)
        st, self.s3 = _splitmix64(st)

    def next_u64(self):
        result = (_rotl((self.s0 + self.s3) & _MASK64, 23) + self.s0) & _MASK64
        t = (self.s1 << 17) & _MASK64
        self.s2 ^= self.s0
        self.s3 ^= self.s1
        self.s1 ^= self.s2
        self.s0 ^= self.s3
        self.s2 ^= t
        self.s3 = _rotl(self.s3, 45)
        return result

    def uniform(self):
        # in (0, 1): offset keeps log() finite at both ends
        return ((self.next_u64() >> 11) + 0.5) * (2.0 ** -53)


def normal_to_uniform(z):
    """Phi(z) through the libm erfc, identically in both backends."""
    return 0.5 * math.erfc(-z / math.sqrt(2.0))


def fold_seed(block):
    """Deterministic 64-bit seed from the tail of an auxiliary block."""
    words = np.asarray(block, dtype=np.float64)[-4:].view(np.uint64)
    acc = 0x243F6A8885A308D3
    for w in words:
        acc, out = _splitmix64((acc ^ int(w)) & _MASK64)
        acc = out
    return acc


class _DrawStream:
    """Uniform draws from a normal block, with seeded fallback past the end."""

    __slots__ = ("block", "pos", "size", "fallback", "seed")

    def __init__(self, block, seed):
        self.block = block
        self.size = 0 if block is None else len(block)
        self.pos = 0
        self.seed = seed
        self.fallback = None

    def uniform(self):
        if self.pos < self.size:
            z = self.block[self.pos]
            self.pos += 1
            return normal_to_uniform(z)
        if self.fallback is None:
            self.fallback = Xoshiro(self.seed)
        return self.fallback.uniform()


# ---------------------------------------------------------------------------
# small dense linear algebra helpers

def chol_with_jitter(M):
    """Lower Cholesky of M (+ escalating jitter); returns (L, jitter) or None.

    A matrix that is exactly zero factorizes to the zero matrix (degenerate
    distributions are handled by callers), mirroring the compiled kernel.
    """
    M = np.asarray(M, dtype=float)
    if not np.isfinite(M).all():
        return None
    n = M.shape[0]
    if np.all(M == 0.0):
        return np.zeros_like(M), 0.0
    for jit in JITTER_LADDER:
        try:
            L = np.linalg.cholesky(M + jit * np.eye(n))
            return L, jit
        except np.linalg.LinAlgError:
            continue
    return None


def _logdet_from_chol(L):
    return 2.0 * np.sum(np.log(np.diag(L)))


def _mvn_logpdf(x, mean, L):
    diff = np.asarray(x, dtype=float) - np.asarray(mean, dtype=float)
    w = solve_triangular(L, diff, lower=True, check_finite=False)
    return -0.5 * (len(diff) * _LOG2PI + _logdet_from_chol(L) + w @ w)


# ---------------------------------------------------------------------------
# mass-action evaluation on raw arrays (A: (r,s) int, x: (s,) float)

def _parts(A, x, order):
    r, s = A.shape
    vals = np.empty((r, s))
    d1s = np.empty((r, s))
    d2s = np.empty((r, s))
    for i in range(r):
        for j in range(s):
            a = A[i, j]
            if a == 0:
                vals[i, j], d1s[i, j], d2s[i, j] = 1.0, 0.0, 0.0
            elif a == 1:
                vals[i, j], d1s[i, j], d2s[i, j] = x[j], 1.0, 0.0
            else:
                v, d1, d2 = 1.0, 0.0, 0.0
                for q in range(a):
                    f = x[j] - q
                    d2 = d2 * f + 2.0 * d1
                    d1 = d1 * f + v
                    v = v * f
                inv = 1.0 / math.factorial(a)
                vals[i, j], d1s[i, j], d2s[i, j] = v * inv, d1 * inv, d2 * inv
    g = np.prod(vals, axis=1)
    if order == 0:
        return g, None, None
    dg = np.empty((r, s))
    for i in range(r):
        for j in range(s):
            prod = 1.0
            for k in range(s):
                if k != j:
                    prod *= vals[i, k]
            dg[i, j] = d1s[i, j] * prod
    if order == 1:
        return g, dg, None
    d2g = np.empty((r, s, s))
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
    return g, dg, d2g


def _hazard_batch(A, c, X):
    """Clamped hazards for a batch of states X (N, s) -> (N, r)."""
    N, s = X.shape
    r = A.shape[0]
    H = np.ones((N, r))
    for i in range(r):
        for j in range(s):
            a = A[i, j]
            if a == 0:
                continue
            col = X[:, j].copy()
            if a > 1:
                acc = col.copy()
                for q in range(1, a):
                    acc = acc * (col - q)
                col = acc / math.factorial(a)
            H[:, i] *= col
    H *= c[None, :]
    np.maximum(H, 0.0, out=H)
    return H


# ---------------------------------------------------------------------------
# LNA ODE system: packing and right-hand side

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


def _vech_indices(s):
    ii, jj = np.tril_indices(s)
    return ii, jj


class _LnaSystem:
    def __init__(self, A, Sf, c, include_G, include_V, sens_mode):
        if sens_mode == 2 and not include_V:
            raise ValueError("variance sensitivities require the V block")
        self.A = A
        self.Sf = Sf
        self.c = c
        self.r, self.s = A.shape
        self.include_G = include_G
        self.include_V = include_V
        self.sens_mode = sens_mode
        self.ii, self.jj = _vech_indices(self.s)
        self.sv = self.s * (self.s + 1) // 2
        self.dim = lna_dim(self.s, self.r, include_G, include_V, sens_mode)

    def _unvech(self, v):
        s = self.s
        M = np.zeros((s, s))
        M[self.ii, self.jj] = v
        M[self.jj, self.ii] = v
        return M

    def rhs(self, t, y):
        s, r = self.s, self.r
        Sf, c = self.Sf, self.c
        eta = y[:s]
        off = s
        if self.include_G:
            G = y[off:off + s * s].reshape(s, s)
            off += s * s
        if self.include_V:
            V = self._unvech(y[off:off + self.sv])
            off += self.sv

        need_F = self.include_G or self.include_V or self.sens_mode >= 1
        order = 2 if self.sens_mode == 2 else (1 if need_F else 0)
        g, dg, d2g = _parts(self.A, eta, order)
        h = c * g
        neg = h < 0.0
        if neg.any():
            h = h.copy()
            h[neg] = 0.0
            g = g.copy()
            g[neg] = 0.0
            if dg is not None:
                dg = dg.copy()
                dg[neg, :] = 0.0
            if d2g is not None:
                d2g = d2g.copy()
                d2g[neg, :, :] = 0.0

        F = Sf @ (c[:, None] * dg) if need_F else None

        dy = np.empty_like(y)
        dy[:s] = Sf @ h
        pos = s
        if self.include_G:
            dy[pos:pos + s * s] = (F @ G).ravel()
            pos += s * s
        if self.include_V:
            beta = (Sf * h) @ Sf.T
            dV = F @ V + V @ F.T + beta
            dy[pos:pos + self.sv] = dV[self.ii, self.jj]
            pos += self.sv

        if self.sens_mode >= 1:
            s_eta = y[off:off + r * s].reshape(r, s)
            d_eta_sens = s_eta @ F.T
            d_eta_sens += Sf.T * g[:, None]
            dy[pos:pos + r * s] = d_eta_sens.ravel()
            pos += r * s
            off += r * s
        if self.sens_mode == 2:
            for i in range(r):
                sV = self._unvech(y[off + i * self.sv: off + (i + 1) * self.sv])
                si = s_eta[i]
                # total derivative of F and beta w.r.t. c_i (explicit + via eta)
                DF = np.outer(Sf[:, i], dg[i])
                DF += Sf @ (c[:, None] * (d2g @ si))
                dh = c * (dg @ si)
                dh[i] += g[i]
                Dbeta = (Sf * dh) @ Sf.T
                dsV = F @ sV + sV @ F.T + DF @ V + V @ DF.T + Dbeta
                dy[pos + i * self.sv: pos + (i + 1) * self.sv] = dsV[self.ii, self.jj]
        return dy


# Dormand-Prince 4(5) tableau (FSAL)
_DP_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0])
_DP_A = [
    np.array([]),
    np.array([1 / 5]),
    np.array([3 / 40, 9 / 40]),
    np.array([44 / 45, -56 / 15, 32 / 9]),
    np.array([19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729]),
    np.array([9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656]),
]
_DP_B = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84])
_DP_E = np.array([71 / 57600, 0.0, -71 / 16695, 71 / 1920,
                  -17253 / 339200, 22 / 525, -1 / 40])

_STATUS_OK = 0
_STATUS_UNDERFLOW = 1
_STATUS_MAXSTEPS = 2
_STATUS_NONFINITE = 3


def _initial_step(rhs, t0, y0, f0, rtol, atol, span):
    scale = atol + rtol * np.abs(y0)
    d0 = math.sqrt(float(np.mean((y0 / scale) ** 2)))
    d1 = math.sqrt(float(np.mean((f0 / scale) ** 2)))
    h0 = 1e-6 if (d0 < 1e-5 or d1 < 1e-5) else 0.01 * d0 / d1
    h0 = min(h0, span)
    y1 = y0 + h0 * f0
    f1 = rhs(t0 + h0, y1)
    d2 = math.sqrt(float(np.mean(((f1 - f0) / scale) ** 2))) / h0
    if d1 <= 1e-15 and d2 <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** 0.2
    return min(100 * h0, h1, span)


def _hermite(t, t0, h, y0, y1, f0, f1):
    th = (t - t0) / h
    th2 = th * th
    th3 = th2 * th
    return ((2 * th3 - 3 * th2 + 1) * y0 + (th3 - 2 * th2 + th) * h * f0
            + (-2 * th3 + 3 * th2) * y1 + (th3 - th2) * h * f1)


def lna_integrate(A, Sf, c, y0, t0, t1, include_G, include_V, sens_mode,
                  dense_times=None, rtol=1e-6, atol=1e-8, max_steps=1_000_000):
    """Integrate the packed LNA (+sensitivity) system from t0 to t1.

    Returns (y_end, dense_out, status, t_fail, n_steps); dense_out rows are the
    cubic-Hermite interpolated packed states at the requested times.
    """
    sys_ = _LnaSystem(np.asarray(A, dtype=np.int64), np.asarray(Sf, dtype=float),
                      np.asarray(c, dtype=float), include_G, include_V, sens_mode)
    y = np.asarray(y0, dtype=float).copy()
    if y.shape != (sys_.dim,):
        raise ValueError(f"packed state has length {y.shape}, expected {sys_.dim}")
    span = t1 - t0
    n_dense = 0 if dense_times is None else len(dense_times)
    dense_out = np.empty((n_dense, sys_.dim)) if n_dense else None
    di = 0
    if n_dense:
        while di < n_dense and dense_times[di] <= t0:
            dense_out[di] = y
            di += 1
    if span <= 0:
        return y, dense_out, _STATUS_OK, t1, 0

    rhs = sys_.rhs
    f = rhs(t0, y)
    if not np.isfinite(f).all():
        return y, dense_out, _STATUS_NONFINITE, t0, 0
    h = _initial_step(rhs, t0, y, f, rtol, atol, span)
    t = t0
    K = np.empty((7, sys_.dim))
    n_steps = 0
    min_h = max(1e-13 * span, 1e-300)
    while t < t1:
        if n_steps >= max_steps:
            return y, dense_out, _STATUS_MAXSTEPS, t, n_steps
        h = min(h, t1 - t)
        if h < min_h:
            return y, dense_out, _STATUS_UNDERFLOW, t, n_steps
        K[0] = f
        ok = True
        for stage in range(1, 6):
            yi = y + h * (_DP_A[stage] @ K[:stage])
            K[stage] = rhs(t + _DP_C[stage] * h, yi)
            if not np.isfinite(K[stage]).all():
                ok = False
                break
        if ok:
            y_new = y + h * (_DP_B @ K[:6])
            K[6] = rhs(t + h, y_new)
            ok = np.isfinite(y_new).all() and np.isfinite(K[6]).all()
        if not ok:
            h *= 0.2
            n_steps += 1
            continue
        err_vec = h * (_DP_E @ K)
        scale = atol + rtol * np.maximum(np.abs(y), np.abs(y_new))
        err = math.sqrt(float(np.mean((err_vec / scale) ** 2)))
        n_steps += 1
        if err <= 1.0:
            t_new = t + h
            if n_dense:
                while di < n_dense and dense_times[di] <= t_new + 1e-12 * max(1.0, abs(t_new)):
                    tau = min(dense_times[di], t_new)
                    dense_out[di] = _hermite(tau, t, h, y, y_new, K[0], K[6])
                    di += 1
            y = y_new
            f = K[6]
            t = t_new
            factor = 10.0 if err == 0.0 else min(10.0, max(0.2, 0.9 * err ** -0.2))
            h *= factor
        else:
            h *= max(0.2, 0.9 * err ** -0.2)
    while di < n_dense:
        dense_out[di] = y
        di += 1
    return y, dense_out, _STATUS_OK, t1, n_steps


# ---------------------------------------------------------------------------
# Markov jump process simulation

def gillespie_path(A, Sf, c, x0, t0, t1, seed, max_events=10_000_000,
                   record=True):
    """Gillespie's direct method; returns (times, types, end_state, status).

    status 0 on success, 1 if the event cap was hit. Draws come from a
    xoshiro256++ stream so both backends generate identical paths.
    """
    A = np.asarray(A, dtype=np.int64)
    Sf = np.asarray(Sf, dtype=float)
    c = np.asarray(c, dtype=float)
    x = np.asarray(x0, dtype=float).copy()
    rng = Xoshiro(seed)
    times = [] if record else None
    types = [] if record else None
    t = float(t0)
    n = 0
    status = 0
    while True:
        g, _, _ = _parts(A, x, 0)
        h = np.maximum(c * g, 0.0)
        H = float(h.sum())
        if H <= 0.0:
            break
        tau = -math.log(rng.uniform()) / H
        if t + tau > t1:
            break
        t += tau
        target = rng.uniform() * H
        acc = 0.0
        nu = A.shape[0] - 1
        for i in range(A.shape[0]):
            acc += h[i]
            if target <= acc:
                nu = i
                break
        x += Sf[:, nu]
        if record:
            times.append(t)
            types.append(nu)
        n += 1
        if n >= max_events:
            status = 1
            break
    times = np.asarray(times if record else [], dtype=float)
    types = np.asarray(types if record else [], dtype=np.int64)
    return times, types, x, status


def _interp_row(arr, idx, w):
    return (1.0 - w) * arr[idx] + w * arr[idx + 1]


def _ch_logdens(x, M, b, L):
    from scipy.linalg import solve_triangular

    resid = b - M @ x
    wv = solve_triangular(L, resid, lower=True, check_finite=False)
    return -0.5 * (len(b) * _LOG2PI + _logdet_from_chol(L) + wv @ wv)


def mjp_interval_batch(A, Sf, c, states, t0, T, kind, blocks, seeds,
                       grid_t=None, Mg=None, bg=None, Psig=None,
                       max_events=10_000_000):
    """Propagate N jump-process particles over one observation interval.

    kind 0 = myopic forward simulation (proposal density cancels the model
    density, so the dynamic log-weight is 0); kind 1 = conditioned hazard,
    returning log p(path) - log q(path). Auxiliary draws come from `blocks`
    (normals, transformed to uniforms) with a seeded fallback stream.

    Returns (end_states, logw_dyn, n_events, status) with status 1 where the
    event cap was reached (weight set to -inf).
    """
    A = np.asarray(A, dtype=np.int64)
    Sf = np.asarray(Sf, dtype=float)
    c = np.asarray(c, dtype=float)
    states = np.asarray(states, dtype=float)
    N = states.shape[0]
    r = A.shape[0]
    end = np.empty_like(states)
    logw = np.zeros(N)
    nev = np.zeros(N, dtype=np.int64)
    status = np.zeros(N, dtype=np.int64)
    use_ch = kind == 1
    if use_ch:
        m = len(grid_t) - 1
        dtau = (grid_t[-1] - grid_t[0]) / m
    for kpt in range(N):
        stream = _DrawStream(None if blocks is None else blocks[kpt],
                             0 if seeds is None else int(seeds[kpt]))
        x = states[kpt].copy()
        t = float(t0)
        logp = 0.0
        logq = 0.0
        n = 0
        while True:
            g, _, _ = _parts(A, x, 0)
            h = np.maximum(c * g, 0.0)
            H = float(h.sum())
            if use_ch:
                idx = int((t - grid_t[0]) / dtau)
                idx = min(max(idx, 0), m - 1)
                w = (t - grid_t[idx]) / dtau
                M_t = _interp_row(Mg[kpt], idx, w)
                b_t = _interp_row(bg[kpt], idx, w)
                Psi_t = _interp_row(Psig[kpt], idx, w)
                res = chol_with_jitter(Psi_t)
                if res is None or np.all(res[0] == 0.0):
                    status[kpt] = 2
                    logw[kpt] = -np.inf
                    break
                L = res[0]
                base = _ch_logdens(x, M_t, b_t, L)
                hstar = np.zeros(r)
                for i in range(r):
                    if h[i] > 0.0:
                        dlg = _ch_logdens(x + Sf[:, i], M_t, b_t, L) - base
                        hstar[i] = h[i] * math.exp(min(dlg, _HSTAR_LOG_CAP))
            else:
                hstar = h
            Hs = float(hstar.sum())
            if Hs <= 0.0:
                logp -= H * (T - t)
                break
            tau = -math.log(stream.uniform()) / Hs
            if t + tau > T:
                logq -= Hs * (T - t)
                logp -= H * (T - t)
                break
            if t + tau == t:
                # holding time below time resolution: doomed forced path
                status[kpt] = 3
                logw[kpt] = -np.inf
                break
            target = stream.uniform() * Hs
            acc = 0.0
            nu = r - 1
            for i in range(r):
                acc += hstar[i]
                if target <= acc:
                    nu = i
                    break
            logq += math.log(hstar[nu]) - Hs * tau
            logp += math.log(h[nu]) - H * tau
            x += Sf[:, nu]
            t += tau
            n += 1
            if n >= max_events:
                status[kpt] = 1
                logw[kpt] = -np.inf
                break
        end[kpt] = x
        nev[kpt] = n
        if status[kpt] == 0 and use_ch:
            logw[kpt] = logp - logq
    return end, logw, nev, status


# ---------------------------------------------------------------------------
# discretised-CLE propagation (myopic / residual bridges)

def _cle_model_terms(A, Sf, c, x):
    g, _, _ = _parts(A, x, 0)
    h = np.maximum(c * g, 0.0)
    alpha = Sf @ h
    beta = (Sf * h) @ Sf.T
    return alpha, beta


def rb_moments(alpha, beta, resid, dzeta, dtau, Dk, anchor_T, P, Sigma_eff, y):
    """Residual-bridge conditional moments for one step.

    Returns (mu, Psi): the conditional mean of the next residual and its
    covariance, conditioning the Euler-jointed (residual, observation)
    Gaussian on the end-point observation. `anchor_T` is the deterministic
    path value at the interval end (eta_T, or eta_T + rho_T with extra
    subtraction); `dzeta` its local slope estimate.
    """
    s = len(resid)
    BP = beta @ P
    Omega = P.T @ BP * Dk + Sigma_eff
    res = chol_with_jitter(Omega)
    if res is None:
        return None, None
    Lo = res[0]
    if np.all(Lo == 0.0):
        W = np.zeros((s, P.shape[1]))
    else:
        W = BP * dtau @ cho_solve((Lo, True), np.eye(P.shape[1]),
                                  check_finite=False)
    mean_resid = resid + (alpha - dzeta) * dtau
    innov = y - P.T @ (anchor_T + resid + (alpha - dzeta) * Dk)
    mu = mean_resid + W @ innov
    Psi = beta * dtau - W @ (BP.T * dtau)
    Psi = 0.5 * (Psi + Psi.T)
    if np.trace(Psi) <= _PSI_DEGENERATE_RTOL * max(np.trace(beta) * dtau, 1e-300):
        Psi = np.zeros_like(Psi)
    return mu, Psi


def cle_interval_batch(A, Sf, c, states, z, dtau, kind,
                       eta_grid=None, rho_grid=None,
                       P=None, Sigma_eff=None, y=None,
                       record_paths=False):
    """Propagate N CLE particles over one observation interval of m steps.

    kind 0 = myopic Euler-Maruyama; 1 = residual bridge; 2 = residual bridge
    with extra subtraction. `z` has shape (N, m, s); `Sigma_eff` is per
    particle (N, p, p). For bridge kinds the dynamic log-weight
    log p_e(path) - log q(path) is returned; for myopic it is exactly 0.

    Returns (end_states, logw_dyn, status, paths or None).
    """
    A = np.asarray(A, dtype=np.int64)
    Sf = np.asarray(Sf, dtype=float)
    c = np.asarray(c, dtype=float)
    states = np.asarray(states, dtype=float)
    N, s = states.shape
    m = z.shape[1]
    end = np.empty_like(states)
    logw = np.zeros(N)
    status = np.zeros(N, dtype=np.int64)
    paths = np.empty((N, m + 1, s)) if record_paths else None
    use_bridge = kind != 0
    for kpt in range(N):
        x = states[kpt].copy()
        if record_paths:
            paths[kpt, 0] = x
        lw = 0.0
        for k in range(m):
            alpha, beta = _cle_model_terms(A, Sf, c, x)
            if use_bridge:
                zeta_k = eta_grid[kpt, k].copy()
                zeta_k1 = eta_grid[kpt, k + 1].copy()
                if kind == 2:
                    zeta_k = zeta_k + rho_grid[kpt, k]
                    zeta_k1 = zeta_k1 + rho_grid[kpt, k + 1]
                resid = x - zeta_k
                dzeta = (zeta_k1 - zeta_k) / dtau
                Dk = (m - k) * dtau
                end_anchor = eta_grid[kpt, m].copy()
                if kind == 2:
                    end_anchor = end_anchor + rho_grid[kpt, m]
                mu, Psi = rb_moments(alpha, beta, resid, dzeta, dtau, Dk,
                                     end_anchor, P, Sigma_eff[kpt], y)
                if mu is None:
                    status[kpt] = 2
                    lw = -np.inf
                    break
                resq = chol_with_jitter(Psi)
                if resq is None:
                    status[kpt] = 2
                    lw = -np.inf
                    break
                Lq = resq[0]
                x_new = zeta_k1 + mu + Lq @ z[kpt, k]
                # proposal density (same jittered factor used for the draw)
                if np.all(Lq == 0.0):
                    # degenerate proposal step: the increment cancels exactly
                    # when it coincides with the model's own degenerate move,
                    # otherwise the model cannot have produced it
                    model_move = x + alpha * dtau
                    if np.allclose(x_new, model_move, atol=1e-9):
                        lq_inc = 0.0
                        lp_inc = 0.0
                    else:
                        lw = -np.inf
                        break
                else:
                    lq_inc = _mvn_logpdf(x_new, zeta_k1 + mu, Lq)
                    resm = chol_with_jitter(beta * dtau)
                    if resm is None:
                        status[kpt] = 2
                        lw = -np.inf
                        break
                    Lm = resm[0]
                    if np.all(Lm == 0.0):
                        lw = -np.inf
                        break
                    lp_inc = _mvn_logpdf(x_new, x + alpha * dtau, Lm)
                lw += lp_inc - lq_inc
            else:
                resm = chol_with_jitter(beta * dtau)
                if resm is None:
                    status[kpt] = 2
                    lw = -np.inf
                    break
                x_new = x + alpha * dtau + resm[0] @ z[kpt, k]
            if not np.isfinite(x_new).all():
                status[kpt] = 3
                lw = -np.inf
                break
            x = x_new
            if record_paths:
                paths[kpt, k + 1] = x
        end[kpt] = x
        logw[kpt] = lw
        if record_paths and status[kpt] != 0:
            paths[kpt, k + 1:] = x
    return end, logw, status, paths
