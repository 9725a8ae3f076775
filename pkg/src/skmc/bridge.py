"""Bridge constructs: end-point-conditioned proposals for the particle filter.

Four proposal families are provided. Myopic forward simulation ignores the
next observation. The conditioned hazard (jump process) multiplies each
hazard by the ratio of surrogate predictive densities of the observation
from the post- and pre-jump states. The residual bridges (Langevin model)
condition the Euler increment of the residual process on the end-point
observation, subtracting the deterministic path (RB) and additionally the
surrogate's conditional expected residual (RB-minus).

Each construct exists in a per-iteration flavour, which reuses the forward
filter's dense ODE solution through the fundamental-matrix identities, and a
per-particle flavour that re-integrates the ODE system from each particle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _kernels_py as _ref
from ._backend import kernels
from .lna import LnaState, integrate_lna
from .simulate import JumpPath

_LOG2PI = math.log(2.0 * math.pi)

BRIDGE_KINDS = ("myopic", "ch", "rb", "rbminus")
ODE_FLAVOURS = ("iter", "part")


class BridgeError(RuntimeError):
    pass


@dataclass(frozen=True)
class BridgeKind:
    """Proposal selection: construct kind, ODE flavour and CLE step size."""

    kind: str = "myopic"
    ode: str = "iter"
    dt: float = 0.1

    def __post_init__(self):
        if self.kind not in BRIDGE_KINDS:
            raise ValueError(f"bridge must be one of {BRIDGE_KINDS}")
        if self.ode not in ODE_FLAVOURS:
            raise ValueError(f"bridge_ode must be one of {ODE_FLAVOURS}")
        if self.dt <= 0:
            raise ValueError("dt must be positive")

    def validate_model(self, model):
        if self.kind == "ch" and model != "mjp":
            raise ValueError("the conditioned hazard requires the MJP model")
        if self.kind in ("rb", "rbminus") and model != "cle":
            raise ValueError("residual bridges require the CLE model")

    @property
    def needs_G(self):
        return self.kind in ("ch", "rbminus")

    @property
    def lna_mode(self):
        if self.kind == "rb":
            return "eta_only"
        return "eta_G_V"


@dataclass
class IntervalCache:
    """Dense LNA solution over one observation interval.

    eta/G/V hold the grid values with the bridge's initial conditions
    (G = I and V = 0 at the interval start); for per-iteration provenance
    they are corrected from the filter's restarted solution through
    G_{T|t} = G_T G_t^{-1} and V0_t = V_t - G_t B G_t'.
    """

    times: np.ndarray
    eta: np.ndarray            # (m+1, s)
    G: np.ndarray = None       # (m+1, s, s)
    V: np.ndarray = None       # (m+1, s, s)
    provenance: str = "per_iteration"

    @property
    def t_start(self):
        return float(self.times[0])

    @property
    def t_end(self):
        return float(self.times[-1])

    @property
    def dt(self):
        return float(self.times[1] - self.times[0])

    @property
    def m(self):
        return len(self.times) - 1


def build_interval_cache(filter_out=None, interval=None, *, net=None, c=None,
                         particle_state=None, flavour="iter", dt=0.1,
                         mode="eta_G_V", rtol=1e-6, atol=1e-8):
    """Construct the dense-grid cache for one observation interval.

    Per-iteration provenance derives the zero-initialised V from the forward
    filter's dense output; per-particle provenance freshly integrates the
    ODE system from the given particle state (eta = x, G = I, V = 0).
    """
    if flavour == "iter":
        if filter_out is None or interval is None:
            raise ValueError("per-iteration caches need a filter output and interval")
        rec = filter_out.per_interval[interval]
        dense = rec.dense
        if dense is None:
            raise BridgeError(f"filter output has no dense grid for interval {interval}")
        eta = dense.eta.copy()
        G = None if dense.G is None else dense.G.copy()
        V = None
        if dense.V is not None:
            if G is None:
                raise BridgeError("per-iteration V correction needs the G grid")
            V = np.empty_like(dense.V)
            B = rec.B
            for k in range(dense.V.shape[0]):
                V[k] = dense.V[k] - dense.G[k] @ B @ dense.G[k].T
                V[k] = 0.5 * (V[k] + V[k].T)
        return IntervalCache(times=dense.times.copy(), eta=eta, G=G, V=V,
                             provenance="per_iteration")
    if flavour != "part":
        raise ValueError("flavour must be 'iter' or 'part'")
    if particle_state is None or net is None or c is None:
        raise ValueError("per-particle caches need net, c and particle_state")
    if filter_out is None or interval is None:
        raise ValueError("per-particle caches take the interval times from "
                         "the filter output (pass filter_out and interval)")
    rec = filter_out.per_interval[interval]
    t0 = rec.t
    t1 = filter_out.per_interval[interval + 1].t
    m = max(1, int(round((t1 - t0) / dt)))
    times = t0 + (t1 - t0) * np.arange(m + 1) / m
    init = LnaState.initial(particle_state, t=t0, n_reactions=net.n_reactions,
                            mode=mode)
    _, dense = integrate_lna(net, c, init, t1, mode=mode, dense_times=times,
                             rtol=rtol, atol=atol)
    return IntervalCache(times=times, eta=dense.eta, G=dense.G, V=dense.V,
                         provenance="per_particle")


def cache_grids_from_dense(times, eta, G, V, B_start):
    """Per-iteration correction applied to raw filter dense arrays."""
    V0 = None
    if V is not None:
        V0 = np.empty_like(V)
        for k in range(V.shape[0]):
            V0[k] = V[k] - G[k] @ B_start @ G[k].T
            V0[k] = 0.5 * (V0[k] + V0[k].T)
    return IntervalCache(times=times.copy(), eta=eta.copy(),
                         G=None if G is None else G.copy(), V=V0,
                         provenance="per_iteration")


def _inv_with_guard(M, what):
    cond = np.linalg.cond(M)
    if not np.isfinite(cond) or cond > 1e12:
        raise BridgeError(f"{what} is numerically singular (cond={cond:.3g})")
    return np.linalg.inv(M)


def transition_terms(cache, k_grid):
    """(G_{T|t}, V_{T|t}) at grid index k via the fundamental-matrix identities."""
    G_t = cache.G[k_grid]
    G_T = cache.G[-1]
    GTt = G_T @ _inv_with_guard(G_t, "fundamental matrix G_t")
    VTt = cache.V[-1] - GTt @ cache.V[k_grid] @ GTt.T
    return GTt, 0.5 * (VTt + VTt.T)


def sigma_eff_at_end(cache, obs_model):
    """Observation covariance used by the bridge formulas (LNA mean plug-in)."""
    Sig = obs_model.noise_cov_forecast(cache.eta[-1])
    if Sig is None:
        raise BridgeError("state-proportional noise needs positive P'eta at the "
                          "interval end")
    return Sig


def ch_grid_data(cache, obs_model, y_T):
    """Per-grid-point Gaussian data for the conditioned hazard.

    Returns (M, b, Psi): the surrogate predictive density of y_T from state
    x at grid time tau is N(b - M x | 0, Psi) ... i.e. mean residual
    b - M x, covariance Psi = P' V_{T|t} P + Sigma.
    """
    P = obs_model.P
    Sig = sigma_eff_at_end(cache, obs_model)
    mp1 = cache.m + 1
    p, s = P.shape[1], cache.eta.shape[1]
    M = np.empty((mp1, p, s))
    b = np.empty((mp1, p))
    Psi = np.empty((mp1, p, p))
    eta_T = cache.eta[-1]
    for k in range(mp1):
        GTt, VTt = transition_terms(cache, k)
        M[k] = P.T @ GTt
        b[k] = y_T - P.T @ eta_T + M[k] @ cache.eta[k]
        Psi[k] = P.T @ VTt @ P + Sig
    return M, b, Psi


def surrogate_predictive_logdensity(cache, obs_model, y_T, x, t):
    """log p_LNA(y_T | X_t = x) with grid interpolation, for tests and h*."""
    M, b, Psi = ch_grid_data(cache, obs_model, y_T)
    dtau = cache.dt
    idx = min(max(int((t - cache.t_start) / dtau), 0), cache.m - 1)
    w = (t - cache.times[idx]) / dtau
    Mt = (1 - w) * M[idx] + w * M[idx + 1]
    bt = (1 - w) * b[idx] + w * b[idx + 1]
    Pst = (1 - w) * Psi[idx] + w * Psi[idx + 1]
    res = _ref.chol_with_jitter(Pst)
    if res is None or np.all(res[0] == 0.0):
        raise BridgeError("degenerate predictive covariance")
    return _ref._ch_logdens(np.asarray(x, dtype=float), Mt, bt, res[0])


def conditioned_hazard(net, c, x, t, cache, obs_model, y_T):
    """h*_i(x | y_T) = h_i(x) p_LNA(y_T | x + S_i) / p_LNA(y_T | x)."""
    h = net.hazard(c, x)
    base = surrogate_predictive_logdensity(cache, obs_model, y_T, x, t)
    hstar = np.zeros_like(h)
    for i in range(net.n_reactions):
        if h[i] > 0:
            num = surrogate_predictive_logdensity(
                cache, obs_model, y_T, np.asarray(x, dtype=float) + net._Sf[:, i], t)
            hstar[i] = h[i] * math.exp(min(num - base, _ref._HSTAR_LOG_CAP))
    return hstar


def conditioned_hazard_propose(net, c, x_start, cache, obs_model, y_T, rng,
                               max_events=10_000_000):
    """Sample one conditioned-hazard path over the cache's interval.

    Returns (JumpPath, log q) where log q is the complete-data log-likelihood
    of the path under the conditioned hazard (held fixed between events).
    """
    M, b, Psi = ch_grid_data(cache, obs_model, y_T)
    dtau = cache.dt
    t0, T = cache.t_start, cache.t_end
    c = np.asarray(c, dtype=float)
    x = np.asarray(x_start, dtype=float).copy()
    t = t0
    logq = 0.0
    times, types = [], []
    while True:
        h = net.hazard(c, x)
        idx = min(max(int((t - t0) / dtau), 0), cache.m - 1)
        w = (t - cache.times[idx]) / dtau
        Mt = (1 - w) * M[idx] + w * M[idx + 1]
        bt = (1 - w) * b[idx] + w * b[idx + 1]
        Pst = (1 - w) * Psi[idx] + w * Psi[idx + 1]
        res = _ref.chol_with_jitter(Pst)
        if res is None or np.all(res[0] == 0.0):
            raise BridgeError("degenerate predictive covariance in proposal")
        L = res[0]
        base = _ref._ch_logdens(x, Mt, bt, L)
        hstar = np.zeros(net.n_reactions)
        for i in range(net.n_reactions):
            if h[i] > 0:
                dlg = _ref._ch_logdens(x + net._Sf[:, i], Mt, bt, L) - base
                hstar[i] = h[i] * math.exp(min(dlg, _ref._HSTAR_LOG_CAP))
        Hs = hstar.sum()
        if Hs <= 0:
            break
        tau = rng.exponential(1.0 / Hs)
        if t + tau > T:
            logq -= Hs * (T - t)
            break
        if t + tau == t:
            raise BridgeError("conditioned-hazard holding time below time "
                              "resolution (forced path cannot advance)")
        t += tau
        nu = int(np.searchsorted(np.cumsum(hstar), rng.uniform() * Hs))
        nu = min(nu, net.n_reactions - 1)
        logq += math.log(hstar[nu]) - Hs * tau
        x += net._Sf[:, nu]
        times.append(t)
        types.append(nu)
        if len(times) >= max_events:
            raise BridgeError("conditioned-hazard proposal exceeded the event cap")
    path = JumpPath(initial_state=np.asarray(x_start, dtype=float),
                    times=np.array(times), reactions=np.array(types, dtype=np.int64),
                    t_start=t0, t_end=T, end_state=x)
    return path, logq


def conditioned_hazard_path_logq(net, c, path, cache, obs_model, y_T):
    """Density of an arbitrary jump path under the conditioned-hazard proposal."""
    M, b, Psi = ch_grid_data(cache, obs_model, y_T)
    dtau = cache.dt
    t0, T = cache.t_start, cache.t_end
    c = np.asarray(c, dtype=float)
    x = path.initial_state.copy()
    t = t0
    logq = 0.0
    events = list(zip(path.times, path.reactions)) + [(None, None)]
    for t_ev, nu in events:
        h = net.hazard(c, x)
        idx = min(max(int((t - t0) / dtau), 0), cache.m - 1)
        w = (t - cache.times[idx]) / dtau
        Mt = (1 - w) * M[idx] + w * M[idx + 1]
        bt = (1 - w) * b[idx] + w * b[idx + 1]
        Pst = (1 - w) * Psi[idx] + w * Psi[idx + 1]
        res = _ref.chol_with_jitter(Pst)
        L = res[0]
        base = _ref._ch_logdens(x, Mt, bt, L)
        hstar = np.zeros(net.n_reactions)
        for i in range(net.n_reactions):
            if h[i] > 0:
                dlg = _ref._ch_logdens(x + net._Sf[:, i], Mt, bt, L) - base
                hstar[i] = h[i] * math.exp(min(dlg, _ref._HSTAR_LOG_CAP))
        Hs = hstar.sum()
        if t_ev is None:
            logq -= Hs * (T - t)
            break
        if hstar[nu] <= 0:
            return -np.inf
        logq += math.log(hstar[nu]) - Hs * (t_ev - t)
        x += net._Sf[:, nu]
        t = t_ev
    return logq


# ---------------------------------------------------------------------------
# residual bridges

def rho_hat(cache, r0, y_T, obs_model):
    """Conditional expected residual rho_hat on the cache grid.

    rho_hat_t = G_t r0 + V_t (G_t')^{-1} G_T' P (P'V_T P + Sigma)^{-1}
                (y_T - P'eta_T - P'G_T r0).
    """
    M1, v = rho_hat_coeffs(cache, y_T, obs_model)
    return np.einsum("kij,j->ki", M1, np.asarray(r0, dtype=float)) + v


def rho_hat_coeffs(cache, y_T, obs_model):
    """Affine coefficients of rho_hat as a function of the initial residual:
    rho_hat_t(r0) = M1_t r0 + v_t."""
    if cache.G is None or cache.V is None:
        raise BridgeError("rho_hat needs a cache with G and V grids")
    P = obs_model.P
    Sig = sigma_eff_at_end(cache, obs_model)
    G_T = cache.G[-1]
    V_T = cache.V[-1]
    eta_T = cache.eta[-1]
    Omega = P.T @ V_T @ P + Sig
    res = _ref.chol_with_jitter(Omega)
    if res is None or np.all(res[0] == 0.0):
        raise BridgeError("singular end-point covariance in rho_hat")
    from scipy.linalg import cho_solve
    Omega_inv = cho_solve((res[0], True), np.eye(P.shape[1]), check_finite=False)
    y_T = np.asarray(y_T, dtype=float)
    mp1 = cache.m + 1
    s = cache.eta.shape[1]
    M1 = np.empty((mp1, s, s))
    v = np.empty((mp1, s))
    for k in range(mp1):
        G_t = cache.G[k]
        V_t = cache.V[k]
        w = V_t @ _inv_with_guard(G_t.T, "fundamental matrix G_t'") @ G_T.T @ P @ Omega_inv
        M1[k] = G_t - w @ (P.T @ G_T)
        v[k] = w @ (y_T - P.T @ eta_T)
    return M1, v


def _zeta(cache, rho_grid, k):
    if rho_grid is None:
        return cache.eta[k]
    return cache.eta[k] + rho_grid[k]


def _bridge_step(net, c, x, k, cache, y_T, obs_model, z, rho_grid):
    dtau = cache.dt
    Dk = cache.t_end - cache.times[k]
    zeta_k = _zeta(cache, rho_grid, k)
    zeta_k1 = _zeta(cache, rho_grid, k + 1)
    anchor_T = _zeta(cache, rho_grid, cache.m)
    resid = np.asarray(x, dtype=float) - zeta_k
    h = net.hazard(c, x)
    alpha = net._Sf @ h
    beta = (net._Sf * h) @ net._Sf.T
    Sig = sigma_eff_at_end(cache, obs_model)
    mu, Psi = _ref.rb_moments(alpha, beta, resid, (zeta_k1 - zeta_k) / dtau,
                              dtau, Dk, anchor_T, obs_model.P, Sig,
                              np.asarray(y_T, dtype=float))
    if mu is None:
        raise BridgeError("bridge conditioning covariance not PD after jitter")
    res = _ref.chol_with_jitter(Psi)
    if res is None:
        raise BridgeError("bridge step covariance not PD after jitter")
    L = res[0]
    x_new = zeta_k1 + mu + L @ np.asarray(z, dtype=float)
    if np.all(L == 0.0):
        inc = 0.0
    else:
        inc = _ref._mvn_logpdf(x_new, zeta_k1 + mu, L)
    return x_new, inc


def rb_step(net, c, x, k, cache, y_T, obs_model, z):
    """One residual-bridge step from grid index k; returns (x_next, log q inc)."""
    return _bridge_step(net, c, x, k, cache, y_T, obs_model, z, None)


def rbminus_step(net, c, x, k, cache, y_T, obs_model, z, rho_grid):
    """Residual bridge with extra subtraction; rho_grid from rho_hat()."""
    return _bridge_step(net, c, x, k, cache, y_T, obs_model, z, rho_grid)


# ---------------------------------------------------------------------------
# myopic proposals

def myopic_propose(net, c, x_start, t0, t1, model, rng, dt=0.1,
                   max_events=10_000_000):
    """Forward-simulate one path; log q is the model's own path density.

    For the jump process the density is the complete-data log-likelihood;
    for the Langevin model the product of Euler transition densities.
    """
    from . import simulate as sim

    if model == "mjp":
        path = sim.gillespie(net, c, x_start, t0, t1, rng, max_events=max_events)
        return path, sim.mjp_complete_loglik(net, c, path)
    if model == "cle":
        path = sim.euler_maruyama(net, c, x_start, t0, t1, dt, rng=rng)
        return path, euler_complete_loglik(net, c, path)
    raise ValueError("model must be 'mjp' or 'cle'")


def euler_complete_loglik(net, c, path):
    """Sum of one-step Euler transition log-densities along a discretised path."""
    dtau = path.dt
    ll = 0.0
    for k in range(len(path.grid) - 1):
        x = path.states[k]
        h = net.hazard(c, x)
        alpha = net._Sf @ h
        beta = (net._Sf * h) @ net._Sf.T
        res = _ref.chol_with_jitter(beta * dtau)
        if res is None:
            return -np.inf
        L = res[0]
        if np.all(L == 0.0):
            if not np.allclose(path.states[k + 1], x + alpha * dtau, atol=1e-9):
                return -np.inf
            continue
        ll += _ref._mvn_logpdf(path.states[k + 1], x + alpha * dtau, L)
    return ll
