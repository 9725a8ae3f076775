"""Bootstrap particle filter with explicit auxiliary randomness.

The likelihood estimator is a deterministic function of (c, u): every random
input — propagation normals and one resampling draw per interval — lives in
a flat store of standard normals with a fixed layout, so correlated
pseudo-marginal chains can perturb u with a Crank-Nicolson kernel. Jump
process proposals consume their normals through the standard-normal CDF
(uniforms, exponentials); a block that runs out falls back to a fresh stream
seeded from a hash of the block, sacrificing correlation only in that tail.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels_py as _ref
from . import bridge as bridge_mod
from ._backend import kernels
from .lna import LnaState, forward_filter, integrate_lna

__all__ = [
    "AuxiliaryVariables", "ULayout", "ParticleCloud", "systematic_resample",
    "sort_particles", "gauss_to_event_stream", "run_filter",
    "run_filter_lgssm", "pf_step", "estimate_mjp_block",
]


class FilterFailure(RuntimeError):
    """Numerical failure inside the particle filter (not an all-zero weight)."""


# ---------------------------------------------------------------------------
# auxiliary-variable store

@dataclass(frozen=True)
class ULayout:
    """Index layout of the flat auxiliary store.

    Propagation blocks (one per interval per particle) come first, then one
    resampling normal per interval.
    """

    model: str                 # 'mjp' | 'cle' | 'lgssm'
    N: int
    blocks: tuple              # per-interval block length (draws per particle)
    offsets: tuple = field(init=False)
    d: int = field(init=False)

    def __post_init__(self):
        offs = []
        pos = 0
        for b in self.blocks:
            offs.append(pos)
            pos += self.N * b
        object.__setattr__(self, "offsets", tuple(offs))
        object.__setattr__(self, "d", pos + len(self.blocks))

    @property
    def n_intervals(self):
        return len(self.blocks)

    @classmethod
    def for_cle(cls, times, dt, N, s):
        blocks = []
        for i in range(len(times) - 1):
            span = times[i + 1] - times[i]
            m = max(1, int(round(span / dt)))
            blocks.append(m * s)
        return cls(model="cle", N=N, blocks=tuple(blocks))

    @classmethod
    def for_mjp(cls, n_intervals, N, block):
        block = int(block)
        if block % 2:
            block += 1
        return cls(model="mjp", N=N, blocks=(block,) * n_intervals)

    @classmethod
    def for_lgssm(cls, n_intervals, N, s):
        return cls(model="lgssm", N=N, blocks=(s,) * n_intervals)


@dataclass
class AuxiliaryVariables:
    """Flat store of standard normals driving one likelihood estimate."""

    u: np.ndarray
    layout: ULayout

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=float)
        if self.u.shape != (self.layout.d,):
            raise ValueError(f"u has length {self.u.shape}, layout needs "
                             f"{self.layout.d}")

    @classmethod
    def fresh(cls, layout, rng):
        return cls(u=rng.standard_normal(layout.d), layout=layout)

    def prop_matrix(self, i):
        """All particles' propagation normals for interval i, shape (N, block)."""
        lay = self.layout
        b = lay.blocks[i]
        start = lay.offsets[i]
        return self.u[start:start + lay.N * b].reshape(lay.N, b)

    def resample_normal(self, i):
        lay = self.layout
        return float(self.u[lay.d - lay.n_intervals + i])


def gauss_to_event_stream(block, fallback_seed=None):
    """Turn a block of standard normals into uniforms/exponentials.

    The stream serves Gillespie-type event generation: uniforms through the
    standard-normal CDF, exponentials as -log(uniform). Past the end of the
    block, draws continue from a fresh generator seeded from a hash of the
    block, so the stream is still a deterministic function of the block.
    """
    block = np.asarray(block, dtype=float)
    seed = _ref.fold_seed(block) if fallback_seed is None else fallback_seed

    class _Stream:
        def __init__(self):
            self._inner = _ref._DrawStream(block, seed)

        def uniform(self):
            return self._inner.uniform()

        def exponential(self):
            return -math.log(self._inner.uniform())

    return _Stream()


# ---------------------------------------------------------------------------
# resampling

def systematic_resample(weights, uniform):
    """Systematic resampling: ancestor indices from one uniform draw.

    Positions (uniform + j)/N are matched against the cumulative normalised
    weights; E[count_k] = N w_k and |count_k - N w_k| < 1.
    """
    w = np.asarray(weights, dtype=float)
    if not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite and normalised")
    N = len(w)
    if not (0.0 <= uniform < 1.0):
        raise ValueError("uniform must lie in [0, 1)")
    positions = (uniform + np.arange(N)) / N
    cum = np.cumsum(w)
    cum[-1] = max(cum[-1], 1.0)   # guard round-off at the top edge
    return np.searchsorted(cum, positions, side="right").astype(np.int64)


def sort_particles(states):
    """Lexicographic particle ordering (first component, then second, ...).

    Returns the permutation; used before resampling when correlation
    preservation is on.
    """
    states = np.asarray(states)
    keys = tuple(states[:, j] for j in reversed(range(states.shape[1])))
    return np.lexsort(keys)


@dataclass
class ParticleCloud:
    """Particle states and weights within one observation interval."""

    states: np.ndarray
    log_weights: np.ndarray
    loglik: float = 0.0

    @property
    def N(self):
        return self.states.shape[0]

    def normalised_weights(self):
        lw = self.log_weights
        mx = np.max(lw)
        if not np.isfinite(mx):
            raise ValueError("all particle weights are zero")
        w = np.exp(lw - mx)
        return w / w.sum()


# ---------------------------------------------------------------------------
# per-interval proposal preparation

def _broadcast_copy(arr, N):
    return np.ascontiguousarray(np.broadcast_to(arr, (N,) + arr.shape))


def _per_particle_caches(net, c, states, t0, t1, dt, mode, rtol, atol):
    N = states.shape[0]
    m = max(1, int(round((t1 - t0) / dt)))
    times = t0 + (t1 - t0) * np.arange(m + 1) / m
    caches = []
    for k in range(N):
        init = LnaState.initial(states[k], t=t0, n_reactions=net.n_reactions,
                                mode=mode)
        _, dense = integrate_lna(net, c, init, t1, mode=mode,
                                 dense_times=times, rtol=rtol, atol=atol)
        caches.append(bridge_mod.IntervalCache(
            times=times, eta=dense.eta, G=dense.G, V=dense.V,
            provenance="per_particle"))
    return caches


def _prepare_cle(bridge_kind, states, iter_cache, net, c, obs, y,
                 rtol=1e-6, atol=1e-8):
    """Grids for the CLE kernel: (kind, eta_grid, rho_grid, Sigma_eff)."""
    N = states.shape[0]
    kind_code = {"myopic": 0, "rb": 1, "rbminus": 2}[bridge_kind.kind]
    if kind_code == 0:
        return 0, None, None, None
    if bridge_kind.ode == "iter":
        cache = iter_cache
        eta_grid = _broadcast_copy(cache.eta, N)
        Sig = bridge_mod.sigma_eff_at_end(cache, obs)
        Sigma_eff = _broadcast_copy(Sig, N)
        rho_grid = None
        if kind_code == 2:
            M1, v = bridge_mod.rho_hat_coeffs(cache, y, obs)
            r0 = states - cache.eta[0][None, :]
            rho_grid = np.einsum("kij,nj->nki", M1, r0) + v[None, :, :]
            rho_grid = np.ascontiguousarray(rho_grid)
        return kind_code, eta_grid, rho_grid, Sigma_eff
    # per-particle flavour
    mode = "eta_only" if kind_code == 1 else "eta_G_V"
    caches = _per_particle_caches(net, c, states, iter_cache.t_start,
                                  iter_cache.t_end, iter_cache.dt, mode,
                                  rtol, atol)
    s = net.n_species
    m = caches[0].m
    eta_grid = np.empty((N, m + 1, s))
    rho_grid = np.zeros((N, m + 1, s)) if kind_code == 2 else None
    Sigma_eff = np.empty((N, obs.p, obs.p))
    for k, cache in enumerate(caches):
        eta_grid[k] = cache.eta
        Sigma_eff[k] = bridge_mod.sigma_eff_at_end(cache, obs)
        if kind_code == 2:
            # particle-initialised cache: initial residual is zero
            _, v = bridge_mod.rho_hat_coeffs(cache, y, obs)
            rho_grid[k] = v
    return kind_code, eta_grid, rho_grid, Sigma_eff


def _prepare_mjp(bridge_kind, states, iter_cache, net, c, obs, y,
                 rtol=1e-6, atol=1e-8):
    """Grid data for the MJP kernel: (kind, grid_t, M, b, Psi)."""
    N = states.shape[0]
    if bridge_kind.kind == "myopic":
        return 0, None, None, None, None
    if bridge_kind.ode == "iter":
        cache = iter_cache
        M, b, Psi = bridge_mod.ch_grid_data(cache, obs, y)
        return (1, cache.times, _broadcast_copy(M, N), _broadcast_copy(b, N),
                _broadcast_copy(Psi, N))
    caches = _per_particle_caches(net, c, states, iter_cache.t_start,
                                  iter_cache.t_end, iter_cache.dt, "eta_G_V",
                                  rtol, atol)
    m = caches[0].m
    p, s = obs.p, net.n_species
    Mg = np.empty((N, m + 1, p, s))
    bg = np.empty((N, m + 1, p))
    Psig = np.empty((N, m + 1, p, p))
    for k, cache in enumerate(caches):
        Mg[k], bg[k], Psig[k] = bridge_mod.ch_grid_data(cache, obs, y)
    return 1, caches[0].times, Mg, bg, Psig


def _iter_cache_for(filter_out, i, needs):
    if not needs:
        return None
    if filter_out is None:
        raise ValueError("bridge proposals need a forward-filter output "
                         "with dense grids")
    return bridge_mod.build_interval_cache(filter_out, i, flavour="iter")


def _logmeanexp(lw):
    mx = np.max(lw)
    if not np.isfinite(mx):
        return -np.inf
    return float(mx + np.log(np.mean(np.exp(lw - mx))))


# ---------------------------------------------------------------------------
# the filter

def pf_step(states, net, c, t0, t1, y, obs, model, bridge_kind, prop_normals,
            resample_uniform, iter_cache=None, sort=False, resample=True,
            max_events=10_000_000):
    """One weighted-resampling step of the bootstrap filter.

    Returns (new_states, log_factor): the resampled particle set and the
    interval's likelihood-factor estimate log(mean unnormalised weight).
    log_factor is -inf when every weight vanishes.
    """
    N, s = states.shape
    if model == "cle":
        m = prop_normals.shape[1] // s
        z = prop_normals.reshape(N, m, s)
        kind_code, eta_grid, rho_grid, Sigma_eff = _prepare_cle(
            bridge_kind, states, iter_cache, net, c, obs, y)
        end, logw_dyn, status, _ = kernels().cle_interval_batch(
            net.reactant_matrix, net._Sf, np.asarray(c, dtype=float), states,
            z, (t1 - t0) / m, kind_code, eta_grid, rho_grid, obs.P, Sigma_eff,
            np.asarray(y, dtype=float))
    elif model == "mjp":
        seeds = np.array([_ref.fold_seed(prop_normals[k]) for k in range(N)],
                         dtype=np.uint64)
        kind_code, grid_t, Mg, bg, Psig = _prepare_mjp(
            bridge_kind, states, iter_cache, net, c, obs, y)
        end, logw_dyn, _, status = kernels().mjp_interval_batch(
            net.reactant_matrix, net._Sf, np.asarray(c, dtype=float), states,
            float(t0), float(t1), kind_code, prop_normals, seeds,
            grid_t, Mg, bg, Psig, max_events)
    else:
        raise ValueError("model must be 'mjp' or 'cle'")

    logw = logw_dyn + obs.loglik_batch(y, end)
    logw[~np.isfinite(end).all(axis=1)] = -np.inf
    log_factor = _logmeanexp(logw)
    if not np.isfinite(log_factor):
        return end, -np.inf
    if obs.kind == "exact":
        # surviving particles all equal the observation; no resampling needed
        new_states = np.repeat(np.asarray(y, dtype=float)[None, :], N, axis=0)
        return new_states, log_factor
    if not resample:
        return end, log_factor
    mx = logw.max()
    w = np.exp(logw - mx)
    w /= w.sum()
    if sort:
        order = sort_particles(end)
        end = end[order]
        w = w[order]
    ancestors = systematic_resample(w, resample_uniform)
    return end[ancestors].copy(), log_factor


def run_filter(net, c, data, N, bridge_kind, u, model, filter_out=None,
               sort=None, max_events=10_000_000, return_states=False):
    """Log-likelihood estimate log p_hat_u(D | c); deterministic in (c, u).

    With known x0 the t0 factor is the observation density at x0. Bridge
    proposals other than myopic require `filter_out` (a forward_filter result
    with dense grids at the bridge step size) for their interval caches.
    """
    obs = data.observation_model
    times = data.times
    Y = data.observations
    if data.x0 is None:
        raise ValueError("run_filter requires a known initial state x0")
    bridge_kind.validate_model(model)
    if model == "cle" and obs.kind == "exact":
        raise ValueError("exact observation is only supported with the MJP "
                         "model (weights are degenerate under the CLE)")
    if u.layout.N != N or u.layout.n_intervals != data.n_intervals:
        raise ValueError("auxiliary-variable layout does not match (N, data)")

    needs_cache = bridge_kind.kind != "myopic"
    if needs_cache and filter_out is None:
        filter_out = forward_filter(net, c, data, mode="eta_G_V",
                                    dense_dt=bridge_kind.dt)
    loglik = obs.loglik(Y[0], data.x0)
    if not np.isfinite(loglik):
        return (-np.inf, None) if return_states else -np.inf
    states = np.repeat(np.asarray(data.x0, dtype=float)[None, :], N, axis=0)
    if sort is None:
        sort = False
    for i in range(data.n_intervals):
        iter_cache = _iter_cache_for(filter_out, i, needs_cache)
        resample_u = _ref.normal_to_uniform(u.resample_normal(i))
        last = i == data.n_intervals - 1
        states, log_factor = pf_step(
            states, net, c, times[i], times[i + 1], Y[i + 1], obs, model,
            bridge_kind, u.prop_matrix(i), resample_u, iter_cache=iter_cache,
            sort=sort, resample=not last, max_events=max_events)
        if not np.isfinite(log_factor):
            return (-np.inf, states) if return_states else -np.inf
        loglik += log_factor
    return (float(loglik), states) if return_states else float(loglik)


def run_filter_lgssm(transitions, data, N, u, sort=False):
    """Particle filter for an affine-Gaussian latent model (verification aid).

    `transitions` is a list of (A_i, b_i, L_i) per interval: the latent
    transition is x' = A x + b + L z with z standard normal. Weights are the
    observation densities (myopic proposal), so the estimator's mean can be
    checked against an exact Kalman-filter likelihood.
    """
    obs = data.observation_model
    Y = data.observations
    if data.x0 is None:
        raise ValueError("known x0 required")
    loglik = obs.loglik(Y[0], data.x0)
    states = np.repeat(np.asarray(data.x0, dtype=float)[None, :], N, axis=0)
    s = states.shape[1]
    for i, (A, bvec, L) in enumerate(transitions):
        z = u.prop_matrix(i).reshape(N, s)
        states = states @ A.T + bvec[None, :] + z @ L.T
        logw = obs.loglik_batch(Y[i + 1], states)
        log_factor = _logmeanexp(logw)
        if not np.isfinite(log_factor):
            return -np.inf
        loglik += log_factor
        if i < len(transitions) - 1:
            mx = logw.max()
            w = np.exp(logw - mx)
            w /= w.sum()
            if sort:
                order = sort_particles(states)
                states = states[order]
                w = w[order]
            anc = systematic_resample(w, _ref.normal_to_uniform(u.resample_normal(i)))
            states = states[anc].copy()
    return float(loglik)


# ---------------------------------------------------------------------------
# auxiliary block sizing for the jump process

def estimate_mjp_block(net, c, data, rng, n_pilot=16, factor=16, floor=64,
                       cap=4096, max_events=1_000_000):
    """Auxiliary block size (normals per interval per particle) for MJP runs.

    Sized from a short pilot: `factor` times the mean event count of the
    busiest interval (two normals per event gives an 8x event headroom),
    floored and capped; overflow beyond the block falls back to hash-seeded
    fresh randomness.
    """
    from .simulate import gillespie

    times = data.times
    counts = np.zeros(data.n_intervals)
    for _ in range(n_pilot):
        x = data.x0.copy()
        for i in range(data.n_intervals):
            try:
                path = gillespie(net, c, x, times[i], times[i + 1], rng,
                                 max_events=max_events)
            except Exception:
                return cap
            counts[i] += path.n_events
            x = path.end_state
            # restart from data when observations are exact (hit regime)
            if data.observation_model.kind == "exact":
                x = data.observations[i + 1].copy()
    worst_mean = max(1.0, counts.max() / n_pilot)
    block = int(min(max(factor * worst_mean, floor), cap))
    return block + (block % 2)
