"""Accelerated pseudo-marginal Metropolis-Hastings on log rate constants.

One surrogate forward-filter pass per proposed value simultaneously supplies
the delayed-acceptance screening likelihood, the (simplified or full) MALA
gradient and the dense ODE grids reused by the bridge proposals. Stage Two
runs the particle filter with Crank-Nicolson-correlated auxiliary variables;
on rejection at either stage every cached quantity carries over, so the
chain state never needs recomputation.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import pfilter as pf
from ._backend import backend_name
from .bridge import BridgeKind, BridgeError
from .lna import FilterError, LnaIntegrationError, forward_filter
from .simulate import SimulationExplosion

_LOG2PI = math.log(2.0 * math.pi)

PROPOSALS = ("rwm", "mala", "smala")


@dataclass
class ChainConfig:
    n_iters: int
    proposal: str = "rwm"
    lam: float = 0.5
    Sigma_T: np.ndarray = None          # preconditioner over free components
    rho: float = 0.0
    N: int = 50
    delayed_acceptance: bool = False
    seed: int = 0
    bridge: BridgeKind = field(default_factory=BridgeKind)
    prior_mean: np.ndarray = None       # prior on log c, independent normals
    prior_sd: np.ndarray = None
    init_log_c: np.ndarray = None       # default: prior mean
    free_mask: np.ndarray = None        # default: all components sampled
    max_events: int = 1_000_000
    mjp_block: int = None               # auxiliary block size; None -> pilot
    surrogate_only: bool = False        # Stage Two forced accept (targets pi_LNA)

    def validate(self, r):
        if self.proposal not in PROPOSALS:
            raise ValueError(f"proposal must be one of {PROPOSALS}")
        if not (0.0 <= self.rho <= 1.0):
            raise ValueError("rho must lie in [0, 1]")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.N < 1:
            raise ValueError("need at least one particle")
        if self.n_iters < 1:
            raise ValueError("need at least one iteration")
        mask = (np.ones(r, dtype=bool) if self.free_mask is None
                else np.asarray(self.free_mask, dtype=bool))
        if mask.shape != (r,) or not mask.any():
            raise ValueError("free_mask must select at least one component")
        mean = (np.zeros(r) if self.prior_mean is None
                else np.asarray(self.prior_mean, dtype=float))
        sd = (np.full(r, 10.0) if self.prior_sd is None
              else np.asarray(self.prior_sd, dtype=float))
        if mean.shape != (r,) or sd.shape != (r,) or (sd <= 0).any():
            raise ValueError("prior mean/sd must be length-r with sd > 0")
        k = int(mask.sum())
        Sig = (np.eye(k) if self.Sigma_T is None
               else np.atleast_2d(np.asarray(self.Sigma_T, dtype=float)))
        if Sig.shape != (k, k):
            raise ValueError("Sigma_T must match the number of free components")
        if not np.allclose(Sig, Sig.T):
            raise ValueError("Sigma_T must be symmetric")
        try:
            np.linalg.cholesky(Sig)
        except np.linalg.LinAlgError as exc:
            raise ValueError("Sigma_T must be positive definite") from exc
        return mask, mean, sd, Sig


# ---------------------------------------------------------------------------
# proposal kernels

def rwm_propose(log_c, lam, LT, rng):
    """Random-walk proposal log_c + lam * L z with L L' = Sigma_T."""
    z = rng.standard_normal(len(log_c))
    return log_c + lam * (LT @ z)


def _mvn_logpdf_cov_chol(x, mean, L, lam):
    diff = (np.asarray(x) - np.asarray(mean)) / lam
    w = np.linalg.solve(L, diff)
    k = len(diff)
    return -0.5 * (k * _LOG2PI + 2 * np.sum(np.log(lam * np.diag(L))) + w @ w)


def mala_propose(log_c, grad, lam, Sigma_T, LT, rng):
    """Preconditioned Langevin proposal.

    Returns (log_c_star, log q(forward)); the reverse density needs the
    gradient at the proposed point, see mala_logq.
    """
    mean = log_c + 0.5 * lam * lam * (Sigma_T @ grad)
    z = rng.standard_normal(len(log_c))
    prop = mean + lam * (LT @ z)
    return prop, _mvn_logpdf_cov_chol(prop, mean, LT, lam)


def mala_logq(frm, to, grad_at_frm, lam, Sigma_T, LT):
    """log q(to | frm) for the MALA kernel."""
    mean = frm + 0.5 * lam * lam * (Sigma_T @ grad_at_frm)
    return _mvn_logpdf_cov_chol(to, mean, LT, lam)


def crank_nicolson(u, rho, rng):
    """u* = rho u + sqrt(1 - rho^2) omega; preserves N(0, I_d)."""
    omega = rng.standard_normal(u.layout.d)
    return pf.AuxiliaryVariables(u=rho * u.u + math.sqrt(1.0 - rho * rho) * omega,
                                 layout=u.layout)


# ---------------------------------------------------------------------------
# acceptance ratios (log scale; -inf handled explicitly)

def stage_one_logratio(log_prior_cur, log_plna_cur, log_q_fwd,
                       log_prior_prop, log_plna_prop, log_q_rev):
    """Screening ratio: pi(c*) p_LNA(D|c*) q(c|c*) / pi(c) p_LNA(D|c) q(c*|c)."""
    if not np.isfinite(log_prior_prop) or not np.isfinite(log_plna_prop):
        return -np.inf
    return (log_prior_prop + log_plna_prop + log_q_rev
            - log_prior_cur - log_plna_cur - log_q_fwd)


def stage_two_logratio(log_phat_cur, log_plna_cur, log_phat_prop, log_plna_prop):
    """Correction ratio: [phat*/phat] x [p_LNA / p_LNA*]."""
    if not np.isfinite(log_phat_prop):
        return -np.inf
    return log_phat_prop - log_phat_cur + log_plna_cur - log_plna_prop


def pmmh_logratio(log_prior_cur, log_phat_cur, log_q_fwd,
                  log_prior_prop, log_phat_prop, log_q_rev):
    """Single-stage pseudo-marginal ratio (no delayed acceptance)."""
    if not np.isfinite(log_prior_prop) or not np.isfinite(log_phat_prop):
        return -np.inf
    return (log_prior_prop + log_phat_prop + log_q_rev
            - log_prior_cur - log_phat_cur - log_q_fwd)


# ---------------------------------------------------------------------------
# chain driver

@dataclass
class ChainResult:
    log_c: np.ndarray            # (n_iters, r)
    log_phat: np.ndarray
    log_plna: np.ndarray
    stage1_accept: np.ndarray    # uint8
    stage2_accept: np.ndarray
    u0 : np.ndarray              # first auxiliary coordinate per iteration
    diagnostics: dict
    config: ChainConfig


class _Surrogate:
    """One forward-filter pass: likelihood, gradient and bridge caches."""

    __slots__ = ("log_plna", "grad", "filter_out")

    def __init__(self, log_plna, grad, filter_out):
        self.log_plna = log_plna
        self.grad = grad
        self.filter_out = filter_out


def _surrogate_pass(net, c, data, cfg, needs_plna, needs_grad, needs_caches,
                    mask, prior_mean, prior_sd):
    if not (needs_plna or needs_grad or needs_caches):
        return _Surrogate(0.0, None, None)
    mode = ("full_sens" if cfg.proposal == "mala" and needs_grad
            else "simplified_sens" if cfg.proposal == "smala" and needs_grad
            else "eta_G_V")
    dense_dt = cfg.bridge.dt if needs_caches else None
    try:
        fo = forward_filter(net, c, data, mode=mode, dense_dt=dense_dt)
    except (FilterError, LnaIntegrationError):
        return _Surrogate(-np.inf, None, None)
    grad = None
    if needs_grad and fo.grad_log_c is not None:
        # posterior gradient in log-c space over the free components
        theta = np.log(c)
        grad = (fo.grad_log_c - (theta - prior_mean) / prior_sd ** 2)[mask]
        if not np.all(np.isfinite(grad)):
            grad = None
    return _Surrogate(fo.loglik, grad, fo)


def _log_prior(theta_free, mean_free, sd_free):
    z = (theta_free - mean_free) / sd_free
    return float(-0.5 * np.sum(z * z) - np.sum(np.log(sd_free))
                 - 0.5 * len(theta_free) * _LOG2PI)


def run_chain(config, net, data, model):
    """Run the (accelerated) pseudo-marginal chain; returns a ChainResult.

    model is 'mjp' or 'cle'. With config.surrogate_only the particle filter
    is skipped and the chain targets the surrogate posterior (test mode).
    """
    cfg = config
    r = net.n_reactions
    mask, prior_mean, prior_sd, Sigma_T = cfg.validate(r)
    cfg.bridge.validate_model(model)
    rng = np.random.default_rng(cfg.seed)
    LT = np.linalg.cholesky(Sigma_T)

    theta = (prior_mean.copy() if cfg.init_log_c is None
             else np.asarray(cfg.init_log_c, dtype=float).copy())
    if theta.shape != (r,):
        raise ValueError("init_log_c must have one entry per rate constant")

    use_grad = cfg.proposal in ("mala", "smala")
    needs_caches = cfg.bridge.kind != "myopic" and not cfg.surrogate_only
    needs_plna = cfg.delayed_acceptance or cfg.surrogate_only

    # auxiliary layout fixed for the whole chain
    if not cfg.surrogate_only:
        if model == "cle":
            layout = pf.ULayout.for_cle(data.times, cfg.bridge.dt, cfg.N,
                                        net.n_species)
        else:
            block = cfg.mjp_block
            if block is None:
                block = pf.estimate_mjp_block(net, np.exp(theta), data,
                                              np.random.default_rng(cfg.seed + 1))
            layout = pf.ULayout.for_mjp(data.n_intervals, cfg.N, block)
        u = pf.AuxiliaryVariables.fresh(layout, rng)
    else:
        layout = None
        u = None

    def phat(c_val, u_val, filter_out):
        if cfg.surrogate_only:
            return 0.0
        try:
            return pf.run_filter(net, c_val, data, cfg.N, cfg.bridge, u_val,
                                 model, filter_out=filter_out,
                                 sort=cfg.rho > 0, max_events=cfg.max_events)
        except (SimulationExplosion, BridgeError, FilterError,
                LnaIntegrationError, pf.FilterFailure):
            return -np.inf

    cur = _surrogate_pass(net, np.exp(theta), data, cfg, needs_plna, use_grad,
                          needs_caches, mask, prior_mean, prior_sd)
    cur_fo = cur.filter_out if needs_caches else None
    cur_phat = phat(np.exp(theta), u, cur_fo)
    cur_prior = _log_prior(theta[mask], prior_mean[mask], prior_sd[mask])
    if needs_plna and not np.isfinite(cur.log_plna):
        raise RuntimeError("surrogate likelihood is not finite at the initial "
                           "value; choose a different start")
    if not np.isfinite(cur_phat):
        raise RuntimeError("likelihood estimate is not finite at the initial "
                           "value; choose a different start")

    n = cfg.n_iters
    out_logc = np.empty((n, r))
    out_phat = np.empty(n)
    out_plna = np.empty(n)
    out_s1 = np.zeros(n, dtype=np.uint8)
    out_s2 = np.zeros(n, dtype=np.uint8)
    out_u0 = np.zeros(n)
    n_s1_acc = 0
    n_s2_trials = 0
    n_acc = 0
    n_fallback = 0
    n_numfail = 0

    t_start = time.perf_counter()
    for j in range(n):
        grad_ok = use_grad and cur.grad is not None
        if use_grad and cur.grad is None:
            n_fallback += 1
        theta_free = theta[mask]
        if grad_ok:
            prop_free, log_q_fwd = mala_propose(theta_free, cur.grad, cfg.lam,
                                                Sigma_T, LT, rng)
        else:
            prop_free = rwm_propose(theta_free, cfg.lam, LT, rng)
            log_q_fwd = 0.0
        theta_star = theta.copy()
        theta_star[mask] = prop_free
        prop_prior = _log_prior(prop_free, prior_mean[mask], prior_sd[mask])

        prop = _surrogate_pass(net, np.exp(theta_star), data, cfg, needs_plna,
                               use_grad, needs_caches, mask, prior_mean,
                               prior_sd)
        if (needs_plna or use_grad or needs_caches) and not np.isfinite(prop.log_plna):
            n_numfail += 1
        if grad_ok:
            if prop.grad is not None:
                log_q_rev = mala_logq(prop_free, theta_free, prop.grad,
                                      cfg.lam, Sigma_T, LT)
            else:
                log_q_rev = -np.inf
        else:
            log_q_rev = 0.0

        accept = False
        s1 = True
        if cfg.delayed_acceptance or cfg.surrogate_only:
            lr1 = stage_one_logratio(cur_prior, cur.log_plna, log_q_fwd,
                                     prop_prior, prop.log_plna, log_q_rev)
            s1 = math.log(rng.uniform()) < lr1 if lr1 < 0 else True
            if s1:
                n_s1_acc += 1
                n_s2_trials += 1
                if cfg.surrogate_only:
                    accept = True
                    prop_phat = 0.0
                    u_star = None
                else:
                    u_star = crank_nicolson(u, cfg.rho, rng)
                    prop_phat = phat(np.exp(theta_star), u_star,
                                     prop.filter_out if needs_caches else None)
                    if not np.isfinite(prop_phat):
                        n_numfail += 1
                    lr2 = stage_two_logratio(cur_phat, cur.log_plna,
                                             prop_phat, prop.log_plna)
                    accept = math.log(rng.uniform()) < lr2 if lr2 < 0 else True
        else:
            s1 = True
            n_s2_trials += 1
            u_star = crank_nicolson(u, cfg.rho, rng)
            prop_phat = phat(np.exp(theta_star), u_star,
                             prop.filter_out if needs_caches else None)
            if not np.isfinite(prop_phat):
                n_numfail += 1
            lr = pmmh_logratio(cur_prior, cur_phat, log_q_fwd,
                               prop_prior, prop_phat, log_q_rev)
            accept = math.log(rng.uniform()) < lr if lr < 0 else True

        if accept:
            theta = theta_star
            cur = prop
            cur_prior = prop_prior
            cur_phat = prop_phat
            if u_star is not None:
                u = u_star
            n_acc += 1
        out_logc[j] = theta
        out_phat[j] = cur_phat
        out_plna[j] = cur.log_plna
        out_s1[j] = s1
        out_s2[j] = accept
        if u is not None:
            out_u0[j] = u.u[0]
    cpu = time.perf_counter() - t_start

    da = cfg.delayed_acceptance or cfg.surrogate_only
    diagnostics = {
        "alpha1": n_s1_acc / n if da else float("nan"),
        "alpha2_given_1": (n_acc / n_s2_trials if n_s2_trials else float("nan"))
                          if da else float("nan"),
        "alpha": n_acc / n,
        "accepted": n_acc,
        "iterations": n,
        "cpu_seconds": cpu,
        "mala_fallbacks": n_fallback,
        "numerical_rejects": n_numfail,
        "backend": backend_name(),
        "aux_dimension": 0 if layout is None else layout.d,
    }
    return ChainResult(log_c=out_logc, log_phat=out_phat, log_plna=out_plna,
                       stage1_accept=out_s1, stage2_accept=out_s2, u0=out_u0,
                       diagnostics=diagnostics, config=cfg)


# ---------------------------------------------------------------------------
# tuning

@dataclass
class TuneResult:
    Sigma_T: np.ndarray
    lam: float
    N: int
    rho: float
    measurements: dict


def nearest_pd(M, floor=1e-10):
    """Symmetrise and clip eigenvalues so the matrix is usable as Sigma_T."""
    M = 0.5 * (M + M.T)
    vals, vecs = np.linalg.eigh(M)
    scale = max(vals.max(), floor)
    vals = np.clip(vals, floor * scale, None)
    return (vecs * vals) @ vecs.T


def measure_ratio_variance(net, c, data, N, bridge_kind, model, rho, n_pairs,
                           rng, max_events=1_000_000, mjp_block=None):
    """Variance of log[phat_{u*} / phat_u] with u* = CN(u) at fixed c."""
    if model == "cle":
        layout = pf.ULayout.for_cle(data.times, bridge_kind.dt, N, net.n_species)
    else:
        block = mjp_block or pf.estimate_mjp_block(net, c, data, rng)
        layout = pf.ULayout.for_mjp(data.n_intervals, N, block)
    fo = None
    if bridge_kind.kind != "myopic":
        fo = forward_filter(net, c, data, mode="eta_G_V", dense_dt=bridge_kind.dt)
    diffs = []
    for _ in range(n_pairs):
        u = pf.AuxiliaryVariables.fresh(layout, rng)
        u_star = crank_nicolson(u, rho, rng)
        l1 = pf.run_filter(net, c, data, N, bridge_kind, u, model,
                           filter_out=fo, sort=rho > 0, max_events=max_events)
        l2 = pf.run_filter(net, c, data, N, bridge_kind, u_star, model,
                           filter_out=fo, sort=rho > 0, max_events=max_events)
        if np.isfinite(l1) and np.isfinite(l2):
            diffs.append(l2 - l1)
    if len(diffs) < 2:
        raise RuntimeError("not enough finite estimates to measure the ratio "
                           "variance")
    return float(np.var(np.asarray(diffs), ddof=1))


_ACCEPT_TARGETS = {"rwm": 0.20, "mala": 0.45, "smala": 0.45}


def tune(pilot, ratio_log_variance=None, rho_candidates=None):
    """Deterministic tuning recommendations from pilot output.

    Sigma_T is the pilot sample covariance of the free log-c chain (nearest-PD
    repaired); lambda follows a halving/doubling rule toward the proposal's
    target acceptance rate; N scales the measured variance of the log
    likelihood-ratio to 1; rho picks the candidate whose auxiliary-chain ESS
    keeps up with the parameter mESS.
    """
    from .diagnostics import ess

    n = pilot.log_c.shape[0]
    if n < 100:
        raise ValueError("tuning needs at least 100 pilot samples")
    cfg = pilot.config
    mask = (np.ones(pilot.log_c.shape[1], dtype=bool) if cfg.free_mask is None
            else np.asarray(cfg.free_mask, dtype=bool))
    free = pilot.log_c[:, mask]
    degenerate = np.ptp(free, axis=0).max() == 0.0
    if degenerate:
        Sigma_T = np.eye(int(mask.sum()))
    else:
        Sigma_T = nearest_pd(np.cov(free.T, ddof=1).reshape(mask.sum(), mask.sum()))

    target = _ACCEPT_TARGETS[cfg.proposal]
    acc = pilot.diagnostics["alpha"]
    lam = cfg.lam
    if acc < 0.75 * target:
        lam = lam / 2.0
    elif acc > 1.33 * target:
        lam = lam * 2.0

    N = cfg.N
    if ratio_log_variance is not None:
        N = max(1, math.ceil(cfg.N * ratio_log_variance / 1.0))

    rho = cfg.rho
    rho_info = None
    if rho_candidates:
        mess = min(ess(free[:, j])[0] for j in range(free.shape[1]))
        best = None
        for cand_rho, cand_mess, cand_ess_u0 in rho_candidates:
            if cand_ess_u0 >= cand_mess and (best is None or cand_mess > best[1]):
                best = (cand_rho, cand_mess)
        if best is not None:
            rho = best[0]
        rho_info = {"pilot_mess": mess, "candidates": rho_candidates}

    return TuneResult(
        Sigma_T=Sigma_T, lam=lam, N=int(N), rho=rho,
        measurements={
            "pilot_acceptance": acc,
            "target_acceptance": target,
            "ratio_log_variance": ratio_log_variance,
            "variance_scaling": "N proportional to Var[log ratio] (target 1)",
            "pilot_iterations": n,
            "degenerate_pilot": degenerate,
            "rho_selection": rho_info,
        })
