"""Linear noise approximation: ODE solution bundle and restarting forward filter.

The LNA tracks the deterministic mean eta, the fundamental matrix G, the
residual variance V (in its direct "V-form" ODE dV/dt = V F' + beta(eta) + F V)
and, optionally, first-order sensitivities of eta and V with respect to each
rate constant. The forward filter applies the Gaussian observation model
interval by interval, re-initialising eta and V at the filtering mean and
variance; the likelihood gradient is accumulated from the sensitivities,
which are propagated through each Kalman update so the gradient matches the
restarted recursion end to end.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from ._backend import kernels

MODES = ("eta_only", "eta_G_V", "full_sens", "simplified_sens")

_LOG2PI = np.log(2.0 * np.pi)


@lru_cache(maxsize=32)
def _tril(s):
    ii, jj = np.tril_indices(s)
    ii.setflags(write=False)
    jj.setflags(write=False)
    return ii, jj


class LnaIntegrationError(RuntimeError):
    """ODE integration failed; `.t_fail` holds the failure time."""

    def __init__(self, message, t_fail):
        super().__init__(message)
        self.t_fail = t_fail


class FilterError(RuntimeError):
    """Forward filter failed; `.interval` names the offending interval."""

    def __init__(self, message, interval):
        super().__init__(message)
        self.interval = interval


def _mode_flags(mode):
    if mode == "eta_only":
        return False, False, 0
    if mode == "eta_G_V":
        return True, True, 0
    if mode == "simplified_sens":
        return True, True, 1
    if mode == "full_sens":
        return True, True, 2
    raise ValueError(f"unknown LNA mode {mode!r}; choose from {MODES}")


@dataclass
class LnaState:
    """LNA solution bundle at a single time."""

    t: float
    eta: np.ndarray
    G: np.ndarray = None
    V: np.ndarray = None
    sens_eta: np.ndarray = None  # (r, s)
    sens_V: np.ndarray = None    # (r, s, s)

    @classmethod
    def initial(cls, x0, t=0.0, n_reactions=None, mode="eta_G_V"):
        """Fresh state: G = I, V = 0, sensitivities = 0."""
        x0 = np.asarray(x0, dtype=float)
        s = len(x0)
        include_G, include_V, sens = _mode_flags(mode)
        return cls(
            t=float(t),
            eta=x0.copy(),
            G=np.eye(s) if include_G else None,
            V=np.zeros((s, s)) if include_V else None,
            sens_eta=np.zeros((n_reactions, s)) if sens >= 1 else None,
            sens_V=np.zeros((n_reactions, s, s)) if sens == 2 else None,
        )


@dataclass
class LnaDense:
    """Dense output of one integration on a fixed time grid."""

    times: np.ndarray
    eta: np.ndarray          # (k, s)
    G: np.ndarray = None     # (k, s, s)
    V: np.ndarray = None     # (k, s, s)


def _pack(state, s, r, include_G, include_V, sens):
    parts = [np.asarray(state.eta, dtype=float)]
    if include_G:
        parts.append(np.asarray(state.G, dtype=float).ravel())
    ii, jj = _tril(s)
    if include_V:
        parts.append(np.asarray(state.V, dtype=float)[ii, jj])
    if sens >= 1:
        parts.append(np.asarray(state.sens_eta, dtype=float).ravel())
    if sens == 2:
        parts.append(np.asarray(state.sens_V, dtype=float)[:, ii, jj].ravel())
    return np.concatenate(parts)


def _unvech(v, s, ii, jj):
    M = np.zeros((s, s))
    M[ii, jj] = v
    M[jj, ii] = v
    return M


def _unpack(y, s, r, include_G, include_V, sens, t):
    ii, jj = _tril(s)
    sv = s * (s + 1) // 2
    pos = s
    eta = y[:s].copy()
    G = V = s_eta = s_V = None
    if include_G:
        G = y[pos:pos + s * s].reshape(s, s).copy()
        pos += s * s
    if include_V:
        V = _unvech(y[pos:pos + sv], s, ii, jj)
        pos += sv
    if sens >= 1:
        s_eta = y[pos:pos + r * s].reshape(r, s).copy()
        pos += r * s
    if sens == 2:
        s_V = np.empty((r, s, s))
        for i in range(r):
            s_V[i] = _unvech(y[pos + i * sv: pos + (i + 1) * sv], s, ii, jj)
    return LnaState(t=t, eta=eta, G=G, V=V, sens_eta=s_eta, sens_V=s_V)


def integrate_lna(net, c, init, t1, mode="eta_G_V", dense_times=None,
                  rtol=1e-6, atol=1e-8):
    """Integrate the LNA ODE system from init.t to t1.

    Returns (state at t1, LnaDense or None). dense_times must lie within
    [init.t, t1] and be sorted.
    """
    include_G, include_V, sens = _mode_flags(mode)
    s, r = net.n_species, net.n_reactions
    c = np.asarray(c, dtype=float)
    y0 = _pack(init, s, r, include_G, include_V, sens)
    dt_arr = None if dense_times is None else np.asarray(dense_times, dtype=float)
    y1, dense, status, t_fail, _ = kernels().lna_integrate(
        net.reactant_matrix, net._Sf, c, y0, init.t, t1,
        include_G, include_V, sens, dt_arr, rtol, atol)
    if status != 0:
        raise LnaIntegrationError(
            f"LNA integration failed (status {status}) at t={t_fail:.6g}", t_fail)
    out = _unpack(y1, s, r, include_G, include_V, sens, t1)
    dense_out = None
    if dense is not None:
        k = dense.shape[0]
        ii, jj = _tril(s)
        sv = s * (s + 1) // 2
        eta_g = dense[:, :s].copy()
        pos = s
        G_g = None
        if include_G:
            G_g = dense[:, pos:pos + s * s].reshape(k, s, s).copy()
            pos += s * s
        V_g = None
        if include_V:
            V_g = np.zeros((k, s, s))
            for a, (i, j) in enumerate(zip(ii, jj)):
                V_g[:, i, j] = dense[:, pos + a]
                V_g[:, j, i] = dense[:, pos + a]
        dense_out = LnaDense(times=dt_arr.copy(), eta=eta_g, G=G_g, V=V_g)
    return out, dense_out


def gaussian_loggrad_term(y, mu, Psi, dmu_dci, dPsi_dci=None):
    """One forecast term of the log-likelihood gradient, Gaussian observation.

    Full form: 0.5 Tr{(gamma gamma' - Psi^-1) dPsi} + gamma' dmu with
    gamma = Psi^-1 (y - mu); omitting dPsi gives the simplified
    (deterministic-part-only) variant.
    """
    y = np.atleast_1d(np.asarray(y, dtype=float))
    mu = np.atleast_1d(np.asarray(mu, dtype=float))
    Psi = np.atleast_2d(np.asarray(Psi, dtype=float))
    dmu = np.atleast_1d(np.asarray(dmu_dci, dtype=float))
    try:
        cf = cho_factor(Psi, lower=True)
    except np.linalg.LinAlgError as exc:
        raise ValueError("forecast covariance is not positive definite") from exc
    gamma = cho_solve(cf, y - mu)
    term = float(gamma @ dmu)
    if dPsi_dci is not None:
        dPsi = np.atleast_2d(np.asarray(dPsi_dci, dtype=float))
        Psi_inv = cho_solve(cf, np.eye(len(y)))
        term += 0.5 * float(np.trace((np.outer(gamma, gamma) - Psi_inv) @ dPsi))
    return term


@dataclass
class IntervalRecord:
    """Filtering state at one observation time plus the dense LNA grid of the
    interval that starts there (None for the final observation)."""

    t: float
    a: np.ndarray
    B: np.ndarray
    dense: LnaDense = None


@dataclass
class FilterOutput:
    loglik: float
    grad_log_c: np.ndarray
    per_interval: list
    mode: str


def _gauss_loglik(y, mu, Psi):
    p = len(y)
    try:
        cf = cho_factor(Psi, lower=True)
    except np.linalg.LinAlgError:
        return None, None
    diff = y - mu
    sol = cho_solve(cf, diff)
    logdet = 2.0 * np.sum(np.log(np.diag(cf[0])))
    return -0.5 * (p * _LOG2PI + logdet + diff @ sol), cf


def forward_filter(net, c, data, mode="eta_G_V", dense_dt=None,
                   sens_through_update=True, rtol=1e-6, atol=1e-8):
    """Restarting LNA forward filter (surrogate likelihood and gradient).

    At each observation time the LNA is re-initialised with eta = filtering
    mean, V = filtering variance and G = I. In full mode the sensitivities
    are propagated through the Kalman update (set sens_through_update=False
    to reset them to zero at each restart instead). The returned gradient is
    with respect to log c.

    dense_dt requests dense eta/G/V output on a uniform sub-grid of each
    interval for bridge-cache reuse.
    """
    include_G, include_V, sens = _mode_flags(mode)
    if not include_V:
        raise ValueError("forward_filter needs a mode with the V block")
    obs = data.observation_model
    c = np.asarray(c, dtype=float)
    s, r = net.n_species, net.n_reactions
    P = obs.P
    times = data.times
    Y = data.observations
    n = len(times) - 1

    x0 = data.x0
    if x0 is None:
        raise ValueError("forward_filter requires a dataset with known x0")
    a = np.asarray(x0, dtype=float).copy()
    B = np.zeros((s, s))
    sa = np.zeros((r, s)) if sens >= 1 else None
    sB = np.zeros((r, s, s)) if sens == 2 else None

    # t0 term: degenerate prior at the known initial state
    if obs.kind == "exact":
        loglik = 0.0
    else:
        Sig0 = obs.noise_cov(a)
        ll0, _ = _gauss_loglik(Y[0], P.T @ a, Sig0)
        if ll0 is None:
            raise FilterError("observation covariance at t0 not PD", 0)
        loglik = ll0
    grad_c = np.zeros(r)
    records = []

    for i in range(n):
        t0, t1 = times[i], times[i + 1]
        dense_times = None
        if dense_dt is not None:
            m = max(1, int(round((t1 - t0) / dense_dt)))
            dense_times = t0 + (t1 - t0) * np.arange(m + 1) / m
        init = LnaState(t=t0, eta=a, G=np.eye(s) if include_G else None,
                        V=B, sens_eta=sa, sens_V=sB)
        try:
            state, dense = integrate_lna(net, c, init, t1, mode=mode,
                                         dense_times=dense_times,
                                         rtol=rtol, atol=atol)
        except LnaIntegrationError as exc:
            raise FilterError(f"LNA integration failed on interval {i}: {exc}",
                              i) from exc
        records.append(IntervalRecord(t=float(t0), a=a, B=B, dense=dense))

        eta1 = state.eta
        V1 = 0.5 * (state.V + state.V.T)
        y = Y[i + 1]
        mu = P.T @ eta1
        Sig = obs.noise_cov_forecast(eta1)
        if Sig is None:
            raise FilterError(
                f"state-proportional noise needs positive P'eta on interval {i}", i)
        Psi = P.T @ V1 @ P + Sig
        ll, cf = _gauss_loglik(y, mu, Psi)
        if ll is None:
            raise FilterError(f"forecast covariance not PD on interval {i}", i)
        loglik += ll

        if sens >= 1:
            gamma = cho_solve(cf, y - mu)
            dmu = state.sens_eta @ P                      # (r, p)
            if sens == 2:
                Psi_inv = cho_solve(cf, np.eye(len(y)))
                gg = np.outer(gamma, gamma) - Psi_inv
                for j in range(r):
                    dPsi_j = P.T @ state.sens_V[j] @ P
                    dPsi_j = dPsi_j + obs.noise_cov_grad(eta1, state.sens_eta[j])
                    grad_c[j] += 0.5 * np.trace(gg @ dPsi_j) + gamma @ dmu[j]
            else:
                grad_c += dmu @ gamma

        # Kalman update
        if obs.kind == "exact":
            a = y.astype(float).copy()
            B = np.zeros((s, s))
            if sens >= 1:
                sa = np.zeros((r, s))
            if sens == 2:
                sB = np.zeros((r, s, s))
        else:
            VP = V1 @ P
            K = cho_solve(cf, VP.T).T                     # V P Psi^-1
            a = eta1 + K @ (y - mu)
            B = V1 - K @ VP.T
            B = 0.5 * (B + B.T)
            if sens >= 1:
                if sens == 2 and sens_through_update:
                    new_sa = np.empty_like(sa)
                    new_sB = np.empty_like(sB)
                    for j in range(r):
                        sV_j = state.sens_V[j]
                        dPsi_j = P.T @ sV_j @ P + obs.noise_cov_grad(
                            eta1, state.sens_eta[j])
                        dK_j = cho_solve(cf, (sV_j @ P - K @ dPsi_j).T).T
                        new_sa[j] = (state.sens_eta[j] + dK_j @ (y - mu)
                                     - K @ dmu[j])
                        sBj = sV_j - dK_j @ VP.T - K @ (P.T @ sV_j)
                        new_sB[j] = 0.5 * (sBj + sBj.T)
                    sa, sB = new_sa, new_sB
                elif sens == 2:
                    sa = np.zeros((r, s))
                    sB = np.zeros((r, s, s))
                else:
                    # simplified mode: treat the gain as constant in c
                    sa = state.sens_eta - (state.sens_eta @ P) @ K.T

    records.append(IntervalRecord(t=float(times[n]), a=a, B=B, dense=None))
    grad_log_c = grad_c * c if sens >= 1 else None
    return FilterOutput(loglik=float(loglik), grad_log_c=grad_log_c,
                        per_interval=records, mode=mode)
