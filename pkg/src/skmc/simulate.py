"""Forward simulation, observation models, datasets and small-space oracles.

Gillespie's direct method simulates the jump process exactly; the
Euler-Maruyama scheme discretises the chemical Langevin equation on a uniform
sub-grid, with the matrix square root taken as a jittered lower Cholesky
factor. A truncated chemical-master-equation oracle (matrix exponential of
the hazard generator) backs the distributional tests.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.linalg import expm
from scipy.sparse.linalg import expm_multiply

from ._backend import kernels


class SimulationExplosion(RuntimeError):
    """Event cap exceeded while simulating the jump process."""


# ---------------------------------------------------------------------------
# observation models

@dataclass(frozen=True)
class ObservationModel:
    """Linear-Gaussian observation y = P'x + eps.

    kind 'constant' uses a fixed covariance Sigma; 'state_proportional' uses
    variance sigma^2 * P'x (requires p = 1); 'exact' observes P'x without
    noise (P = identity, Sigma = 0).
    """

    P: np.ndarray
    kind: str
    Sigma: np.ndarray = None
    sigma: float = None

    def __post_init__(self):
        P = np.atleast_2d(np.asarray(self.P, dtype=float))
        if P.ndim != 2:
            raise ValueError("P must be an s x p matrix")
        P.setflags(write=False)
        object.__setattr__(self, "P", P)
        if self.kind == "constant":
            Sig = np.atleast_2d(np.asarray(self.Sigma, dtype=float))
            if Sig.shape != (self.p, self.p):
                raise ValueError("Sigma must be p x p")
            if not np.allclose(Sig, Sig.T):
                raise ValueError("Sigma must be symmetric")
            if np.linalg.eigvalsh(Sig).min() < -1e-12:
                raise ValueError("Sigma must be PSD")
            Sig = 0.5 * (Sig + Sig.T)
            Sig.setflags(write=False)
            object.__setattr__(self, "Sigma", Sig)
        elif self.kind == "state_proportional":
            if self.p != 1:
                raise ValueError("state-proportional noise requires p = 1")
            if self.sigma is None or self.sigma <= 0:
                raise ValueError("state-proportional noise requires sigma > 0")
        elif self.kind == "exact":
            s = P.shape[0]
            if self.p != s or not np.array_equal(P, np.eye(s)):
                raise ValueError("exact observation requires P = identity")
        else:
            raise ValueError(f"unknown observation kind {self.kind!r}")

    @classmethod
    def constant(cls, P, Sigma):
        return cls(P=np.asarray(P, dtype=float), kind="constant",
                   Sigma=np.asarray(Sigma, dtype=float))

    @classmethod
    def proportional(cls, P, sigma):
        return cls(P=np.asarray(P, dtype=float), kind="state_proportional",
                   sigma=float(sigma))

    @classmethod
    def exact(cls, n_species):
        return cls(P=np.eye(n_species), kind="exact")

    @property
    def p(self):
        return self.P.shape[1]

    def noise_cov(self, x):
        """Observation covariance at latent state x; raises if invalid."""
        if self.kind == "constant":
            return self.Sigma
        if self.kind == "exact":
            return np.zeros((self.p, self.p))
        v = float(self.P.T @ np.asarray(x, dtype=float))
        if v <= 0:
            raise ValueError("state-proportional noise needs positive P'x")
        return np.array([[self.sigma ** 2 * v]])

    def noise_cov_forecast(self, eta):
        """Covariance with the latent state replaced by the LNA mean.

        Returns None when the state-proportional variance would be invalid.
        """
        if self.kind == "constant":
            return self.Sigma
        if self.kind == "exact":
            return np.zeros((self.p, self.p))
        v = float(self.P.T @ np.asarray(eta, dtype=float))
        if v <= 0:
            return None
        return np.array([[self.sigma ** 2 * v]])

    def noise_cov_grad(self, eta, sens_eta_j):
        """Derivative of the forecast covariance via the eta sensitivity."""
        if self.kind != "state_proportional":
            return np.zeros((self.p, self.p))
        return np.array([[self.sigma ** 2 * float(self.P.T @ sens_eta_j)]])

    def sample(self, x, rng):
        mean = self.P.T @ np.asarray(x, dtype=float)
        if self.kind == "exact":
            return mean.copy()
        cov = self.noise_cov(x)
        L = np.linalg.cholesky(cov + 1e-300 * np.eye(self.p))
        return mean + L @ rng.standard_normal(self.p)

    def loglik(self, y, x):
        """log p(y | x); for exact observation an indicator (0 or -inf)."""
        y = np.asarray(y, dtype=float)
        x = np.asarray(x, dtype=float)
        mean = self.P.T @ x
        if self.kind == "exact":
            return 0.0 if np.array_equal(mean, y) else -np.inf
        if self.kind == "state_proportional":
            v = float(self.P.T @ x)
            if v <= 0:
                return -np.inf
            var = self.sigma ** 2 * v
            d = float(y[0] - mean[0])
            return -0.5 * (math.log(2 * math.pi * var) + d * d / var)
        diff = y - mean
        try:
            L = np.linalg.cholesky(self.Sigma)
        except np.linalg.LinAlgError:
            return -np.inf
        w = np.linalg.solve(L, diff)
        return -0.5 * (self.p * math.log(2 * math.pi)
                       + 2 * np.sum(np.log(np.diag(L))) + float(w @ w))

    def loglik_batch(self, y, X):
        """Vectorised log p(y | x) over particle states X (N, s)."""
        X = np.asarray(X, dtype=float)
        y = np.asarray(y, dtype=float)
        means = X @ self.P
        if self.kind == "exact":
            hit = np.all(means == y[None, :], axis=1)
            out = np.where(hit, 0.0, -np.inf)
            return out
        if self.kind == "state_proportional":
            v = means[:, 0]
            out = np.full(X.shape[0], -np.inf)
            ok = v > 0
            var = self.sigma ** 2 * v[ok]
            d = y[0] - means[ok, 0]
            out[ok] = -0.5 * (np.log(2 * np.pi * var) + d * d / var)
            return out
        L = np.linalg.cholesky(self.Sigma)
        diff = y[None, :] - means
        w = np.linalg.solve(L, diff.T)
        return -0.5 * (self.p * np.log(2 * np.pi)
                       + 2 * np.sum(np.log(np.diag(L))) + np.sum(w * w, axis=0))


@dataclass
class Dataset:
    """Observations on a strictly increasing time grid, plus the model that
    generated them and (when known) the initial latent state."""

    times: np.ndarray
    observations: np.ndarray
    observation_model: ObservationModel
    x0: np.ndarray = None
    latent_states: np.ndarray = None

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        Y = np.atleast_2d(np.asarray(self.observations, dtype=float))
        if Y.shape[0] != len(t):
            raise ValueError("observation row count must match time count")
        if len(t) < 1 or np.any(np.diff(t) <= 0):
            raise ValueError("times must be strictly increasing")
        if Y.shape[1] != self.observation_model.p:
            raise ValueError("observation width must match the model's p")
        self.times = t
        self.observations = Y
        if self.x0 is not None:
            self.x0 = np.asarray(self.x0, dtype=float)

    @property
    def n_intervals(self):
        return len(self.times) - 1

    def to_csv(self, path_or_buf):
        def _write(fh):
            writer = csv.writer(fh)
            writer.writerow(["time"] + [f"y{i + 1}" for i in range(self.observations.shape[1])])
            for t, row in zip(self.times, self.observations):
                writer.writerow([repr(float(t))] + [repr(float(v)) for v in row])
        if isinstance(path_or_buf, (str, bytes)):
            with open(path_or_buf, "w", newline="") as fh:
                _write(fh)
        else:
            _write(path_or_buf)

    @classmethod
    def from_csv(cls, path_or_buf, observation_model, x0=None):
        if isinstance(path_or_buf, (str, bytes)):
            with open(path_or_buf, newline="") as fh:
                rows = list(csv.reader(fh))
        else:
            rows = list(csv.reader(path_or_buf))
        header = rows[0]
        if not header or header[0] != "time":
            raise ValueError("dataset CSV must start with a 'time' column")
        data = np.array([[float(v) for v in row] for row in rows[1:]])
        return cls(times=data[:, 0], observations=data[:, 1:],
                   observation_model=observation_model, x0=x0)


def eyam_dataset():
    """The Eyam plague record: exact observations of (susceptible, infective)."""
    times = np.array([0.0, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 4.0])
    sus = [254, 235, 201, 153, 121, 110, 97, 83]
    inf = [7, 14, 22, 29, 20, 8, 8, 0]
    Y = np.array(list(zip(sus, inf)), dtype=float)
    return Dataset(times=times, observations=Y,
                   observation_model=ObservationModel.exact(2),
                   x0=Y[0].copy())


# ---------------------------------------------------------------------------
# paths

@dataclass
class JumpPath:
    """One exact realisation of the jump process on (t_start, t_end]."""

    initial_state: np.ndarray
    times: np.ndarray
    reactions: np.ndarray
    t_start: float
    t_end: float
    end_state: np.ndarray = None

    def __post_init__(self):
        self.initial_state = np.asarray(self.initial_state, dtype=float)
        self.times = np.asarray(self.times, dtype=float)
        self.reactions = np.asarray(self.reactions, dtype=np.int64)
        if len(self.times) != len(self.reactions):
            raise ValueError("event time and type counts differ")
        if len(self.times):
            if np.any(np.diff(self.times) <= 0):
                raise ValueError("event times must be strictly increasing")
            if self.times[0] <= self.t_start or self.times[-1] > self.t_end:
                raise ValueError("event times must lie in (t_start, t_end]")

    @property
    def n_events(self):
        return len(self.times)

    def replay(self, net):
        """Re-apply the recorded events to the initial state."""
        x = self.initial_state.copy()
        for nu in self.reactions:
            x += net._Sf[:, nu]
        return x


@dataclass
class DiscretisedPath:
    """Euler-Maruyama path on a uniform grid."""

    grid: np.ndarray
    states: np.ndarray

    def __post_init__(self):
        g = np.asarray(self.grid, dtype=float)
        X = np.asarray(self.states, dtype=float)
        if X.shape[0] != len(g):
            raise ValueError("state row count must match grid length")
        steps = np.diff(g)
        if len(steps) and np.ptp(steps) > 1e-12 * max(1.0, abs(g[-1] - g[0])):
            raise ValueError("grid spacing must be uniform")
        self.grid = g
        self.states = X

    @property
    def dt(self):
        return float(self.grid[1] - self.grid[0])


# ---------------------------------------------------------------------------
# simulators

def gillespie(net, c, x0, t0, t_end, rng, max_events=10_000_000):
    """Exact jump-process simulation (direct method).

    Raises SimulationExplosion if more than max_events reactions fire.
    """
    seed = int(rng.integers(0, 2 ** 63 - 1, dtype=np.int64))
    times, types, end, status = kernels().gillespie_path(
        net.reactant_matrix, net._Sf, np.asarray(c, dtype=float),
        np.asarray(x0, dtype=float), float(t0), float(t_end), seed,
        max_events, True)
    if status == 1:
        raise SimulationExplosion(
            f"jump-process simulation exceeded {max_events} events")
    return JumpPath(initial_state=np.asarray(x0, dtype=float), times=times,
                    reactions=types, t_start=float(t0), t_end=float(t_end),
                    end_state=end)


def gillespie_end_states(net, c, x0, t0, t_end, n_paths, rng,
                         max_events=10_000_000):
    """End states of n_paths independent simulations (no event recording)."""
    out = np.empty((n_paths, net.n_species))
    cf = np.asarray(c, dtype=float)
    x0 = np.asarray(x0, dtype=float)
    seeds = rng.integers(0, 2 ** 63 - 1, size=n_paths, dtype=np.int64)
    for k in range(n_paths):
        _, _, end, status = kernels().gillespie_path(
            net.reactant_matrix, net._Sf, cf, x0, float(t0), float(t_end),
            int(seeds[k]), max_events, False)
        if status == 1:
            raise SimulationExplosion(
                f"jump-process simulation exceeded {max_events} events")
        out[k] = end
    return out


def euler_maruyama(net, c, x0, t0, t_end, dt, normals=None, rng=None):
    """Euler-Maruyama discretisation of the CLE on a uniform grid.

    `normals` supplies the m standard-normal s-vectors (making the path a
    deterministic function of them); otherwise they are drawn from rng.
    """
    span = float(t_end) - float(t0)
    m_exact = span / dt
    m = int(round(m_exact))
    if m < 1 or abs(m_exact - m) > 1e-9 * max(1.0, abs(m_exact)):
        raise ValueError("dt must divide the interval length")
    s = net.n_species
    if normals is None:
        if rng is None:
            raise ValueError("supply either normals or rng")
        normals = rng.standard_normal((m, s))
    z = np.asarray(normals, dtype=float).reshape(1, m, s)
    states = np.asarray(x0, dtype=float).reshape(1, s)
    end, _, status, paths = kernels().cle_interval_batch(
        net.reactant_matrix, net._Sf, np.asarray(c, dtype=float), states, z,
        span / m, 0, record_paths=True)
    if status[0] == 2:
        raise RuntimeError("Cholesky of the diffusion matrix failed after "
                           "jitter escalation during Euler-Maruyama stepping")
    grid = t0 + span * np.arange(m + 1) / m
    return DiscretisedPath(grid=grid, states=paths[0])


def synthesize_dataset(net, c, x0, times, obs_model, rng, generator="mjp",
                       dt=0.1, max_events=10_000_000):
    """Simulate a latent path and observe it under the observation model."""
    times = np.asarray(times, dtype=float)
    x0 = np.asarray(x0, dtype=float)
    latent = np.empty((len(times), net.n_species))
    latent[0] = x0
    x = x0.copy()
    for i in range(len(times) - 1):
        if generator == "mjp":
            path = gillespie(net, c, x, times[i], times[i + 1], rng,
                             max_events=max_events)
            x = path.end_state.copy()
        elif generator == "cle":
            dp = euler_maruyama(net, c, x, times[i], times[i + 1], dt, rng=rng)
            x = dp.states[-1].copy()
        else:
            raise ValueError("generator must be 'mjp' or 'cle'")
        latent[i + 1] = x
    Y = np.empty((len(times), obs_model.p))
    for i, xi in enumerate(latent):
        Y[i] = obs_model.sample(xi, rng)
    return Dataset(times=times, observations=Y, observation_model=obs_model,
                   x0=x0.copy(), latent_states=latent)


def mjp_complete_loglik(net, c, path):
    """Complete-data log-likelihood of a jump path.

    Sum of log hazards at each event minus the integral of the total hazard,
    which is piecewise constant between events. Returns -inf if any recorded
    event has zero hazard at its pre-event state.
    """
    c = np.asarray(c, dtype=float)
    x = path.initial_state.copy()
    t_prev = path.t_start
    ll = 0.0
    for t_ev, nu in zip(path.times, path.reactions):
        h = net.hazard(c, x)
        ll -= float(h.sum()) * (t_ev - t_prev)
        if h[nu] <= 0.0:
            return -np.inf
        ll += math.log(h[nu])
        x += net._Sf[:, nu]
        t_prev = t_ev
    h = net.hazard(c, x)
    ll -= float(h.sum()) * (path.t_end - t_prev)
    return ll


# ---------------------------------------------------------------------------
# truncated chemical-master-equation oracles

@dataclass
class CmeResult:
    states: np.ndarray        # (n, s) enumerated states
    matrix: np.ndarray        # (n, n) transition probabilities
    leak: np.ndarray          # (n,) probability mass lost past truncation
    truncation_warning: bool = False
    index: dict = field(default_factory=dict)


def _enumerate_states(upper_bounds):
    axes = [np.arange(ub + 1) for ub in upper_bounds]
    grids = np.meshgrid(*axes, indexing="ij")
    return np.stack([g.ravel() for g in grids], axis=1).astype(float)


def _cme_generator(net, c, states, sparse=False):
    n = states.shape[0]
    index = {tuple(int(v) for v in row): k for k, row in enumerate(states)}
    S = net.stoichiometry
    rows, cols, vals = [], [], []
    diag = np.zeros(n)
    for k in range(n):
        x = states[k]
        h = net.hazard(c, x)
        for i in range(net.n_reactions):
            if h[i] <= 0:
                continue
            target = tuple(int(v) for v in (x + S[:, i]))
            diag[k] -= h[i]
            j = index.get(target)
            if j is not None:
                rows.append(k)
                cols.append(j)
                vals.append(h[i])
    rows.extend(range(n))
    cols.extend(range(n))
    vals.extend(diag)
    if sparse:
        Q = sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()
    else:
        Q = np.zeros((n, n))
        for rr, cc, vv in zip(rows, cols, vals):
            Q[rr, cc] += vv
    return Q, index


def cme_transition_oracle(net, c, truncation, t, max_states=5000):
    """Transition probability matrix on a truncated state space.

    truncation is the per-species upper bound (counts run 0..ub). Probability
    mass leaving the truncation is reported per row as `leak`; a warning flag
    is set when the worst leak exceeds 1e-3.
    """
    upper = tuple(int(u) for u in np.atleast_1d(truncation))
    if len(upper) != net.n_species:
        raise ValueError("one truncation bound per species")
    states = _enumerate_states(upper)
    if states.shape[0] > max_states:
        raise ValueError(f"truncated space has {states.shape[0]} states "
                         f"(> {max_states})")
    Q, index = _cme_generator(net, c, states, sparse=False)
    Pt = expm(Q * float(t))
    np.maximum(Pt, 0.0, out=Pt)
    leak = 1.0 - Pt.sum(axis=1)
    np.maximum(leak, 0.0, out=leak)
    return CmeResult(states=states, matrix=Pt, leak=leak,
                     truncation_warning=bool(leak.max() > 1e-3), index=index)


def cme_distribution(net, c, x0, t, upper_bounds):
    """Marginal distribution of X_t from a point initial state, by sparse
    action of the generator exponential (larger truncations than the matrix
    oracle supports)."""
    upper = tuple(int(u) for u in np.atleast_1d(upper_bounds))
    states = _enumerate_states(upper)
    Q, index = _cme_generator(net, c, states, sparse=True)
    key = tuple(int(v) for v in np.atleast_1d(x0))
    if key not in index:
        raise ValueError("x0 lies outside the truncation")
    p0 = np.zeros(states.shape[0])
    p0[index[key]] = 1.0
    pt = expm_multiply(Q.T * float(t), p0)
    np.maximum(pt, 0.0, out=pt)
    leak = max(0.0, 1.0 - float(pt.sum()))
    return states, pt, leak
