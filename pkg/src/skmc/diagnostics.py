"""Chain diagnostics: effective sample size, MCSE, histogram summaries.

The ESS estimator truncates the autocorrelation sum with Geyer's initial
monotone positive sequence, so reported numbers are reproducible without any
external package.
"""

from __future__ import annotations

import numpy as np


def autocorrelations(x, max_lag=None):
    """Normalised autocorrelations rho_k via FFT, k = 0..max_lag."""
    x = np.asarray(x, dtype=float)
    n = len(x)
    if max_lag is None:
        max_lag = n - 1
    xc = x - x.mean()
    nfft = 1 << int(np.ceil(np.log2(2 * n)))
    f = np.fft.rfft(xc, nfft)
    acov = np.fft.irfft(f * np.conj(f), nfft)[:max_lag + 1].real / n
    if acov[0] <= 0:
        return None
    return acov / acov[0]


def iact(x):
    """Integrated autocorrelation time with Geyer initial-monotone truncation.

    Returns (tau, flags); tau is clamped below at 1e-3 for strongly
    antithetic chains.
    """
    x = np.asarray(x, dtype=float)
    n = len(x)
    flags = {"degenerate": False, "antithetic": False}
    if n < 2 or np.ptp(x) == 0.0:
        flags["degenerate"] = True
        return 1.0, flags
    rho = autocorrelations(x)
    if rho is None:
        flags["degenerate"] = True
        return 1.0, flags
    # pair sums Gamma_m = rho_{2m} + rho_{2m+1}
    n_pairs = len(rho) // 2
    total = 0.0
    running_min = np.inf
    for m in range(n_pairs):
        gamma = rho[2 * m] + rho[2 * m + 1]
        if gamma <= 0.0:
            break
        running_min = min(running_min, gamma)
        total += running_min
    tau = 2.0 * total - 1.0
    if tau < 1.0:
        if tau <= 0.0 or rho[1] < 0:
            flags["antithetic"] = True
        tau = max(tau, 1e-3)
    return float(tau), flags


def ess(x):
    """Effective sample size n / IACT.

    Returns (ess, flags). A constant chain reports ESS = n with the
    degeneracy flag set; antithetic chains may report ESS > n (flagged).
    """
    x = np.asarray(x, dtype=float)
    n = len(x)
    if n < 100:
        raise ValueError("ESS needs at least 100 samples")
    tau, flags = iact(x)
    if flags["degenerate"]:
        return float(n), flags
    return float(n / tau), flags


def mcse(x):
    """Monte Carlo standard error of the chain mean: sd / sqrt(ESS)."""
    x = np.asarray(x, dtype=float)
    e, flags = ess(x)
    if flags["degenerate"]:
        return 0.0
    return float(np.std(x, ddof=1) / np.sqrt(e))


def min_ess(columns):
    """mESS: minimum ESS over parameter chains."""
    return min(ess(col)[0] for col in columns)


def histogram_data(x, bins=40):
    """Bin edges and counts for external plotting; counts sum to len(x)."""
    counts, edges = np.histogram(np.asarray(x, dtype=float), bins=bins)
    return edges, counts


def credible_interval(x, level=0.95):
    lo = (1.0 - level) / 2.0
    return tuple(np.quantile(np.asarray(x, dtype=float), [lo, 1.0 - lo]))


def thin_by_iact(x, target=None):
    """Thin a chain to approximately independent draws (for i.i.d. tests)."""
    x = np.asarray(x, dtype=float)
    tau, flags = iact(x)
    step = max(1, int(np.ceil(2.0 * tau)))
    return x[::step]


def summarize_chain(log_c, cpu_seconds, free_names=None):
    """Per-parameter ESS plus mESS and mESS per second."""
    n, r = log_c.shape
    names = free_names or [f"log_c_{j + 1}" for j in range(r)]
    per_param = {}
    for j in range(r):
        col = log_c[:, j]
        if np.ptp(col) == 0.0:
            continue
        e, flags = ess(col)
        per_param[names[j]] = {
            "mean": float(col.mean()),
            "sd": float(col.std(ddof=1)),
            "ess": e,
            "mcse": float(col.std(ddof=1) / np.sqrt(e)),
            "flags": {k: bool(v) for k, v in flags.items() if v},
        }
    mess = min(v["ess"] for v in per_param.values()) if per_param else float("nan")
    return {
        "per_parameter": per_param,
        "mess": mess,
        "mess_per_second": mess / cpu_seconds if cpu_seconds > 0 else float("nan"),
    }
