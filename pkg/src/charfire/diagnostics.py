"""Convergence diagnostics: split R-hat, effective sample size, Monte Carlo standard error."""
from __future__ import annotations

import numpy as np


def _as_chains(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] < 4:
        raise ValueError("expected (chains, draws) with at least 4 draws per chain")
    return x


def split_chains(x) -> np.ndarray:
    x = _as_chains(x)
    half = x.shape[1] // 2
    return np.concatenate([x[:, :half], x[:, x.shape[1] - half:]], axis=0)


def split_rhat(x) -> float:
    """Potential scale reduction on split chains (Gelman et al. 2013)."""
    s = split_chains(x)
    m, n = s.shape
    means = s.mean(axis=1)
    W = s.var(axis=1, ddof=1).mean()
    B = n * means.var(ddof=1)
    if W == 0:
        return 1.0 if B == 0 else float("inf")
    var_plus = (n - 1) / n * W + B / n
    return float(np.sqrt(var_plus / W))


def _autocov(x: np.ndarray) -> np.ndarray:
    n = x.size
    f = np.fft.rfft(x - x.mean(), n=2 * n)
    ac = np.fft.irfft(f * np.conj(f))[:n] / n
    return ac


def effective_sample_size(x) -> float:
    """Multi-chain ESS with Geyer's initial positive sequence truncation."""
    s = split_chains(x)
    m, n = s.shape
    acov = np.array([_autocov(c) for c in s])
    chain_var = acov[:, 0] * n / (n - 1)
    W = chain_var.mean()
    means = s.mean(axis=1)
    var_plus = (n - 1) / n * W + (means.var(ddof=1) if m > 1 else 0.0)
    if var_plus == 0:
        return float(m * n)
    rho = 1.0 - (W - acov.mean(axis=0)) / var_plus
    rho[0] = 1.0
    # sum consecutive pairs while they stay positive, enforcing monotonicity
    tau = -1.0
    prev = np.inf
    for t in range(0, n - 1, 2):
        pair = rho[t] + rho[t + 1]
        if pair < 0:
            break
        pair = min(pair, prev)
        prev = pair
        tau += 2.0 * pair
    tau = max(tau, 1.0 / np.log10(m * n))
    return float(m * n / tau)


def mcse_mean(x) -> float:
    s = _as_chains(x)
    return float(s.std(ddof=1) / np.sqrt(effective_sample_size(s)))
