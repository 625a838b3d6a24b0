"""Regional mean fire-return interval by partial pooling of per-lake FRIs.

Posterior (conditional on each lake's FRI set, refreshed every iteration from
the lake's posterior event samples):

    prod_j prod_r Exp(FRI_jr | alpha_j) * prod_j N(log alpha_j | log alpha*, sigma_fri^2)
        * Unif(alpha* | a*, b*) * Unif(sigma_fri | a_s, b_s)

Sampled on u_j = log alpha_j and u* = log alpha*.  u_j take random-walk
steps; u* and sigma_fri are drawn exactly from their truncated conditionals;
a joint shift of all u_j and u* helps when sigma_fri is small.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import gammaincc, gammainccinv, ndtr, ndtri

from .univariate import MCMCControls, _Adapter, chain_seeds


@dataclass(frozen=True)
class PoolingPriorSpec:
    alpha_star_bounds: tuple = (10.0, 2000.0)
    sigma_fri_bounds: tuple = (0.01, 2.0)

    def __post_init__(self):
        for name in ("alpha_star_bounds", "sigma_fri_bounds"):
            a, b = getattr(self, name)
            if not 0 < a < b:
                raise ValueError(f"{name} must satisfy 0 < a < b")


@dataclass(frozen=True, eq=False)
class LakeFRISamples:
    """Per posterior sample: number of FRIs and their sum, for one lake."""

    lake_id: str
    n_fri: np.ndarray
    sum_fri: np.ndarray

    def __post_init__(self):
        n = np.asarray(self.n_fri, dtype=int)
        s = np.asarray(self.sum_fri, dtype=float)
        if n.shape != s.shape or n.ndim != 1:
            raise ValueError("n_fri and sum_fri must be 1-D and of equal length")
        keep = n >= 1
        object.__setattr__(self, "n_fri", n[keep])
        object.__setattr__(self, "sum_fri", s[keep])

    @classmethod
    def from_events(cls, lake_id, events):
        """From an EventSeries: m events give m - 1 FRIs summing to last minus first time."""
        return cls(lake_id, np.maximum(events.counts - 1, 0), events.fri_sums())

    def __len__(self):
        return self.n_fri.size


@dataclass(frozen=True, eq=False)
class RegionalFRIDraws:
    alpha: np.ndarray        # (draws, k)
    alpha_star: np.ndarray
    sigma_fri: np.ndarray
    chain: np.ndarray
    lake_ids: tuple
    acceptance_rates: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def __len__(self):
        return self.alpha_star.size

    def summary(self, level: float = 0.95) -> dict:
        q = (1.0 - level) / 2.0

        def s(x):
            lo, hi = np.quantile(x, [q, 1.0 - q])
            return {"mean": float(np.mean(x)), "lo": float(lo), "hi": float(hi),
                    "ci_width": float(hi - lo)}

        return {"alpha_star": s(self.alpha_star), "sigma_fri": s(self.sigma_fri),
                "alpha": {lake: s(self.alpha[:, j]) for j, lake in enumerate(self.lake_ids)}}

    @staticmethod
    def concat(parts: Sequence["RegionalFRIDraws"]) -> "RegionalFRIDraws":
        parts = list(parts)
        acc = {key: float(np.mean([p.acceptance_rates[key] for p in parts]))
               for key in parts[0].acceptance_rates}
        return RegionalFRIDraws(np.concatenate([p.alpha for p in parts]),
                                np.concatenate([p.alpha_star for p in parts]),
                                np.concatenate([p.sigma_fri for p in parts]),
                                np.concatenate([p.chain for p in parts]),
                                parts[0].lake_ids, acc, dict(parts[0].metadata))


def _truncated_normal(mean, sd, lo, hi, rng) -> float:
    """Inverse-CDF draw from N(mean, sd^2) restricted to [lo, hi]."""
    a, b = ndtr((lo - mean) / sd), ndtr((hi - mean) / sd)
    if b - a < 1e-300:
        return lo if mean < lo else hi
    return float(np.clip(mean + sd * ndtri(a + rng.random() * (b - a)), lo, hi))


def _draw_log_alpha_star(u, sigma, bounds, rng) -> float:
    """u* | u_j, sigma: N(mean(u) + sigma^2/k, sigma^2/k) truncated to log bounds.

    The e^{u*} factor is the Jacobian of the uniform prior on alpha*.
    """
    k = u.size
    sd = sigma / math.sqrt(k)
    mean = float(u.mean()) + sigma**2 / k
    return _truncated_normal(mean, sd, math.log(bounds[0]), math.log(bounds[1]), rng)


def _draw_sigma(u, u_star, bounds, rng) -> float:
    """sigma^2 | rest ~ InvGamma((k-1)/2, SS/2) truncated to the squared bounds.

    The InvGamma(a, b) CDF at v is the upper regularized gamma Q(a, b/v).
    """
    k = u.size
    shape = (k - 1) / 2.0
    half_ss = max(0.5 * float(np.sum((u - u_star) ** 2)), 1e-300)
    a2, b2 = bounds[0] ** 2, bounds[1] ** 2
    lo, hi = gammaincc(shape, half_ss / a2), gammaincc(shape, half_ss / b2)
    if hi - lo < 1e-300:
        return bounds[0] if hi < 0.5 else bounds[1]
    p = lo + rng.random() * (hi - lo)
    v = half_ss / gammainccinv(shape, p)
    return float(np.sqrt(np.clip(v, a2, b2)))


def _log_lik(u, n, s):
    # Exp(mean alpha) for n FRIs summing to s, as a function of u = log alpha
    return -n * u - s * np.exp(-u)


def pool_chain(lakes: Sequence[LakeFRISamples], priors: PoolingPriorSpec,
               controls: MCMCControls, seed=None, chain_index: int = 0) -> RegionalFRIDraws:
    lakes = list(lakes)
    k = len(lakes)
    if k < 2:
        raise ValueError("the regional FRI model needs at least two lakes")
    for lk in lakes:
        if len(lk) == 0:
            raise ValueError(f"{lk.lake_id}: no posterior sample has a fire-return interval")
    seed = controls.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    sizes = np.array([len(lk) for lk in lakes])
    u = np.array([math.log(float(np.sum(lk.sum_fri)) / float(np.sum(lk.n_fri))) for lk in lakes])
    ls = np.log(priors.alpha_star_bounds)
    u_star = float(np.clip(u.mean(), ls[0], ls[1]))
    sigma = float(np.clip(u.std() if u.std() > 0 else 0.5, *priors.sigma_fri_bounds))
    site = _Adapter(0.3, 0.40, size=k)
    shift = _Adapter(0.1, 0.40)
    n_keep = controls.n_keep
    out_a = np.empty((n_keep, k)); out_s = np.empty(n_keep); out_sig = np.empty(n_keep)
    keep = 0
    # each lake walks through its own sample pool from a random offset
    offset = rng.integers(0, sizes)
    for it in range(controls.iterations):
        burn = it < controls.burn_in
        idx = (offset + it) % sizes
        n = np.array([lk.n_fri[i] for lk, i in zip(lakes, idx)], dtype=float)
        s = np.array([lk.sum_fri[i] for lk, i in zip(lakes, idx)])
        # u_j single-site random walk
        z = rng.standard_normal(k) * site.scale
        logu = np.log(rng.random(k))
        prop = u + z
        inv2 = 0.5 / sigma**2
        d_old = _log_lik(u, n, s) - inv2 * (u - u_star) ** 2
        d_new = _log_lik(prop, n, s) - inv2 * (prop - u_star) ** 2
        acc = logu < d_new - d_old
        u = np.where(acc, prop, u)
        site.record(acc.astype(float))
        # joint shift of all u_j and u*: normal terms cancel
        c = shift.scale * rng.standard_normal()
        lu = math.log(rng.random())
        if ls[0] <= u_star + c <= ls[1]:
            dl = float(np.sum(_log_lik(u + c, n, s) - _log_lik(u, n, s))) + c
            ok = lu < dl
        else:
            ok = False
        if ok:
            u = u + c
            u_star += c
        shift.record(float(ok))
        u_star = _draw_log_alpha_star(u, sigma, priors.alpha_star_bounds, rng)
        sigma = _draw_sigma(u, u_star, priors.sigma_fri_bounds, rng)
        if burn and (it + 1) % controls.adapt_every == 0:
            site.adapt()
            shift.adapt()
        if it + 1 == controls.burn_in:
            site.reset_counts()
            shift.reset_counts()
        if not burn:
            site.freeze_counts()
            shift.freeze_counts()
            j = it - controls.burn_in
            if (j + 1) % controls.thin == 0 and keep < n_keep:
                out_a[keep] = np.exp(u)
                out_s[keep] = math.exp(u_star)
                out_sig[keep] = sigma
                keep += 1
    acc = {"log_alpha": site.rate(), "shift": shift.rate()}
    meta = {"seed": int(seed), "chain": chain_index, "iterations": controls.iterations,
            "burn_in": controls.burn_in, "thin": controls.thin,
            "samples_per_lake": {lk.lake_id: int(len(lk)) for lk in lakes},
            "alpha_star_bounds": list(priors.alpha_star_bounds),
            "sigma_fri_bounds": list(priors.sigma_fri_bounds)}
    return RegionalFRIDraws(out_a, out_s, out_sig, np.full(n_keep, chain_index),
                            tuple(lk.lake_id for lk in lakes), acc, meta)


def partial_pool_fri(lakes: Sequence[LakeFRISamples], priors: PoolingPriorSpec | None = None,
                     controls: MCMCControls | None = None, key=()) -> RegionalFRIDraws:
    priors = PoolingPriorSpec() if priors is None else priors
    controls = MCMCControls() if controls is None else controls
    seeds = chain_seeds(controls.seed, controls.chains, 0x9001, *key)
    parts = [pool_chain(lakes, priors, controls, seed=s, chain_index=c)
             for c, s in enumerate(seeds)]
    return RegionalFRIDraws.concat(parts)
