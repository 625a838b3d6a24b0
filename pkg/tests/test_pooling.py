import math

import numpy as np
import pytest
from scipy.special import erf

from charfire.diagnostics import mcse_mean
from charfire.firehistory import FireProbabilitySeries, apply_threshold
from charfire.pooling import (LakeFRISamples, PoolingPriorSpec, _draw_sigma, _truncated_normal,
                              partial_pool_fri)
from charfire.univariate import MCMCControls


def _fixed(lake_id, fris, copies=50):
    return LakeFRISamples(lake_id, np.full(copies, len(fris)), np.full(copies, float(sum(fris))))


def _grid_oracle(sets, priors, n=181):
    """Posterior means of alpha* and alpha_j by grid integration over (u_1, u_2, u*).

    sigma is integrated analytically: for k = 2 the sigma factor is
    int_a^b sigma^-2 exp(-c / sigma^2) dsigma with c = SS / 2.
    """
    la, lb = np.log(priors.alpha_star_bounds)
    a, b = priors.sigma_fri_bounds
    us = np.linspace(la, lb, n)
    uj = [np.linspace(math.log(sum(f) / len(f)) - 3.5, math.log(sum(f) / len(f)) + 3.5, n) for f in sets]
    U1, U2, US = np.meshgrid(uj[0], uj[1], us, indexing="ij")
    logp = US.copy()  # uniform prior on alpha*
    for U, f in ((U1, sets[0]), (U2, sets[1])):
        logp += -len(f) * U - sum(f) * np.exp(-U)
    c = 0.5 * ((U1 - US) ** 2 + (U2 - US) ** 2)
    rc = np.sqrt(np.maximum(c, 1e-300))
    sig = np.where(c > 1e-12, 0.5 * math.sqrt(math.pi) / rc * (erf(rc / a) - erf(rc / b)), 1 / a - 1 / b)
    w = np.exp(logp - logp.max()) * sig
    w /= w.sum()
    return (float(np.sum(w * np.exp(US))), float(np.sum(w * np.exp(U1))), float(np.sum(w * np.exp(U2))))


class TestGridOracle:
    def test_two_lakes_with_fixed_fri_sets(self):
        sets = ([90.0, 140.0, 120.0, 60.0], [210.0, 330.0, 180.0])
        priors = PoolingPriorSpec((10.0, 2000.0), (0.05, 1.5))
        draws = partial_pool_fri([_fixed("a", sets[0]), _fixed("b", sets[1])], priors,
                                 MCMCControls(iterations=40_000, burn_in=4_000, thin=4, chains=4, seed=2))
        oracle = _grid_oracle(sets, priors)
        got = [draws.alpha_star, draws.alpha[:, 0], draws.alpha[:, 1]]
        for x, ref in zip(got, oracle):
            se = mcse_mean(x.reshape(4, -1))
            assert abs(x.mean() - ref) < 3 * se, (x.mean(), ref, se)


class TestPooling:
    def test_complete_pooling_limit(self):
        lakes = [_fixed("a", [50.0, 70.0]), _fixed("b", [300.0, 500.0, 250.0]), _fixed("c", [120.0])]
        draws = partial_pool_fri(lakes, PoolingPriorSpec(sigma_fri_bounds=(1e-6, 2e-6)),
                                 MCMCControls(6000, 2000, 2, 2, seed=1))
        spread = (draws.alpha.max(axis=1) - draws.alpha.min(axis=1)) / draws.alpha_star
        assert spread.max() < 1e-3

    def test_fewer_than_two_lakes(self):
        with pytest.raises(ValueError, match="two lakes"):
            partial_pool_fri([_fixed("a", [10.0, 20.0])])

    def test_lake_without_fri(self):
        empty = LakeFRISamples("z", np.zeros(5, dtype=int), np.zeros(5))
        with pytest.raises(ValueError, match="no posterior sample"):
            partial_pool_fri([_fixed("a", [10.0, 20.0]), empty])

    def test_from_events(self):
        s = FireProbabilitySeries([[0.9, 0.1, 0.9, 0.9, 0.1, 0.9], [0.1] * 6, [0.9] + [0.1] * 5],
                                  np.arange(6) * 20.0, np.arange(6) * 20.0 + 20.0)
        lk = LakeFRISamples.from_events("a", apply_threshold(s, 0.5))
        # only the first sample has an FRI: events at 10, 50, 110
        assert lk.n_fri.tolist() == [2] and lk.sum_fri.tolist() == [100.0]

    def test_deterministic_and_bounded(self):
        lakes = [_fixed("a", [50.0, 70.0]), _fixed("b", [300.0, 500.0])]
        pri = PoolingPriorSpec((20.0, 900.0), (0.1, 1.0))
        ctl = MCMCControls(3000, 1000, 2, 2, seed=4)
        x, y = partial_pool_fri(lakes, pri, ctl), partial_pool_fri(lakes, pri, ctl)
        assert np.array_equal(x.alpha, y.alpha) and np.array_equal(x.sigma_fri, y.sigma_fri)
        assert np.all((x.alpha_star >= 20.0) & (x.alpha_star <= 900.0))
        assert np.all((x.sigma_fri >= 0.1) & (x.sigma_fri <= 1.0))
        s = x.summary()
        assert set(s["alpha"]) == {"a", "b"}

    def test_prior_validation(self):
        with pytest.raises(ValueError):
            PoolingPriorSpec(alpha_star_bounds=(100.0, 10.0))


class TestConditionals:
    def test_truncated_normal_stays_in_bounds(self):
        rng = np.random.default_rng(0)
        x = np.array([_truncated_normal(0.0, 1.0, 0.5, 0.7, rng) for _ in range(2000)])
        assert x.min() >= 0.5 and x.max() <= 0.7
        # far tail collapses to the nearest bound
        assert _truncated_normal(0.0, 1e-3, 5.0, 6.0, rng) == 5.0

    def test_sigma_conditional_matches_density(self):
        # k = 3: sigma^2 | rest has density prop. to v^-(k/2) exp(-SS / 2v) on the bounds
        rng = np.random.default_rng(1)
        u, u_star, bounds = np.array([0.1, -0.4, 0.6]), 0.05, (0.05, 1.2)
        x = np.array([_draw_sigma(u, u_star, bounds, rng) for _ in range(100_000)])
        ss = float(np.sum((u - u_star) ** 2))
        g = np.linspace(*bounds, 20001)
        dens = g ** -3 * np.exp(-ss / (2 * g**2))  # on sigma: v^-(3/2) e^{-ss/2v} * 2 sigma
        dens /= np.trapezoid(dens, g)
        mean = np.trapezoid(g * dens, g)
        assert x.mean() == pytest.approx(mean, abs=4 * x.std() / math.sqrt(x.size))
