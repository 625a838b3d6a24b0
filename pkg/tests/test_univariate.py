import mpmath
import numpy as np
import pytest
from scipy import stats
from scipy.integrate import quad

from charfire.firehistory import probability_of_fire
from charfire.records import SedimentRecord
from charfire.splines import evaluate_basis
from charfire.univariate import (CoefficientState, IntensityOverflow, MCMCControls, PosteriorDraws,
                                 UnivariatePriorSpec, integrated_intensity, lake_design,
                                 log_likelihood, log_posterior, log_posterior_terms,
                                 posterior_predictive_draw, run_chain, run_chains)

PRIORS = UnivariatePriorSpec()


def _record(n=12, seed=0, length=20.0, lam=5.0):
    rng = np.random.default_rng(seed)
    edges = np.arange(n + 1) * length - 59.0
    return SedimentRecord("t", edges[:-1], edges[1:], rng.poisson(lam * length, n))


def _random_state(design, rng, scale=0.3):
    return CoefficientState(rng.normal(0, 1), rng.normal(0, scale, design.background.p),
                            rng.normal(-1, 1), rng.normal(0, scale, design.foreground.p))


class TestIntensity:
    def test_unit_rate(self):
        rec = _record(6)
        d = lake_design(rec, 4)
        s = CoefficientState.zeros(d.background.p, d.foreground.p)
        assert integrated_intensity(s, d, 2, "background") == 20.0

    def test_log2_over_ten_years(self):
        rec = SedimentRecord("t", [0.0, 10.0, 20.0, 30.0, 40.0], [10.0, 20.0, 30.0, 40.0, 50.0],
                             [1, 1, 1, 1, 1])
        d = lake_design(rec, 4, 4)
        s = CoefficientState(np.log(2.0), np.zeros(4), 0.0, np.zeros(4))
        assert integrated_intensity(s, d, 1, "background") == pytest.approx(20.0, rel=1e-15)

    @pytest.mark.parametrize("seed", range(3))
    def test_matches_quadrature_under_midpoint_convention(self, seed):
        rng = np.random.default_rng(seed)
        rec = _record(15, seed)
        d = lake_design(rec, 6)
        s = _random_state(d, rng)
        for proc, ks, b0, b in (("background", d.background.knot_set, s.beta0_b, s.beta_b),
                                ("foreground", d.foreground.knot_set, s.beta0_f, s.beta_f)):
            for i in range(len(rec)):
                # the rate is held at its midpoint value across the interval
                rate = np.exp(b0 + evaluate_basis(ks, [rec.midpoints[i]])[0] @ b)
                oracle, _ = quad(lambda t: rate, rec.top_ages[i], rec.bottom_ages[i], epsrel=1e-13)
                assert integrated_intensity(s, d, i, proc) == pytest.approx(oracle, rel=1e-10)

    def test_overflow_carries_predictor(self):
        rec = _record(6)
        d = lake_design(rec, 4)
        s = CoefficientState(80.0, np.zeros(4), 0.0, np.zeros(d.foreground.p))
        with pytest.raises(IntensityOverflow) as err:
            integrated_intensity(s, d, 0, "background")
        assert err.value.eta == pytest.approx(80.0)

    def test_unknown_process(self):
        rec = _record(6)
        d = lake_design(rec, 4)
        with pytest.raises(ValueError):
            integrated_intensity(CoefficientState.zeros(4, d.foreground.p), d, 0, "regional")


class TestLikelihood:
    def test_zero_counts_unit_means(self):
        rec = SedimentRecord("t", [0.0, 1.0, 2.0, 3.0, 4.0], [1.0, 2.0, 3.0, 4.0, 5.0], [0] * 5)
        d = lake_design(rec, 4, 4)
        # background rate 0.5/yr, foreground 0.5/yr over 1-yr intervals gives mu = 1
        s = CoefficientState(np.log(0.5), np.zeros(4), np.log(0.5), np.zeros(4))
        assert log_likelihood(s, rec, d, weights=[1, 1, 1, 0, 0]) == pytest.approx(-3.0, abs=1e-14)

    def test_single_interval_closed_form(self):
        from charfire.univariate import poisson_loglik
        assert poisson_loglik([2], [2.0]) == pytest.approx(np.log(2) - 2, abs=1e-15)

    @pytest.mark.parametrize("seed", range(4))
    def test_high_precision_oracle(self, seed):
        rng = np.random.default_rng(seed)
        rec = _record(30, seed, lam=rng.uniform(0.5, 40))
        d = lake_design(rec, 6)
        s = _random_state(d, rng)
        mpmath.mp.dps = 50
        bb = s.beta0_b + d.background.basis @ s.beta_b
        ff = s.beta0_f + d.foreground.basis @ s.beta_f
        oracle = mpmath.mpf(0)
        for y, eb, ef, L in zip(rec.counts, bb, ff, rec.lengths):
            mu = (mpmath.exp(mpmath.mpf(float(eb))) + mpmath.exp(mpmath.mpf(float(ef)))) * mpmath.mpf(float(L))
            oracle += int(y) * mpmath.log(mu) - mu - mpmath.loggamma(int(y) + 1)
        assert log_likelihood(s, rec, d) == pytest.approx(float(oracle), abs=1e-9)

    def test_non_finite_mean_raises(self):
        from charfire.univariate import poisson_loglik
        with pytest.raises(FloatingPointError):
            poisson_loglik([1], [np.inf])


class TestPosterior:
    def test_zero_state_equals_likelihood(self):
        rec = _record(10)
        d = lake_design(rec, 5)
        s = CoefficientState.zeros(5, d.foreground.p)
        assert log_posterior(s, rec, d, PRIORS) == log_likelihood(s, rec, d)

    def test_linear_components_leave_penalty_unchanged(self):
        rng = np.random.default_rng(3)
        rec = _record(20)
        d = lake_design(rec, 7)
        s = _random_state(d, rng)
        k = d.background.knot_set.knots
        shifted = CoefficientState(s.beta0_b, s.beta_b + 1.7 - 0.004 * k, s.beta0_f, s.beta_f)
        a = log_posterior_terms(s, rec, d, PRIORS)["penalty_b"]
        b = log_posterior_terms(shifted, rec, d, PRIORS)["penalty_b"]
        assert b == pytest.approx(a, rel=1e-9, abs=1e-12)

    def test_foreground_change_touches_only_foreground_terms(self):
        rng = np.random.default_rng(4)
        rec = _record(15)
        d = lake_design(rec, 5)
        s = _random_state(d, rng)
        s2 = CoefficientState(s.beta0_b, s.beta_b, s.beta0_f + 0.3, s.beta_f + rng.normal(0, .1, d.foreground.p))
        a, b = log_posterior_terms(s, rec, d, PRIORS), log_posterior_terms(s2, rec, d, PRIORS)
        for key in ("intercept_b", "penalty_b", "level_b"):
            assert a[key] == b[key]
        assert a["penalty_f"] != b["penalty_f"] and a["loglik"] != b["loglik"]

    def test_two_interval_ratio_matches_direct_formula(self):
        rec = SedimentRecord("t", [0.0, 25.0], [25.0, 40.0], [7, 31])
        d = lake_design(rec, 4, 4, placement="even")
        pri = UnivariatePriorSpec(10.0, 0.5, 3.0)
        rng = np.random.default_rng(5)
        s1, s2 = _random_state(d, rng), _random_state(d, rng)

        def direct(s):
            # written out from the model definition, without the module's helpers
            Xb = evaluate_basis(d.background.knot_set, rec.midpoints)
            Xf = evaluate_basis(d.foreground.knot_set, rec.midpoints)
            mu = (np.exp(s.beta0_b + Xb @ s.beta_b) + np.exp(s.beta0_f + Xf @ s.beta_f)) * rec.lengths
            out = stats.poisson.logpmf(rec.counts, mu).sum()
            for b0, b, S, v in ((s.beta0_b, s.beta_b, d.background.penalty, pri.sigma_b_sq),
                                (s.beta0_f, s.beta_f, d.foreground.penalty, pri.sigma_f_sq)):
                out += stats.norm.logpdf(b0, 0, np.sqrt(pri.sigma0_sq))
                out += stats.norm.logpdf(b.mean(), 0, np.sqrt(pri.sigma0_sq))
                out -= 0.5 * b @ S @ b / v
            return out

        got = log_posterior(s1, rec, d, pri) - log_posterior(s2, rec, d, pri)
        assert got == pytest.approx(direct(s1) - direct(s2), abs=1e-10)

    def test_fire_probability_invariant_to_intercept_exchange(self):
        rng = np.random.default_rng(6)
        rec = _record(12)
        d = lake_design(rec, 5)
        s = _random_state(d, rng)
        c = 2.5
        moved = CoefficientState(s.beta0_b + c, s.beta_b - c, s.beta0_f - c, s.beta_f + c)
        assert np.allclose(probability_of_fire(s, d), probability_of_fire(moved, d), atol=1e-12)

    def test_prior_validation(self):
        with pytest.raises(ValueError):
            UnivariatePriorSpec(100.0, 5.0, 1.0)
        with pytest.raises(ValueError):
            UnivariatePriorSpec(-1.0, 0.1, 1.0)
        with pytest.raises(ValueError):
            CoefficientState(np.nan, [0.0], 0.0, [0.0])


SHORT = MCMCControls(iterations=600, burn_in=200, thin=4, chains=2, seed=11)


class TestSampler:
    def test_empty_record(self):
        rec = SedimentRecord("t", [], [], [])
        with pytest.raises(ValueError, match="nothing to fit"):
            lake_design(rec)
        with pytest.raises(ValueError, match="nothing to fit"):
            run_chain(rec, None, PRIORS, SHORT)

    def test_same_seed_bit_identical(self):
        rec = _record(25)
        d = lake_design(rec, 5)
        a = run_chains(rec, d, PRIORS, SHORT)
        b = run_chains(rec, d, PRIORS, SHORT)
        assert np.array_equal(a.as_matrix(), b.as_matrix())
        c = run_chains(rec, d, PRIORS, MCMCControls(600, 200, 4, 2, seed=12))
        assert not np.array_equal(a.as_matrix(), c.as_matrix())

    def test_parallel_workers_match_serial(self):
        rec = _record(20)
        d = lake_design(rec, 5)
        a = run_chains(rec, d, PRIORS, SHORT)
        b = run_chains(rec, d, PRIORS, MCMCControls(600, 200, 4, 2, seed=11, workers=2))
        assert np.array_equal(a.as_matrix(), b.as_matrix())

    def test_shapes_and_rates(self):
        rec = _record(25)
        d = lake_design(rec, 5)
        draws = run_chain(rec, d, PRIORS, SHORT, seed=3)
        assert len(draws) == SHORT.n_keep == 100
        assert draws.beta_f.shape == (100, d.foreground.p)
        assert all(0.0 <= v <= 1.0 for v in draws.acceptance_rates.values())
        for key in ("seed", "burn_in", "iterations", "thin", "warnings"):
            assert key in draws.metadata

    def test_acceptance_warning_is_not_fatal(self):
        rec = _record(25)
        d = lake_design(rec, 5)
        # no burn-in means no adaptation, so some block rate is likely off target
        draws = run_chain(rec, d, PRIORS, MCMCControls(60, 0, 1, 1, adapt_every=1000), seed=1)
        assert isinstance(draws.metadata["warnings"], list)
        assert len(draws) == 60

    def test_matrix_round_trip(self):
        rec = _record(15)
        d = lake_design(rec, 4)
        draws = run_chains(rec, d, PRIORS, SHORT)
        back = PosteriorDraws.from_matrix(draws.as_matrix(), 4, d.foreground.p)
        assert np.array_equal(back.as_matrix(), draws.as_matrix())
        assert len(draws.column_names()) == draws.as_matrix().shape[1]

    def test_controls_validation(self):
        with pytest.raises(ValueError):
            MCMCControls(iterations=10, burn_in=10)
        with pytest.raises(ValueError):
            MCMCControls(thin=0)


def _fixed_draws(state, n):
    return PosteriorDraws(np.full(n, state.beta0_b), np.tile(state.beta_b, (n, 1)),
                          np.full(n, state.beta0_f), np.tile(state.beta_f, (n, 1)),
                          np.zeros(n), np.zeros(n, dtype=int))


class TestPredictive:
    def test_near_zero_mean(self):
        rec = _record(8)
        d = lake_design(rec, 4)
        lo = np.log(0.0001 / 2 / 20.0)
        s = CoefficientState(lo, np.zeros(4), lo, np.zeros(d.foreground.p))
        y = posterior_predictive_draw(_fixed_draws(s, 200), d, rng=np.random.default_rng(0))
        assert y.sum() <= 1

    def test_law_of_total_expectation(self):
        rng = np.random.default_rng(8)
        rec = _record(10)
        d = lake_design(rec, 4)
        n = 20000
        draws = PosteriorDraws(rng.normal(0, .2, n), rng.normal(0, .2, (n, 4)),
                               rng.normal(-1, .5, n), rng.normal(0, .3, (n, d.foreground.p)),
                               np.zeros(n), np.zeros(n, dtype=int))
        lb, lf = draws.intensities(d)
        mu = lb + lf
        y = posterior_predictive_draw(draws, d, rng=np.random.default_rng(9))
        se = np.sqrt((mu + mu.var(axis=0)).mean(axis=0) / n)
        assert np.all(np.abs(y.mean(axis=0) - mu.mean(axis=0)) < 4 * se)

    def test_poisson_variance(self):
        rec = _record(6)
        d = lake_design(rec, 4)
        s = CoefficientState(np.log(0.3), np.zeros(4), np.log(0.1), np.zeros(d.foreground.p))
        y = posterior_predictive_draw(_fixed_draws(s, 100_000), d, intervals=[0, 3],
                                      rng=np.random.default_rng(10))
        assert np.allclose(y.var(axis=0, ddof=1), 8.0, rtol=0.05)

    def test_empty_draws(self):
        rec = _record(6)
        d = lake_design(rec, 4)
        with pytest.raises(ValueError):
            posterior_predictive_draw(_fixed_draws(CoefficientState.zeros(4, 6), 0), d)
