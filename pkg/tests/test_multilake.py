import math

import numpy as np
import pytest
from scipy import stats

from charfire.diagnostics import mcse_mean
from charfire.multilake import (MultiCoefficientState, MultiPriorSpec, SpatialCovarianceError,
                                SpatialCovarianceSpec, _ScalarRW, background_on_lake_support,
                                check_conditioning, effective_range, exponential_covariance,
                                export_regional_background, joint_log_posterior,
                                joint_log_posterior_terms, lake_log_background, multilake_design,
                                phi_for_range, psi_sq_from_univariate, run_multichains,
                                structured_background_logpdf)
from charfire.records import SedimentRecord
from charfire.splines import penalty_matrix
from charfire.univariate import (CoefficientState, MCMCControls, UnivariatePriorSpec, lake_design,
                                 log_posterior)


def _lake(lake_id, edges, location, seed=0, rate=4.0):
    edges = np.asarray(edges, dtype=float)
    rng = np.random.default_rng(seed)
    return SedimentRecord(lake_id, edges[:-1], edges[1:], rng.poisson(rate * np.diff(edges)),
                          location=location)


class TestCovariance:
    def test_unit_diagonal_and_closed_form(self):
        H = exponential_covariance([(0.0, 0.0), (math.log(2), 0.0)], 1.0)
        assert np.allclose(np.diag(H), 1.0)
        assert H[0, 1] == pytest.approx(0.5, abs=1e-15)

    def test_positive_definite_against_eigen_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            locs = rng.uniform(0, 50, (int(rng.integers(2, 15)), 2))
            H = exponential_covariance(locs, rng.uniform(0.01, 3))
            assert np.allclose(H, H.T)
            # eigenvalues from the general (non-symmetric) LAPACK routine
            w = np.linalg.eigvals(H).real
            assert w.min() > 0
            assert np.linalg.eigvalsh(H).min() == pytest.approx(w.min(), rel=1e-8, abs=1e-12)

    def test_duplicate_locations(self):
        with pytest.raises(SpatialCovarianceError):
            exponential_covariance([(1.0, 1.0), (1.0, 1.0)], 0.5)

    def test_bad_phi(self):
        with pytest.raises(ValueError):
            exponential_covariance([(0, 0), (1, 1)], 0.0)

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            SpatialCovarianceSpec(phi=5.0)
        with pytest.raises(ValueError):
            SpatialCovarianceSpec(partial_sill=2.0)


class TestEffectiveRange:
    def test_ln20(self):
        assert effective_range(1.0) == pytest.approx(2.9957, abs=1e-4)
        assert effective_range(1.0) == math.log(20.0)

    def test_back_solved_phi(self):
        assert effective_range(0.18157) == pytest.approx(16.5, abs=0.1)

    def test_inverse_and_monotone(self):
        for d in (0.5, 16.5, 300.0):
            assert effective_range(phi_for_range(d)) == pytest.approx(d, rel=1e-15)
        phis = np.linspace(0.01, 3, 200)
        assert np.all(np.diff([effective_range(p) for p in phis]) < 0)

    def test_correlation_at_range(self):
        H = exponential_covariance([(0.0, 0.0), (effective_range(0.4), 0.0)], 0.4)
        assert H[0, 1] == pytest.approx(0.05, rel=1e-12)


def _two_lakes(seed=0, far=10.0):
    a = _lake("a", np.arange(0, 420, 20.0), (0.0, 0.0), seed)
    b = _lake("b", np.concatenate([[35.0], np.arange(60, 500, 25.0)]), (far, 0.0), seed + 1)
    return [a, b]


class TestMapping:
    def test_zero_coefficients_give_interval_lengths(self):
        recs = _two_lakes()
        d = multilake_design(recs, 20.0, 6)
        for j, rec in enumerate(recs):
            lam = background_on_lake_support(0.0, np.zeros(6), d.regional, d.aggregation[j])
            assert np.allclose(lam, rec.lengths, rtol=0, atol=1e-9)

    def test_interval_equal_to_one_cell(self):
        rec = _lake("a", np.arange(0, 200, 20.0), (0, 0))
        d = multilake_design([rec, _lake("b", [0, 50, 90, 130, 190], (5, 0))], 20.0, 5)
        beta = np.random.default_rng(1).normal(size=5)
        lam = background_on_lake_support(0.3, beta, d.regional, d.aggregation[0])
        cell = np.exp(0.3 + d.regional.basis @ beta)[:len(rec)] * 20.0
        assert np.allclose(lam, cell, rtol=1e-13)

    @pytest.mark.parametrize("seed", range(5))
    def test_brute_force_overlap_oracle(self, seed):
        rng = np.random.default_rng(seed)
        recs = _two_lakes(seed)
        d = multilake_design(recs, rng.uniform(7, 40), 6)
        b0, beta = rng.normal(), rng.normal(0, 0.5, 6)
        rate = np.exp(b0 + d.regional.basis @ beta)
        for j, rec in enumerate(recs):
            oracle = []
            for t0, t1 in zip(rec.top_ages, rec.bottom_ages):
                s = 0.0
                for c0, c1, r in zip(d.support.tops, d.support.bottoms, rate):
                    s += max(0.0, min(t1, c1) - max(t0, c0)) * r
                oracle.append(s)
            got = background_on_lake_support(b0, beta, d.regional, d.aggregation[j])
            assert np.allclose(got, oracle, rtol=1e-12, atol=0)
            assert np.allclose(np.exp(lake_log_background(b0, beta, d.regional, d.aggregation[j])),
                               oracle, rtol=1e-12)

    def test_dimension_mismatch(self):
        recs = _two_lakes()
        d = multilake_design(recs, 20.0, 6)
        with pytest.raises(ValueError):
            background_on_lake_support(0.0, np.zeros(6), d.regional, np.ones((3, 2)))


def _state(d, rng, mu0=0.0, tau=1.0, phi=0.5, scale=0.3):
    k, p = d.k, d.p_star
    return MultiCoefficientState(rng.normal(0, 1, k), rng.normal(0, scale, (k, p)),
                                 rng.normal(-1, 1, k),
                                 tuple(rng.normal(0, scale, f.p) for f in d.foreground),
                                 mu0, rng.normal(0, 0.2, p), tau, phi)


class TestJointPosterior:
    def test_single_lake_reduces_to_univariate(self):
        # equal 20-yr intervals aligned with the grid make A = 20 I
        rec = _lake("a", np.arange(0, 420, 20.0), (0.0, 0.0))
        d = multilake_design([rec], 20.0, 6)
        ud = lake_design(rec, 6)
        assert np.allclose(d.regional.basis, ud.background.basis, atol=1e-12)
        sb, sf, s0 = 0.2, 30.0, 100.0
        pri = MultiPriorSpec((sb,), (sf,), sigma0_sq=s0, psi_sq=4.0)
        rng = np.random.default_rng(2)
        for _ in range(5):
            st = _state(d, rng, mu0=0.0, tau=10.0)
            st = MultiCoefficientState(st.beta0_b, st.beta_b, st.beta0_f, st.beta_f, 0.0,
                                       np.zeros(6), 10.0, 0.5)
            uni = log_posterior(CoefficientState(st.beta0_b[0], st.beta_b[0], st.beta0_f[0],
                                                 st.beta_f[0]), rec, ud,
                                UnivariatePriorSpec(s0, sb, sf))
            S = d.regional.penalty
            w = np.linalg.eigvalsh(S)
            pdet = float(np.sum(np.log(np.sort(w)[2:])))
            const = (stats.norm.logpdf(0.0, 0, math.sqrt(s0)) - 0.5 * math.log(2 * math.pi * s0)
                     - 0.5 * 4 * math.log(2 * math.pi) - 0.5 * (4 * math.log(sb) - pdet)
                     + 6 * stats.norm.logpdf(0.0, 0, 2.0)
                     - math.log(10.0 - 0.01) - math.log(3.0 - 0.01))
            assert joint_log_posterior(st, [rec], d, pri) == pytest.approx(uni + const, abs=1e-8)

    def test_independence_limit(self):
        recs = _two_lakes()
        d = multilake_design(recs, 20.0, 6)
        pri = MultiPriorSpec.uniform(2, 0.3, 10.0, phi_bounds=(0.01, 1e4))
        st = _state(d, np.random.default_rng(3), phi=5000.0)
        joint = joint_log_posterior_terms(st, recs, d, pri)["background"]
        parts = sum(structured_background_logpdf(st.beta_b[j:j + 1], st.mu_b, np.eye(1),
                                                 d.regional.penalty, (0.3,), d.log_pdet_penalty)
                    for j in range(2))
        assert joint == pytest.approx(parts, abs=1e-8)

    @pytest.mark.parametrize("seed", range(4))
    def test_dense_sigma_oracle(self, seed):
        rng = np.random.default_rng(seed)
        k, p = 2, 4
        locs = rng.uniform(0, 20, (k, 2))
        phi = rng.uniform(0.05, 1)
        H = exponential_covariance(locs, phi)
        S = penalty_matrix_for(p)
        sb = rng.uniform(0.05, 2, k)
        B, mu = rng.normal(size=(k, p)), rng.normal(size=p)
        # dense construction: Sigma = (L kron I) diag(sb_j S^+) (L kron I)'
        L = np.linalg.cholesky(H)
        Splus = np.linalg.pinv(S)
        D = np.zeros((k * p, k * p))
        for j in range(k):
            D[j * p:(j + 1) * p, j * p:(j + 1) * p] = sb[j] * Splus
        LI = np.kron(L, np.eye(p))
        Sigma = LI @ D @ LI.T
        w, V = np.linalg.eigh(Sigma)
        keep = w > 1e-9 * w.max()
        dvec = (B - mu).ravel()
        proj = V[:, keep].T @ dvec
        dense = (-0.5 * keep.sum() * math.log(2 * math.pi) - 0.5 * np.sum(np.log(w[keep]))
                 - 0.5 * np.sum(proj**2 / w[keep]))
        got = structured_background_logpdf(B, mu, H, S, sb)
        assert keep.sum() == k * (p - 2)
        assert got == pytest.approx(dense, abs=1e-8)

    def test_outside_support(self):
        recs = _two_lakes()
        d = multilake_design(recs, 20.0, 6)
        pri = MultiPriorSpec.uniform(2)
        st = _state(d, np.random.default_rng(4), tau=20.0)
        assert joint_log_posterior(st, recs, d, pri) == -math.inf

    def test_prior_spec_validation(self):
        with pytest.raises(ValueError):
            MultiPriorSpec((0.1, 0.2), (1.0,))
        with pytest.raises(ValueError):
            MultiPriorSpec((2.0,), (1.0,))
        with pytest.raises(ValueError):
            MultiPriorSpec.uniform(2, tau_b_bounds=(1.0, 0.5))


def penalty_matrix_for(p):
    from charfire.splines import KnotSet
    return penalty_matrix(KnotSet(np.linspace(0.0, 3.0, p)))


class TestConditioning:
    def test_ill_conditioned_h(self):
        d = np.array([[0.0, 1e-12], [1e-12, 0.0]])
        with pytest.raises(SpatialCovarianceError, match="phi"):
            check_conditioning(d, (0.01, 3.0))

    def test_well_conditioned(self):
        assert check_conditioning(np.array([[0.0, 30.0], [30.0, 0.0]]), (0.01, 3.0)) < 1e12

    def test_sampler_refuses(self):
        recs = _two_lakes(far=1e-11)
        d = multilake_design(recs, 20.0, 6)
        with pytest.raises(SpatialCovarianceError):
            run_multichains(recs, d, MultiPriorSpec.uniform(2), MCMCControls(50, 10, 1, 1))

    def test_needs_two_lakes(self):
        rec = _lake("a", np.arange(0, 420, 20.0), (0.0, 0.0))
        d = multilake_design([rec], 20.0, 6)
        with pytest.raises(ValueError, match="two lakes"):
            run_multichains([rec], d, MultiPriorSpec.uniform(1), MCMCControls(50, 10, 1, 1))


class TestHyperpriorKernel:
    def test_flat_target_gives_uniform_draws(self):
        # the bounded random walk used for tau_b and phi leaves a uniform prior invariant
        rng = np.random.default_rng(5)
        for bounds in ((0.01, 10.0), (0.01, 3.0)):
            rw = _ScalarRW(0.5 * sum(bounds), 0.6 * (bounds[1] - bounds[0]), bounds)
            x = np.empty(100_000)
            for i in range(x.size * 10):
                rw.step(lambda v: 0.0, rng)
                if i % 10 == 9:
                    x[i // 10] = rw.value
            ks = stats.kstest(x, stats.uniform(bounds[0], bounds[1] - bounds[0]).cdf).statistic
            assert ks < 0.02


CTL = MCMCControls(iterations=3000, burn_in=1500, thin=3, chains=2, seed=3)


class TestSampler:
    def test_identical_lakes_agree(self):
        edges = np.arange(0, 620, 20.0)
        a = _lake("a", edges, (0.0, 0.0), 7)
        b = SedimentRecord("b", a.top_ages, a.bottom_ages, a.counts, location=(4.0, 0.0))
        d = multilake_design([a, b], 20.0, 6)
        draws = run_multichains([a, b], d, MultiPriorSpec.uniform(2), CTL)
        la = np.exp(draws.regional_log_intensity(d, 0))
        lb = np.exp(draws.regional_log_intensity(d, 1))
        for cell in (0, 10, 20, 29):
            se = math.hypot(mcse_mean(la[:, cell].reshape(2, -1)), mcse_mean(lb[:, cell].reshape(2, -1)))
            assert abs(la[:, cell].mean() - lb[:, cell].mean()) < 4 * se

    def test_deterministic(self):
        recs = _two_lakes()
        d = multilake_design(recs, 20.0, 5)
        ctl = MCMCControls(300, 150, 3, 2, seed=9)
        x = run_multichains(recs, d, MultiPriorSpec.uniform(2), ctl)
        y = run_multichains(recs, d, MultiPriorSpec.uniform(2), ctl)
        for name in ("beta_b", "beta0_f", "mu_b", "tau_b", "phi", "log_post"):
            assert np.array_equal(getattr(x, name), getattr(y, name))
        assert len(x) == 100 and x.beta_b.shape == (100, 2, 5)
        assert np.all((x.phi >= 0.01) & (x.phi <= 3.0))
        # batched lake intensities agree with the per-state log-sum-exp
        for j in range(2):
            lb, _ = x.log_intensities(d, j)
            for s in (0, 57, 99):
                ref = lake_log_background(x.beta0_b[s, j], x.beta_b[s, j], d.regional, d.aggregation[j])
                assert np.allclose(lb[s], ref, rtol=0, atol=1e-12)

    def test_export_rows(self):
        recs = [_lake("a", np.arange(0, 200, 20.0), (0, 0)), _lake("b", np.arange(300, 500, 20.0), (3, 0))]
        d = multilake_design(recs, 20.0, 5)
        draws = run_multichains(recs, d, MultiPriorSpec.uniform(2), MCMCControls(300, 150, 3, 1))
        rows = export_regional_background(draws, d)
        assert len(rows) == 2 * d.n_star
        gap = [r for r in rows if r["cell_start"] >= 180 and r["cell_end"] <= 300]
        assert gap and all(r["n_records_covering"] == 0 for r in gap)
        # curves equal a per-draw recomputation from the stored coefficients
        j, cell = 1, 4
        lam = [math.exp(draws.beta0_b[s, j] + d.regional.basis[cell] @ draws.beta_b[s, j])
               for s in range(len(draws))]
        row = [r for r in rows if r["lake_id"] == "b"][cell]
        assert row["intensity_mean"] == pytest.approx(np.mean(lam), rel=1e-12)
        assert row["intensity_lo95"] <= row["intensity_mean"] <= row["intensity_hi95"]

    def test_psi_rule(self):
        draws = [np.array([[1.0, -1.0]]), np.array([[2.0, -2.0]])]
        assert psi_sq_from_univariate(draws) == pytest.approx(10 * np.var([1, -1, 2, -2]))
        assert psi_sq_from_univariate([np.zeros(3)]) == 1.0


@pytest.mark.slow
def test_short_chains_agree_with_tenfold_reference():
    # expected counts and hyperparameters are the identified quantities; the split of
    # a flat level between the two processes is not, so it is not compared
    def lake(i, edges, loc, seed):
        rng = np.random.default_rng(seed)
        edges = np.asarray(edges, dtype=float)
        boost = np.where(rng.uniform(size=edges.size - 1) < 0.2, 6.0, 1.0)
        return SedimentRecord(i, edges[:-1], edges[1:], rng.poisson(4 * np.diff(edges) * boost),
                              location=loc)

    recs = [lake("a", np.arange(0, 820, 20.0), (0, 0), 1), lake("b", np.arange(10, 830, 20.0), (6, 0), 2)]
    d = multilake_design(recs, 20.0, 4)
    pri = MultiPriorSpec.uniform(2, 0.05, 1.0)
    short = run_multichains(recs, d, pri, MCMCControls(1500, 750, 2, 4, seed=1500))
    long = run_multichains(recs, d, pri, MCMCControls(15000, 7500, 2, 4, seed=15000))

    def summaries(dr):
        out = {"phi": dr.phi, "tau_b": dr.tau_b}
        for j in range(2):
            lb, lf = dr.log_intensities(d, j)
            mu = np.exp(lb) + np.exp(lf)
            for c in (0, 20, 39):
                out[f"mu_{j}_{c}"] = mu[:, c]
        return out

    a, b = summaries(short), summaries(long)
    for key in a:
        se = math.hypot(mcse_mean(a[key].reshape(4, -1)), mcse_mean(b[key].reshape(4, -1)))
        assert abs(a[key].mean() - b[key].mean()) < 3 * se, key
