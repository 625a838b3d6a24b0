"""Multi-lake model: regional background on a common grid with spatially pooled coefficients.

Each lake j has background coefficients on the common grid (cells of equal
length), mapped back to its own intervals through the overlap matrix A_j:

    lam_b,j = A_j @ exp(beta0_j + X* beta_j)

Foregrounds stay on each lake's own intervals as in the single-lake model.
Background coefficients are pooled:

    beta0_j ~ N(mu0, tau_b^2),   beta ~ N(R mu_b, Sigma_b),
    Sigma_b = (L_H ⊗ I) Diag(sigma_b,j^2 S*^-1) (L_H ⊗ I)'

with H = exp(-phi * distance) and L_H its Cholesky factor.  Writing
G = L_H Diag(sigma_b^2) L_H', Sigma_b = G ⊗ S*^+ so the prior precision is
G^-1 ⊗ S* and every evaluation needs only k x k and p* x p* algebra.  S* has
rank p* - 2; densities are taken on its range (log pseudo-determinants), the
null-space directions being closed by the intercept and level priors as in the
single-lake model.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular
from scipy.spatial.distance import cdist
from scipy.special import gammaln, logsumexp

from .records import (CommonSupport, SedimentRecord, build_aggregation_matrix,
                      build_common_support, cells_covered)
from .splines import SplineDesign, build_design, default_knot_count
from .univariate import (ETA_MAX, MCMCControls, ProcessSampler, _Adapter, _chol_cov,
                         _lstsq_theta, _prior_precision, _running_median, chain_seeds,
                         lake_design)

logger = logging.getLogger(__name__)

LOG20 = math.log(20.0)
MAX_CONDITION = 1e12
LOG_2PI = math.log(2.0 * math.pi)


class SpatialCovarianceError(ValueError):
    pass


# ---------------------------------------------------------------------------
# spatial covariance


@dataclass(frozen=True)
class SpatialCovarianceSpec:
    phi: float = 0.5
    phi_bounds: tuple = (0.01, 3.0)
    partial_sill: float = 1.0

    def __post_init__(self):
        a, b = self.phi_bounds
        if not 0 < a < b:
            raise ValueError(f"phi bounds must satisfy 0 < a < b, got {self.phi_bounds}")
        if not a <= self.phi <= b:
            raise ValueError(f"phi={self.phi} outside its bounds {self.phi_bounds}")
        if self.partial_sill != 1.0:
            raise ValueError("the partial sill is fixed at 1")


def pairwise_distances(locations) -> np.ndarray:
    s = np.atleast_2d(np.asarray(locations, dtype=float))
    return cdist(s, s)


def exponential_covariance(locations, phi: float, partial_sill: float = 1.0) -> np.ndarray:
    """H(j, j') = partial_sill * exp(-phi * ||s_j - s_j'||)."""
    if not phi > 0:
        raise ValueError(f"phi must be positive, got {phi}")
    d = pairwise_distances(locations)
    off = ~np.eye(d.shape[0], dtype=bool)
    if np.any(d[off] == 0):
        i, j = np.argwhere((d == 0) & off)[0]
        raise SpatialCovarianceError(f"lakes {i} and {j} share a location; H would be singular")
    return partial_sill * np.exp(-phi * d)


def effective_range(phi: float) -> float:
    """Distance at which the exponential correlation drops to 0.05: ln(20) / phi."""
    if not phi > 0:
        raise ValueError("phi must be positive")
    return LOG20 / phi


def phi_for_range(distance: float) -> float:
    if not distance > 0:
        raise ValueError("distance must be positive")
    return LOG20 / distance


def check_conditioning(distances: np.ndarray, phi_bounds) -> float:
    """Condition number of H at the smallest allowed phi (the worst case)."""
    H = np.exp(-phi_bounds[0] * distances)
    cond = float(np.linalg.cond(H))
    if not np.isfinite(cond) or cond > MAX_CONDITION:
        raise SpatialCovarianceError(
            f"H is ill-conditioned at phi={phi_bounds[0]} (condition number {cond:.3g} > "
            f"{MAX_CONDITION:g}); raise the lower phi bound"
        )
    return cond


# ---------------------------------------------------------------------------
# design and priors


@dataclass(frozen=True, eq=False)
class MultiLakeDesign:
    support: CommonSupport
    regional: SplineDesign
    aggregation: tuple
    foreground: tuple
    lengths: tuple
    distances: np.ndarray
    lake_ids: tuple
    coverage: np.ndarray
    # log pseudo-determinant of the regional penalty, cached
    log_pdet_penalty: float = 0.0

    @property
    def k(self) -> int:
        return len(self.lake_ids)

    @property
    def p_star(self) -> int:
        return self.regional.p

    @property
    def n_star(self) -> int:
        return self.support.n_star


def log_pdet(S: np.ndarray, rank: int) -> float:
    w = np.sort(np.linalg.eigvalsh(S))[::-1]
    return float(np.sum(np.log(w[:rank])))


def multilake_design(records: Sequence[SedimentRecord], interval_length: float | None = None,
                     p_star: int | None = None, foreground_knots="interval",
                     years_per_knot: float = 500.0, min_knots: int = 6,
                     max_knots: int = 40) -> MultiLakeDesign:
    records = list(records)
    support = build_common_support(records, interval_length)
    if p_star is None:
        p_star = min(default_knot_count(support.span, years_per_knot, min_knots, max_knots),
                     support.n_star)
    regional = build_design(support.midpoints, int(p_star), "even")
    A = tuple(build_aggregation_matrix(r, support).entries for r in records)
    fg = tuple(lake_design(r, foreground_knots=foreground_knots, background_knots=4
                           if len(r) >= 4 else None).foreground for r in records)
    locs = np.array([r.location for r in records], dtype=float)
    return MultiLakeDesign(support, regional, A, fg,
                           tuple(np.asarray(r.lengths, dtype=float) for r in records),
                           pairwise_distances(locs), tuple(r.lake_id for r in records),
                           cells_covered(records, support),
                           log_pdet(regional.penalty, regional.p - 2))


@dataclass(frozen=True)
class MultiPriorSpec:
    sigma_b_sq: tuple
    sigma_f_sq: tuple
    sigma0_sq: float = 100.0
    psi_sq: float = 1.0
    tau_b_bounds: tuple = (0.01, 10.0)
    phi_bounds: tuple = (0.01, 3.0)

    def __post_init__(self):
        sb = tuple(float(x) for x in np.atleast_1d(self.sigma_b_sq))
        sf = tuple(float(x) for x in np.atleast_1d(self.sigma_f_sq))
        object.__setattr__(self, "sigma_b_sq", sb)
        object.__setattr__(self, "sigma_f_sq", sf)
        if len(sb) != len(sf):
            raise ValueError("need one background and one foreground penalty per lake")
        if any(b <= 0 or not b < f for b, f in zip(sb, sf)):
            raise ValueError("penalties must be positive with sigma_b^2 < sigma_f^2 per lake")
        if min(self.sigma0_sq, self.psi_sq) <= 0:
            raise ValueError("sigma0_sq and psi_sq must be positive")
        for name in ("tau_b_bounds", "phi_bounds"):
            a, b = getattr(self, name)
            if not 0 < a < b:
                raise ValueError(f"{name} must satisfy 0 < a < b")

    @classmethod
    def uniform(cls, k: int, sigma_b_sq: float = 0.1, sigma_f_sq: float = 100.0, **kwargs):
        return cls((sigma_b_sq,) * k, (sigma_f_sq,) * k, **kwargs)


@dataclass(frozen=True, eq=False)
class MultiCoefficientState:
    beta0_b: np.ndarray
    beta_b: np.ndarray
    beta0_f: np.ndarray
    beta_f: tuple
    mu0_b: float
    mu_b: np.ndarray
    tau_b: float
    phi: float

    def __post_init__(self):
        object.__setattr__(self, "beta0_b", np.atleast_1d(np.asarray(self.beta0_b, dtype=float)))
        object.__setattr__(self, "beta_b", np.atleast_2d(np.asarray(self.beta_b, dtype=float)))
        object.__setattr__(self, "beta0_f", np.atleast_1d(np.asarray(self.beta0_f, dtype=float)))
        object.__setattr__(self, "beta_f", tuple(np.asarray(b, dtype=float) for b in self.beta_f))
        object.__setattr__(self, "mu_b", np.asarray(self.mu_b, dtype=float))
        vals = np.concatenate([self.beta0_b, self.beta_b.ravel(), self.beta0_f,
                               *self.beta_f, self.mu_b, [self.mu0_b, self.tau_b, self.phi]])
        if not np.all(np.isfinite(vals)):
            raise ValueError("state must be finite")

    @property
    def k(self) -> int:
        return self.beta0_b.size


# ---------------------------------------------------------------------------
# model evaluation


def regional_log_intensity(beta0: float, beta: np.ndarray, regional: SplineDesign) -> np.ndarray:
    """Per-year log background intensity on every grid cell."""
    return beta0 + regional.basis @ beta


def background_on_lake_support(beta0: float, beta: np.ndarray, regional: SplineDesign,
                               A: np.ndarray) -> np.ndarray:
    """lam_b on the lake's own intervals: overlap-weighted sum of cell intensities."""
    A = np.asarray(A, dtype=float)
    if A.shape[1] != regional.n:
        raise ValueError(f"aggregation matrix has {A.shape[1]} columns, grid has {regional.n} cells")
    eta = regional_log_intensity(beta0, beta, regional)
    if np.max(np.abs(eta)) > ETA_MAX:
        raise FloatingPointError(f"regional linear predictor beyond |eta| <= {ETA_MAX}")
    return A @ np.exp(eta)


def lake_log_background(beta0, beta, regional: SplineDesign, A) -> np.ndarray:
    """log lam_b,j computed as a log-sum-exp (for probabilities of fire)."""
    eta = regional_log_intensity(beta0, beta, regional)
    with np.errstate(divide="ignore"):
        logA = np.log(A)
    return logsumexp(logA + eta[None, :], axis=1)


def lake_intensities(state: MultiCoefficientState, design: MultiLakeDesign, j: int):
    lam_b = background_on_lake_support(state.beta0_b[j], state.beta_b[j], design.regional,
                                       design.aggregation[j])
    eta_f = state.beta0_f[j] + design.foreground[j].basis @ state.beta_f[j]
    if np.max(np.abs(eta_f)) > ETA_MAX:
        raise FloatingPointError(f"foreground linear predictor beyond |eta| <= {ETA_MAX}")
    return lam_b, np.exp(eta_f) * design.lengths[j]


def _g_inverse(H: np.ndarray, sigma_b_sq) -> tuple[np.ndarray, float]:
    """(G^-1, log|G|) for G = L_H Diag(sigma_b^2) L_H'."""
    L = np.linalg.cholesky(H)
    Linv = solve_triangular(L, np.eye(H.shape[0]), lower=True)
    s = np.asarray(sigma_b_sq, dtype=float)
    Ginv = Linv.T @ (Linv / s[:, None])
    logdet = 2.0 * float(np.sum(np.log(np.diag(L)))) + float(np.sum(np.log(s)))
    return 0.5 * (Ginv + Ginv.T), logdet


def structured_background_logpdf(beta_b, mu_b, H, S, sigma_b_sq, log_pdet_S: float | None = None) -> float:
    """log N(beta | R mu_b, Sigma_b) on the range of Sigma_b, via the Kronecker structure.

    ``beta_b`` is (k, p*).  Equals ``-r/2 log 2pi - 1/2 log pdet(Sigma_b) -
    1/2 d' Sigma_b^+ d`` with ``r = k (p* - 2)``.
    """
    B = np.atleast_2d(np.asarray(beta_b, dtype=float))
    k, p = B.shape
    D = B - np.asarray(mu_b, dtype=float)[None, :]
    Ginv, logdet_G = _g_inverse(H, sigma_b_sq)
    M = D @ S @ D.T
    quad = float(np.sum(Ginv * M))
    if log_pdet_S is None:
        log_pdet_S = log_pdet(S, p - 2)
    r = k * (p - 2)
    # pdet(G ⊗ S^+) = |G|^(p-2) * pdet(S)^-k
    log_pdet_sigma = (p - 2) * logdet_G - k * log_pdet_S
    return -0.5 * r * LOG_2PI - 0.5 * log_pdet_sigma - 0.5 * quad


def _normal_logpdf(x, mean, var) -> float:
    x = np.asarray(x, dtype=float)
    return float(np.sum(-0.5 * (LOG_2PI + math.log(var)) - 0.5 * (x - mean) ** 2 / var))


def _log_uniform(x, bounds) -> float:
    a, b = bounds
    return -math.log(b - a) if a <= x <= b else -math.inf


def joint_log_posterior_terms(state: MultiCoefficientState, records: Sequence[SedimentRecord],
                              design: MultiLakeDesign, priors: MultiPriorSpec) -> dict:
    k = design.k
    if state.k != k or len(priors.sigma_b_sq) != k:
        raise ValueError("state, design and priors disagree on the number of lakes")
    terms = {}
    if not (priors.tau_b_bounds[0] <= state.tau_b <= priors.tau_b_bounds[1]
            and priors.phi_bounds[0] <= state.phi <= priors.phi_bounds[1]):
        return {"support": -math.inf}
    ll = 0.0
    for j, rec in enumerate(records):
        lam_b, lam_f = lake_intensities(state, design, j)
        mu = lam_b + lam_f
        y = np.asarray(rec.counts, dtype=float)
        ll += float(np.sum(y * np.log(mu) - mu - gammaln(y + 1.0)))
    terms["loglik"] = ll
    terms["intercept_b"] = _normal_logpdf(state.beta0_b, state.mu0_b, state.tau_b**2)
    H = np.exp(-state.phi * design.distances)
    terms["background"] = structured_background_logpdf(
        state.beta_b, state.mu_b, H, design.regional.penalty, priors.sigma_b_sq,
        design.log_pdet_penalty)
    terms["level_b"] = float(-0.5 * np.sum(state.beta_b.mean(axis=1) ** 2) / priors.sigma0_sq)
    fi = fp = fl = 0.0
    for j in range(k):
        b = state.beta_f[j]
        fi += -0.5 * state.beta0_f[j] ** 2 / priors.sigma0_sq
        fp += -0.5 * float(b @ design.foreground[j].penalty @ b) / priors.sigma_f_sq[j]
        fl += -0.5 * float(b.mean()) ** 2 / priors.sigma0_sq
    terms.update(intercept_f=fi, penalty_f=fp, level_f=fl)
    terms["mu0_b"] = _normal_logpdf(state.mu0_b, 0.0, priors.sigma0_sq)
    terms["mu_b"] = _normal_logpdf(state.mu_b, 0.0, priors.psi_sq)
    terms["tau_b"] = _log_uniform(state.tau_b, priors.tau_b_bounds)
    terms["phi"] = _log_uniform(state.phi, priors.phi_bounds)
    return terms


def joint_log_posterior(state: MultiCoefficientState, records: Sequence[SedimentRecord],
                        design: MultiLakeDesign, priors: MultiPriorSpec) -> float:
    return float(sum(joint_log_posterior_terms(state, records, design, priors).values()))


# ---------------------------------------------------------------------------
# posterior draws


@dataclass(frozen=True, eq=False)
class MultiPosteriorDraws:
    beta0_b: np.ndarray      # (draws, k)
    beta_b: np.ndarray       # (draws, k, p*)
    beta0_f: np.ndarray      # (draws, k)
    beta_f: tuple            # k arrays (draws, p_f,j)
    mu0_b: np.ndarray
    mu_b: np.ndarray         # (draws, p*)
    tau_b: np.ndarray
    phi: np.ndarray
    log_post: np.ndarray
    chain: np.ndarray
    acceptance_rates: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def __len__(self):
        return self.beta0_b.shape[0]

    @property
    def k(self) -> int:
        return self.beta0_b.shape[1]

    @property
    def n_chains(self) -> int:
        return int(np.unique(self.chain).size)

    def chain_slices(self) -> list[np.ndarray]:
        return [np.flatnonzero(self.chain == c) for c in np.unique(self.chain)]

    def state(self, s: int) -> MultiCoefficientState:
        return MultiCoefficientState(self.beta0_b[s], self.beta_b[s], self.beta0_f[s],
                                     tuple(b[s] for b in self.beta_f), self.mu0_b[s],
                                     self.mu_b[s], self.tau_b[s], self.phi[s])

    def regional_log_intensity(self, design: MultiLakeDesign, j: int) -> np.ndarray:
        """(draws, n*) per-year log background intensity of lake j on the grid."""
        return self.beta0_b[:, j, None] + self.beta_b[:, j, :] @ design.regional.basis.T

    def log_intensities(self, design: MultiLakeDesign, j: int):
        """(log lam_b, log lam_f) on lake j's intervals, each (draws, n_j)."""
        eta = self.regional_log_intensity(design, j)
        # shift by the per-draw maximum; |eta| <= ETA_MAX keeps exp(eta - m) well above underflow
        # and avoids a (draws, n_j, n*) log-sum-exp array
        m = eta.max(axis=1, keepdims=True)
        log_b = m + np.log(np.exp(eta - m) @ design.aggregation[j].T)
        log_f = (self.beta0_f[:, j, None] + self.beta_f[j] @ design.foreground[j].basis.T
                 + np.log(design.lengths[j])[None, :])
        return log_b, log_f

    def effective_range(self) -> np.ndarray:
        return LOG20 / self.phi

    @staticmethod
    def concat(parts: Sequence["MultiPosteriorDraws"]) -> "MultiPosteriorDraws":
        parts = list(parts)
        acc = {key: float(np.mean([p.acceptance_rates[key] for p in parts]))
               for key in parts[0].acceptance_rates}
        meta = dict(parts[0].metadata)
        meta["chains"] = [p.metadata for p in parts]
        meta["warnings"] = sorted({w for p in parts for w in p.metadata.get("warnings", [])})
        cat = lambda name: np.concatenate([getattr(p, name) for p in parts])
        k = parts[0].k
        return MultiPosteriorDraws(
            cat("beta0_b"), cat("beta_b"), cat("beta0_f"),
            tuple(np.concatenate([p.beta_f[j] for p in parts]) for j in range(k)),
            cat("mu0_b"), cat("mu_b"), cat("tau_b"), cat("phi"), cat("log_post"), cat("chain"),
            acc, meta)


# ---------------------------------------------------------------------------
# initialization


def _lake_mode(y, A, Xs, Xf, lengths, Pb, Pf, theta_b, theta_f, max_iter: int = 100):
    """Fisher scoring for one lake's (background on the grid, foreground) coefficients."""
    Jb0 = np.column_stack([np.ones(Xs.shape[0]), Xs])
    Jf0 = np.column_stack([np.ones(Xf.shape[0]), Xf])
    nb = Jb0.shape[1]

    def parts(theta):
        eta_s = Jb0 @ theta[:nb]
        eta_f = Jf0 @ theta[nb:]
        if max(np.abs(eta_s).max(), np.abs(eta_f).max()) > ETA_MAX:
            return None
        cell = np.exp(eta_s)
        lam_b = A @ cell
        lam_f = lengths * np.exp(eta_f)
        return cell, lam_b, lam_f

    def objective(theta):
        pr = parts(theta)
        if pr is None:
            return -np.inf
        mu = pr[1] + pr[2]
        tb, tf = theta[:nb], theta[nb:]
        return float(np.sum(y * np.log(mu) - mu)) - 0.5 * tb @ Pb @ tb - 0.5 * tf @ Pf @ tf

    theta = np.concatenate([theta_b, theta_f])
    P = np.zeros((theta.size, theta.size))
    P[:nb, :nb] = Pb
    P[nb:, nb:] = Pf
    obj = objective(theta)
    Hs = None
    for _ in range(max_iter):
        cell, lam_b, lam_f = parts(theta)
        mu = lam_b + lam_f
        J = np.column_stack([A @ (cell[:, None] * Jb0), lam_f[:, None] * Jf0])
        g = J.T @ (y / mu - 1.0) - P @ theta
        Hs = J.T @ (J / mu[:, None]) + P
        Hs = 0.5 * (Hs + Hs.T)
        step = np.linalg.solve(Hs + 1e-10 * np.diag(np.diag(Hs)), g)
        t = 1.0
        for _ in range(40):
            cand = theta + t * step
            val = objective(cand)
            if val > obj - 1e-12:
                break
            t *= 0.5
        else:
            break
        gain = val - obj
        theta, obj = cand, val
        if gain < 1e-9 and np.max(np.abs(t * step)) < 1e-7:
            break
    return theta[:nb], theta[nb:], Hs


def _initial_lake(rec: SedimentRecord, design: MultiLakeDesign, j: int, priors: MultiPriorSpec):
    y = np.asarray(rec.counts, dtype=float)
    Xs = design.regional.basis
    Xf = design.foreground[j].basis
    # smooth log rates on the lake's own intervals, then carried onto the grid
    w = design.lengths[j]
    rate = (y + 0.5) / w
    smooth = _running_median(rate, 5)
    log_bg = np.interp(design.support.midpoints, rec.midpoints, np.log(np.maximum(smooth, 1e-6)))
    fg = np.log(np.maximum(rate - smooth, 0.1 * smooth))
    Pb = _prior_precision(design.regional.penalty, priors.sigma_b_sq[j], priors.sigma0_sq)
    Pf = _prior_precision(design.foreground[j].penalty, priors.sigma_f_sq[j], priors.sigma0_sq)
    th_b = _lstsq_theta(Xs, log_bg, np.eye(Xs.shape[1] + 1))
    th_f = _lstsq_theta(Xf, fg, np.eye(Xf.shape[1] + 1))
    return _lake_mode(y, design.aggregation[j], Xs, Xf, w, Pb, Pf, th_b, th_f)


# ---------------------------------------------------------------------------
# sampler


class _Coupling:
    """Spatial prior bookkeeping: G^-1 and the rows D S with D = beta - mu_b."""

    def __init__(self, H, sigma_b_sq, S):
        self.S = S
        self.sigma_b_sq = np.asarray(sigma_b_sq, dtype=float)
        self.set_H(H)

    def set_H(self, H):
        self.H = H
        self.Ginv, self.logdet_G = _g_inverse(H, self.sigma_b_sq)

    def cross_term(self, j, DS):
        """sum_{j' != j} G^-1_{j j'} (D S)_j'  (a p*-vector)."""
        c = self.Ginv[j].copy()
        c[j] = 0.0
        return c @ DS


class RegionalBackgroundSampler:
    """Random-walk updates for one lake's background coefficients on the grid."""

    def __init__(self, Xs, A, y, theta, chol, sigma0_sq):
        self.Xs = np.ascontiguousarray(Xs)
        self.A = np.ascontiguousarray(A)
        self.y = y
        self.p = Xs.shape[1]
        self.theta = np.array(theta, dtype=float)
        self.chol = chol
        self.sigma0_sq = sigma0_sq
        self.joint = _Adapter(2.38 / math.sqrt(self.p + 1), 0.25)
        self.ridge = _Adapter(0.5, 0.40)
        self._set_derived()

    def _set_derived(self):
        self.eta = self.theta[0] + self.Xs @ self.theta[1:]
        self.lam = self.A @ np.exp(np.clip(self.eta, -ETA_MAX, ETA_MAX))

    def prior(self, theta, mu0, tau_sq, mu_b, cjj, cross, S):
        d = theta[1:] - mu_b
        return (-0.5 * (theta[0] - mu0) ** 2 / tau_sq
                - 0.5 * (cjj * float(d @ S @ d) + 2.0 * float(d @ cross))
                - 0.5 * float(theta[1:].mean()) ** 2 / self.sigma0_sq)

    def _loglik(self, lam, other):
        mu = lam + other
        return float(np.sum(self.y * np.log(mu) - mu))

    def step(self, other, rng, prior_args):
        z = rng.standard_normal(self.p + 1)
        prop = self.theta + self.joint.scale * (self.chol @ z)
        eta = prop[0] + self.Xs @ prop[1:]
        u = rng.random()
        acc = False
        if np.max(np.abs(eta)) <= ETA_MAX:
            lam = self.A @ np.exp(eta)
            log_r = (self._loglik(lam, other) + self.prior(prop, *prior_args)
                     - self._loglik(self.lam, other) - self.prior(self.theta, *prior_args))
            if math.log(u) < log_r:
                self.theta, self.eta, self.lam = prop, eta, lam
                acc = True
        self.joint.record(acc)
        # (beta0 - c, beta + c): likelihood and S-terms unchanged since S 1 = 0
        c = self.ridge.scale * rng.standard_normal()
        u = rng.random()
        mu0, tau_sq = prior_args[0], prior_args[1]
        b0, m = self.theta[0], self.theta[1:].mean()
        log_r = (-0.5 * (((b0 - c - mu0) ** 2 - (b0 - mu0) ** 2) / tau_sq)
                 - 0.5 * ((m + c) ** 2 - m**2) / self.sigma0_sq)
        acc = math.log(u) < log_r
        if acc:
            self.theta[0] -= c
            self.theta[1:] += c
        self.ridge.record(acc)

    def adapters(self):
        return {"joint": self.joint, "ridge": self.ridge}


class _ScalarRW:
    def __init__(self, value, scale, bounds):
        self.value = float(value)
        self.bounds = bounds
        self.adapter = _Adapter(scale, 0.40)

    def step(self, logpdf, rng):
        prop = self.value + self.adapter.scale * rng.standard_normal()
        u = rng.random()
        acc = False
        if self.bounds[0] <= prop <= self.bounds[1]:
            if math.log(u) < logpdf(prop) - logpdf(self.value):
                self.value = prop
                acc = True
        self.adapter.record(acc)
        return acc


def _initial_state(records, design: MultiLakeDesign, priors: MultiPriorSpec):
    k = design.k
    lakes = [_initial_lake(rec, design, j, priors) for j, rec in enumerate(records)]
    th_b = np.array([l[0] for l in lakes])
    mu0 = float(th_b[:, 0].mean())
    mu_b = th_b[:, 1:].mean(axis=0)
    sd = float(th_b[:, 0].std()) if k > 1 else 1.0
    tau = float(np.clip(sd if sd > 0 else 1.0, *priors.tau_b_bounds))
    off = design.distances[~np.eye(k, dtype=bool)]
    phi0 = phi_for_range(float(np.median(off))) if off.size else 1.0
    phi0 = float(np.clip(phi0, *priors.phi_bounds))
    return lakes, mu0, mu_b, tau, phi0


def run_multichain(records: Sequence[SedimentRecord], design: MultiLakeDesign,
                   priors: MultiPriorSpec, controls: MCMCControls, seed=None,
                   chain_index: int = 0, init=None) -> MultiPosteriorDraws:
    """One Metropolis-within-Gibbs chain for the multi-lake posterior.

    Cycle: for each lake the background block (with an intercept/level
    exchange move) then the foreground blocks; the regional means (mu0_b,
    mu_b) by exact Gibbs draws; tau_b and phi by bounded scalar random walks.
    """
    records = list(records)
    k = design.k
    if k < 2:
        raise ValueError("the multi-lake model needs at least two lakes")
    if any(len(r) == 0 for r in records):
        raise ValueError("nothing to fit: empty record")
    check_conditioning(design.distances, priors.phi_bounds)
    seed = controls.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    S = design.regional.penalty
    p = design.p_star
    lakes, mu0, mu_b, tau, phi = _initial_state(records, design, priors) if init is None else init
    ys = [np.asarray(r.counts, dtype=float) for r in records]
    bgs, fgs = [], []
    nb = p + 1
    for j, (tb, tf, Hs) in enumerate(lakes):
        Lb = _chol_cov(Hs[:nb, :nb])
        Lf = _chol_cov(Hs[nb:, nb:])
        tb = tb + Lb @ rng.standard_normal(nb)
        tf = tf + Lf @ rng.standard_normal(tf.size)
        bgs.append(RegionalBackgroundSampler(design.regional.basis, design.aggregation[j], ys[j],
                                             tb, Lb, priors.sigma0_sq))
        fgs.append(ProcessSampler(design.foreground[j].basis, design.foreground[j].penalty,
                                  design.lengths[j], ys[j], np.ones_like(ys[j]), tf,
                                  priors.sigma_f_sq[j], priors.sigma0_sq, Lf,
                                  sites=controls.blocks == "site"))
    coup = _Coupling(np.exp(-phi * design.distances), priors.sigma_b_sq, S)
    tau_rw = _ScalarRW(tau, 0.2 * tau, priors.tau_b_bounds)
    phi_rw = _ScalarRW(phi, 0.2 * phi, priors.phi_bounds)
    ones = np.ones(k)

    def beta_matrix():
        return np.array([b.theta[1:] for b in bgs])

    n_keep = controls.n_keep
    out = {"beta0_b": np.empty((n_keep, k)), "beta_b": np.empty((n_keep, k, p)),
           "beta0_f": np.empty((n_keep, k)), "mu0_b": np.empty(n_keep),
           "mu_b": np.empty((n_keep, p)), "tau_b": np.empty(n_keep), "phi": np.empty(n_keep),
           "log_post": np.empty(n_keep)}
    out_bf = [np.empty((n_keep, f.p)) for f in fgs]
    keep = 0
    history = [[] for _ in range(k)]
    laplace = [b.chol @ b.chol.T for b in bgs]
    for it in range(controls.iterations):
        burn = it < controls.burn_in
        if burn and controls.burn_in // 4 <= it < controls.burn_in // 2:
            for j in range(k):
                history[j].append(bgs[j].theta.copy())
        if controls.burn_in >= 400 and it == controls.burn_in // 2:
            # reshape background proposals from the burn-in history
            for j in range(k):
                if len(history[j]) > 4 * nb:
                    emp = np.cov(np.asarray(history[j]).T)
                    try:
                        bgs[j].chol = np.linalg.cholesky(0.7 * emp + 0.3 * laplace[j])
                    except np.linalg.LinAlgError:
                        pass
            history = None
        B = beta_matrix()
        DS = (B - mu_b) @ S
        for j in range(k):
            cross = coup.cross_term(j, DS)
            bgs[j].step(fgs[j].lam, rng, (mu0, tau_rw.value**2, mu_b, coup.Ginv[j, j], cross, S))
            DS[j] = (bgs[j].theta[1:] - mu_b) @ S
            fgs[j].step(bgs[j].lam, rng, burn)
        B = beta_matrix()
        b0 = np.array([b.theta[0] for b in bgs])
        # mu0_b | beta0, tau_b
        prec0 = k / tau_rw.value**2 + 1.0 / priors.sigma0_sq
        mu0 = (b0.sum() / tau_rw.value**2) / prec0 + rng.standard_normal() / math.sqrt(prec0)
        # mu_b | beta, phi:  precision s S + I / psi^2, linear term S B' G^-1 1
        Ginv1 = coup.Ginv @ ones
        s = float(ones @ Ginv1)
        Q = s * S + np.eye(p) / priors.psi_sq
        cf = cho_factor(Q)
        mean = cho_solve(cf, S @ (B.T @ Ginv1))
        Lq = np.linalg.cholesky(Q)
        mu_b = mean + solve_triangular(Lq.T, rng.standard_normal(p), lower=False)
        # tau_b | beta0, mu0
        ss = float(np.sum((b0 - mu0) ** 2))
        tau_rw.step(lambda t: -k * math.log(t) - 0.5 * ss / t**2, rng)
        # phi | beta, mu_b
        M = (B - mu_b) @ S @ (B - mu_b).T

        def phi_logpdf(ph):
            Ginv, logdet = _g_inverse(np.exp(-ph * design.distances), priors.sigma_b_sq)
            return -0.5 * (p - 2) * logdet - 0.5 * float(np.sum(Ginv * M))

        if phi_rw.step(phi_logpdf, rng):
            coup.set_H(np.exp(-phi_rw.value * design.distances))
        if burn and (it + 1) % controls.adapt_every == 0:
            for a in _all_adapters(bgs, fgs, tau_rw, phi_rw):
                a.adapt()
        if it + 1 == controls.burn_in:
            for a in _all_adapters(bgs, fgs, tau_rw, phi_rw):
                a.reset_counts()
            for f in fgs:
                f.resync()
            for b in bgs:
                b._set_derived()
        if not burn:
            for a in _all_adapters(bgs, fgs, tau_rw, phi_rw):
                a.freeze_counts()
            jj = it - controls.burn_in
            if (jj + 1) % controls.thin == 0 and keep < n_keep:
                out["beta0_b"][keep] = b0
                out["beta_b"][keep] = B
                out["beta0_f"][keep] = [f.theta[0] for f in fgs]
                for j, f in enumerate(fgs):
                    out_bf[j][keep] = f.theta[1:]
                out["mu0_b"][keep] = mu0
                out["mu_b"][keep] = mu_b
                out["tau_b"][keep] = tau_rw.value
                out["phi"][keep] = phi_rw.value
                ll = sum(float(np.sum(ys[j] * np.log(bgs[j].lam + fgs[j].lam)
                                      - bgs[j].lam - fgs[j].lam)) for j in range(k))
                out["log_post"][keep] = ll
                keep += 1
    acceptance = {}
    for j in range(k):
        for name, a in bgs[j].adapters().items():
            acceptance[f"{design.lake_ids[j]}_background_{name}"] = a.rate()
        for name, a in fgs[j].adapters().items():
            acceptance[f"{design.lake_ids[j]}_foreground_{name}"] = a.rate()
    acceptance["tau_b"] = tau_rw.adapter.rate()
    acceptance["phi"] = phi_rw.adapter.rate()
    warnings = [f"chain {chain_index}: acceptance rate for {key} = {v:.3f} outside [0.05, 0.7]"
                for key, v in acceptance.items() if np.isfinite(v) and not 0.05 <= v <= 0.7]
    for w in warnings:
        logger.warning(w)
    meta = {"seed": int(seed), "chain": chain_index, "iterations": controls.iterations,
            "burn_in": controls.burn_in, "thin": controls.thin, "warnings": warnings,
            "psi_sq": priors.psi_sq}
    return MultiPosteriorDraws(out["beta0_b"], out["beta_b"], out["beta0_f"], tuple(out_bf),
                               out["mu0_b"], out["mu_b"], out["tau_b"], out["phi"],
                               out["log_post"], np.full(n_keep, chain_index), acceptance, meta)


def _all_adapters(bgs, fgs, tau_rw, phi_rw):
    for b in bgs:
        yield from b.adapters().values()
    for f in fgs:
        yield from f.adapters().values()
    yield tau_rw.adapter
    yield phi_rw.adapter


def _run_single(args):
    records, design, priors, controls, seed, c = args
    return run_multichain(records, design, priors, controls, seed=seed, chain_index=c)


def run_multichains(records, design: MultiLakeDesign, priors: MultiPriorSpec,
                    controls: MCMCControls, key=()) -> MultiPosteriorDraws:
    seeds = chain_seeds(controls.seed, controls.chains, *key)
    args = [(list(records), design, priors, controls, s, c) for c, s in enumerate(seeds)]
    if controls.workers > 1 and controls.chains > 1:
        with ProcessPoolExecutor(max_workers=controls.workers) as ex:
            parts = list(ex.map(_run_single, args))
    else:
        parts = [_run_single(a) for a in args]
    draws = MultiPosteriorDraws.concat(parts)
    draws.metadata.update({"seed": controls.seed, "n_chains": controls.chains})
    return draws


def psi_sq_from_univariate(beta_b_draws: Sequence[np.ndarray], factor: float = 10.0) -> float:
    """factor x the empirical variance of pooled single-lake background coefficient draws."""
    pooled = np.concatenate([np.ravel(b) for b in beta_b_draws])
    v = float(np.var(pooled))
    return factor * v if v > 0 else 1.0


def export_regional_background(draws: MultiPosteriorDraws, design: MultiLakeDesign,
                               level: float = 0.95) -> list[dict]:
    """Posterior summaries of each lake's per-year background intensity on every grid cell."""
    if len(draws) == 0:
        raise ValueError("no posterior draws")
    q = (1.0 - level) / 2.0
    rows = []
    tops, bottoms = design.support.tops, design.support.bottoms
    for j, lake in enumerate(design.lake_ids):
        lam = np.exp(draws.regional_log_intensity(design, j))
        mean = lam.mean(axis=0)
        lo, hi = np.quantile(lam, [q, 1.0 - q], axis=0)
        for l in range(design.n_star):
            rows.append({"cell_start": float(tops[l]), "cell_end": float(bottoms[l]),
                         "lake_id": lake, "intensity_mean": float(mean[l]),
                         "intensity_lo95": float(lo[l]), "intensity_hi95": float(hi[l]),
                         "n_records_covering": int(design.coverage[l])})
    return rows
