"""Single-lake Poisson point process model and its Metropolis-within-Gibbs sampler.

Counts are Poisson with mean ``mu_i = lam_b(tau_i) + lam_f(tau_i)`` where each
integrated intensity is ``exp(beta0 + x_i @ beta) * |tau_i|``.  Background and
foreground coefficients carry the improper smoothing prior
``exp(-beta @ S @ beta / (2 sigma^2))``; intercepts are N(0, sigma0^2).

The cardinal spline basis reproduces constants, so ``beta + c`` duplicates the
intercept and the smoothing prior is flat along it.  A N(0, sigma0^2) prior on
the coefficient mean closes that direction (otherwise a process could drift to
zero intensity under a flat prior and the posterior would be improper).
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.special import gammaln

from . import _kernels
from .records import SedimentRecord
from .splines import SplineDesign, build_design

logger = logging.getLogger(__name__)

ETA_MAX = _kernels.ETA_MAX
PROCESSES = ("background", "foreground")
POISSON_MAX_MEAN = 1e15


class IntensityOverflow(FloatingPointError):
    """Linear predictor beyond the overflow guard."""

    def __init__(self, eta):
        self.eta = float(eta)
        super().__init__(f"linear predictor {self.eta:.4g} exceeds |eta| <= {ETA_MAX}")


@dataclass(frozen=True)
class UnivariatePriorSpec:
    sigma0_sq: float = 100.0
    sigma_b_sq: float = 0.1
    sigma_f_sq: float = 100.0

    def __post_init__(self):
        if min(self.sigma0_sq, self.sigma_b_sq, self.sigma_f_sq) <= 0:
            raise ValueError("prior variances must be positive")
        if not self.sigma_b_sq < self.sigma_f_sq:
            raise ValueError(
                f"background penalty variance ({self.sigma_b_sq}) must be smaller than the "
                f"foreground one ({self.sigma_f_sq})"
            )


@dataclass(frozen=True, eq=False)
class CoefficientState:
    beta0_b: float
    beta_b: np.ndarray
    beta0_f: float
    beta_f: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "beta0_b", float(self.beta0_b))
        object.__setattr__(self, "beta0_f", float(self.beta0_f))
        object.__setattr__(self, "beta_b", np.asarray(self.beta_b, dtype=float))
        object.__setattr__(self, "beta_f", np.asarray(self.beta_f, dtype=float))
        vals = np.concatenate([[self.beta0_b, self.beta0_f], self.beta_b, self.beta_f])
        if not np.all(np.isfinite(vals)):
            raise ValueError("coefficients must be finite")

    @classmethod
    def zeros(cls, p_b: int, p_f: int):
        return cls(0.0, np.zeros(p_b), 0.0, np.zeros(p_f))


@dataclass(frozen=True, eq=False)
class LakeDesign:
    """Spline designs for one lake.  Both are evaluated at interval midpoints."""

    background: SplineDesign
    foreground: SplineDesign
    lengths: np.ndarray

    @property
    def n(self) -> int:
        return self.lengths.size


def lake_design(record: SedimentRecord, background_knots: int | None = None,
                foreground_knots: int | str | None = "interval", placement: str = "quantile",
                years_per_knot: float = 500.0, min_knots: int = 6, max_knots: int = 40) -> LakeDesign:
    if len(record) == 0:
        raise ValueError(f"{record.lake_id}: nothing to fit (empty record)")
    mid = record.midpoints
    bg = build_design(mid, background_knots, placement, years_per_knot, min_knots, max_knots)
    fg = build_design(mid, foreground_knots, placement, years_per_knot, min_knots, max_knots)
    return LakeDesign(bg, fg, np.asarray(record.lengths, dtype=float))


# ---------------------------------------------------------------------------
# model evaluation


def linear_predictor(state: CoefficientState, design: LakeDesign, process: str) -> np.ndarray:
    if process == "background":
        return state.beta0_b + design.background.basis @ state.beta_b
    if process == "foreground":
        return state.beta0_f + design.foreground.basis @ state.beta_f
    raise ValueError(f"process must be one of {PROCESSES}, got {process!r}")


def _check_eta(eta):
    eta = np.asarray(eta)
    if eta.size and np.max(np.abs(eta)) > ETA_MAX:
        raise IntensityOverflow(eta.flat[np.argmax(np.abs(eta))])


def intensities(state: CoefficientState, design: LakeDesign, process: str) -> np.ndarray:
    """Integrated intensities ``exp(eta_i) * |tau_i|`` for every interval."""
    eta = linear_predictor(state, design, process)
    _check_eta(eta)
    return np.exp(eta) * design.lengths


def integrated_intensity(state: CoefficientState, design: LakeDesign, interval: int,
                         process: str) -> float:
    """``exp(beta0 + x(tau)' beta) * |tau|`` for interval index ``interval``."""
    if process == "background":
        eta = state.beta0_b + design.background.basis[interval] @ state.beta_b
    elif process == "foreground":
        eta = state.beta0_f + design.foreground.basis[interval] @ state.beta_f
    else:
        raise ValueError(f"process must be one of {PROCESSES}, got {process!r}")
    _check_eta(eta)
    return float(math.exp(eta) * design.lengths[interval])


def expected_counts(state: CoefficientState, design: LakeDesign) -> np.ndarray:
    return intensities(state, design, "background") + intensities(state, design, "foreground")


def poisson_loglik(y, mu, weights=None) -> float:
    y = np.asarray(y, dtype=float)
    mu = np.asarray(mu, dtype=float)
    if not np.all(np.isfinite(mu)) or np.any(mu <= 0):
        raise FloatingPointError("Poisson means must be finite and positive")
    terms = y * np.log(mu) - mu - gammaln(y + 1.0)
    if weights is not None:
        terms = terms * weights
    return float(terms.sum())


def log_likelihood(state: CoefficientState, record: SedimentRecord, design: LakeDesign,
                   weights=None) -> float:
    """Sum over intervals of ``y log mu - mu - log y!`` (optionally weighted)."""
    return poisson_loglik(record.counts, expected_counts(state, design), weights)


def coefficient_prior(beta0: float, beta: np.ndarray, S: np.ndarray, sigma_sq: float,
                      sigma0_sq: float) -> dict:
    beta = np.asarray(beta, dtype=float)
    return {
        "intercept": -0.5 * beta0 * beta0 / sigma0_sq,
        "penalty": -0.5 * float(beta @ S @ beta) / sigma_sq,
        "level": -0.5 * float(beta.mean()) ** 2 / sigma0_sq,
    }


def log_posterior_terms(state: CoefficientState, record: SedimentRecord, design: LakeDesign,
                        priors: UnivariatePriorSpec, weights=None) -> dict:
    pb = coefficient_prior(state.beta0_b, state.beta_b, design.background.penalty,
                           priors.sigma_b_sq, priors.sigma0_sq)
    pf = coefficient_prior(state.beta0_f, state.beta_f, design.foreground.penalty,
                           priors.sigma_f_sq, priors.sigma0_sq)
    terms = {"loglik": log_likelihood(state, record, design, weights)}
    terms.update({f"{k}_b": v for k, v in pb.items()})
    terms.update({f"{k}_f": v for k, v in pf.items()})
    return terms


def log_posterior(state: CoefficientState, record: SedimentRecord, design: LakeDesign,
                  priors: UnivariatePriorSpec, weights=None) -> float:
    """Unnormalized log posterior density (Gaussian constants dropped)."""
    return float(sum(log_posterior_terms(state, record, design, priors, weights).values()))


# ---------------------------------------------------------------------------
# posterior draws


@dataclass(frozen=True)
class MCMCControls:
    iterations: int = 30_000
    burn_in: int = 10_000
    thin: int = 10
    chains: int = 4
    seed: int = 0
    blocks: str = "site"  # "site": joint blocks plus single-site foreground sweeps; "joint": joint only
    adapt_every: int = 50
    workers: int = 1

    def __post_init__(self):
        if not self.iterations > self.burn_in >= 0:
            raise ValueError("need iterations > burn_in >= 0")
        if self.thin < 1:
            raise ValueError("thin must be >= 1")
        if self.chains < 1:
            raise ValueError("chains must be >= 1")
        if self.blocks not in ("site", "joint"):
            raise ValueError("blocks must be 'site' or 'joint'")

    @property
    def n_keep(self) -> int:
        return (self.iterations - self.burn_in) // self.thin

    def scaled(self, fraction: float) -> "MCMCControls":
        it = max(int(round(self.iterations * fraction)), 20)
        bi = min(int(round(self.burn_in * fraction)), it - 1)
        return replace(self, iterations=it, burn_in=bi)


@dataclass(frozen=True, eq=False)
class PosteriorDraws:
    """Retained (post burn-in, thinned) states of one or more chains, stacked."""

    beta0_b: np.ndarray
    beta_b: np.ndarray
    beta0_f: np.ndarray
    beta_f: np.ndarray
    log_post: np.ndarray
    chain: np.ndarray
    acceptance_rates: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def __len__(self):
        return self.beta0_b.shape[0]

    @property
    def n_chains(self) -> int:
        return int(np.unique(self.chain).size)

    def state(self, s: int) -> CoefficientState:
        return CoefficientState(self.beta0_b[s], self.beta_b[s], self.beta0_f[s], self.beta_f[s])

    @property
    def states(self) -> list[CoefficientState]:
        return [self.state(s) for s in range(len(self))]

    def chain_slices(self) -> list[np.ndarray]:
        return [np.flatnonzero(self.chain == c) for c in np.unique(self.chain)]

    def eta(self, design: LakeDesign):
        """Per-draw linear predictors, arrays of shape (draws, n)."""
        eta_b = self.beta0_b[:, None] + self.beta_b @ design.background.basis.T
        eta_f = self.beta0_f[:, None] + self.beta_f @ design.foreground.basis.T
        return eta_b, eta_f

    def intensities(self, design: LakeDesign):
        eta_b, eta_f = self.eta(design)
        return np.exp(eta_b) * design.lengths, np.exp(eta_f) * design.lengths

    def column_names(self) -> list[str]:
        pb, pf = self.beta_b.shape[1], self.beta_f.shape[1]
        return (["chain", "beta0_b"] + [f"beta_b_{k}" for k in range(pb)]
                + ["beta0_f"] + [f"beta_f_{k}" for k in range(pf)] + ["log_post"])

    def as_matrix(self) -> np.ndarray:
        return np.column_stack([self.chain, self.beta0_b, self.beta_b, self.beta0_f,
                                self.beta_f, self.log_post])

    @classmethod
    def from_matrix(cls, M: np.ndarray, p_b: int, p_f: int, **kwargs):
        M = np.asarray(M, dtype=float)
        c = 0
        chain = M[:, c].astype(int); c += 1
        b0b = M[:, c]; c += 1
        bb = M[:, c:c + p_b]; c += p_b
        b0f = M[:, c]; c += 1
        bf = M[:, c:c + p_f]; c += p_f
        lp = M[:, c]
        return cls(b0b, bb, b0f, bf, lp, chain, **kwargs)

    @staticmethod
    def concat(parts: Sequence["PosteriorDraws"]) -> "PosteriorDraws":
        parts = list(parts)
        acc = {}
        for k in parts[0].acceptance_rates:
            acc[k] = float(np.mean([p.acceptance_rates[k] for p in parts]))
        meta = dict(parts[0].metadata)
        meta["chains"] = [p.metadata for p in parts]
        meta["warnings"] = sorted({w for p in parts for w in p.metadata.get("warnings", [])})
        return PosteriorDraws(
            np.concatenate([p.beta0_b for p in parts]),
            np.concatenate([p.beta_b for p in parts]),
            np.concatenate([p.beta0_f for p in parts]),
            np.concatenate([p.beta_f for p in parts]),
            np.concatenate([p.log_post for p in parts]),
            np.concatenate([p.chain for p in parts]),
            acc, meta,
        )


def posterior_predictive_draw(draws: PosteriorDraws, design: LakeDesign, intervals=None,
                              rng: np.random.Generator | None = None) -> np.ndarray:
    """One Poisson count vector per retained state (composition sampling)."""
    if len(draws) == 0:
        raise ValueError("no posterior draws")
    rng = np.random.default_rng() if rng is None else rng
    lam_b, lam_f = draws.intensities(design)
    mu = lam_b + lam_f
    if intervals is not None:
        mu = mu[:, np.asarray(intervals)]
    if mu.size and mu.max() > POISSON_MAX_MEAN:
        raise FloatingPointError(
            f"predictive mean {mu.max():.3g} is too large to sample (limit {POISSON_MAX_MEAN:g})")
    return rng.poisson(mu)


# ---------------------------------------------------------------------------
# posterior mode (Fisher scoring) for initialization and proposal scaling


def _prior_precision(S: np.ndarray, sigma_sq: float, sigma0_sq: float) -> np.ndarray:
    """Precision of (beta0, beta) under the intercept, smoothing and level priors."""
    p = S.shape[0]
    P = np.zeros((p + 1, p + 1))
    P[0, 0] = 1.0 / sigma0_sq
    P[1:, 1:] = S / sigma_sq + np.full((p, p), 1.0 / (p * p * sigma0_sq))
    return P


def _running_median(x, half):
    n = x.size
    out = np.empty(n)
    for i in range(n):
        out[i] = np.median(x[max(0, i - half):i + half + 1])
    return out


def _lstsq_theta(X, target, P):
    J = np.column_stack([np.ones(X.shape[0]), X])
    A = J.T @ J + 1e-6 * P + 1e-9 * np.eye(J.shape[1])
    return np.linalg.solve(A, J.T @ target)


def _initial_theta(y, design: LakeDesign, weights):
    w = design.lengths
    obs = weights > 0
    rate = (y + 0.5) / w
    smooth = np.empty_like(rate)
    smooth[obs] = _running_median(rate[obs], 5)
    if not np.all(obs):
        smooth[~obs] = np.interp(np.flatnonzero(~obs), np.flatnonzero(obs), smooth[obs])
        rate = np.where(obs, rate, smooth)  # held-out counts must not leak in
    bg = np.log(np.maximum(smooth, 1e-6))
    fg = np.log(np.maximum(rate - smooth, 0.1 * smooth))
    Xb, Xf = design.background.basis, design.foreground.basis
    th_b = _lstsq_theta(Xb, bg, np.eye(Xb.shape[1] + 1))
    th_f = _lstsq_theta(Xf, fg, np.eye(Xf.shape[1] + 1))
    return th_b, th_f


def _split(theta, p_b):
    return theta[:p_b + 1], theta[p_b + 1:]


def _objective(theta, y, design, Pb, Pf, weights):
    p_b = design.background.p
    th_b, th_f = _split(theta, p_b)
    eta_b = th_b[0] + design.background.basis @ th_b[1:]
    eta_f = th_f[0] + design.foreground.basis @ th_f[1:]
    if max(np.abs(eta_b).max(), np.abs(eta_f).max()) > ETA_MAX:
        return -np.inf
    mu = design.lengths * (np.exp(eta_b) + np.exp(eta_f))
    ll = float(np.sum(weights * (y * np.log(mu) - mu)))
    return ll - 0.5 * th_b @ Pb @ th_b - 0.5 * th_f @ Pf @ th_f


def posterior_mode(record: SedimentRecord, design: LakeDesign, priors: UnivariatePriorSpec,
                   weights=None, theta0=None, max_iter: int = 200):
    """Fisher-scoring search for the posterior mode.

    Returns ``(theta, precision)`` where theta stacks ``(beta0_b, beta_b,
    beta0_f, beta_f)`` and precision is the expected-information Hessian
    (plus prior precision) at the mode.
    """
    y = np.asarray(record.counts, dtype=float)
    weights = np.ones_like(y) if weights is None else np.asarray(weights, dtype=float)
    p_b = design.background.p
    Pb = _prior_precision(design.background.penalty, priors.sigma_b_sq, priors.sigma0_sq)
    Pf = _prior_precision(design.foreground.penalty, priors.sigma_f_sq, priors.sigma0_sq)
    Jb = np.column_stack([np.ones(design.n), design.background.basis])
    Jf = np.column_stack([np.ones(design.n), design.foreground.basis])
    if theta0 is None:
        theta = np.concatenate(_initial_theta(y, design, weights))
    else:
        theta = np.asarray(theta0, dtype=float).copy()
    obj = _objective(theta, y, design, Pb, Pf, weights)
    H = None
    for _ in range(max_iter):
        th_b, th_f = _split(theta, p_b)
        lam_b = design.lengths * np.exp(Jb @ th_b)
        lam_f = design.lengths * np.exp(Jf @ th_f)
        mu = lam_b + lam_f
        r = weights * (y / mu - 1.0)
        g = np.concatenate([Jb.T @ (r * lam_b) - Pb @ th_b, Jf.T @ (r * lam_f) - Pf @ th_f])
        wbb = weights * lam_b**2 / mu
        wbf = weights * lam_b * lam_f / mu
        wff = weights * lam_f**2 / mu
        H = np.block([[Jb.T @ (wbb[:, None] * Jb) + Pb, Jb.T @ (wbf[:, None] * Jf)],
                      [Jf.T @ (wbf[:, None] * Jb), Jf.T @ (wff[:, None] * Jf) + Pf]])
        H = 0.5 * (H + H.T)
        try:
            step = np.linalg.solve(H + 1e-10 * np.diag(np.diag(H)), g)
        except np.linalg.LinAlgError:
            step = g / np.maximum(np.diag(H), 1e-8)
        t = 1.0
        improved = False
        for _ in range(40):
            cand = theta + t * step
            val = _objective(cand, y, design, Pb, Pf, weights)
            if val > obj - 1e-12:
                improved = True
                break
            t *= 0.5
        if not improved:
            break
        gain = val - obj
        theta, obj = cand, val
        if gain < 1e-9 and np.max(np.abs(t * step)) < 1e-7:
            break
    return theta, H


# ---------------------------------------------------------------------------
# sampler


def _chol_cov(precision: np.ndarray, max_var: float = 100.0) -> np.ndarray:
    """Factor F with F @ F.T = inv(precision), eigenvalues floored at 1 / max_var.

    A nearly singular precision (flat directions at a poorly converged mode)
    would otherwise give huge proposal and initialization steps.
    """
    P = 0.5 * (precision + precision.T)
    w, V = np.linalg.eigh(P)
    w = np.maximum(w, 1.0 / max_var)
    return V / np.sqrt(w)[None, :]


class _Adapter:
    """Robbins-Monro style log-scale adaptation toward a target acceptance rate."""

    def __init__(self, scale, target, size=None):
        self.log_scale = np.log(np.asarray(scale, dtype=float)) if size is None \
            else np.full(size, np.log(scale))
        self.target = target
        self.acc = np.zeros_like(self.log_scale)
        self.tries = 0
        self.total_acc = np.zeros_like(self.log_scale)
        self.total_tries = 0
        self.windows = 0

    @property
    def scale(self):
        return np.exp(self.log_scale)

    def record(self, accepted):
        self.acc = self.acc + accepted
        self.tries += 1

    def adapt(self):
        if self.tries == 0:
            return
        self.windows += 1
        rate = self.acc / self.tries
        gain = min(1.0, 5.0 / math.sqrt(self.windows))
        self.log_scale = np.clip(self.log_scale + gain * (rate - self.target), -25.0, 5.0)
        self.acc = np.zeros_like(self.log_scale)
        self.tries = 0

    def reset_counts(self):
        self.acc = np.zeros_like(self.log_scale)
        self.tries = 0

    def freeze_counts(self):
        self.total_acc = self.total_acc + self.acc
        self.total_tries += self.tries
        self.reset_counts()

    def rate(self):
        if self.total_tries == 0:
            return float("nan")
        return float(np.mean(self.total_acc / self.total_tries))


class ProcessSampler:
    """Random-walk updates for one log-linear spline intensity process.

    Holds ``theta = (beta0, beta)`` plus the derived linear predictor and
    integrated intensity.  ``other`` gives the integrated intensity of the
    competing process at update time.
    """

    def __init__(self, X, S, lengths, y, weights, theta, sigma_sq, sigma0_sq, chol,
                 sites: bool):
        self.X = np.ascontiguousarray(X, dtype=float)
        self.S = np.ascontiguousarray(S, dtype=float)
        self.w = lengths
        self.y = y
        self.wt = weights
        self.p = self.X.shape[1]
        self.identity = self.X.shape[0] == self.p and np.array_equal(self.X, np.eye(self.p))
        self.sigma_sq = float(sigma_sq)
        self.sigma0_sq = float(sigma0_sq)
        self.chol = chol
        self.theta = np.array(theta, dtype=float)
        self.sites = sites
        self._set_derived()
        self.joint = _Adapter(2.38 / math.sqrt(self.p + 1), 0.25)
        self.intercept = _Adapter(0.5, 0.40)
        self.ridge = _Adapter(1.0, 0.40)
        if sites:
            self.csc = _kernels.csc_columns(self.X)
            self.site = _Adapter(0.5, 0.40, size=self.p)

    def _xbeta(self, beta):
        return beta if self.identity else self.X @ beta

    def _set_derived(self):
        self.eta = self.theta[0] + self._xbeta(self.theta[1:])
        self.lam = self.w * np.exp(np.clip(self.eta, -ETA_MAX, ETA_MAX))
        self.s_beta = self.S @ self.theta[1:]
        self.level = np.array([self.theta[1:].mean()])

    def prior(self, theta) -> float:
        b = theta[1:]
        return (-0.5 * theta[0] ** 2 / self.sigma0_sq
                - 0.5 * float(b @ self.S @ b) / self.sigma_sq
                - 0.5 * float(b.mean()) ** 2 / self.sigma0_sq)

    def _loglik(self, lam, other) -> float:
        mu = lam + other
        return float(np.sum(self.wt * (self.y * np.log(mu) - mu)))

    def step(self, other, rng, burn):
        self._joint_step(other, rng)
        self._intercept_step(other, rng)
        if self.sites:
            self._site_step(other, rng)
        self._ridge_step(rng)

    def _joint_step(self, other, rng):
        z = rng.standard_normal(self.p + 1)
        prop = self.theta + self.joint.scale * (self.chol @ z)
        eta = prop[0] + self._xbeta(prop[1:])
        ok = np.max(np.abs(eta)) <= ETA_MAX
        acc = False
        if ok:
            lam = self.w * np.exp(eta)
            log_r = (self._loglik(lam, other) + self.prior(prop)
                     - self._loglik(self.lam, other) - self.prior(self.theta))
            if math.log(rng.random()) < log_r:
                self.theta = prop
                self.eta, self.lam = eta, lam
                self.s_beta = self.S @ prop[1:]
                self.level[0] = prop[1:].mean()
                acc = True
        else:
            rng.random()
        self.joint.record(acc)

    def _intercept_step(self, other, rng):
        d = self.intercept.scale * rng.standard_normal()
        u = rng.random()
        eta = self.eta + d
        acc = False
        if np.max(np.abs(eta)) <= ETA_MAX:
            lam = self.w * np.exp(eta)
            b0 = self.theta[0]
            log_r = (self._loglik(lam, other) - self._loglik(self.lam, other)
                     - 0.5 * ((b0 + d) ** 2 - b0**2) / self.sigma0_sq)
            if math.log(u) < log_r:
                self.theta[0] += d
                self.eta, self.lam = eta, lam
                acc = True
        self.intercept.record(acc)

    def _site_step(self, other, rng):
        z = rng.standard_normal(self.p)
        logu = np.log(rng.random(self.p))
        accepted = np.zeros(self.p, dtype=np.int64)
        beta = self.theta[1:].copy()
        colptr, rows, vals = self.csc
        _kernels.site_sweep(beta, self.s_beta, self.eta, self.lam, other, self.y, self.w,
                            self.wt, colptr, rows, vals, self.S, 1.0 / self.sigma_sq,
                            self.level, 1.0 / self.sigma0_sq, self.site.scale, z, logu,
                            accepted)
        self.theta[1:] = beta
        self.site.record(accepted)

    def _ridge_step(self, rng):
        # (beta0 - c, beta + c): likelihood and smoothing penalty unchanged
        c = self.ridge.scale * rng.standard_normal()
        u = rng.random()
        b0, m = self.theta[0], self.level[0]
        log_r = -0.5 * (((b0 - c) ** 2 - b0**2) + ((m + c) ** 2 - m**2)) / self.sigma0_sq
        acc = math.log(u) < log_r
        if acc:
            self.theta[0] -= c
            self.theta[1:] += c
            self.level[0] += c
            self.s_beta = self.S @ self.theta[1:]
        self.ridge.record(acc)

    def adapters(self) -> dict:
        out = {"joint": self.joint, "intercept": self.intercept, "ridge": self.ridge}
        if self.sites:
            out["sites"] = self.site
        return out

    def resync(self):
        """Recompute derived quantities from theta (guards against drift)."""
        self._set_derived()


def _block_cov_factor(H, lo, hi):
    return _chol_cov(H[lo:hi, lo:hi])


def _run_single_chain(args):
    record, design, priors, controls, seed, chain_index, weights = args
    return run_chain(record, design, priors, controls, weights=weights, seed=seed,
                     chain_index=chain_index)


def run_chain(record: SedimentRecord, design: LakeDesign, priors: UnivariatePriorSpec,
              controls: MCMCControls, weights=None, seed=None, chain_index: int = 0,
              init=None, mode=None) -> PosteriorDraws:
    """One Metropolis-within-Gibbs chain for the single-lake posterior.

    Each iteration updates the background block (intercept with spline
    coefficients), then the foreground block, the foreground intercept, a
    single-site sweep over foreground coefficients (``blocks="site"``), and
    intercept/level exchange moves for both processes.  Proposal scales adapt
    during burn-in and are frozen afterwards.
    """
    if len(record) == 0:
        raise ValueError("nothing to fit: empty record")
    seed = controls.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    y = np.asarray(record.counts, dtype=float)
    weights = np.ones_like(y) if weights is None else np.asarray(weights, dtype=float)
    if weights.sum() == 0:
        raise ValueError("nothing to fit: every interval is held out")
    p_b, p_f = design.background.p, design.foreground.p
    if mode is None:
        mode = posterior_mode(record, design, priors, weights)
    theta_hat, H = mode
    Lb = _block_cov_factor(H, 0, p_b + 1)
    Lf = _block_cov_factor(H, p_b + 1, p_b + p_f + 2)
    if init is None:
        # start from a Laplace-approximation draw around the mode
        theta0 = theta_hat.copy()
        theta0[:p_b + 1] += Lb @ rng.standard_normal(p_b + 1)
        theta0[p_b + 1:] += Lf @ rng.standard_normal(p_f + 1)
        eta_b = theta0[0] + design.background.basis @ theta0[1:p_b + 1]
        eta_f = theta0[p_b + 1] + design.foreground.basis @ theta0[p_b + 2:]
        for blk, eta in ((slice(0, p_b + 1), eta_b), (slice(p_b + 1, None), eta_f)):
            if not np.all(np.isfinite(eta)) or np.max(np.abs(eta)) > 0.5 * ETA_MAX:
                theta0[blk] = theta_hat[blk]
    else:
        theta0 = np.concatenate([[init.beta0_b], init.beta_b, [init.beta0_f], init.beta_f])
    lengths = design.lengths
    bg = ProcessSampler(design.background.basis, design.background.penalty, lengths, y, weights,
                        theta0[:p_b + 1], priors.sigma_b_sq, priors.sigma0_sq, Lb, sites=False)
    fg = ProcessSampler(design.foreground.basis, design.foreground.penalty, lengths, y, weights,
                        theta0[p_b + 1:], priors.sigma_f_sq, priors.sigma0_sq, Lf,
                        sites=controls.blocks == "site")
    n_keep = controls.n_keep
    out_b0b = np.empty(n_keep); out_bb = np.empty((n_keep, p_b))
    out_b0f = np.empty(n_keep); out_bf = np.empty((n_keep, p_f))
    out_lp = np.empty(n_keep)
    keep = 0
    cov_window = []
    for it in range(controls.iterations):
        burn = it < controls.burn_in
        bg.step(fg.lam, rng, burn)
        fg.step(bg.lam, rng, burn)
        if burn and (it + 1) % controls.adapt_every == 0:
            for proc in (bg, fg):
                for a in proc.adapters().values():
                    a.adapt()
            # refresh the background proposal shape from burn-in history
            if controls.burn_in >= 400 and it + 1 == controls.burn_in // 2 and len(cov_window) > 4 * (p_b + 1):
                emp = np.cov(np.asarray(cov_window).T)
                lap = Lb @ Lb.T
                try:
                    bg.chol = np.linalg.cholesky(0.7 * emp + 0.3 * lap)
                except np.linalg.LinAlgError:
                    pass
        if burn and controls.burn_in // 4 <= it < controls.burn_in // 2:
            cov_window.append(bg.theta.copy())
        if it + 1 == controls.burn_in:
            for proc in (bg, fg):
                proc.resync()
                for a in proc.adapters().values():
                    a.reset_counts()
        if not burn:
            for proc in (bg, fg):
                for a in proc.adapters().values():
                    a.freeze_counts()
            j = it - controls.burn_in
            if (j + 1) % controls.thin == 0 and keep < n_keep:
                out_b0b[keep] = bg.theta[0]; out_bb[keep] = bg.theta[1:]
                out_b0f[keep] = fg.theta[0]; out_bf[keep] = fg.theta[1:]
                mu = bg.lam + fg.lam
                out_lp[keep] = (float(np.sum(weights * (y * np.log(mu) - mu)))
                                + bg.prior(bg.theta) + fg.prior(fg.theta))
                keep += 1
    acceptance = {}
    for name, proc in (("background", bg), ("foreground", fg)):
        for aname, a in proc.adapters().items():
            acceptance[f"{name}_{aname}"] = a.rate()
    warnings = []
    for k, v in acceptance.items():
        if np.isfinite(v) and not (0.05 <= v <= 0.7):
            warnings.append(f"chain {chain_index}: acceptance rate for {k} = {v:.3f} outside [0.05, 0.7]")
    for w in warnings:
        logger.warning(w)
    meta = {"seed": int(seed) if np.isscalar(seed) else str(seed), "chain": chain_index,
            "iterations": controls.iterations, "burn_in": controls.burn_in,
            "thin": controls.thin, "blocks": controls.blocks, "warnings": warnings,
            "proposal_scales": {f"{n}_{k}": float(np.mean(a.scale))
                                for n, p in (("background", bg), ("foreground", fg))
                                for k, a in p.adapters().items()}}
    return PosteriorDraws(out_b0b, out_bb, out_b0f, out_bf, out_lp,
                          np.full(n_keep, chain_index), acceptance, meta)


def chain_seeds(seed: int, n: int, *key) -> list[int]:
    ss = np.random.SeedSequence([int(seed), *[int(k) for k in key]])
    return [int(c.generate_state(1, dtype=np.uint64)[0] % (2**63)) for c in ss.spawn(n)]


def run_chains(record: SedimentRecord, design: LakeDesign, priors: UnivariatePriorSpec,
               controls: MCMCControls, weights=None, key=()) -> PosteriorDraws:
    """Run ``controls.chains`` independent chains and stack them."""
    if len(record) == 0:
        raise ValueError("nothing to fit: empty record")
    seeds = chain_seeds(controls.seed, controls.chains, *key)
    args = [(record, design, priors, controls, s, c, weights) for c, s in enumerate(seeds)]
    if controls.workers > 1 and controls.chains > 1:
        with ProcessPoolExecutor(max_workers=controls.workers) as ex:
            parts = list(ex.map(_run_single_chain, args))
    else:
        mode = posterior_mode(record, design, priors, weights)
        parts = [run_chain(record, design, priors, controls, weights=weights, seed=s,
                           chain_index=c, mode=mode) for c, s in enumerate(seeds)]
    draws = PosteriorDraws.concat(parts)
    draws.metadata.update({"seed": controls.seed, "n_chains": controls.chains,
                           "lake_id": record.lake_id})
    return draws
