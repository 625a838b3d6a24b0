"""Probability of fire, thresholded fire events and fire-return-interval posteriors.

The probability that a particle deposited in interval i is fire-local is
``P = lam_f / (lam_f + lam_b)``.  Because both intensities share the interval
length, P is the logistic function of the difference of the linear
predictors, which is the form used for computation.  The ratio form is kept
for cross-checking.

Events: Z_i = 1 iff P_i > xi; each maximal run of Z = 1 is one fire whose
time is the midpoint of the run's first (youngest) interval.  Fire-return
intervals are exponential with mean alpha; an InvGamma(a, b) prior on alpha
gives the conjugate posterior InvGamma(a + m - 1, b + sum FRI) for m events.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .univariate import ETA_MAX, CoefficientState, LakeDesign, PosteriorDraws

DEFAULT_XI_GRID = tuple(np.round(np.arange(0.50, 1.0001, 0.05), 2))
DEFAULT_A_ALPHA = 2.0
DEFAULT_B_ALPHA = 200.0


class SparseRecordError(ValueError):
    """No threshold in the grid yields a fire-return-interval posterior."""


class _NoFire:
    """Marker for an undefined FRI MLE (no fire events)."""

    _inst = None

    def __new__(cls):
        if cls._inst is None:
            cls._inst = super().__new__(cls)
        return cls._inst

    def __repr__(self):
        return "NO_FIRE"

    def __bool__(self):
        return False


NO_FIRE = _NoFire()


# ---------------------------------------------------------------------------
# probability of fire


def _eta_pair(state: CoefficientState, design: LakeDesign, interval=None):
    Xb, Xf = design.background.basis, design.foreground.basis
    if interval is not None:
        Xb, Xf = Xb[interval], Xf[interval]
    eta_b = state.beta0_b + Xb @ state.beta_b
    eta_f = state.beta0_f + Xf @ state.beta_f
    return eta_b, eta_f


def probability_of_fire(state: CoefficientState, design: LakeDesign, interval=None):
    """Logistic form 1 / (1 + exp(-(eta_f - eta_b))) at one interval (or all)."""
    eta_b, eta_f = _eta_pair(state, design, interval)
    return expit(eta_f - eta_b)


def probability_of_fire_ratio(state: CoefficientState, design: LakeDesign, interval=None):
    """Ratio form lam_f / (lam_f + lam_b) with the interval-length factor included."""
    eta_b, eta_f = _eta_pair(state, design, interval)
    w = design.lengths if interval is None else design.lengths[interval]
    lam_b = np.exp(np.clip(eta_b, -ETA_MAX, ETA_MAX)) * w
    lam_f = np.exp(np.clip(eta_f, -ETA_MAX, ETA_MAX)) * w
    return lam_f / (lam_f + lam_b)


def logistic_probability(delta0, x, delta):
    """P from the difference coefficients beta* = beta_f - beta_b."""
    return expit(delta0 + np.asarray(x) @ np.asarray(delta))


@dataclass(frozen=True, eq=False)
class FireProbabilitySeries:
    """Posterior samples of P, one row per retained state."""

    samples: np.ndarray
    top_ages: np.ndarray
    bottom_ages: np.ndarray
    lake_id: str = ""

    def __post_init__(self):
        s = np.atleast_2d(np.asarray(self.samples, dtype=float))
        if s.shape[1] != np.asarray(self.top_ages).size:
            raise ValueError("samples and intervals disagree in length")
        object.__setattr__(self, "samples", s)
        object.__setattr__(self, "top_ages", np.asarray(self.top_ages, dtype=float))
        object.__setattr__(self, "bottom_ages", np.asarray(self.bottom_ages, dtype=float))

    @property
    def n_samples(self) -> int:
        return self.samples.shape[0]

    @property
    def n_intervals(self) -> int:
        return self.samples.shape[1]

    @property
    def midpoints(self) -> np.ndarray:
        return 0.5 * (self.top_ages + self.bottom_ages)

    @property
    def mean(self) -> np.ndarray:
        return self.samples.mean(axis=0)

    def band(self, level: float = 0.95):
        q = (1.0 - level) / 2.0
        return np.quantile(self.samples, [q, 1.0 - q], axis=0)

    @classmethod
    def from_draws(cls, draws: PosteriorDraws, design: LakeDesign, record) -> "FireProbabilitySeries":
        eta_b, eta_f = draws.eta(design)
        return cls(expit(eta_f - eta_b), record.top_ages, record.bottom_ages, record.lake_id)


# ---------------------------------------------------------------------------
# events


@dataclass(frozen=True, eq=False)
class EventSeries:
    """Thresholded indicators and the run-collapsed events of every sample."""

    z: np.ndarray
    xi: float
    midpoints: np.ndarray
    starts: np.ndarray = field(repr=False)

    @property
    def n_samples(self) -> int:
        return self.z.shape[0]

    @property
    def counts(self) -> np.ndarray:
        """Number of events per sample."""
        return self.starts.sum(axis=1)

    def event_times(self, s: int) -> np.ndarray:
        return self.midpoints[self.starts[s]]

    def fris(self, s: int) -> np.ndarray:
        return np.diff(self.event_times(s))

    def fri_sums(self) -> np.ndarray:
        """Per-sample sum of FRIs, i.e. last minus first event time (0 below two events)."""
        m = self.counts
        has = m > 0
        first = np.argmax(self.starts, axis=1)
        last = self.starts.shape[1] - 1 - np.argmax(self.starts[:, ::-1], axis=1)
        out = np.where(has, self.midpoints[last] - self.midpoints[first], 0.0)
        return out

    def long_format(self):
        """(sample_index, event_time) pairs."""
        s_idx, i_idx = np.nonzero(self.starts)
        return s_idx, self.midpoints[i_idx]


def apply_threshold(series: FireProbabilitySeries, xi: float) -> EventSeries:
    if not 0.0 <= xi <= 1.0:
        raise ValueError(f"threshold must lie in [0, 1], got {xi}")
    z = series.samples > xi
    prev = np.zeros_like(z)
    prev[:, 1:] = z[:, :-1]
    starts = z & ~prev
    return EventSeries(z, float(xi), series.midpoints, starts)


def fri_mle(n_events: int, domain_length: float):
    """|D| / m, or NO_FIRE when there are no events."""
    if domain_length <= 0:
        raise ValueError("domain_length must be positive")
    if n_events <= 0:
        return NO_FIRE
    return domain_length / n_events


# ---------------------------------------------------------------------------
# alpha posterior


def alpha_posterior_params(fris, a_alpha: float = DEFAULT_A_ALPHA,
                           b_alpha: float = DEFAULT_B_ALPHA) -> tuple[float, float]:
    fris = np.asarray(fris, dtype=float)
    if a_alpha <= 0 or b_alpha <= 0:
        raise ValueError("a_alpha and b_alpha must be positive")
    if np.any(fris <= 0):
        raise ValueError("fire-return intervals must be positive")
    return a_alpha + fris.size, b_alpha + float(fris.sum())


def alpha_posterior_draw(fris, a_alpha: float = DEFAULT_A_ALPHA, b_alpha: float = DEFAULT_B_ALPHA,
                         rng: np.random.Generator | None = None, size=None):
    """Draw(s) of alpha from InvGamma(a + m - 1, b + sum FRI) given m - 1 FRIs."""
    rng = np.random.default_rng() if rng is None else rng
    shape, rate = alpha_posterior_params(fris, a_alpha, b_alpha)
    return 1.0 / rng.gamma(shape, 1.0 / rate, size=size)


def invgamma_moments(shape: float, scale: float) -> tuple[float, float]:
    """Mean and variance of InvGamma(shape, scale); nan where undefined."""
    mean = scale / (shape - 1.0) if shape > 1 else float("nan")
    var = scale**2 / ((shape - 1.0) ** 2 * (shape - 2.0)) if shape > 2 else float("nan")
    return mean, var


@dataclass(frozen=True, eq=False)
class FRIPosterior:
    """alpha draws (one per sample with >= 2 events) at one threshold."""

    alpha: np.ndarray
    xi: float
    n_events: np.ndarray
    fri_sums: np.ndarray
    n_dropped: int
    a_alpha: float = DEFAULT_A_ALPHA
    b_alpha: float = DEFAULT_B_ALPHA

    @property
    def n_draws(self) -> int:
        return self.alpha.size

    @property
    def cv(self) -> float:
        if self.alpha.size < 2:
            return float("nan")
        return float(np.std(self.alpha, ddof=1) / np.mean(self.alpha))


def fri_posterior(events: EventSeries, a_alpha: float = DEFAULT_A_ALPHA,
                  b_alpha: float = DEFAULT_B_ALPHA, seed=0) -> FRIPosterior:
    """One alpha draw per posterior sample, vectorized over samples.

    Samples with fewer than two events contribute nothing (counted in
    ``n_dropped``).  The generator is seeded afresh so that thresholds sharing
    an event pattern give identical draws.
    """
    if a_alpha <= 0 or b_alpha <= 0:
        raise ValueError("a_alpha and b_alpha must be positive")
    m = events.counts
    sums = events.fri_sums()
    keep = m >= 2
    rng = np.random.default_rng(seed)
    # draw for every sample so the stream position does not depend on which are kept
    g = rng.standard_gamma(a_alpha + np.maximum(m - 1, 0))
    alpha = ((b_alpha + sums) / g)[keep]
    return FRIPosterior(alpha, events.xi, m, sums, int((~keep).sum()), a_alpha, b_alpha)


@dataclass(frozen=True)
class ThresholdChoice:
    xi_opt: float
    cv: dict
    posteriors: dict = field(repr=False, default_factory=dict)

    @property
    def posterior(self) -> FRIPosterior:
        return self.posteriors[self.xi_opt]


def optimal_threshold(series: FireProbabilitySeries, grid=DEFAULT_XI_GRID,
                      a_alpha: float = DEFAULT_A_ALPHA, b_alpha: float = DEFAULT_B_ALPHA,
                      seed=0) -> ThresholdChoice:
    """Threshold minimizing the coefficient of variation of alpha draws.

    Ties (exact equality) go to the larger threshold.  Thresholds with fewer
    than two alpha draws have undefined CV and are skipped.
    """
    grid = [float(x) for x in grid]
    if not grid or any(not 0.0 <= x <= 1.0 for x in grid):
        raise ValueError("threshold grid must be non-empty and within [0, 1]")
    cv, post = {}, {}
    for xi in grid:
        fp = fri_posterior(apply_threshold(series, xi), a_alpha, b_alpha, seed)
        post[xi] = fp
        cv[xi] = fp.cv
    finite = [xi for xi in grid if np.isfinite(cv[xi])]
    if not finite:
        raise SparseRecordError(
            f"record too sparse: no threshold in {grid} gives two or more fire events in any "
            "posterior sample"
        )
    best = min(cv[xi] for xi in finite)
    xi_opt = max(xi for xi in finite if cv[xi] == best)
    return ThresholdChoice(xi_opt, cv, post)


def summarize_fri(posterior: FRIPosterior, level: float = 0.95) -> dict:
    a = posterior.alpha
    if a.size == 0:
        raise ValueError("no alpha draws to summarize")
    q = (1.0 - level) / 2.0
    lo, hi = np.quantile(a, [q, 1.0 - q])
    return {"mean": float(a.mean()), "lo": float(lo), "hi": float(hi),
            "ci_width": float(hi - lo), "n_draws": int(a.size), "n_dropped": posterior.n_dropped}
