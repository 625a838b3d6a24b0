"""Synthetic charcoal records with known fire history.

A deliberately simple stand-in for a landscape charcoal model: fires arrive as
a homogeneous Poisson process, each fire multiplies the deposition of its
sample interval (with a geometric tail into the following, younger intervals),
sediment mixing smears the signal with a normalized exponential kernel, and
counts are Poisson.  Interval 0 is the youngest (top of the core).
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .records import SedimentRecord

DEFAULT_TREND = ((0.0, math.log(0.6)), (1200.0, math.log(0.9)), (2600.0, math.log(0.45)),
                 (4760.0, math.log(0.7)))


@dataclass(frozen=True)
class SimConfig:
    domain_length: float = 4760.0
    interval_length: float = 20.0
    true_mean_fri: float = 116.0
    # (age, log particles per year) anchors, linearly interpolated
    background_trend: tuple = DEFAULT_TREND
    peak_magnitude: float = 12.0
    peak_decay: int = 1
    mixing_depth: float = 0.5
    seed: int = 0
    start_age: float = 0.0
    lake_id: str = "sim"
    location: tuple = (0.0, 0.0)

    def __post_init__(self):
        if self.domain_length <= 0 or self.interval_length <= 0:
            raise ValueError("domain_length and interval_length must be positive")
        ratio = self.domain_length / self.interval_length
        if abs(ratio - round(ratio)) > 1e-9:
            raise ValueError("interval_length must divide domain_length")
        if self.true_mean_fri <= 0:
            raise ValueError("true_mean_fri must be positive (use math.inf for no fires)")
        if self.peak_magnitude < 0 or self.peak_decay < 0 or self.mixing_depth < 0:
            raise ValueError("peak_magnitude, peak_decay and mixing_depth must be non-negative")
        object.__setattr__(self, "background_trend",
                           tuple((float(a), float(b)) for a, b in self.background_trend))

    @property
    def n_intervals(self) -> int:
        return int(round(self.domain_length / self.interval_length))

    @property
    def tops(self) -> np.ndarray:
        return self.start_age + self.interval_length * np.arange(self.n_intervals)

    @property
    def midpoints(self) -> np.ndarray:
        return self.tops + 0.5 * self.interval_length

    def to_dict(self) -> dict:
        d = asdict(self)
        d["background_trend"] = [list(x) for x in self.background_trend]
        d["location"] = list(self.location)
        return d


@dataclass(frozen=True, eq=False)
class GroundTruth:
    fire_times: np.ndarray
    indicator: np.ndarray
    fire_intervals: np.ndarray = field(default=None)

    @property
    def n_fires(self) -> int:
        return int(self.fire_times.size)


def _streams(seed):
    return [np.random.default_rng(s) for s in np.random.SeedSequence(int(seed)).spawn(2)]


def interval_of(times, config: SimConfig) -> np.ndarray:
    idx = np.floor((np.asarray(times, dtype=float) - config.start_age) / config.interval_length)
    return np.clip(idx.astype(int), 0, config.n_intervals - 1)


def simulate_fires(config: SimConfig) -> GroundTruth:
    """Fire ages from a homogeneous Poisson process with rate 1/true_mean_fri."""
    rng = _streams(config.seed)[0]
    end = config.start_age + config.domain_length
    times = []
    if math.isfinite(config.true_mean_fri):
        t = config.start_age + rng.exponential(config.true_mean_fri)
        while t < end:
            times.append(t)
            t += rng.exponential(config.true_mean_fri)
    times = np.asarray(times, dtype=float)
    idx = interval_of(times, config)
    ind = np.zeros(config.n_intervals, dtype=int)
    ind[idx] = 1
    return GroundTruth(times, ind, idx)


def background_rate(config: SimConfig, ages) -> np.ndarray:
    """Background particles per year at the given ages."""
    anchors = np.asarray(config.background_trend, dtype=float)
    return np.exp(np.interp(ages, anchors[:, 0], anchors[:, 1]))


def fire_kernel(config: SimConfig, truth: GroundTruth) -> np.ndarray:
    """Per-interval fire signal: 1 in the fire interval, halving for each younger one."""
    n = config.n_intervals
    sig = np.zeros(n)
    for i in truth.fire_intervals:
        for d in range(config.peak_decay + 1):
            if i - d >= 0:
                sig[i - d] += 0.5**d
    return sig


def mixing_matrix(config: SimConfig) -> np.ndarray:
    """Column-stochastic matrix moving each interval's charcoal to its neighbours."""
    n = config.n_intervals
    if config.mixing_depth == 0:
        return np.eye(n)
    reach = int(math.ceil(4 * config.mixing_depth))
    idx = np.arange(n)
    dist = np.abs(idx[:, None] - idx[None, :])
    M = np.where(dist <= reach, np.exp(-dist / config.mixing_depth), 0.0)
    return M / M.sum(axis=0, keepdims=True)


def expected_counts(config: SimConfig, truth: GroundTruth) -> np.ndarray:
    pre = (background_rate(config, config.midpoints) * config.interval_length
           * (1.0 + config.peak_magnitude * fire_kernel(config, truth)))
    return mixing_matrix(config) @ pre


def simulate_counts(config: SimConfig, truth: GroundTruth) -> SedimentRecord:
    rng = _streams(config.seed)[1]
    counts = rng.poisson(expected_counts(config, truth))
    tops = config.tops
    return SedimentRecord(config.lake_id, tops, tops + config.interval_length, counts,
                          location=config.location)


def simulate(config: SimConfig):
    truth = simulate_fires(config)
    return simulate_counts(config, truth), truth


def runs(flags) -> list[tuple[int, int]]:
    """Maximal runs of truthy entries as (first, last) index pairs."""
    flags = np.asarray(flags, dtype=bool)
    out = []
    i, n = 0, flags.size
    while i < n:
        if flags[i]:
            j = i
            while j + 1 < n and flags[j + 1]:
                j += 1
            out.append((i, j))
            i = j + 1
        else:
            i += 1
    return out


def score_identification(z_samples, truth: GroundTruth, tolerance_intervals: int = 1) -> dict:
    """Compare identified fire intervals against the true fire history.

    ``z_samples`` is a (samples, intervals) 0/1 array at the chosen threshold;
    an interval counts as identified when Z=1 in more than half the samples.
    A true fire is hit when an identified interval lies within the tolerance of
    its interval (two fires in one interval are both hit).  A false positive is
    a run of identified intervals with no true fire within the tolerance.
    """
    z = np.atleast_2d(np.asarray(z_samples))
    if z.shape[1] != truth.indicator.size:
        raise ValueError(f"grid mismatch: {z.shape[1]} intervals vs {truth.indicator.size} in truth")
    identified = z.mean(axis=0) > 0.5
    ident_idx = np.flatnonzero(identified)
    fire_idx = np.asarray(truth.fire_intervals, dtype=int)
    hits = 0
    for i in fire_idx:
        if ident_idx.size and np.min(np.abs(ident_idx - i)) <= tolerance_intervals:
            hits += 1
    true_idx = np.flatnonzero(truth.indicator)
    false_pos = 0
    event_runs = runs(identified)
    for a, b in event_runs:
        if true_idx.size == 0 or not np.any((true_idx >= a - tolerance_intervals)
                                            & (true_idx <= b + tolerance_intervals)):
            false_pos += 1
    n = fire_idx.size
    return {"hit_rate": hits / n if n else float("nan"), "hits": hits, "n_fires": int(n),
            "false_positives": false_pos, "identified_events": len(event_runs),
            "identified_intervals": int(identified.sum())}


@dataclass(frozen=True)
class NetworkConfig:
    """Several lakes sharing one background trend, each with its own fires and resolution."""

    n_lakes: int = 6
    domain_length: float = 4800.0
    interval_lengths: tuple = (15.0, 20.0, 24.0, 30.0, 20.0, 16.0)
    true_mean_fris: tuple = (100.0, 140.0, 120.0, 160.0, 110.0, 130.0)
    start_offsets: tuple = (0.0, 60.0, 120.0, 0.0, 240.0, 30.0)
    background_trend: tuple = DEFAULT_TREND
    # lake-specific multiplicative background level, log scale
    level_sd: float = 0.2
    peak_magnitude: float = 12.0
    peak_decay: int = 1
    mixing_depth: float = 0.5
    extent_km: float = 40.0
    seed: int = 0

    def __post_init__(self):
        for name in ("interval_lengths", "true_mean_fris", "start_offsets"):
            if len(getattr(self, name)) < self.n_lakes:
                raise ValueError(f"{name} needs at least n_lakes={self.n_lakes} entries")

    def lake_configs(self) -> list[SimConfig]:
        ss = np.random.SeedSequence([int(self.seed), 0x1A4E])
        rng = np.random.default_rng(ss)
        locs = rng.uniform(0.0, self.extent_km, size=(self.n_lakes, 2))
        levels = rng.normal(0.0, self.level_sd, size=self.n_lakes)
        seeds = rng.integers(0, 2**31 - 1, size=self.n_lakes)
        out = []
        for j in range(self.n_lakes):
            L = float(self.interval_lengths[j])
            n = int(math.floor((self.domain_length - self.start_offsets[j]) / L))
            trend = tuple((a, b + levels[j]) for a, b in self.background_trend)
            out.append(SimConfig(domain_length=n * L, interval_length=L,
                                 true_mean_fri=float(self.true_mean_fris[j]),
                                 background_trend=trend, peak_magnitude=self.peak_magnitude,
                                 peak_decay=self.peak_decay, mixing_depth=self.mixing_depth,
                                 seed=int(seeds[j]), start_age=float(self.start_offsets[j]),
                                 lake_id=f"lake{j + 1}",
                                 location=(float(locs[j, 0]), float(locs[j, 1]))))
        return out


def simulate_network(config: NetworkConfig):
    """Records and ground truths for every lake of the network."""
    records, truths = [], []
    for cfg in config.lake_configs():
        rec, truth = simulate(cfg)
        records.append(rec)
        truths.append(truth)
    return records, truths
