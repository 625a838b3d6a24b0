"""Penalty selection by hold-out posterior predictive loss over a (sigma_b^2, sigma_f^2) grid."""
from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .diagnostics import split_rhat
from .records import SedimentRecord
from .univariate import (LakeDesign, MCMCControls, UnivariatePriorSpec, chain_seeds,
                         posterior_predictive_draw, run_chains)

logger = logging.getLogger(__name__)

DEFAULT_BACKGROUND_GRID = (0.01, 0.05, 0.1, 0.5, 1.0)
DEFAULT_FOREGROUND_GRID = (1.0, 5.0, 10.0, 50.0, 100.0)
HOLDOUT_FRACTION = 0.25
GRID_CHAIN_FRACTION = 1.0 / 3.0


class RegularizationError(RuntimeError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


@dataclass(frozen=True)
class PenaltyGrid:
    background_values: tuple = DEFAULT_BACKGROUND_GRID
    foreground_values: tuple = DEFAULT_FOREGROUND_GRID

    def __post_init__(self):
        for name in ("background_values", "foreground_values"):
            v = np.asarray(getattr(self, name), dtype=float)
            if v.ndim != 1 or v.size == 0 or np.any(v <= 0) or not np.all(np.isfinite(v)):
                raise ValueError(f"{name} must be a non-empty list of positive numbers")
            if np.unique(v).size != v.size:
                raise ValueError(f"{name} has repeated values")
            # stored sorted; the search does not depend on the order given
            object.__setattr__(self, name, tuple(float(x) for x in np.sort(v)))

    @staticmethod
    def admissible(sigma_b_sq: float, sigma_f_sq: float) -> bool:
        return sigma_b_sq < sigma_f_sq

    def cells(self):
        for b in self.background_values:
            for f in self.foreground_values:
                yield b, f, self.admissible(b, f)


@dataclass(frozen=True, eq=False)
class HoldoutSplit:
    train: np.ndarray
    holdout: np.ndarray
    seed: int

    def weights(self, n: int) -> np.ndarray:
        w = np.ones(n)
        w[self.holdout] = 0.0
        return w


def make_holdout(record: SedimentRecord, seed: int = 0,
                 fraction: float = HOLDOUT_FRACTION) -> HoldoutSplit:
    """Uniform random hold-out of round(fraction * n) intervals."""
    n = len(record)
    if n < 8:
        raise ValueError(f"{record.lake_id}: record too short for a hold-out split (n={n} < 8)")
    n_ho = int(math.floor(fraction * n + 0.5))
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x4B0]))
    ho = np.sort(rng.choice(n, size=n_ho, replace=False))
    train = np.setdiff1d(np.arange(n), ho)
    return HoldoutSplit(train, ho, int(seed))


def posterior_predictive_loss(y_rep, y_ho) -> float:
    """Squared error of the predictive mean plus summed predictive variance.

    ``y_rep`` is (draws, holdout intervals).  Variances use the 1/N
    normalization, so the loss equals the mean over draws of
    ``sum((y_rep - y_ho)**2)``.
    """
    y_rep = np.atleast_2d(np.asarray(y_rep, dtype=float))
    y_ho = np.asarray(y_ho, dtype=float)
    if y_rep.shape[0] == 0:
        raise ValueError("no predictive draws")
    if y_rep.shape[1] != y_ho.size:
        raise ValueError("predictive draws and hold-out counts disagree in length")
    mean = y_rep.mean(axis=0)
    var = y_rep.var(axis=0)
    return float(np.sum((y_ho - mean) ** 2) + np.sum(var))


@dataclass(frozen=True)
class CellResult:
    sigma_b_sq: float
    sigma_f_sq: float
    admissible: bool
    loss: float = float("nan")
    rhat: float = float("nan")
    error: str = ""

    @property
    def ok(self) -> bool:
        return self.admissible and not self.error and math.isfinite(self.loss)


@dataclass(frozen=True)
class GridSearchResult:
    sigma_b_sq: float
    sigma_f_sq: float
    cells: tuple
    split: HoldoutSplit = field(repr=False, default=None)

    def loss_table(self, grid: PenaltyGrid) -> np.ndarray:
        """len(background) x len(foreground) losses; nan for inadmissible or failed cells."""
        T = np.full((len(grid.background_values), len(grid.foreground_values)), np.nan)
        for c in self.cells:
            T[grid.background_values.index(c.sigma_b_sq),
              grid.foreground_values.index(c.sigma_f_sq)] = c.loss
        return T

    def rows(self, lake_id: str) -> list[dict]:
        return [{"lake_id": lake_id, "sigma_b": c.sigma_b_sq, "sigma_f": c.sigma_f_sq,
                 "admissible": c.admissible, "loss": c.loss,
                 "selected": c.sigma_b_sq == self.sigma_b_sq and c.sigma_f_sq == self.sigma_f_sq}
                for c in self.cells]


def _cell_key(sigma_b_sq, sigma_f_sq):
    # seeds derive from the cell values, not its position in the grid
    return (int(round(sigma_b_sq * 1e6)), int(round(sigma_f_sq * 1e6)))


def _fit_cell(args) -> CellResult:
    record, design, sb, sf, sigma0_sq, controls, split = args
    try:
        priors = UnivariatePriorSpec(sigma0_sq=sigma0_sq, sigma_b_sq=sb, sigma_f_sq=sf)
        key = _cell_key(sb, sf)
        weights = split.weights(len(record))
        draws = run_chains(record, design, priors, controls, weights=weights, key=key)
        rng = np.random.default_rng(chain_seeds(controls.seed, 1, *key, 1)[0])
        y_rep = posterior_predictive_draw(draws, design, split.holdout, rng)
        loss = posterior_predictive_loss(y_rep, record.counts[split.holdout])
        chains = [draws.log_post[i] for i in draws.chain_slices()]
        rhat = split_rhat(np.array(chains)) if draws.n_chains > 1 and len(draws) >= 8 else float("nan")
        return CellResult(sb, sf, True, loss, rhat)
    except (ValueError, FloatingPointError, np.linalg.LinAlgError) as exc:
        return CellResult(sb, sf, True, error=f"{type(exc).__name__}: {exc}")


def select_cell(cells) -> CellResult:
    """Minimum loss; exact ties go to the smaller sigma_f^2, then the smaller sigma_b^2."""
    ok = [c for c in cells if c.ok]
    if not ok:
        raise RegularizationError("every admissible cell failed",
                                  {(c.sigma_b_sq, c.sigma_f_sq): c.error for c in cells if c.admissible})
    return min(ok, key=lambda c: (c.loss, c.sigma_f_sq, c.sigma_b_sq))


def grid_search(record: SedimentRecord, design: LakeDesign, grid: PenaltyGrid | None = None,
                controls: MCMCControls | None = None, sigma0_sq: float = 100.0,
                holdout_seed: int | None = None, fraction: float = GRID_CHAIN_FRACTION,
                workers: int | None = None) -> GridSearchResult:
    """Fit every admissible cell on the training intervals and score the hold-out.

    Chains run at ``fraction`` of the configured length.
    """
    grid = PenaltyGrid() if grid is None else grid
    controls = MCMCControls() if controls is None else controls
    workers = controls.workers if workers is None else workers
    split = make_holdout(record, controls.seed if holdout_seed is None else holdout_seed)
    short = replace(controls.scaled(fraction), workers=1)
    todo = [(b, f) for b, f, adm in grid.cells() if adm]
    if not todo:
        raise RegularizationError("no admissible cells (need sigma_b^2 < sigma_f^2 somewhere)")
    args = [(record, design, b, f, sigma0_sq, short, split) for b, f in todo]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            fitted = list(ex.map(_fit_cell, args))
    else:
        fitted = [_fit_cell(a) for a in args]
    by_cell = {(c.sigma_b_sq, c.sigma_f_sq): c for c in fitted}
    cells = tuple(by_cell.get((b, f), CellResult(b, f, False)) for b, f, _ in grid.cells())
    for c in cells:
        if c.error:
            logger.warning("%s: cell (%g, %g) failed: %s", record.lake_id, c.sigma_b_sq,
                           c.sigma_f_sq, c.error)
    best = select_cell(cells)
    return GridSearchResult(best.sigma_b_sq, best.sigma_f_sq, cells, split)
