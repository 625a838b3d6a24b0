"""Natural cubic regression splines in cardinal (value-at-knot) form.

The construction is the cubic regression spline of Wood (2006, Generalized Additive Models):
a spline is parameterized by its values ``beta`` at the knots, the knot second
derivatives follow as ``delta = F @ beta`` with ``delta[0] = delta[-1] = 0``
(the natural condition), and the wiggliness ``∫ f''(t)^2 dt`` equals
``beta @ S @ beta`` with ``S = D.T @ inv(B) @ D``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.linalg import solve_banded

DEFAULT_YEARS_PER_KNOT = 500.0
DEFAULT_MIN_KNOTS = 6
DEFAULT_MAX_KNOTS = 40


class KnotError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class KnotSet:
    knots: np.ndarray

    def __post_init__(self):
        k = np.array(self.knots, dtype=float)
        if k.ndim != 1 or k.size < 4:
            raise KnotError(f"need at least 4 knots, got {k.size}")
        if not np.all(np.isfinite(k)) or np.any(np.diff(k) <= 0):
            raise KnotError("knots must be finite and strictly increasing")
        k.setflags(write=False)
        object.__setattr__(self, "knots", k)

    def __len__(self):
        return self.knots.size

    @property
    def p(self) -> int:
        return self.knots.size

    @property
    def span(self) -> float:
        return float(self.knots[-1] - self.knots[0])

    @property
    def mean_spacing(self) -> float:
        return self.span / (self.p - 1)


def default_knot_count(span: float, years_per_knot: float = DEFAULT_YEARS_PER_KNOT,
                       lo: int = DEFAULT_MIN_KNOTS, hi: int = DEFAULT_MAX_KNOTS) -> int:
    """About one knot per ``years_per_knot`` years, clamped to [lo, hi]."""
    p = int(round(span / years_per_knot)) + 1
    return int(min(max(p, lo), hi))


def place_knots(domain: tuple[float, float], p: int, midpoints: Sequence[float] | None = None,
                placement: str = "quantile") -> KnotSet:
    """Knots at the 0, 1/(p-1), ..., 1 quantiles of the interval midpoints.

    ``placement="even"`` spaces them evenly over ``domain`` instead.
    """
    lo, hi = float(domain[0]), float(domain[1])
    if not hi > lo:
        raise KnotError(f"degenerate domain ({lo}, {hi})")
    if p < 4:
        raise KnotError(f"p must be >= 4, got {p}")
    if placement == "even":
        return KnotSet(np.linspace(lo, hi, p))
    if placement != "quantile":
        raise KnotError(f"unknown knot placement {placement!r}")
    if midpoints is None:
        raise KnotError("quantile placement needs the interval midpoints")
    mid = np.sort(np.asarray(midpoints, dtype=float))
    n_distinct = np.unique(mid).size
    if n_distinct < p:
        raise KnotError(
            f"only {n_distinct} distinct interval midpoints for p={p} knots; use p <= {n_distinct}"
        )
    if n_distinct == p:
        # every quantile is an order statistic; skip the interpolation rounding
        knots = np.unique(mid)
    else:
        knots = np.quantile(mid, np.linspace(0.0, 1.0, p))
    if np.any(np.diff(knots) <= 0):
        raise KnotError(
            f"quantile knots collide for p={p} (many repeated midpoints); use a smaller p "
            "or even placement"
        )
    return KnotSet(knots)


def _second_derivative_map(knots: np.ndarray):
    """Return (D, F, S) for the cardinal natural cubic spline on ``knots``."""
    h = np.diff(knots)
    p = knots.size
    m = p - 2
    D = np.zeros((m, p))
    idx = np.arange(m)
    D[idx, idx] = 1.0 / h[:-1]
    D[idx, idx + 1] = -1.0 / h[:-1] - 1.0 / h[1:]
    D[idx, idx + 2] = 1.0 / h[1:]
    # B is symmetric tridiagonal: diag (h_i + h_{i+1})/3, off-diagonal h_{i+1}/6
    ab = np.zeros((3, m))
    ab[1] = (h[:-1] + h[1:]) / 3.0
    ab[0, 1:] = h[1:-1] / 6.0
    ab[2, :-1] = h[1:-1] / 6.0
    F_inner = solve_banded((1, 1), ab, D)
    F = np.zeros((p, p))
    F[1:-1] = F_inner
    S = D.T @ F_inner
    S = 0.5 * (S + S.T)
    return D, F, S


def evaluate_basis(knot_set: KnotSet, times, deriv: int = 0) -> np.ndarray:
    """n x p matrix of cardinal natural cubic spline basis functions (or derivatives).

    Row i times a coefficient vector gives the spline value at ``times[i]``;
    at a knot the row is the corresponding unit vector.
    """
    knots = knot_set.knots
    t = np.atleast_1d(np.asarray(times, dtype=float))
    tol = 1e-9 * max(1.0, np.abs(knots).max())
    if t.size and (t.min() < knots[0] - tol or t.max() > knots[-1] + tol):
        raise KnotError(
            f"evaluation times [{t.min()}, {t.max()}] outside knot range "
            f"[{knots[0]}, {knots[-1]}]"
        )
    t = np.clip(t, knots[0], knots[-1])
    _, F, _ = _second_derivative_map(knots)
    p = knots.size
    j = np.clip(np.searchsorted(knots, t, side="right") - 1, 0, p - 2)
    h = knots[j + 1] - knots[j]
    r = knots[j + 1] - t
    l = t - knots[j]
    if deriv == 0:
        am, ap = r / h, l / h
        # factored so the cubic terms vanish exactly at knots
        cm = r * (r * r - h * h) / (6.0 * h)
        cp = l * (l * l - h * h) / (6.0 * h)
    elif deriv == 1:
        am, ap = -1.0 / h, 1.0 / h
        cm = -(3 * r**2 / h - h) / 6.0
        cp = (3 * l**2 / h - h) / 6.0
    elif deriv == 2:
        am = ap = np.zeros_like(t)
        cm, cp = r / h, l / h
    else:
        raise ValueError("deriv must be 0, 1 or 2")
    rows = np.arange(t.size)
    X = cm[:, None] * F[j] + cp[:, None] * F[j + 1]
    X[rows, j] += am
    X[rows, j + 1] += ap
    return X


def penalty_matrix(knot_set: KnotSet) -> np.ndarray:
    """S with ``beta @ S @ beta = ∫ f''(t)^2 dt`` over the knot span (time units of the knots)."""
    return _second_derivative_map(knot_set.knots)[2]


@dataclass(frozen=True, eq=False)
class SplineDesign:
    """Basis rows at the evaluation times plus the smoothing penalty.

    ``penalty`` is the integrated squared second derivative measured with time
    in units of the mean knot spacing, i.e. ``penalty_matrix(knots) * h**3``
    (``penalty_scale``).  This keeps prior penalty variances comparable across
    records of different length and resolution.
    """

    knot_set: KnotSet
    basis: np.ndarray
    penalty: np.ndarray
    penalty_scale: float = 1.0

    @property
    def p(self) -> int:
        return self.knot_set.p

    @property
    def n(self) -> int:
        return self.basis.shape[0]

    def is_identity(self) -> bool:
        X = self.basis
        return X.shape[0] == X.shape[1] and np.array_equal(X, np.eye(X.shape[0]))


def make_design(knot_set: KnotSet, times, scale_penalty: bool = True) -> SplineDesign:
    X = evaluate_basis(knot_set, times)
    scale = knot_set.mean_spacing**3 if scale_penalty else 1.0
    S = penalty_matrix(knot_set) * scale
    X.setflags(write=False)
    S.setflags(write=False)
    return SplineDesign(knot_set, X, S, scale)


def build_design(times, p: int | str | None = None, placement: str = "quantile",
                 years_per_knot: float = DEFAULT_YEARS_PER_KNOT,
                 min_knots: int = DEFAULT_MIN_KNOTS, max_knots: int = DEFAULT_MAX_KNOTS) -> SplineDesign:
    """Design on the given evaluation times (interval midpoints).

    ``p=None`` uses the knot-density rule, ``p="interval"`` puts one knot at
    every evaluation time (the basis is then the identity).
    """
    t = np.asarray(times, dtype=float)
    domain = (float(t.min()), float(t.max()))
    if p == "interval":
        p = np.unique(t).size
    elif p is None:
        p = min(default_knot_count(domain[1] - domain[0], years_per_knot, min_knots, max_knots),
                np.unique(t).size)
    ks = place_knots(domain, int(p), t, placement)
    return make_design(ks, t)


def penalty_rank(S: np.ndarray, rtol: float = 1e-8) -> int:
    w = np.linalg.eigvalsh(S)
    return int(np.sum(w > rtol * w.max()))


def null_space_vectors(knot_set: KnotSet) -> np.ndarray:
    """Columns spanning the penalty null space: constant and linear in time."""
    k = knot_set.knots
    return np.column_stack([np.ones_like(k), k - k.mean()])
