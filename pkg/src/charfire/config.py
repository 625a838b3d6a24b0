"""Run configuration: a flat TOML file of typed keys.

Every key is optional; unset keys take the defaults below.  The resolved
configuration is written into every metadata sidecar together with its hash.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import sys
from dataclasses import dataclass, fields
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from .firehistory import DEFAULT_A_ALPHA, DEFAULT_B_ALPHA, DEFAULT_XI_GRID
from .regularization import DEFAULT_BACKGROUND_GRID, DEFAULT_FOREGROUND_GRID, GRID_CHAIN_FRACTION
from .simulator import DEFAULT_TREND

CONFIG_ENV = "CHARFIRE_CONFIG"

# keys that change where or how fast a run happens but never its numbers
NON_NUMERIC_KEYS = ("out", "workers")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    # inputs
    charcoal: str = ""
    lakes: str = ""
    allow_gaps: bool = False
    model: str = "uni"
    out: str = "run"
    seed: int = 0
    workers: int = 1
    # spline designs (0 = automatic)
    background_knots: int = 0
    foreground_knots: str = "interval"
    knot_placement: str = "quantile"
    years_per_knot: float = 500.0
    min_knots: int = 6
    max_knots: int = 40
    common_interval: float = 0.0
    p_star: int = 0
    # priors and penalties used when no regularization result is present
    sigma0_sq: float = 100.0
    sigma_b_sq: float = 0.1
    sigma_f_sq: float = 100.0
    # penalty grid search
    grid_background: tuple = DEFAULT_BACKGROUND_GRID
    grid_foreground: tuple = DEFAULT_FOREGROUND_GRID
    grid_chain_fraction: float = GRID_CHAIN_FRACTION
    # MCMC
    iterations: int = 30_000
    burn_in: int = 10_000
    thin: int = 10
    chains: int = 4
    blocks: str = "site"
    adapt_every: int = 50
    # fire history
    threshold: str = "auto"
    xi_grid: tuple = DEFAULT_XI_GRID
    a_alpha: float = DEFAULT_A_ALPHA
    b_alpha: float = DEFAULT_B_ALPHA
    # multi-lake hyperpriors (psi_sq = 0: psi_factor x variance of single-lake draws)
    tau_b_min: float = 0.01
    tau_b_max: float = 10.0
    phi_min: float = 0.01
    phi_max: float = 3.0
    psi_sq: float = 0.0
    psi_factor: float = 10.0
    alpha_star_min: float = 10.0
    alpha_star_max: float = 2000.0
    sigma_fri_min: float = 0.01
    sigma_fri_max: float = 2.0
    # simulator (sim_lakes > 1 simulates a network sharing one background)
    sim_lakes: int = 1
    sim_domain_length: float = 4760.0
    sim_interval_length: float = 20.0
    sim_true_mean_fri: float = 116.0
    sim_peak_magnitude: float = 12.0
    sim_peak_decay: int = 1
    sim_mixing_depth: float = 0.5
    sim_background_trend: tuple = DEFAULT_TREND
    sim_lake_id: str = "sim"
    sim_extent_km: float = 40.0
    # scoring
    tolerance_intervals: int = 1
    ci_level: float = 0.95

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            object.__setattr__(self, f.name, _coerce(f.name, v, f.default))
        self.validate()

    def validate(self):
        if self.model not in ("uni", "multi"):
            raise ConfigError(f"model must be 'uni' or 'multi', got {self.model!r}")
        if self.blocks not in ("site", "joint"):
            raise ConfigError("blocks must be 'site' or 'joint'")
        if self.knot_placement not in ("quantile", "even"):
            raise ConfigError("knot_placement must be 'quantile' or 'even'")
        if not self.iterations > self.burn_in >= 0 or self.thin < 1 or self.chains < 1:
            raise ConfigError("need iterations > burn_in >= 0, thin >= 1, chains >= 1")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if min(self.sigma0_sq, self.sigma_b_sq, self.sigma_f_sq, self.a_alpha, self.b_alpha) <= 0:
            raise ConfigError("prior variances and a_alpha, b_alpha must be positive")
        if not self.sigma_b_sq < self.sigma_f_sq:
            raise ConfigError("sigma_b_sq must be smaller than sigma_f_sq")
        if any(not 0.0 <= x <= 1.0 for x in self.xi_grid) or not self.xi_grid:
            raise ConfigError("xi_grid values must lie in [0, 1]")
        if self.threshold != "auto":
            try:
                xi = float(self.threshold)
            except ValueError:
                raise ConfigError(f"threshold must be 'auto' or a number, got {self.threshold!r}") from None
            if not 0.0 <= xi <= 1.0:
                raise ConfigError("threshold must lie in [0, 1]")
        for lo, hi in (("tau_b_min", "tau_b_max"), ("phi_min", "phi_max"),
                       ("alpha_star_min", "alpha_star_max"), ("sigma_fri_min", "sigma_fri_max")):
            if not 0 < getattr(self, lo) < getattr(self, hi):
                raise ConfigError(f"need 0 < {lo} < {hi}")
        if self.foreground_knots != "interval":
            try:
                int(self.foreground_knots)
            except ValueError:
                raise ConfigError("foreground_knots must be 'interval' or an integer") from None
        if not 0 < self.grid_chain_fraction <= 1 or not 0 < self.ci_level < 1:
            raise ConfigError("grid_chain_fraction must lie in (0, 1], ci_level in (0, 1)")
        if self.sim_lakes < 1:
            raise ConfigError("sim_lakes must be >= 1")

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = {}
        for f in fields(self):
            v = getattr(self, f.name)
            d[f.name] = [list(x) if isinstance(x, tuple) else x for x in v] if isinstance(v, tuple) else v
        return d

    def config_hash(self) -> str:
        d = {k: v for k, v in self.to_dict().items() if k not in NON_NUMERIC_KEYS}
        blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()

    @property
    def xi(self) -> float | None:
        return None if self.threshold == "auto" else float(self.threshold)


def _coerce(name, value, default):
    """Convert a TOML value to the type of the field's default."""
    try:
        if isinstance(default, bool):
            if not isinstance(value, bool):
                raise TypeError
            return value
        if isinstance(default, int):
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise TypeError
            return int(value)
        if isinstance(default, float):
            if isinstance(value, bool):
                raise TypeError
            return float(value)
        if isinstance(default, str):
            return str(value)
        if isinstance(default, tuple):
            if name == "sim_background_trend":
                return tuple((float(a), float(b)) for a, b in value)
            return tuple(float(x) for x in value)
    except (TypeError, ValueError):
        raise ConfigError(f"{name}: cannot use {value!r} (expected {type(default).__name__})") from None
    return value


def load_config(path=None, **overrides) -> RunConfig:
    """Read a config file (or the one named by $CHARFIRE_CONFIG), then apply overrides."""
    if path is None:
        path = os.environ.get(CONFIG_ENV) or None
    data = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise FileNotFoundError(f"config file not found: {p}")
        try:
            with p.open("rb") as fh:
                data = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{p}: {exc}") from None
        nested = [k for k, v in data.items() if isinstance(v, dict)]
        if nested:
            raise ConfigError(f"{p}: the config is flat; tables are not allowed ({', '.join(nested)})")
    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    data.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig(**data)
