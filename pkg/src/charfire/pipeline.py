"""End-to-end stages behind the command-line interface.

Every stage reads and writes plain files in the run directory (``cfg.out``):

    simulate    charcoal.csv, lakes.csv, truth.csv
    regularize  regularization.csv
    fit         draws_uni_<lake>.csv (+ draws_multi.csv, hyperparams.csv,
                regional_background.csv), then the fri stage
    fri         probability_of_fire.csv, fri_summary.csv, events.csv
                (+ regional_fri.csv, identification.csv when truth.csv exists)
    report      report/<lake>_<model>_{counts,intensities,probability}.csv

All randomness derives from ``cfg.seed`` and the lake id, so results do not
depend on the order lakes appear in the input.
"""
from __future__ import annotations

import json
import logging
import re
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.special import expit

from . import __version__
from .config import RunConfig
from .firehistory import (EventSeries, FireProbabilitySeries, FRIPosterior, apply_threshold,
                          fri_posterior, optimal_threshold, summarize_fri)
from .io import (read_dicts, read_matrix, write_dicts, write_matrix,
                 write_metadata, write_rows)
from .multilake import (MultiLakeDesign, MultiPosteriorDraws, MultiPriorSpec,
                        export_regional_background, multilake_design, psi_sq_from_univariate,
                        run_multichains)
from .pooling import LakeFRISamples, PoolingPriorSpec, RegionalFRIDraws, partial_pool_fri
from .records import (SedimentRecord, read_charcoal_csv, read_lake_locations, write_charcoal_csv,
                      write_lake_locations)
from .regularization import GridSearchResult, PenaltyGrid, grid_search
from .simulator import GroundTruth, NetworkConfig, SimConfig, score_identification, simulate
from .univariate import (LakeDesign, MCMCControls, PosteriorDraws, UnivariatePriorSpec,
                         chain_seeds, lake_design, run_chains)

logger = logging.getLogger(__name__)

MANIFEST = "run.json"


class RunDirectoryError(FileNotFoundError):
    """A stage needs outputs of an earlier stage that are not in the run directory."""


# ---------------------------------------------------------------------------
# helpers


def lake_key(lake_id: str) -> int:
    return zlib.crc32(lake_id.encode("utf-8"))


def safe_name(lake_id: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", lake_id)


def mcmc_controls(cfg: RunConfig) -> MCMCControls:
    return MCMCControls(iterations=cfg.iterations, burn_in=cfg.burn_in, thin=cfg.thin,
                        chains=cfg.chains, seed=cfg.seed, blocks=cfg.blocks,
                        adapt_every=cfg.adapt_every, workers=cfg.workers)


def design_for(record: SedimentRecord, cfg: RunConfig) -> LakeDesign:
    fg = cfg.foreground_knots if cfg.foreground_knots == "interval" else int(cfg.foreground_knots)
    return lake_design(record, background_knots=cfg.background_knots or None, foreground_knots=fg,
                       placement=cfg.knot_placement, years_per_knot=cfg.years_per_knot,
                       min_knots=cfg.min_knots, max_knots=cfg.max_knots)


def multi_design_for(records, cfg: RunConfig) -> MultiLakeDesign:
    fg = cfg.foreground_knots if cfg.foreground_knots == "interval" else int(cfg.foreground_knots)
    return multilake_design(records, interval_length=cfg.common_interval or None,
                            p_star=cfg.p_star or None, foreground_knots=fg,
                            years_per_knot=cfg.years_per_knot, min_knots=cfg.min_knots,
                            max_knots=cfg.max_knots)


def _out(cfg: RunConfig) -> Path:
    p = Path(cfg.out)
    p.mkdir(parents=True, exist_ok=True)
    return p


def load_records(cfg: RunConfig) -> list[SedimentRecord]:
    """Records from ``cfg.charcoal`` (default: the run directory's charcoal.csv)."""
    out = Path(cfg.out)
    charcoal = Path(cfg.charcoal) if cfg.charcoal else out / "charcoal.csv"
    lakes = Path(cfg.lakes) if cfg.lakes else out / "lakes.csv"
    if not charcoal.is_file():
        raise FileNotFoundError(f"charcoal file not found: {charcoal} (set 'charcoal' or run simulate)")
    locations = None
    if lakes.is_file():
        locations = read_lake_locations(lakes)
    elif cfg.lakes:
        raise FileNotFoundError(f"lake metadata file not found: {lakes}")
    recs = read_charcoal_csv(charcoal, allow_gaps=cfg.allow_gaps, locations=locations)
    if locations is not None:
        missing = sorted(set(recs) - set(locations))
        if missing:
            raise ValueError(f"no location for lakes: {', '.join(missing)}")
    return list(recs.values())


def _read_manifest(cfg: RunConfig) -> dict:
    p = Path(cfg.out) / MANIFEST
    if not p.is_file():
        raise RunDirectoryError(f"{cfg.out}: no completed fit (missing {MANIFEST}); run 'fit' first")
    return json.loads(p.read_text(encoding="utf-8"))


def _write_manifest(cfg: RunConfig, manifest: dict) -> Path:
    p = _out(cfg) / MANIFEST
    manifest = dict(manifest, version=__version__, config_hash=cfg.config_hash())
    p.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return p


# ---------------------------------------------------------------------------
# simulate


def sim_configs(cfg: RunConfig) -> list[SimConfig]:
    if cfg.sim_lakes == 1:
        return [SimConfig(domain_length=cfg.sim_domain_length, interval_length=cfg.sim_interval_length,
                          true_mean_fri=cfg.sim_true_mean_fri, background_trend=cfg.sim_background_trend,
                          peak_magnitude=cfg.sim_peak_magnitude, peak_decay=cfg.sim_peak_decay,
                          mixing_depth=cfg.sim_mixing_depth, seed=cfg.seed, lake_id=cfg.sim_lake_id)]
    return NetworkConfig(n_lakes=cfg.sim_lakes, background_trend=cfg.sim_background_trend,
                         peak_magnitude=cfg.sim_peak_magnitude, peak_decay=cfg.sim_peak_decay,
                         mixing_depth=cfg.sim_mixing_depth, extent_km=cfg.sim_extent_km,
                         seed=cfg.seed).lake_configs()


def truth_rows(record: SedimentRecord, truth: GroundTruth) -> list[list]:
    rows = []
    for i, (t, b) in enumerate(zip(record.top_ages, record.bottom_ages)):
        times = truth.fire_times[truth.fire_intervals == i]
        rows.append([record.lake_id, i, float(t), float(b), int(truth.indicator[i]),
                     ";".join(repr(float(x)) for x in times)])
    return rows


TRUTH_HEADER = ("lake_id", "interval_index", "top_age", "bottom_age", "fire_indicator", "fire_times")


def read_truth(path) -> dict[str, GroundTruth]:
    by_lake: dict[str, list[dict]] = {}
    for r in read_dicts(path):
        by_lake.setdefault(r["lake_id"], []).append(r)
    out = {}
    for lake, rows in by_lake.items():
        rows.sort(key=lambda r: int(r["interval_index"]))
        ind = np.array([int(r["fire_indicator"]) for r in rows])
        times, idx = [], []
        for r in rows:
            for x in filter(None, r["fire_times"].split(";")):
                times.append(float(x))
                idx.append(int(r["interval_index"]))
        out[lake] = GroundTruth(np.array(times), ind, np.array(idx, dtype=int))
    return out


def cmd_simulate(cfg: RunConfig) -> list[Path]:
    out = _out(cfg)
    configs = sim_configs(cfg)
    records, truths = zip(*[simulate(c) for c in configs])
    paths = [out / "charcoal.csv", out / "lakes.csv", out / "truth.csv"]
    write_charcoal_csv(paths[0], records)
    write_lake_locations(paths[1], records)
    write_rows(paths[2], TRUTH_HEADER, [r for rec, t in zip(records, truths) for r in truth_rows(rec, t)])
    sims = [c.to_dict() for c in configs]
    for p in paths:
        write_metadata(p, cfg, stage="simulate", simulations=sims,
                       n_fires={r.lake_id: t.n_fires for r, t in zip(records, truths)})
    return paths


# ---------------------------------------------------------------------------
# regularize


def regularize_lake(record: SedimentRecord, cfg: RunConfig) -> GridSearchResult:
    grid = PenaltyGrid(cfg.grid_background, cfg.grid_foreground)
    # per-lake seed for both the hold-out split and the grid chains
    seed = chain_seeds(cfg.seed, 1, lake_key(record.lake_id), 0x4E6)[0]
    controls = replace(mcmc_controls(cfg), seed=seed)
    return grid_search(record, design_for(record, cfg), grid, controls, cfg.sigma0_sq,
                       holdout_seed=seed, fraction=cfg.grid_chain_fraction, workers=cfg.workers)


def cmd_regularize(cfg: RunConfig) -> Path:
    records = load_records(cfg)
    rows, detail = [], {}
    for rec in records:
        res = regularize_lake(rec, cfg)
        rows.extend(res.rows(rec.lake_id))
        detail[rec.lake_id] = {"holdout": res.split.holdout, "selected": [res.sigma_b_sq, res.sigma_f_sq],
                               "failed_cells": {f"{c.sigma_b_sq},{c.sigma_f_sq}": c.error
                                                for c in res.cells if c.error},
                               "rhat": {f"{c.sigma_b_sq},{c.sigma_f_sq}": c.rhat
                                        for c in res.cells if c.admissible}}
    path = _out(cfg) / "regularization.csv"
    write_dicts(path, rows, ["lake_id", "sigma_b", "sigma_f", "admissible", "loss", "selected"])
    write_metadata(path, cfg, stage="regularize", holdout_fraction=0.25, lakes=detail)
    return path


def selected_penalties(cfg: RunConfig, lake_ids) -> tuple[dict, list[str]]:
    """Per-lake (sigma_b^2, sigma_f^2): regularization.csv if present, else the config defaults."""
    path = Path(cfg.out) / "regularization.csv"
    chosen = {}
    if path.is_file():
        for r in read_dicts(path):
            if r["selected"] == "true":
                chosen[r["lake_id"]] = (float(r["sigma_b"]), float(r["sigma_f"]))
    warnings = []
    out = {}
    for lake in lake_ids:
        if lake in chosen:
            out[lake] = chosen[lake]
        else:
            out[lake] = (cfg.sigma_b_sq, cfg.sigma_f_sq)
            warnings.append(f"{lake}: no regularization result; using default penalties "
                            f"({cfg.sigma_b_sq}, {cfg.sigma_f_sq})")
    for w in warnings:
        logger.warning(w)
    return out, warnings


# ---------------------------------------------------------------------------
# fit


def fit_univariate(record: SedimentRecord, cfg: RunConfig, sigma_b_sq: float | None = None,
                   sigma_f_sq: float | None = None, design: LakeDesign | None = None) -> PosteriorDraws:
    priors = UnivariatePriorSpec(cfg.sigma0_sq, cfg.sigma_b_sq if sigma_b_sq is None else sigma_b_sq,
                                 cfg.sigma_f_sq if sigma_f_sq is None else sigma_f_sq)
    design = design_for(record, cfg) if design is None else design
    draws = run_chains(record, design, priors, mcmc_controls(cfg), key=(lake_key(record.lake_id),))
    draws.metadata.update({"sigma_b_sq": priors.sigma_b_sq, "sigma_f_sq": priors.sigma_f_sq,
                           "sigma0_sq": priors.sigma0_sq,
                           "background_knots": design.background.knot_set.knots,
                           "foreground_knots": design.foreground.knot_set.knots})
    return draws


def fit_multi(records, cfg: RunConfig, penalties: dict, uni_draws: dict,
              design: MultiLakeDesign | None = None) -> tuple[MultiPosteriorDraws, MultiPriorSpec]:
    design = multi_design_for(records, cfg) if design is None else design
    psi_sq = cfg.psi_sq or psi_sq_from_univariate([uni_draws[r.lake_id].beta_b for r in records],
                                                  cfg.psi_factor)
    priors = MultiPriorSpec(tuple(penalties[r.lake_id][0] for r in records),
                            tuple(penalties[r.lake_id][1] for r in records),
                            sigma0_sq=cfg.sigma0_sq, psi_sq=psi_sq,
                            tau_b_bounds=(cfg.tau_b_min, cfg.tau_b_max),
                            phi_bounds=(cfg.phi_min, cfg.phi_max))
    draws = run_multichains(records, design, priors, mcmc_controls(cfg), key=(0x3B11,))
    draws.metadata.update({"psi_sq": psi_sq, "p_star": design.p_star, "n_star": design.n_star,
                           "common_interval": design.support.interval_length,
                           "grid_start": design.support.start, "lake_ids": list(design.lake_ids),
                           "regional_knots": design.regional.knot_set.knots})
    return draws, priors


def _uni_draws_path(out: Path, lake_id: str) -> Path:
    return out / f"draws_uni_{safe_name(lake_id)}.csv"


def multi_column_names(draws: MultiPosteriorDraws, lake_ids) -> list[str]:
    cols = ["chain"]
    p = draws.beta_b.shape[2]
    for j, lake in enumerate(lake_ids):
        cols += [f"{lake}:beta0_b"] + [f"{lake}:beta_b_{i}" for i in range(p)]
        cols += [f"{lake}:beta0_f"] + [f"{lake}:beta_f_{i}" for i in range(draws.beta_f[j].shape[1])]
    cols += ["mu0_b"] + [f"mu_b_{i}" for i in range(p)] + ["tau_b", "phi", "log_post"]
    return cols


def multi_as_matrix(draws: MultiPosteriorDraws) -> np.ndarray:
    blocks = [draws.chain[:, None]]
    for j in range(draws.k):
        blocks += [draws.beta0_b[:, j, None], draws.beta_b[:, j, :], draws.beta0_f[:, j, None],
                   draws.beta_f[j]]
    blocks += [draws.mu0_b[:, None], draws.mu_b, draws.tau_b[:, None], draws.phi[:, None],
               draws.log_post[:, None]]
    return np.hstack(blocks)


def multi_from_matrix(M: np.ndarray, k: int, p_star: int, p_f: list[int]) -> MultiPosteriorDraws:
    c = 1
    b0b, bb, b0f, bf = [], [], [], []
    for j in range(k):
        b0b.append(M[:, c]); c += 1
        bb.append(M[:, c:c + p_star]); c += p_star
        b0f.append(M[:, c]); c += 1
        bf.append(M[:, c:c + p_f[j]]); c += p_f[j]
    mu0 = M[:, c]; c += 1
    mu_b = M[:, c:c + p_star]; c += p_star
    tau, phi, lp = M[:, c], M[:, c + 1], M[:, c + 2]
    return MultiPosteriorDraws(np.column_stack(b0b), np.stack(bb, axis=1), np.column_stack(b0f),
                               tuple(bf), mu0, mu_b, tau, phi, lp, M[:, 0].astype(int))


def cmd_fit(cfg: RunConfig) -> list[Path]:
    out = _out(cfg)
    records = load_records(cfg)
    if cfg.model == "multi" and len(records) < 2:
        raise ValueError("the multi-lake model needs at least two lakes in the input")
    penalties, warnings = selected_penalties(cfg, [r.lake_id for r in records])
    paths = []
    uni = {}
    for rec in records:
        sb, sf = penalties[rec.lake_id]
        draws = fit_univariate(rec, cfg, sb, sf)
        uni[rec.lake_id] = draws
        p = _uni_draws_path(out, rec.lake_id)
        write_matrix(p, draws.column_names(), draws.as_matrix())
        write_metadata(p, cfg, stage="fit", model="uni", lake_id=rec.lake_id,
                       acceptance_rates=draws.acceptance_rates, chains=draws.metadata["chains"],
                       warnings=draws.metadata["warnings"] + warnings,
                       sigma_b_sq=sb, sigma_f_sq=sf, sigma0_sq=cfg.sigma0_sq,
                       background_knots=draws.metadata["background_knots"],
                       foreground_knots=draws.metadata["foreground_knots"])
        paths.append(p)
    manifest = {"model": cfg.model, "lakes": [r.lake_id for r in records],
                "penalties": {k: list(v) for k, v in penalties.items()}, "warnings": warnings}
    if cfg.model == "multi":
        design = multi_design_for(records, cfg)
        mdraws, priors = fit_multi(records, cfg, penalties, uni, design)
        p = out / "draws_multi.csv"
        write_matrix(p, multi_column_names(mdraws, design.lake_ids), multi_as_matrix(mdraws))
        write_metadata(p, cfg, stage="fit", model="multi", acceptance_rates=mdraws.acceptance_rates,
                       warnings=mdraws.metadata["warnings"], psi_sq=priors.psi_sq,
                       p_star=design.p_star, n_star=design.n_star,
                       common_interval=design.support.interval_length,
                       grid_start=design.support.start, grid_origin="youngest top age",
                       regional_knots=design.regional.knot_set.knots,
                       tau_b_bounds=priors.tau_b_bounds, phi_bounds=priors.phi_bounds)
        paths.append(p)
        paths += write_multi_tables(cfg, mdraws, design)
        manifest.update(psi_sq=priors.psi_sq, p_star=design.p_star,
                        p_f=[int(d.p) for d in design.foreground])
    paths.append(_write_manifest(cfg, manifest))
    paths += cmd_fri(cfg, records=records)
    return paths


def write_multi_tables(cfg: RunConfig, draws: MultiPosteriorDraws, design: MultiLakeDesign) -> list[Path]:
    out = _out(cfg)
    p1 = out / "regional_background.csv"
    write_dicts(p1, export_regional_background(draws, design, cfg.ci_level),
                ["cell_start", "cell_end", "lake_id", "intensity_mean", "intensity_lo95",
                 "intensity_hi95", "n_records_covering"])
    write_metadata(p1, cfg, stage="fit", model="multi", units="particles per year",
                   grid_origin="youngest top age", grid_start=design.support.start,
                   common_interval=design.support.interval_length)
    p2 = out / "hyperparams.csv"
    write_rows(p2, ["sample_index", "chain", "tau_b", "phi", "mu0_b", "effective_range"],
               ([i, int(draws.chain[i]), draws.tau_b[i], draws.phi[i], draws.mu0_b[i],
                 float(draws.effective_range()[i])] for i in range(len(draws))))
    write_metadata(p2, cfg, stage="fit", model="multi", effective_range="ln(20)/phi km")
    return [p1, p2]


# ---------------------------------------------------------------------------
# fire history


@dataclass
class LakeHistory:
    lake_id: str
    model: str
    series: FireProbabilitySeries
    xi: float
    cv: dict
    events: EventSeries
    posterior: FRIPosterior
    summary: dict = field(default_factory=dict)


def _alpha_seed(cfg: RunConfig, lake_id: str, model: str) -> int:
    return chain_seeds(cfg.seed, 1, lake_key(lake_id), 0xF1, 1 if model == "multi" else 0)[0]


def lake_history(series: FireProbabilitySeries, cfg: RunConfig, model: str, xi=None) -> LakeHistory:
    """Fire events and the conjugate FRI posterior at ``xi`` (None: CV-optimal)."""
    seed = _alpha_seed(cfg, series.lake_id, model)
    if xi is None:
        choice = optimal_threshold(series, cfg.xi_grid, cfg.a_alpha, cfg.b_alpha, seed)
        xi, cv, post = choice.xi_opt, choice.cv, choice.posterior
    else:
        post = fri_posterior(apply_threshold(series, xi), cfg.a_alpha, cfg.b_alpha, seed)
        cv = {float(xi): post.cv}
    events = apply_threshold(series, xi)
    summary = summarize_fri(post, cfg.ci_level) if post.n_draws else {}
    return LakeHistory(series.lake_id, model, series, float(xi), cv, events, post, summary)


def uni_series(draws: PosteriorDraws, design: LakeDesign, record: SedimentRecord):
    return FireProbabilitySeries.from_draws(draws, design, record)


def multi_series(draws: MultiPosteriorDraws, design: MultiLakeDesign, records) -> list:
    out = []
    for j, rec in enumerate(records):
        log_b, log_f = draws.log_intensities(design, j)
        out.append(FireProbabilitySeries(expit(log_f - log_b), rec.top_ages, rec.bottom_ages, rec.lake_id))
    return out


def pool_histories(histories: list[LakeHistory], cfg: RunConfig) -> RegionalFRIDraws:
    lakes = [LakeFRISamples.from_events(h.lake_id, h.events) for h in histories]
    priors = PoolingPriorSpec((cfg.alpha_star_min, cfg.alpha_star_max),
                              (cfg.sigma_fri_min, cfg.sigma_fri_max))
    return partial_pool_fri(lakes, priors, mcmc_controls(cfg), key=(0x9001,))


def load_uni_draws(cfg: RunConfig, lake_id: str) -> PosteriorDraws:
    p = _uni_draws_path(Path(cfg.out), lake_id)
    if not p.is_file():
        raise RunDirectoryError(f"missing posterior draws for {lake_id}: {p}")
    header, M = read_matrix(p)
    if M.shape[0] == 0:
        raise ValueError(f"{p}: no posterior draws")
    pb = sum(h.startswith("beta_b_") for h in header)
    pf = sum(h.startswith("beta_f_") for h in header)
    return PosteriorDraws.from_matrix(M, pb, pf)


def load_multi_draws(cfg: RunConfig, design: MultiLakeDesign) -> MultiPosteriorDraws:
    p = Path(cfg.out) / "draws_multi.csv"
    if not p.is_file():
        raise RunDirectoryError(f"missing multi-lake posterior draws: {p}")
    header, M = read_matrix(p)
    if M.shape[0] == 0:
        raise ValueError(f"{p}: no posterior draws")
    return multi_from_matrix(M, design.k, design.p_star, [d.p for d in design.foreground])


def _ordered_records(cfg: RunConfig, manifest: dict, records=None):
    records = load_records(cfg) if records is None else records
    by_id = {r.lake_id: r for r in records}
    missing = [l for l in manifest["lakes"] if l not in by_id]
    if missing:
        raise ValueError(f"input no longer contains fitted lakes: {', '.join(missing)}")
    return [by_id[l] for l in manifest["lakes"]]


def cmd_fri(cfg: RunConfig, records=None, xi=None) -> list[Path]:
    """Probabilities, events and FRI summaries from the stored draws."""
    out = _out(cfg)
    manifest = _read_manifest(cfg)
    records = _ordered_records(cfg, manifest, records)
    xi = cfg.xi if xi is None else xi
    uni_hist = []
    for rec in records:
        draws = load_uni_draws(cfg, rec.lake_id)
        uni_hist.append(lake_history(uni_series(draws, design_for(rec, cfg), rec), cfg, "uni", xi))
    rows = [_summary_row(h, h.summary) for h in uni_hist]
    shown = uni_hist
    paths = []
    pooled = None
    if manifest["model"] == "multi":
        design = multi_design_for(records, cfg)
        mdraws = load_multi_draws(cfg, design)
        multi_hist = [lake_history(s, cfg, "multi", xi) for s in multi_series(mdraws, design, records)]
        pooled = pool_histories(multi_hist, cfg)
        summ = pooled.summary(cfg.ci_level)
        for h in multi_hist:
            a = summ["alpha"][h.lake_id]
            rows.append(_summary_row(h, {"mean": a["mean"], "lo": a["lo"], "hi": a["hi"],
                                         "ci_width": a["ci_width"]}))
        p = out / "probability_of_fire_uni.csv"
        _write_probability(p, uni_hist, cfg)
        paths.append(p)
        shown = multi_hist
        p = out / "regional_fri.csv"
        reg = [{"quantity": "alpha_star", "lake_id": "", **_ci(summ["alpha_star"])},
               {"quantity": "sigma_fri", "lake_id": "", **_ci(summ["sigma_fri"])}]
        reg += [{"quantity": "alpha", "lake_id": lake, **_ci(v)} for lake, v in summ["alpha"].items()]
        write_dicts(p, reg, ["quantity", "lake_id", "mean", "lo95", "hi95", "ci_width"])
        write_metadata(p, cfg, stage="fri", acceptance_rates=pooled.acceptance_rates,
                       thresholds={h.lake_id: h.xi for h in multi_hist},
                       samples_per_lake=pooled.metadata.get("samples_per_lake"),
                       alpha_star_bounds=[cfg.alpha_star_min, cfg.alpha_star_max],
                       sigma_fri_bounds=[cfg.sigma_fri_min, cfg.sigma_fri_max])
        paths.append(p)
    p = out / "probability_of_fire.csv"
    _write_probability(p, shown, cfg)
    paths.append(p)
    p = out / "fri_summary.csv"
    write_dicts(p, rows, ["lake_id", "model", "xi_opt", "fri_mean", "fri_lo95", "fri_hi95", "ci_width"])
    hists = uni_hist + (shown if pooled is not None else [])
    write_metadata(p, cfg, stage="fri", threshold="auto" if xi is None else xi,
                   a_alpha=cfg.a_alpha, b_alpha=cfg.b_alpha,
                   cv={f"{h.lake_id}/{h.model}": h.cv for h in hists},
                   dropped_samples={f"{h.lake_id}/{h.model}": h.posterior.n_dropped for h in hists},
                   multi_fri_source="partial pooling" if pooled is not None else None)
    paths.append(p)
    p = out / "events.csv"
    ev = []
    for h in shown:
        s_idx, times = h.events.long_format()
        ev.extend([h.lake_id, int(s), float(t)] for s, t in zip(s_idx, times))
    write_rows(p, ["lake_id", "sample_index", "event_time"], ev)
    write_metadata(p, cfg, stage="fri", model=manifest["model"],
                   thresholds={h.lake_id: h.xi for h in shown},
                   event_time="midpoint of the first interval of each run of exceedances")
    paths.append(p)
    truth_path = out / "truth.csv"
    if truth_path.is_file():
        truths = read_truth(truth_path)
        ident = []
        for h in shown:
            if h.lake_id in truths:
                sc = score_identification(h.events.z, truths[h.lake_id], cfg.tolerance_intervals)
                ident.append({"lake_id": h.lake_id, "model": h.model, "xi": h.xi, **sc})
        if ident:
            p = out / "identification.csv"
            write_dicts(p, ident)
            write_metadata(p, cfg, stage="fri", tolerance_intervals=cfg.tolerance_intervals,
                           rule="interval identified when Z=1 in more than half the samples")
            paths.append(p)
    return paths


def _ci(s: dict) -> dict:
    return {"mean": s["mean"], "lo95": s["lo"], "hi95": s["hi"], "ci_width": s["ci_width"]}


def _summary_row(h: LakeHistory, s: dict) -> dict:
    nan = float("nan")
    return {"lake_id": h.lake_id, "model": h.model, "xi_opt": h.xi, "fri_mean": s.get("mean", nan),
            "fri_lo95": s.get("lo", nan), "fri_hi95": s.get("hi", nan), "ci_width": s.get("ci_width", nan)}


def _write_probability(path: Path, histories, cfg: RunConfig):
    rows = []
    for h in histories:
        lo, hi = h.series.band(cfg.ci_level)
        mean = h.series.mean
        rows.extend([h.lake_id, t, b, m, l, u]
                    for t, b, m, l, u in zip(h.series.top_ages, h.series.bottom_ages, mean, lo, hi))
    write_rows(path, ["lake_id", "top_age", "bottom_age", "p_mean", "p_lo95", "p_hi95"], rows)
    write_metadata(path, cfg, stage="fri", models=sorted({h.model for h in histories}),
                   ci_level=cfg.ci_level)


# ---------------------------------------------------------------------------
# report


def _band(x: np.ndarray, level: float):
    q = (1.0 - level) / 2.0
    lo, hi = np.quantile(x, [q, 1.0 - q], axis=0)
    return x.mean(axis=0), lo, hi


def report_tables(record: SedimentRecord, log_b: np.ndarray, log_f: np.ndarray, xi: float,
                  level: float = 0.95) -> dict[str, tuple[list[str], list[list]]]:
    """Plot-ready tables for one lake from per-draw log intensities (draws, n)."""
    if log_b.shape[0] == 0:
        raise ValueError(f"{record.lake_id}: no posterior draws to report")
    lam_b, lam_f = np.exp(log_b), np.exp(log_f)
    t, b = record.top_ages, record.bottom_ages
    m, lo, hi = _band(lam_b + lam_f, level)
    counts = (["top_age", "bottom_age", "count", "mu_mean", "mu_lo95", "mu_hi95"],
              [[t[i], b[i], int(record.counts[i]), m[i], lo[i], hi[i]] for i in range(len(record))])
    bm, bl, bh = _band(lam_b, level)
    fm, fl, fh = _band(lam_f, level)
    inten = (["top_age", "bottom_age", "background_mean", "background_lo95", "background_hi95",
              "foreground_mean", "foreground_lo95", "foreground_hi95"],
             [[t[i], b[i], bm[i], bl[i], bh[i], fm[i], fl[i], fh[i]] for i in range(len(record))])
    pm, pl, ph = _band(expit(log_f - log_b), level)
    prob = (["top_age", "bottom_age", "p_mean", "p_lo95", "p_hi95", "threshold"],
            [[t[i], b[i], pm[i], pl[i], ph[i], xi] for i in range(len(record))])
    return {"counts": counts, "intensities": inten, "probability": prob}


def cmd_report(cfg: RunConfig) -> list[Path]:
    out = Path(cfg.out)
    manifest = _read_manifest(cfg)
    records = _ordered_records(cfg, manifest)
    fri_path = out / "fri_summary.csv"
    if not fri_path.is_file():
        raise RunDirectoryError(f"{out}: incomplete run (missing fri_summary.csv)")
    xi_of = {(r["lake_id"], r["model"]): float(r["xi_opt"]) for r in read_dicts(fri_path)}
    rdir = out / "report"
    rdir.mkdir(exist_ok=True)
    paths = []

    def emit(rec, model, log_b, log_f):
        tables = report_tables(rec, log_b, log_f, xi_of[(rec.lake_id, model)], cfg.ci_level)
        for name, (header, rows) in tables.items():
            p = rdir / f"{safe_name(rec.lake_id)}_{model}_{name}.csv"
            write_rows(p, header, rows)
            write_metadata(p, cfg, stage="report", lake_id=rec.lake_id, model=model, panel=name)
            paths.append(p)

    for rec in records:
        draws = load_uni_draws(cfg, rec.lake_id)
        eta_b, eta_f = draws.eta(design_for(rec, cfg))
        log_len = np.log(rec.lengths)
        emit(rec, "uni", eta_b + log_len, eta_f + log_len)
    if manifest["model"] == "multi":
        design = multi_design_for(records, cfg)
        mdraws = load_multi_draws(cfg, design)
        for j, rec in enumerate(records):
            emit(rec, "multi", *mdraws.log_intensities(design, j))
        p = rdir / "regional_background.csv"
        write_dicts(p, export_regional_background(mdraws, design, cfg.ci_level),
                    ["cell_start", "cell_end", "lake_id", "intensity_mean", "intensity_lo95",
                     "intensity_hi95", "n_records_covering"])
        write_metadata(p, cfg, stage="report", panel="regional background")
        paths.append(p)
    return paths

