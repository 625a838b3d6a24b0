"""Fire history from lake-sediment charcoal with Bayesian Poisson point-process models."""

__version__ = "0.1.0"

from .records import (CommonSupport, SampleInterval, SedimentRecord, build_aggregation_matrix,
                      build_common_support, ingest_record, read_charcoal_csv)
from .splines import KnotSet, SplineDesign, evaluate_basis, penalty_matrix, place_knots
from .univariate import (CoefficientState, MCMCControls, PosteriorDraws, UnivariatePriorSpec,
                         lake_design, log_likelihood, log_posterior, run_chain, run_chains)
from .firehistory import (FireProbabilitySeries, apply_threshold, fri_mle, fri_posterior,
                          optimal_threshold, probability_of_fire, summarize_fri)
from .regularization import PenaltyGrid, grid_search, make_holdout
from .multilake import (MultiPriorSpec, effective_range, exponential_covariance,
                        joint_log_posterior, multilake_design, run_multichains)
from .pooling import PoolingPriorSpec, partial_pool_fri
from .simulator import NetworkConfig, SimConfig, score_identification, simulate, simulate_network

__all__ = [
    "__version__",
    "CommonSupport", "SampleInterval", "SedimentRecord", "build_aggregation_matrix",
    "build_common_support", "ingest_record", "read_charcoal_csv",
    "KnotSet", "SplineDesign", "evaluate_basis", "penalty_matrix", "place_knots",
    "CoefficientState", "MCMCControls", "PosteriorDraws", "UnivariatePriorSpec", "lake_design",
    "log_likelihood", "log_posterior", "run_chain", "run_chains",
    "FireProbabilitySeries", "apply_threshold", "fri_mle", "fri_posterior", "optimal_threshold",
    "probability_of_fire", "summarize_fri",
    "PenaltyGrid", "grid_search", "make_holdout",
    "MultiPriorSpec", "effective_range", "exponential_covariance", "joint_log_posterior",
    "multilake_design", "run_multichains",
    "PoolingPriorSpec", "partial_pool_fri",
    "NetworkConfig", "SimConfig", "score_identification", "simulate", "simulate_network",
]
