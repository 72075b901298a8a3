"""Bayesian disproportionality analysis for vaccine adverse-event
surveillance: stratified binomial logistic models with a truncated
mixture prior on log reporting-odds-ratios, negative-control-calibrated
signal detection, and ontology-group enrichment."""

__version__ = "0.1.0"

from .data_model import (FilterPolicy, Report, StratumTable, aggregate,
                         apply_exclusions, filter_aes, parse_canonical,
                         parse_raw_reports)
from .diagnostics import compute_diagnostics, dic, gelman_rubin
from .inference import (coclustering, enrichment_eor, nc_signal_report,
                        posterior_summary, used_components)
from .model import Hyperparams, ModelState, PriorMode, init_state
from .sampler import ChainConfig, PosteriorDraws, run_chain, run_chains
from .simulation import SimulationSpec, run_study, simulate_replicate

__all__ = [
    "FilterPolicy", "Report", "StratumTable", "aggregate",
    "apply_exclusions", "filter_aes", "parse_canonical",
    "parse_raw_reports", "compute_diagnostics", "dic", "gelman_rubin",
    "coclustering", "enrichment_eor", "nc_signal_report",
    "posterior_summary", "used_components", "Hyperparams", "ModelState",
    "PriorMode", "init_state", "ChainConfig", "PosteriorDraws",
    "run_chain", "run_chains", "SimulationSpec", "run_study",
    "simulate_replicate", "__version__",
]
