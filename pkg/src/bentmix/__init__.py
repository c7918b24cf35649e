"""Bayesian mixture bent-cable regression for longitudinal data.

Fits hierarchical changepoint models in which each individual's trend is
either a smooth bent cable or an abrupt broken stick, with AR(p) noise,
via Metropolis-within-Gibbs sampling.  Includes DIC model comparison,
posterior summaries, and a simulation/replication harness.
"""

__version__ = "0.1.0"

from .data import LongitudinalDataset, Profile, load_csv, reduce_for_dic, write_csv
from .model import (
    ArCoefs,
    BentCableCoefs,
    IndividualParams,
    PopulationParams,
    TransitionCoefs,
    ar_design,
    ar_stationary,
    bend_basis,
    bent_cable,
    conditional_loglik,
    critical_time_point,
)
from .priors import Hyperparameters, default_hyperparameters, elicit_scale_matrices
from .sampler import BentCableSampler, ChainOutput, ChainSettings, run_chain
from .selection import DicReport, compare_models, compute_dic, conditional_deviance
from .simulate import ScenarioSpec, builtin_scenario, generate, replicate_study
from .summarize import (
    fitted_individual,
    fitted_population,
    summarize_population,
)

__all__ = [
    "__version__",
    "LongitudinalDataset",
    "Profile",
    "load_csv",
    "write_csv",
    "reduce_for_dic",
    "ArCoefs",
    "BentCableCoefs",
    "TransitionCoefs",
    "IndividualParams",
    "PopulationParams",
    "bend_basis",
    "bent_cable",
    "critical_time_point",
    "ar_design",
    "ar_stationary",
    "conditional_loglik",
    "Hyperparameters",
    "default_hyperparameters",
    "elicit_scale_matrices",
    "BentCableSampler",
    "ChainOutput",
    "ChainSettings",
    "run_chain",
    "DicReport",
    "compute_dic",
    "compare_models",
    "conditional_deviance",
    "ScenarioSpec",
    "builtin_scenario",
    "generate",
    "replicate_study",
    "summarize_population",
    "fitted_individual",
    "fitted_population",
]
