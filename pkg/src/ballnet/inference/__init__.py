"""Bayesian inference: priors, MCMC, summaries, predictive checks and the
simulation study."""

from .dataset import Dataset, build_dataset
from .diagnostics import PosteriorSummary, ess, posterior_summary, split_rhat
from .layout import ParameterLayout
from .mcmc import MCMCConfig, PosteriorChains, SamplerError, run_mcmc, update_posterior
from .ppc import PPCReport, posterior_predictive_check
from .priors import PRESETS, PriorSpec
from .study import StudyConfig, StudyReport, run_simulation_study

__all__ = [
    "Dataset", "build_dataset", "PosteriorSummary", "ess", "posterior_summary", "split_rhat",
    "ParameterLayout", "MCMCConfig", "PosteriorChains", "SamplerError", "run_mcmc",
    "update_posterior", "PPCReport", "posterior_predictive_check", "PRESETS", "PriorSpec",
    "StudyConfig", "StudyReport", "run_simulation_study",
]
