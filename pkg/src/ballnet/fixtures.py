"""Shipped simulation-study configuration: symmetric 3-5-2 teams with the
default data-generating parameters."""

from __future__ import annotations

import numpy as np

from .model import ModelParams, RandomEffects, RosterState
from .pitch import CovariateConfig, FormationGraph, formation_roster, load_formation

STUDY_FORMATION = "3-5-2"

# Success logit, in CovariateConfig.success order.
TRUE_SUCCESS = {
    "intercept": 2.00, "length": 0.0, "forward": -0.57, "start_half": 0.0,
    "end_third": -0.50, "air": -1.50, "winning": 0.0, "losing": 0.0,
}
TRUE_RECEIVER = {"graph_distance": -0.80, "pass_received": 0.0}
TRUE_HOLDING_POSITION = -2.70
TRUE_HOLDING_SCORE = {"winning": -0.47, "losing": 0.0}

# Parameters whose bias is tracked separately in the study report.
KEY_PARAMETERS = ("alpha[air]", "alpha[forward]", "omega[winning]", "gamma[graph_distance]")


def study_graph() -> FormationGraph:
    return load_formation(STUDY_FORMATION)


def study_covariates(scope: str = "match") -> CovariateConfig:
    return CovariateConfig.for_formations(study_graph(), pass_received_scope=scope)


def study_roster() -> RosterState:
    g = study_graph()
    return formation_roster(g, g)


def true_params(cfg: CovariateConfig | None = None) -> ModelParams:
    cfg = cfg or study_covariates()
    omega = [TRUE_HOLDING_POSITION] * len(cfg.positions) + [TRUE_HOLDING_SCORE[s] for s in cfg.holding_score]
    alpha = [TRUE_SUCCESS[s] for s in cfg.success]
    beta = [0.0] * len(cfg.failure_receiver)
    gamma = [TRUE_RECEIVER[s] for s in cfg.receiver]
    return ModelParams(np.array(omega), np.array(alpha), np.array(beta), np.array(gamma))


def true_effects(cfg: CovariateConfig | None = None) -> RandomEffects:
    """Zero effects: the data-generating standard deviations are 0."""
    cfg = cfg or study_covariates()
    return RandomEffects.zeros(cfg.positions, by="position")
