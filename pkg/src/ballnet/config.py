"""Run configuration file (JSON, schema ``ballnet-config/1``).

Every section is optional; an empty file ``{}`` gives the shipped simulation
study design: two 3-5-2 teams, the default data-generating parameters,
100 seasons of 1,000 passes with random goals, the failure-receiver factor
left out of the fit and prior preset ``prior2``. Example::

    {
      "schema": "ballnet-config/1",
      "formations": ["4-4-2", "3-5-2"],
      "covariates": {"pass_received_scope": "season"},
      "truths": {"alpha": {"air": -1.2}, "omega": {"winning": -0.3}},
      "random_effects": {"sd": [0.3, 0.0, 0.2], "corr": [0.0, 0.5, 0.0]},
      "simulate": {"mode": "wall_clock", "T": 90, "n_matches": 38},
      "likelihood": {"model_failure_receiver": true, "unit_by": "player"},
      "mcmc": {"chains": 4, "warmup": 2000, "iters": 5000},
      "prior": "prior1",
      "ppc": {"mode": "conditional", "max_draws": 1000},
      "study": {"n_seasons": 20, "passes": 1000}
    }

Formations are shipped names or paths to formation JSON files. ``truths``
override the default coefficient values by covariate name; coefficients not
named keep the default (0 for covariates the default table does not list).
``random_effects.corr`` lists the correlations of (success, failure
receiver), (success, success receiver) and (failure receiver, success
receiver).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import jsonschema
import numpy as np

from . import fixtures
from . import rng as rngmod
from .model import ModelError, ModelParams, RandomEffects
from .pitch import CovariateConfig, FormationGraph, formation_roster, load_formation
from .inference.mcmc import MCMCConfig
from .inference.priors import DEFAULT_PRESET, PRESETS, PriorSpec

CONFIG_SCHEMA_TAG = "ballnet-config/1"

_num = {"type": "number"}
_pos_int = {"type": "integer", "minimum": 1}
_names = {"type": "array", "items": {"type": "string"}}
_coefs = {"type": "object", "additionalProperties": _num}


def _section(props: dict) -> dict:
    return {"type": "object", "properties": props, "additionalProperties": False}


CONFIG_SCHEMA = _section({
    "schema": {"const": CONFIG_SCHEMA_TAG},
    "formations": {"type": "array", "items": {"type": "string"}, "minItems": 2, "maxItems": 2},
    "covariates": _section({
        "positions": _names, "holding_score": _names, "success": _names, "receiver": _names,
        "failure_receiver": _names, "pass_received_scope": {"enum": ["match", "season"]},
    }),
    "truths": _section({"omega": _coefs, "alpha": _coefs, "beta": _coefs, "gamma": _coefs}),
    "random_effects": _section({
        "sd": {"type": "array", "items": {"type": "number", "minimum": 0}, "minItems": 3, "maxItems": 3},
        "corr": {"type": "array", "items": {"type": "number", "exclusiveMinimum": -1, "exclusiveMaximum": 1},
                 "minItems": 3, "maxItems": 3},
    }),
    "simulate": _section({
        "mode": {"enum": ["wall_clock", "pass_count"]},
        "T": {"type": "number", "exclusiveMinimum": 0},
        "short_season": {"type": "boolean"},
        "passes": _pos_int,
        "n_matches": _pos_int,
        "goals": {"oneOf": [
            {"enum": ["random", "none"]},
            {"type": "array", "items": {"type": "array", "prefixItems": [
                {"type": "number", "minimum": 0}, {"enum": [1, 2]}], "minItems": 2, "maxItems": 2}},
        ]},
        "goal_rate": {"type": "number", "exclusiveMinimum": 0},
        "equalizer": {"type": "number", "minimum": 0, "maximum": 1},
        "format": {"enum": ["csv", "jsonl"]},
        "team_names": {"type": "array", "items": {"type": "string"}, "minItems": 2, "maxItems": 2},
    }),
    "likelihood": _section({
        "model_failure_receiver": {"type": "boolean"},
        "unit_by": {"enum": ["position", "player"]},
        "strict": {"type": "boolean"},
    }),
    "mcmc": _section({
        "chains": _pos_int, "warmup": {"type": "integer", "minimum": 0}, "iters": _pos_int,
        "thin": _pos_int, "init": {"enum": ["map", "prior", "zero"]},
        "init_scale": {"type": "number", "exclusiveMinimum": 0},
        "target_accept": {"type": "number", "minimum": 0.25, "maximum": 0.45},
    }),
    "prior": {"oneOf": [
        {"enum": sorted(PRESETS)},
        _section({"fixed_effect_sd": {"type": "number", "exclusiveMinimum": 0},
                  "lkj_shape": {"type": "number", "exclusiveMinimum": 0},
                  "scale_rate": {"type": "number", "exclusiveMinimum": 0}}),
    ]},
    "ppc": _section({"mode": {"enum": ["conditional", "simulate"]}, "max_draws": _pos_int}),
    "study": _section({"n_seasons": _pos_int, "passes": _pos_int,
                       "goal_rate": {"type": "number", "exclusiveMinimum": 0}}),
})


class ConfigError(ModelError):
    """Invalid configuration; the message starts with the offending field path."""


@dataclass(frozen=True)
class SimulateSection:
    mode: str = "pass_count"
    T: float = 90.0
    short_season: bool = False
    passes: int = 1000
    n_matches: int = 100
    goals: Any = "random"
    goal_rate: float = 2.7 / 90.0
    equalizer: float = 0.7
    format: str = "csv"
    team_names: tuple[str, str] = ("home", "away")


@dataclass(frozen=True)
class RunConfig:
    raw: dict
    digest: str
    formations: tuple[FormationGraph, FormationGraph]
    covariates: CovariateConfig
    truths: ModelParams
    effect_sd: np.ndarray
    effect_corr: np.ndarray
    simulate: SimulateSection
    model_failure_receiver: bool
    unit_by: str
    strict: bool
    mcmc: dict
    prior: PriorSpec
    prior_name: str
    ppc_mode: str
    ppc_max_draws: int
    study: dict = field(default_factory=dict)

    def mcmc_config(self, seed: int, threads: int = 1) -> MCMCConfig:
        return MCMCConfig(seed=seed, threads=threads, **self.mcmc)

    def roster(self):
        return formation_roster(*self.formations)

    def graphs(self) -> dict[int, FormationGraph]:
        return {1: self.formations[0], 2: self.formations[1]}

    def effects(self, seed: int) -> RandomEffects:
        """Random effects for simulation: zero unless ``random_effects.sd``
        is set, else one MVN draw per position from stream ``(seed,)``."""
        positions = self.covariates.positions
        if not np.any(self.effect_sd > 0):
            return RandomEffects.zeros(positions, by="position")
        cov = self.effect_corr * np.outer(self.effect_sd, self.effect_sd)
        w, v = np.linalg.eigh(cov)
        root = v @ np.diag(np.sqrt(np.clip(w, 0.0, None)))
        z = rngmod.stream(seed).standard_normal((len(positions), 3))
        return RandomEffects(z @ root.T, positions, "position")


def _path(err: jsonschema.ValidationError) -> str:
    parts = [str(p) for p in err.absolute_path]
    return ".".join(parts) if parts else "<root>"


def _coef_vector(names, defaults: dict, override: dict, where: str) -> np.ndarray:
    unknown = sorted(set(override) - set(names))
    if unknown:
        raise ConfigError(f"truths.{where}.{unknown[0]}: not a covariate of this configuration")
    return np.array([float(override.get(n, defaults.get(n, 0.0))) for n in names])


def parse_config(raw: dict, text: bytes | None = None) -> RunConfig:
    try:
        jsonschema.validate(raw, CONFIG_SCHEMA)
    except jsonschema.ValidationError as err:
        best = jsonschema.exceptions.best_match([err])
        raise ConfigError(f"{_path(best)}: {best.message}") from None
    text = text if text is not None else json.dumps(raw, sort_keys=True).encode()
    names = raw.get("formations", [fixtures.STUDY_FORMATION] * 2)
    formations = []
    for k, n in enumerate(names):
        try:
            formations.append(load_formation(n))
        except (OSError, ModelError, ValueError, KeyError) as exc:
            raise ConfigError(f"formations.{k}: {exc}") from None
    cov_raw = dict(raw.get("covariates", {}))
    if "positions" not in cov_raw:
        cov_raw["positions"] = list(CovariateConfig.for_formations(*formations).positions)
    try:
        cov = CovariateConfig.from_dict(cov_raw)
    except ModelError as exc:
        raise ConfigError(f"covariates: {exc}") from None
    missing = [p for f in formations for p in f.positions if p not in cov.positions]
    if missing:
        raise ConfigError(f"covariates.positions: formation position {missing[0]!r} not listed")

    t = raw.get("truths", {})
    hold_default = {p: fixtures.TRUE_HOLDING_POSITION for p in cov.positions} | fixtures.TRUE_HOLDING_SCORE
    truths = ModelParams(
        _coef_vector(cov.holding_names, hold_default, t.get("omega", {}), "omega"),
        _coef_vector(cov.success, fixtures.TRUE_SUCCESS, t.get("alpha", {}), "alpha"),
        _coef_vector(cov.failure_receiver, {}, t.get("beta", {}), "beta"),
        _coef_vector(cov.receiver, fixtures.TRUE_RECEIVER, t.get("gamma", {}), "gamma"),
    )
    re = raw.get("random_effects", {})
    corr = np.eye(3)
    for (a, b), v in zip(((0, 1), (0, 2), (1, 2)), re.get("corr", [0.0, 0.0, 0.0])):
        corr[a, b] = corr[b, a] = v
    try:
        np.linalg.cholesky(corr)
    except np.linalg.LinAlgError:
        raise ConfigError("random_effects.corr: correlation matrix is not positive definite") from None
    effect_sd = np.asarray(re.get("sd", [0.0, 0.0, 0.0]), dtype=float)

    sim_raw = dict(raw.get("simulate", {}))
    if "team_names" in sim_raw:
        sim_raw["team_names"] = tuple(sim_raw["team_names"])
    if isinstance(sim_raw.get("goals"), list):
        sim_raw["goals"] = tuple((float(g[0]), int(g[1])) for g in sim_raw["goals"])
    sim = SimulateSection(**sim_raw)
    if sim.mode == "wall_clock" and sim.T < 90 and not sim.short_season:
        raise ConfigError("simulate.T: must be >= 90 unless simulate.short_season is true")

    lik = raw.get("likelihood", {})
    prior_raw = raw.get("prior", DEFAULT_PRESET)
    if isinstance(prior_raw, str):
        prior, prior_name = PriorSpec.preset(prior_raw), prior_raw
    else:
        prior, prior_name = PriorSpec(**prior_raw), "custom"
    mcmc = dict(raw.get("mcmc", {}))
    try:
        MCMCConfig(**mcmc)
    except ModelError as exc:
        raise ConfigError(f"mcmc: {exc}") from None
    ppc = raw.get("ppc", {})
    study = {"n_seasons": 100, "passes": 1000, "goal_rate": sim.goal_rate} | raw.get("study", {})
    return RunConfig(
        raw=raw, digest=hashlib.sha256(text).hexdigest(), formations=tuple(formations),
        covariates=cov, truths=truths, effect_sd=effect_sd, effect_corr=corr, simulate=sim,
        model_failure_receiver=bool(lik.get("model_failure_receiver", False)),
        unit_by=lik.get("unit_by", "position"), strict=bool(lik.get("strict", True)),
        mcmc=mcmc, prior=prior, prior_name=prior_name,
        ppc_mode=ppc.get("mode", "conditional"), ppc_max_draws=int(ppc.get("max_draws", 1000)),
        study=study,
    )


def load_config(path: str | Path | None) -> RunConfig:
    """Parse and validate a configuration file; ``None`` gives the defaults."""
    if path is None:
        return parse_config({}, b"{}")
    path = Path(path)
    try:
        text = path.read_bytes()
    except OSError as exc:
        raise ConfigError(f"<file>: cannot read {path}: {exc.strerror}") from None
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"<file>: {path} is not valid JSON (line {exc.lineno}, column {exc.colno}: "
                          f"{exc.msg})") from None
    return parse_config(raw, text)
