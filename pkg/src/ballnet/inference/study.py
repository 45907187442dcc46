"""Simulation study: simulate short seasons at known parameters, refit each,
and report how posterior means and intervals relate to the truth."""

from __future__ import annotations

import csv
import io
import json
import logging
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .. import fixtures
from ..model import ModelError, ModelParams, RandomEffects
from ..pitch import CovariateConfig
from ..simulator import PitchCovariates, SimulationConfig, simulate_season
from .dataset import build_dataset
from .diagnostics import posterior_summary
from .layout import ParameterLayout
from .mcmc import MCMCConfig, run_mcmc
from .priors import PriorSpec

log = logging.getLogger(__name__)

STUDY_SCHEMA = "ballnet-study/1"


@dataclass(frozen=True)
class StudyConfig:
    n_seasons: int = 100
    passes: int = 1000
    seed: int = 0
    mcmc: MCMCConfig = field(default_factory=MCMCConfig)
    prior: PriorSpec = field(default_factory=PriorSpec)
    goal_rate: float = 2.7 / 90.0
    threads: int = 1
    model_failure_receiver: bool = False

    def to_dict(self) -> dict:
        return {"n_seasons": self.n_seasons, "passes": self.passes, "seed": self.seed,
                "mcmc": self.mcmc.to_dict(), "prior": self.prior.to_dict(), "goal_rate": self.goal_rate,
                "model_failure_receiver": self.model_failure_receiver}


def truth_table(params: ModelParams, layout: ParameterLayout) -> dict[str, float]:
    """Data-generating values by canonical name; random-effect sds and
    correlations are 0 because effects are generated as exactly zero."""
    flat = dict(zip(layout.fixed_names_flat(), params.flat()))
    out = {n: float(flat[n]) for n in layout.table_fixed_names()}
    out.update({n: 0.0 for n in layout.corr_names(True)})
    out.update({n: 0.0 for n in layout.sigma_names(True)})
    return out


def season_seed(seed: int, k: int) -> int:
    return int(np.random.SeedSequence(seed, spawn_key=(k, 7)).generate_state(1, np.uint64)[0])


def study_simulation(cfg: StudyConfig, cov: CovariateConfig) -> SimulationConfig:
    graph = fixtures.study_graph()
    return SimulationConfig(
        roster=fixtures.study_roster(), covariates=PitchCovariates(cov, {1: graph, 2: graph}),
        seed=cfg.seed, mode="pass_count", passes=cfg.passes, match_id="season",
        formations=(graph.name, graph.name), team_names=("home", "away"),
    )


def simulate_season_log(k: int, cfg: StudyConfig, params: ModelParams, cov: CovariateConfig,
                        sim: SimulationConfig | None = None):
    """Season ``k`` of the study: one long pass-count run with random goals
    and zero random effects."""
    sim = replace(sim or study_simulation(cfg, cov), seed=cfg.seed, mode="pass_count", passes=cfg.passes)
    return simulate_season(sim, params, RandomEffects.zeros(cov.positions), 1, indices=[k],
                           goal_rate=cfg.goal_rate)[0]


def fit_season(k: int, cfg: StudyConfig, params: ModelParams, cov: CovariateConfig,
               sim: SimulationConfig | None = None) -> dict:
    season = simulate_season_log(k, cfg, params, cov, sim)
    ds = build_dataset([season], cov, model_failure_receiver=cfg.model_failure_receiver, attach=False)
    mcfg = replace(cfg.mcmc, seed=season_seed(cfg.seed, k), threads=1)
    chains = run_mcmc(ds.data, ds.layout, cfg.prior, mcfg)
    summary = posterior_summary(chains)
    truth = truth_table(params, ds.layout)
    rows = {}
    for r in summary.rows:
        rows[r.name] = {"mean": r.mean, "median": r.median, "lower": r.lower, "upper": r.upper,
                        "ess": r.ess, "rhat": r.rhat,
                        "covered": bool(r.lower <= truth[r.name] <= r.upper)}
    return {"season": k, "status": "ok", "passes": len(season.events), "parameters": rows}


def _season_job(args):
    k, cfg, params, cov, sim = args
    try:
        return fit_season(k, cfg, params, cov, sim)
    except Exception as exc:  # recorded, the study continues
        return {"season": k, "status": "failed", "error": f"{type(exc).__name__}: {exc}",
                "traceback": traceback.format_exc()}


@dataclass(frozen=True)
class StudyReport:
    config: dict
    truth: dict
    seasons: list
    parameters: dict
    coverage_mean: float
    coverage_parameters: list
    key_bias: dict

    def to_dict(self) -> dict:
        return {"schema": STUDY_SCHEMA, "config": self.config, "truth": self.truth,
                "coverage_mean": self.coverage_mean, "coverage_parameters": self.coverage_parameters,
                "key_bias": self.key_bias, "parameters": self.parameters,
                "seasons": [{"season": s["season"], "status": s["status"], **({"error": s["error"]} if
                             s["status"] != "ok" else {})} for s in self.seasons]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def percentile_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["parameter", "truth", "mean_of_means", "p2.5", "p50", "p97.5", "coverage", "bias"])
        for name, p in self.parameters.items():
            w.writerow([name, repr(p["truth"]), repr(p["mean_of_means"]), repr(p["p2.5"]),
                        repr(p["p50"]), repr(p["p97.5"]), repr(p["coverage"]), repr(p["bias"])])
        return buf.getvalue()


def aggregate(seasons: list, truth: dict, config: dict) -> StudyReport:
    ok = [s for s in seasons if s["status"] == "ok"]
    params = {}
    for name, t in truth.items():
        means = np.array([s["parameters"][name]["mean"] for s in ok])
        cov = np.array([s["parameters"][name]["covered"] for s in ok], dtype=float)
        if means.size == 0:
            continue
        lo, med, hi = np.quantile(means, [0.025, 0.5, 0.975])
        params[name] = {"truth": t, "mean_of_means": float(means.mean()), "p2.5": float(lo),
                        "p50": float(med), "p97.5": float(hi), "coverage": float(cov.mean()),
                        "bias": float(means.mean() - t)}
    # Standard deviations are excluded: their truth, 0, is the boundary of the
    # parameter space where a central interval cannot cover it.
    cover_names = [n for n in params if not n.startswith("sigma[")]
    coverage = float(np.mean([params[n]["coverage"] for n in cover_names])) if cover_names else float("nan")
    key = {n: params[n]["bias"] for n in fixtures.KEY_PARAMETERS if n in params}
    return StudyReport(config, truth, sorted(seasons, key=lambda s: s["season"]), params, coverage,
                       cover_names, key)


def _simulation_key(sim: SimulationConfig | None) -> dict | None:
    if sim is None:
        return None
    return {"roster": [p.label + "/" + p.position for p in sim.roster.players],
            "formations": list(sim.formations), "team_names": list(sim.team_names)}


def run_simulation_study(
    cfg: StudyConfig,
    truths: ModelParams | None = None,
    covariates: CovariateConfig | None = None,
    simulation: SimulationConfig | None = None,
    out_dir: str | Path | None = None,
    progress: Callable[[dict], None] | None = None,
) -> StudyReport:
    """Simulate ``n_seasons`` seasons of ``passes`` passes and fit each.

    ``simulation`` supplies roster, formations and covariate source (the
    symmetric 3-5-2 design by default); its seed, mode and pass count are
    taken from ``cfg``.

    With ``out_dir`` every finished season is stored as
    ``seasons/season-XXXX.json`` and skipped on rerun, so an interrupted study
    resumes where it stopped.
    """
    cov = covariates or fixtures.study_covariates()
    params = truths or fixtures.true_params(cov)
    layout = ParameterLayout.from_covariates(cov, cov.positions, "position", cfg.model_failure_receiver)
    truth = truth_table(params, layout)
    season_dir = Path(out_dir) / "seasons" if out_dir is not None else None
    if season_dir is not None:
        season_dir.mkdir(parents=True, exist_ok=True)
        # Stored seasons are only reused by a study with the same design.
        design = dict(cfg.to_dict(), truth=truth, covariates=cov.to_dict(),
                      simulation=_simulation_key(simulation))
        design.pop("n_seasons")
        stamp = season_dir / "design.json"
        text = json.dumps(design, indent=1, sort_keys=True) + "\n"
        if stamp.exists() and stamp.read_text() != text:
            raise ModelError(f"{season_dir} holds seasons of a different study design; use a fresh output directory")
        stamp.write_text(text)
    done: dict[int, dict] = {}
    todo = []
    for k in range(cfg.n_seasons):
        path = season_dir / f"season-{k:04d}.json" if season_dir else None
        if path is not None and path.exists():
            done[k] = json.loads(path.read_text())
        else:
            todo.append(k)
    jobs = [(k, cfg, params, cov, simulation) for k in todo]

    def record(res):
        done[res["season"]] = res
        if season_dir is not None:
            (season_dir / f"season-{res['season']:04d}.json").write_text(json.dumps(res, indent=1) + "\n")
        if res["status"] != "ok":
            log.warning("season %d failed: %s", res["season"], res["error"])
        if progress is not None:
            progress(res)

    if cfg.threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(cfg.threads) as ex:
            for res in ex.map(_season_job, jobs):
                record(res)
    else:
        for job in jobs:
            record(_season_job(job))
    return aggregate([done[k] for k in sorted(done)], truth, cfg.to_dict())
