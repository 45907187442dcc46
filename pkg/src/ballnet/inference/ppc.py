"""Posterior predictive checks of waiting times and pass success.

For each posterior draw a replicate data set of the observed size is
generated and two statistics are computed per team: the mean waiting time
between passes and the proportion of successful passes. Two replicate
schemes exist:

``conditional`` (default)
    keep the observed possessions and their covariates; redraw each holding
    time from its Exponential and each success flag from its logit.
``simulate``
    run the simulator for as many passes as observed, starting from the
    observed roster, formations and goals.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
from scipy.special import expit

from ..model import MatchLog, ModelError, holding_predictor
from ..pitch import CovariateConfig, load_formation
from .mcmc import PosteriorChains

PPC_SCHEMA = "ballnet-ppc/1"
STATISTICS = ("mean_waiting_time", "success_proportion")


@dataclass(frozen=True)
class PPCRecord:
    statistic: str
    team: str
    observed: float
    lower: float
    median: float
    upper: float

    @property
    def inside(self) -> bool:
        return self.lower <= self.observed <= self.upper


@dataclass(frozen=True)
class PPCReport:
    records: tuple[PPCRecord, ...]
    n_draws: int
    mode: str

    def to_dict(self) -> dict:
        return {"schema": PPC_SCHEMA, "mode": self.mode, "n_draws": self.n_draws,
                "records": [dict(asdict(r), inside=r.inside) for r in self.records]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["statistic", "team", "observed", "lower", "median", "upper", "inside"])
        for r in self.records:
            w.writerow([r.statistic, r.team, repr(r.observed), repr(r.lower), repr(r.median),
                        repr(r.upper), int(r.inside)])
        return buf.getvalue()

    def get(self, statistic: str, team: str) -> PPCRecord:
        for r in self.records:
            if r.statistic == statistic and r.team == team:
                return r
        raise KeyError((statistic, team))


def _event_arrays(logs: Sequence[MatchLog], units: Sequence[str], unit_by: str):
    umap = {u: k for k, u in enumerate(units)}
    C, X1, unit, team, h, s = [], [], [], [], [], []
    for log in logs:
        for ev in log.events:
            if ev.covariates is None:
                raise ModelError(f"match {log.match_id} event {ev.index}: covariates not attached")
            roster = log.roster_at(ev.time - ev.holding_time)
            C.append(ev.covariates.c)
            X1.append(ev.covariates.x1)
            unit.append(umap[ev.passer.unit(unit_by)])
            team.append(log.team_names[roster.team_of(ev.passer) - 1])
            h.append(ev.holding_time)
            s.append(float(ev.success))
    if not h:
        raise ModelError("posterior predictive check needs at least one pass")
    return (np.asarray(C), np.asarray(X1), np.asarray(unit), np.asarray(team), np.asarray(h),
            np.asarray(s))


def _draw_indices(chains: PosteriorChains, max_draws: int | None) -> list[tuple[int, int]]:
    pairs = [(c, d) for c in range(chains.n_chains) for d in range(chains.n_draws)]
    if max_draws is not None and len(pairs) > max_draws:
        pick = np.linspace(0, len(pairs) - 1, max_draws).round().astype(int)
        pairs = [pairs[k] for k in pick]
    return pairs


def _band(observed: float, reps: np.ndarray, stat: str, team: str) -> PPCRecord:
    lo, med, hi = np.quantile(reps, [0.025, 0.5, 0.975])
    return PPCRecord(stat, team, float(observed), float(lo), float(med), float(hi))


def posterior_predictive_check(
    chains: PosteriorChains,
    logs: Sequence[MatchLog],
    rng: np.random.Generator,
    mode: str = "conditional",
    max_draws: int | None = 1000,
    covariates: CovariateConfig | None = None,
) -> PPCReport:
    lay = chains.layout
    C, X1, unit, team, h, s = _event_arrays(logs, lay.units, lay.unit_by)
    teams = sorted(set(team.tolist()))
    pairs = _draw_indices(chains, max_draws)
    n_fix = lay.dims
    p, d1 = n_fix[0], n_fix[1]
    reps = {(st, t): np.empty(len(pairs)) for st in STATISTICS for t in teams}
    masks = {t: team == t for t in teams}
    if mode == "conditional":
        for k, (c, d) in enumerate(pairs):
            flat = chains.fixed[c, d]
            omega, alpha = flat[:p], flat[p:p + d1]
            lam = np.exp(holding_predictor(C, omega))
            prob = expit(X1 @ alpha + chains.eta[c, d, unit, 0])
            u = rng.random((2, h.size))
            h_rep = -np.log1p(-u[0]) / lam
            s_rep = (u[1] < prob).astype(float)
            for t, m in masks.items():
                reps[("mean_waiting_time", t)][k] = h_rep[m].mean()
                reps[("success_proportion", t)][k] = s_rep[m].mean()
    elif mode == "simulate":
        _simulate_reps(chains, logs, pairs, rng, covariates, reps, teams)
    else:
        raise ModelError(f"unknown PPC mode {mode!r}")
    records = []
    for stat in STATISTICS:
        for t in teams:
            obs = h[masks[t]].mean() if stat == "mean_waiting_time" else s[masks[t]].mean()
            records.append(_band(obs, reps[(stat, t)], stat, t))
    return PPCReport(tuple(records), len(pairs), mode)


def _simulate_reps(chains, logs, pairs, rng, covariates, reps, teams):
    from .. import rng as rngmod
    from ..simulator import PitchCovariates, SimulationConfig, simulate_match

    if covariates is None:
        raise ModelError("simulate mode needs the covariate configuration")
    first = logs[0]
    graphs = {k + 1: load_formation(f) for k, f in enumerate(first.formations)}
    n_pass = sum(len(log.events) for log in logs)
    sim_cfg = SimulationConfig(
        roster=first.roster_timeline[0], covariates=PitchCovariates(covariates, graphs),
        mode="pass_count", passes=n_pass, goals=first.score_timeline,
        formations=first.formations, team_names=first.team_names,
    )
    seeds = rng.integers(0, 2**63, size=len(pairs))
    for k, (c, d) in enumerate(pairs):
        params, effects, _ = chains.params_at(c, d)
        log = simulate_match(sim_cfg, params, effects, rngmod.stream(int(seeds[k])))
        for t in teams:
            sel = [ev for ev in log.events
                   if log.team_names[log.roster_timeline[0].team_of(ev.passer) - 1] == t]
            reps[("mean_waiting_time", t)][k] = np.mean([ev.holding_time for ev in sel]) if sel else np.nan
            reps[("success_proportion", t)][k] = np.mean([ev.success for ev in sel]) if sel else np.nan
