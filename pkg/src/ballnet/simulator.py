"""Forward simulation of matches from the possession process."""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Mapping, Protocol, Sequence

import numpy as np
from scipy.special import expit

from . import rng as rngmod
from .model import (
    CovariateBundle,
    MatchEvent,
    MatchLog,
    ModelError,
    ModelParams,
    PlayerId,
    PossessionState,
    RandomEffects,
    RosterState,
    candidate_probabilities,
    check_predictor,
    holding_predictor,
)
from .pitch import (
    CovariateConfig,
    FormationGraph,
    GeometrySampler,
    MatchContext,
    build_covariates,
    holding_covariates,
)


class SimulationError(RuntimeError):
    pass


class CovariateSource(Protocol):
    def holding(self, state: PossessionState, roster: RosterState) -> np.ndarray: ...

    def bundle(self, state: PossessionState, roster: RosterState, rng: np.random.Generator):
        """Return ``(bundle, geometry, air)`` for the pass ending the possession."""
        ...


@dataclass(frozen=True)
class StaticCovariates:
    """Fixed per-player covariates (player index -> bundle)."""

    bundles: Mapping[int, CovariateBundle]

    def holding(self, state, roster):
        return self.bundles[state.holder.index].c

    def bundle(self, state, roster, rng):
        return self.bundles[state.holder.index], None, False


@dataclass(frozen=True)
class PitchCovariates:
    """Covariates built from formations, score and sampled pass geometry."""

    cfg: CovariateConfig
    graphs: Mapping[int, FormationGraph]
    sampler: GeometrySampler = field(default_factory=GeometrySampler)

    def holding(self, state, roster):
        return holding_covariates(state.holder, roster.team_of(state.holder), state.score, self.cfg)

    def bundle(self, state, roster, rng):
        holder = state.holder
        graph = self.graphs[roster.team_of(holder)]
        depth = graph.depth.get(holder.position, 50.0)
        geometry, air = self.sampler.sample(holder.position, depth, rng)
        ev = _Pass(geometry, air)
        return build_covariates(ev, state, self.cfg, MatchContext(roster, self.graphs)), geometry, air


@dataclass(frozen=True)
class _Pass:
    geometry: tuple
    air: bool


@dataclass(frozen=True)
class SimulationConfig:
    roster: RosterState
    covariates: CovariateSource
    T: float = 90.0
    seed: int = 0
    mode: str = "wall_clock"
    passes: int = 1000
    short_season: bool = False
    goals: tuple[tuple[float, int], ...] = ()
    match_id: str = "sim"
    formations: tuple[str, str] = ("", "")
    team_names: tuple[str, str] = ("team1", "team2")
    generator: str = rngmod.GENERATOR_NAME

    def __post_init__(self):
        if self.mode not in ("wall_clock", "pass_count"):
            raise ModelError(f"unknown stopping mode {self.mode!r}")
        if self.mode == "wall_clock":
            if self.short_season:
                if not self.T > 0:
                    raise ModelError("T must be positive")
            elif self.T < 90:
                raise ModelError("T must be >= 90 minutes unless short_season is set")
        elif self.passes < 1:
            raise ModelError("pass-count mode needs at least one pass")
        if self.generator != rngmod.GENERATOR_NAME:
            raise ModelError(f"unsupported generator {self.generator!r}")
        if not 0 <= self.seed < 2**64:
            raise ModelError("seed must be an unsigned 64-bit integer")


def init_possession(roster: RosterState, rng: np.random.Generator) -> PlayerId:
    """Uniform draw of the initial ball holder over both teams."""
    players = roster.players
    if not players:
        raise ModelError("empty roster")
    k = min(int(rngmod.uniform(rng) * len(players)), len(players) - 1)
    return players[k]


def sample_holding_time(lam: float, rng: np.random.Generator | None = None, u: float | None = None) -> float:
    if not lam > 0:
        raise ModelError(f"holding rate must be positive, got {lam}")
    if u is None:
        u = rngmod.uniform(rng)
    return rngmod.exponential(lam, u)


def sample_transition(
    state: PossessionState,
    params: ModelParams,
    effects: RandomEffects,
    bundle: CovariateBundle,
    roster: RosterState,
    rng: np.random.Generator,
) -> tuple[bool, PlayerId]:
    """Draw the success flag, then the receiver from the matching pass model."""
    holder = state.holder
    eta1 = effects.for_player(holder)[0]
    z = float(params.alpha @ bundle.x1) + eta1
    check_predictor(z, " in success logit")
    success = rngmod.uniform(rng) < expit(z)
    if success:
        cands = roster.teammates(holder)
        x, coef, col = bundle.x3, params.gamma, 2
    else:
        cands = roster.opponents(holder)
        x, coef, col = bundle.x2, params.beta, 1
    eta = np.array([effects.for_player(j)[col] for j in cands])
    probs = candidate_probabilities(coef, x.reshape(len(cands), coef.size), eta)
    k = rngmod.categorical(probs, rngmod.uniform(rng))
    return bool(success), cands[k]


def simulate_match(
    config: SimulationConfig,
    params: ModelParams,
    effects: RandomEffects,
    rng: np.random.Generator | None = None,
    initial_holder: PlayerId | None = None,
) -> MatchLog:
    """Run the possession process until T (wall-clock) or a pass count.

    The possession in progress at T is censored: it is represented only by the
    log's stop time.
    """
    if rng is None:
        rng = rngmod.stream(config.seed, 0)
    roster = config.roster
    goals = tuple(sorted(config.goals))
    board = _Scoreboard(goals)
    holder = initial_holder if initial_holder is not None else init_possession(roster, rng)
    state = PossessionState(holder=holder, clock=0.0, score=board.at(0.0), received={})
    events: list[MatchEvent] = []
    wall = config.mode == "wall_clock"
    T = config.T
    source = config.covariates
    while True:
        m = len(events) + 1
        if not wall and m > config.passes:
            break
        try:
            c = source.holding(state, roster)
            zc = float(holding_predictor(c, params.omega))
            check_predictor(zc, " in holding rate")
            h = sample_holding_time(float(np.exp(zc)), rng)
            t_next = state.clock + h
            if t_next <= state.clock:
                t_next = float(np.nextafter(state.clock, np.inf))
            if wall and t_next > T:
                break
            bundle, geometry, air = source.bundle(state, roster, rng)
            success, receiver = sample_transition(state, params, effects, bundle, roster, rng)
        except ModelError as exc:
            raise SimulationError(f"event {m}, holder {state.holder.label}: {exc}") from exc
        events.append(MatchEvent(
            index=m, time=t_next, holding_time=t_next - state.clock,
            passer=state.holder, receiver=receiver, success=success,
            covariates=bundle, geometry=geometry, air=air,
        ))
        if success:
            state.received[receiver.label] = state.count(receiver.label) + 1
        state.holder = receiver
        state.clock = t_next
        state.score = board.at(t_next)
    stop = T if wall else state.clock
    censor_c = np.asarray(source.holding(state, roster), dtype=float).copy()
    return MatchLog(
        events=tuple(events),
        initial_holder=holder,
        stop_time=stop,
        roster_timeline=(roster,),
        score_timeline=tuple(g for g in goals if g[0] <= stop),
        match_id=config.match_id,
        formations=config.formations,
        team_names=config.team_names,
        censor_c=censor_c,
    )


class _Scoreboard:
    """Score at any time from sorted goal marks."""

    def __init__(self, goals):
        self.times = np.array([g[0] for g in goals], dtype=float)
        teams = np.array([g[1] for g in goals], dtype=int)
        self.cum1 = np.concatenate([[0], np.cumsum(teams == 1)])
        self.cum2 = np.concatenate([[0], np.cumsum(teams == 2)])

    def at(self, t: float) -> tuple[int, int]:
        k = int(np.searchsorted(self.times, t, side="right"))
        return int(self.cum1[k]), int(self.cum2[k])


def _season_match(args):
    config, params, effects, k, goal_rate, equalizer = args
    cfg = replace(config, match_id=f"{config.match_id}-{k:04d}")
    if goal_rate is not None:
        n_score = len(getattr(getattr(config.covariates, "cfg", None), "holding_score", ()))
        horizon = config.T if config.mode == "wall_clock" else pass_count_horizon(params, config.passes, n_score)
        cfg = replace(cfg, goals=exogenous_goals(rngmod.stream(config.seed, k, 1), horizon, goal_rate, equalizer))
    return simulate_match(cfg, params, effects, rngmod.stream(config.seed, k, 0))


def pass_count_horizon(params: ModelParams, passes: int, n_score: int = 0) -> float:
    """A time by which ``passes`` passes have almost surely happened: three
    times the expected duration at the slowest holding rate. The last
    ``n_score`` holding coefficients are score indicators, the rest are one
    indicator per position."""
    omega = np.asarray(params.omega, dtype=float)
    pos, score = (omega[:-n_score], omega[-n_score:]) if n_score else (omega, np.zeros(1))
    slowest = float(np.exp(-(pos.min() + min(0.0, score.min()))))
    return 3.0 * passes * slowest + 90.0


def simulate_season(
    config: SimulationConfig,
    params: ModelParams,
    effects: RandomEffects,
    n_matches: int,
    indices: Sequence[int] | None = None,
    threads: int = 1,
    goal_rate: float | None = None,
    equalizer: float = 0.7,
) -> list[MatchLog]:
    """Independent matches named ``<match_id>-0000`` and so on.

    Match ``k`` simulates from stream ``(config.seed, k, 0)``. With
    ``goal_rate`` set, its goals are drawn by :func:`exogenous_goals` from
    stream ``(config.seed, k, 1)`` instead of taken from ``config.goals``.
    """
    if n_matches < 1:
        raise ModelError("n_matches must be >= 1")
    ks = list(indices) if indices is not None else list(range(n_matches))
    jobs = [(config, params, effects, k, goal_rate, equalizer) for k in ks]
    if threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(threads) as ex:
            return list(ex.map(_season_match, jobs))
    return [_season_match(j) for j in jobs]


def exogenous_goals(
    rng: np.random.Generator,
    horizon: float,
    rate: float = 2.7 / 90.0,
    equalizer: float = 0.7,
) -> tuple[tuple[float, int], ...]:
    """Random goal marks on ``[0, horizon]`` for long pass-count runs.

    Goals arrive as a Poisson process; while one team leads, the trailing team
    scores the next goal with probability ``equalizer``, which keeps level
    scores common so winning, losing and level states all occur.
    """
    if not (horizon > 0 and rate > 0 and 0 <= equalizer <= 1):
        raise ModelError("need horizon > 0, rate > 0 and equalizer in [0, 1]")
    goals = []
    t = 0.0
    diff = 0
    while True:
        t += rngmod.exponential(rate, rngmod.uniform(rng))
        if t > horizon:
            break
        u = rngmod.uniform(rng)
        if diff == 0:
            team = 1 if u < 0.5 else 2
        else:
            trailing = 2 if diff > 0 else 1
            team = trailing if u < equalizer else 3 - trailing
        diff += 1 if team == 1 else -1
        goals.append((t, team))
    return tuple(goals)
