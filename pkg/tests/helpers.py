"""Random instances and brute-force oracles shared by the test modules."""

from __future__ import annotations

import math

import numpy as np

from ballnet.likelihood import LikelihoodConfig, grad_log_likelihood, season_log_likelihood

from ballnet.model import (
    CovariateBundle,
    MatchEvent,
    MatchLog,
    ModelParams,
    PlayerId,
    RandomEffects,
    RosterState,
)


def small_roster(n1: int, n2: int, shared_positions: bool = True) -> RosterState:
    """Players A0.. and B0..; with shared positions both teams use P0, P1, ..."""
    t1 = tuple(PlayerId(k, f"A{k}", f"P{k}") for k in range(n1))
    t2 = tuple(PlayerId(n1 + k, f"B{k}", f"P{k}" if shared_positions else f"Q{k}") for k in range(n2))
    return RosterState(t1, t2)


def units_of(roster: RosterState, by: str = "position") -> tuple[str, ...]:
    return tuple(sorted({p.unit(by) for p in roster.players}))


def random_params(rng, dims, scale: float = 0.5) -> ModelParams:
    p, d1, d2, d3 = dims
    return ModelParams(*(scale * rng.standard_normal(d) for d in (p, d1, d2, d3)))


def random_effects(rng, roster: RosterState, by: str = "position", scale: float = 0.5) -> RandomEffects:
    units = units_of(roster, by)
    return RandomEffects(scale * rng.standard_normal((len(units), 3)), units, by)


def random_bundle(rng, roster: RosterState, holder: PlayerId, dims) -> CovariateBundle:
    p, d1, d2, d3 = dims
    opp = roster.opponents(holder)
    mates = roster.teammates(holder)
    return CovariateBundle(
        c=rng.uniform(-1, 1, p), x1=rng.uniform(-1, 1, d1),
        x2=rng.uniform(-1, 1, (len(opp), d2)), x3=rng.uniform(-1, 1, (len(mates), d3)),
        fail_candidates=tuple(j.index for j in opp), succ_candidates=tuple(j.index for j in mates),
    )


def random_log(rng, roster: RosterState, dims, n_events: int, tail: float | None = None) -> MatchLog:
    """A valid log with fresh random covariates on every event."""
    players = roster.players
    holder = players[rng.integers(len(players))]
    first = holder
    t = 0.0
    events = []
    for m in range(1, n_events + 1):
        h = float(rng.exponential(1.0)) + 1e-3
        success = bool(rng.random() < 0.6)
        pool = roster.teammates(holder) if success else roster.opponents(holder)
        receiver = pool[rng.integers(len(pool))]
        t += h
        events.append(MatchEvent(m, t, h, holder, receiver, success,
                                 covariates=random_bundle(rng, roster, holder, dims)))
        holder = receiver
    if tail is None:
        tail = float(rng.exponential(1.0)) if rng.random() < 0.8 else 0.0
    return MatchLog(tuple(events), first, t + tail, (roster,), match_id="rand",
                    censor_c=rng.uniform(-1, 1, dims[0]))


def naive_likelihood(params: ModelParams, effects: RandomEffects, log: MatchLog,
                     model_failure_receiver: bool = True) -> float:
    """Product-form likelihood in plain floats, one factor at a time."""
    roster = log.roster_timeline[0]

    def eta(player, k):
        return float(effects.eta[effects.units.index(player.unit(effects.by)), k])

    def dot(a, b):
        return sum(float(u) * float(v) for u, v in zip(a, b))

    value = 1.0
    for ev in log.events:
        cov = ev.covariates
        lam = math.exp(dot(params.omega, cov.c))
        value *= lam * math.exp(-lam * ev.holding_time)
        p = 1.0 / (1.0 + math.exp(-(dot(params.alpha, cov.x1) + eta(ev.passer, 0))))
        if ev.success:
            value *= p
            cands, coef, x, k = roster.teammates(ev.passer), params.gamma, cov.x3, 2
        else:
            value *= 1.0 - p
            if not model_failure_receiver:
                continue
            cands, coef, x, k = roster.opponents(ev.passer), params.beta, cov.x2, 1
        weights = [math.exp(dot(coef, x[r]) + eta(j, k)) for r, j in enumerate(cands)]
        chosen = [j.index for j in cands].index(ev.receiver.index)
        value *= weights[chosen] / sum(weights)
    lam_end = math.exp(dot(params.omega, log.censor_c))
    return value * math.exp(-lam_end * (log.stop_time - log.last_time))


def fd_check(seed: int, n_logs: int = 1):
    """Analytic and central-difference gradients (step 1e-5) of the season
    log-likelihood in all fixed effects and random effects."""
    rng = np.random.default_rng(seed)
    roster = small_roster(int(rng.integers(2, 4)), int(rng.integers(2, 4)))
    dims = tuple(int(d) for d in rng.integers(1, 3, size=4))
    params = random_params(rng, dims)
    eff = random_effects(rng, roster)
    logs = [random_log(rng, roster, dims, int(rng.integers(1, 21))) for _ in range(n_logs)]
    cfg = LikelihoodConfig(dims, bool(rng.random() < 0.5), "position")
    gp, ge = grad_log_likelihood(params, eff, logs, cfg)
    analytic = np.concatenate([gp.flat(), ge.ravel()])
    x0 = np.concatenate([params.flat(), eff.eta.ravel()])
    nfix = x0.size - eff.eta.size

    def f(x):
        p = ModelParams.from_flat(x[:nfix], dims)
        e = RandomEffects(x[nfix:].reshape(eff.eta.shape), eff.units, eff.by)
        return season_log_likelihood(p, e, logs, cfg)

    step = 1e-5
    fd = np.empty_like(x0)
    for k in range(x0.size):
        up, dn = x0.copy(), x0.copy()
        up[k] += step
        dn[k] -= step
        fd[k] = (f(up) - f(dn)) / (2 * step)
    return analytic, fd


def gradient_agrees(analytic, fd, rel=1e-5) -> bool:
    """Relative agreement per coordinate, with unit scale as the floor so
    coordinates whose gradient is (nearly) zero are compared absolutely."""
    return bool(np.all(np.abs(analytic - fd) <= rel * np.maximum(np.abs(fd), 1.0)))
