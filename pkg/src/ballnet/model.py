"""Domain types and probability kernels for the ball-possession process.

A match is a continuous-time process over "who controls the ball". The player
in control holds the ball for an Exponential time, then either keeps the ball
within the team (a successful pass) or loses it to an opponent. The four
kernels below give the rate, the success probability and the two receiver
distributions; :func:`generator_matrix` assembles them into the rate matrix of
the Markov chain obtained when covariates are frozen.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.special import expit, logsumexp

# Linear predictors beyond this magnitude are treated as a modelling error.
MAX_LINEAR_PREDICTOR = 700.0

ETA_COMPONENTS = ("success", "fail_pass", "pass")


class ModelError(ValueError):
    """Raised for invalid model inputs."""


class DimensionError(ModelError):
    pass


class PredictorOverflowError(ModelError):
    """A linear predictor exceeded ``MAX_LINEAR_PREDICTOR`` in magnitude."""


def _vec(x, name: str) -> np.ndarray:
    a = np.asarray(x, dtype=float)
    if a.ndim == 0:
        a = a.reshape(1)
    if a.ndim != 1:
        raise DimensionError(f"{name} must be a vector, got shape {a.shape}")
    return a


def check_predictor(z, where: str = "") -> None:
    z = np.asarray(z, dtype=float)
    if z.size == 0:
        return
    if not np.all(np.isfinite(z)):
        raise ModelError(f"non-finite linear predictor{where}")
    if np.max(np.abs(z)) > MAX_LINEAR_PREDICTOR:
        raise PredictorOverflowError(
            f"linear predictor {float(np.max(np.abs(z))):.3g} exceeds "
            f"{MAX_LINEAR_PREDICTOR}{where}"
        )


# ---------------------------------------------------------------------------
# Domain types


@dataclass(frozen=True, order=True)
class PlayerId:
    index: int
    label: str
    position: str = ""

    def __post_init__(self):
        if self.index < 0:
            raise ModelError(f"player index must be >= 0, got {self.index}")
        if not self.label:
            raise ModelError("player label must be non-empty")

    def unit(self, by: str) -> str:
        """Random-effect unit key: the player label or the position label."""
        if by == "player":
            return self.label
        if by == "position":
            return self.position or self.label
        raise ModelError(f"unknown random-effect unit {by!r}")


@dataclass(frozen=True)
class RosterState:
    team1: tuple[PlayerId, ...]
    team2: tuple[PlayerId, ...]
    effective_from: float = 0.0

    def __post_init__(self):
        t1 = tuple(sorted(self.team1))
        t2 = tuple(sorted(self.team2))
        object.__setattr__(self, "team1", t1)
        object.__setattr__(self, "team2", t2)
        if not t1 or not t2:
            raise ModelError("each team needs at least one player")
        idx = [p.index for p in t1 + t2]
        if len(set(idx)) != len(idx):
            raise ModelError("player indices must be unique and teams disjoint")
        labels = [p.label for p in t1 + t2]
        if len(set(labels)) != len(labels):
            raise ModelError("player labels must be unique within a roster")

    @property
    def players(self) -> tuple[PlayerId, ...]:
        return tuple(sorted(self.team1 + self.team2))

    @property
    def size(self) -> int:
        return len(self.team1) + len(self.team2)

    def is_full(self) -> bool:
        return len(self.team1) == 11 and len(self.team2) == 11

    def team_of(self, player: PlayerId | int) -> int:
        i = player if isinstance(player, int) else player.index
        if any(p.index == i for p in self.team1):
            return 1
        if any(p.index == i for p in self.team2):
            return 2
        raise ModelError(f"player {player} not on roster")

    def members(self, team: int) -> tuple[PlayerId, ...]:
        return self.team1 if team == 1 else self.team2

    def teammates(self, player: PlayerId | int) -> tuple[PlayerId, ...]:
        i = player if isinstance(player, int) else player.index
        return tuple(p for p in self.members(self.team_of(i)) if p.index != i)

    def opponents(self, player: PlayerId | int) -> tuple[PlayerId, ...]:
        return self.members(3 - self.team_of(player))

    def by_index(self, i: int) -> PlayerId:
        for p in self.team1 + self.team2:
            if p.index == i:
                return p
        raise ModelError(f"player index {i} not on roster")

    def by_label(self, label: str) -> PlayerId:
        for p in self.team1 + self.team2:
            if p.label == label:
                return p
        raise ModelError(f"player label {label!r} not on roster")

    def slot(self, player: PlayerId | int) -> int:
        """Position of a player within :attr:`players` (the ordering used by
        probability vectors)."""
        i = player if isinstance(player, int) else player.index
        for k, p in enumerate(self.players):
            if p.index == i:
                return k
        raise ModelError(f"player {player} not on roster")


@dataclass(frozen=True)
class CovariateBundle:
    """Covariates frozen at possession start.

    ``x2`` rows follow ``fail_candidates`` and ``x3`` rows follow
    ``succ_candidates`` (both as player indices in roster order).
    """

    c: np.ndarray
    x1: np.ndarray
    x2: np.ndarray
    x3: np.ndarray
    fail_candidates: tuple[int, ...] = ()
    succ_candidates: tuple[int, ...] = ()

    def __post_init__(self):
        for name in ("c", "x1"):
            object.__setattr__(self, name, _vec(getattr(self, name), name))
        for name in ("x2", "x3"):
            a = np.asarray(getattr(self, name), dtype=float)
            if a.ndim == 1:
                a = a.reshape(-1, 1) if a.size else a.reshape(0, 0)
            object.__setattr__(self, name, a)
        for name in ("c", "x1", "x2", "x3"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ModelError(f"covariate block {name} has non-finite entries")
        if self.fail_candidates and len(self.fail_candidates) != self.x2.shape[0]:
            raise DimensionError("x2 needs one row per failure candidate")
        if self.succ_candidates and len(self.succ_candidates) != self.x3.shape[0]:
            raise DimensionError("x3 needs one row per success candidate")


@dataclass(frozen=True)
class ModelParams:
    omega: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    gamma: np.ndarray

    def __post_init__(self):
        for name in ("omega", "alpha", "beta", "gamma"):
            a = np.asarray(getattr(self, name), dtype=float).reshape(-1)
            if not np.all(np.isfinite(a)):
                raise ModelError(f"{name} has non-finite entries")
            object.__setattr__(self, name, a)

    @classmethod
    def zeros(cls, p: int, d1: int, d2: int, d3: int) -> "ModelParams":
        return cls(np.zeros(p), np.zeros(d1), np.zeros(d2), np.zeros(d3))

    @property
    def dims(self) -> tuple[int, int, int, int]:
        return (self.omega.size, self.alpha.size, self.beta.size, self.gamma.size)

    def flat(self) -> np.ndarray:
        return np.concatenate([self.omega, self.alpha, self.beta, self.gamma])

    @classmethod
    def from_flat(cls, v, dims) -> "ModelParams":
        p, d1, d2, d3 = dims
        v = np.asarray(v, dtype=float)
        o = np.cumsum([0, p, d1, d2, d3])
        return cls(v[o[0]:o[1]], v[o[1]:o[2]], v[o[2]:o[3]], v[o[3]:o[4]])


@dataclass(frozen=True)
class RandomEffects:
    """Per-unit effects; columns are (success, failure-receiver, success-receiver)."""

    eta: np.ndarray
    units: tuple[str, ...]
    by: str = "position"

    def __post_init__(self):
        eta = np.asarray(self.eta, dtype=float).reshape(len(self.units), 3)
        if not np.all(np.isfinite(eta)):
            raise ModelError("random effects must be finite")
        if len(set(self.units)) != len(self.units):
            raise ModelError("duplicate random-effect units")
        object.__setattr__(self, "eta", eta)
        object.__setattr__(self, "units", tuple(self.units))

    @classmethod
    def zeros(cls, units: Sequence[str], by: str = "position") -> "RandomEffects":
        return cls(np.zeros((len(units), 3)), tuple(units), by)

    @property
    def unit_map(self) -> dict[str, int]:
        return {u: k for k, u in enumerate(self.units)}

    def row(self, unit: str) -> np.ndarray:
        try:
            return self.eta[self.units.index(unit)]
        except ValueError:
            raise ModelError(f"no random-effect row for unit {unit!r}") from None

    def for_player(self, player: PlayerId) -> np.ndarray:
        return self.row(player.unit(self.by))


@dataclass(frozen=True)
class CovarianceSpec:
    """Sigma = diag(sd) @ corr @ diag(sd)."""

    sd: np.ndarray
    corr: np.ndarray

    def __post_init__(self):
        sd = _vec(self.sd, "sd")
        corr = np.asarray(self.corr, dtype=float)
        if sd.shape != (3,) or corr.shape != (3, 3):
            raise DimensionError("covariance spec is 3-dimensional")
        if np.any(~(sd > 0)):
            raise ModelError("standard deviations must be positive")
        if not np.allclose(corr, corr.T, atol=1e-12) or not np.allclose(np.diag(corr), 1.0):
            raise ModelError("corr must be symmetric with unit diagonal")
        try:
            np.linalg.cholesky(corr)
        except np.linalg.LinAlgError:
            raise ModelError("corr must be positive definite") from None
        object.__setattr__(self, "sd", sd)
        object.__setattr__(self, "corr", corr)

    @classmethod
    def identity(cls) -> "CovarianceSpec":
        return cls(np.ones(3), np.eye(3))

    @property
    def matrix(self) -> np.ndarray:
        return self.corr * np.outer(self.sd, self.sd)


@dataclass(frozen=True)
class MatchEvent:
    """One change of ball control.

    ``time`` is the absolute clock at the pass and ``holding_time`` the
    difference to the previous pass (or possession start), so holding times
    are reproduced exactly from serialized timestamps.
    """

    index: int
    time: float
    holding_time: float
    passer: PlayerId
    receiver: PlayerId
    success: bool
    covariates: CovariateBundle | None = field(default=None, compare=False)
    geometry: tuple[float, float, float, float] | None = None
    air: bool = False

    def __post_init__(self):
        if self.index < 1:
            raise ModelError("event index starts at 1")
        if not self.holding_time > 0:
            raise ModelError(f"event {self.index}: holding time must be > 0")
        if self.receiver.index == self.passer.index:
            raise ModelError(f"event {self.index}: receiver equals passer")


@dataclass(frozen=True)
class MatchLog:
    """A possession chain from ``start_time`` to the stop time ``stop_time``.

    A full match starts at 0 and stops at T >= 90; logs parsed from files may be
    shorter segments of a match.
    """

    events: tuple[MatchEvent, ...]
    initial_holder: PlayerId
    stop_time: float
    roster_timeline: tuple[RosterState, ...]
    score_timeline: tuple[tuple[float, int], ...] = ()
    match_id: str = "match"
    start_time: float = 0.0
    formations: tuple[str, str] = ("", "")
    team_names: tuple[str, str] = ("team1", "team2")
    segment: int = 0
    # Holding covariates of the censored final possession.
    censor_c: np.ndarray | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "events", tuple(self.events))
        object.__setattr__(self, "roster_timeline", tuple(self.roster_timeline))
        object.__setattr__(
            self, "score_timeline", tuple((float(t), int(k)) for t, k in self.score_timeline)
        )
        self.validate()

    @property
    def duration(self) -> float:
        return self.stop_time - self.start_time

    @property
    def last_time(self) -> float:
        return self.events[-1].time if self.events else self.start_time

    @property
    def final_holder(self) -> PlayerId:
        """Player holding the ball when the log is censored."""
        return self.events[-1].receiver if self.events else self.initial_holder

    def roster_at(self, t: float) -> RosterState:
        current = self.roster_timeline[0]
        for r in self.roster_timeline[1:]:
            if r.effective_from <= t:
                current = r
        return current

    def score_at(self, t: float) -> tuple[int, int]:
        """Goals (team1, team2) scored at or before time ``t``."""
        g = [0, 0]
        for when, team in self.score_timeline:
            if when <= t:
                g[team - 1] += 1
        return g[0], g[1]

    def validate(self) -> None:
        if not self.roster_timeline:
            raise ModelError("match log needs at least one roster state")
        if self.stop_time < self.start_time:
            raise ModelError("stop time precedes start time")
        roster = self.roster_at(self.start_time)
        roster.team_of(self.initial_holder)
        prev_t = self.start_time
        holder = self.initial_holder
        for k, ev in enumerate(self.events, start=1):
            if ev.index != k:
                raise ModelError(f"event {k}: index {ev.index} out of order")
            if ev.passer.index != holder.index:
                raise ModelError(
                    f"event {k}: passer {ev.passer.label} is not the previous receiver "
                    f"{holder.label}"
                )
            if not ev.time > prev_t:
                raise ModelError(f"event {k}: timestamps must be strictly increasing")
            roster = self.roster_at(prev_t)
            same = roster.team_of(ev.receiver) == roster.team_of(ev.passer)
            if same != ev.success:
                raise ModelError(
                    f"event {k}: success flag {int(ev.success)} inconsistent with teams"
                )
            prev_t = ev.time
            holder = ev.receiver
        if prev_t > self.stop_time:
            raise ModelError("sum of holding times exceeds the stop time")


@dataclass
class PossessionState:
    """Mutable simulation state: who holds the ball, the clock, the score and
    completed receptions per player label."""

    holder: PlayerId
    clock: float = 0.0
    score: tuple[int, int] = (0, 0)
    received: dict[str, int] = field(default_factory=dict)

    def count(self, label: str) -> int:
        return self.received.get(label, 0)


@dataclass(frozen=True)
class GeneratorMatrix:
    q: np.ndarray
    roster: RosterState
    rates: np.ndarray = field(repr=False, default=None)

    def transition_approx(self, h: float) -> np.ndarray:
        """First-order transition probabilities ``I + Q h``."""
        return np.eye(self.q.shape[0]) + self.q * h


# ---------------------------------------------------------------------------
# Kernels


def holding_predictor(c, omega):
    """Row-wise ``c . omega``. Every holding-rate evaluation goes through this
    one reduction so simulator, generator and likelihood agree to the last bit
    (a BLAS matrix product and a vector dot may round differently)."""
    return np.sum(np.asarray(c, dtype=float) * omega, axis=-1)


def holding_rate(omega, c) -> float:
    """Rate of the Exponential holding time, ``exp(omega . c)``."""
    omega = _vec(omega, "omega")
    c = _vec(c, "c")
    if omega.shape != c.shape:
        raise DimensionError(f"omega has {omega.size} entries but c has {c.size}")
    z = float(holding_predictor(c, omega))
    check_predictor(z, " in holding rate")
    return float(np.exp(z))


def success_probability(alpha, x1, eta1: float = 0.0) -> float:
    alpha = _vec(alpha, "alpha")
    x1 = _vec(x1, "x1")
    if alpha.shape != x1.shape:
        raise DimensionError(f"alpha has {alpha.size} entries but x1 has {x1.size}")
    z = float(alpha @ x1) + float(eta1)
    check_predictor(z, " in success logit")
    return float(expit(z))


def candidate_probabilities(coef, x, eta) -> np.ndarray:
    """Multinomial-logit probabilities over a candidate list (log-sum-exp)."""
    coef = _vec(coef, "coef")
    x = np.asarray(x, dtype=float)
    n = x.shape[0] if x.ndim == 2 else np.size(eta)
    if n == 0:
        raise ModelError("empty candidate set")
    if x.ndim == 1:
        x = x.reshape(n, -1) if x.size else np.zeros((n, 0))
    if x.shape != (n, coef.size):
        raise DimensionError(f"expected candidate covariates of shape ({n}, {coef.size}), got {x.shape}")
    z = x @ coef + np.broadcast_to(np.asarray(eta, dtype=float), (n,))
    check_predictor(z, " in pass model")
    return np.exp(z - logsumexp(z))


def _pass_distribution(coef, x, eta, candidates, roster) -> np.ndarray:
    if not candidates:
        raise ModelError("empty candidate set")
    x = np.asarray(x, dtype=float)
    if x.ndim == 1 and x.size == 0:
        x = np.zeros((len(candidates), 0))
    if x.ndim == 2 and x.shape[0] != len(candidates):
        raise DimensionError(f"need {len(candidates)} candidate rows, got {x.shape[0]}")
    eta = np.broadcast_to(np.asarray(eta, dtype=float), (len(candidates),))
    probs = candidate_probabilities(coef, x, eta)
    out = np.zeros(roster.size)
    for p, pr in zip(candidates, probs):
        out[roster.slot(p)] = pr
    return out


def failure_pass_distribution(beta, x2, eta2, passer: PlayerId, roster: RosterState) -> np.ndarray:
    """Receiver distribution given a failed pass, over ``roster.players``.

    Rows of ``x2`` and entries of ``eta2`` follow ``roster.opponents(passer)``.
    """
    return _pass_distribution(beta, x2, eta2, roster.opponents(passer), roster)


def success_pass_distribution(gamma, x3, eta3, passer: PlayerId, roster: RosterState) -> np.ndarray:
    """Receiver distribution given a successful pass, over ``roster.players``.

    Rows of ``x3`` and entries of ``eta3`` follow ``roster.teammates(passer)``.
    """
    return _pass_distribution(gamma, x3, eta3, roster.teammates(passer), roster)


def generator_matrix(
    params: ModelParams,
    effects: RandomEffects,
    covariates: Mapping[int, CovariateBundle],
    roster: RosterState,
) -> GeneratorMatrix:
    """Rate matrix of the possession chain with covariates frozen.

    ``covariates`` maps player index to that player's bundle. Rows and columns
    follow ``roster.players``.
    """
    players = roster.players
    n = len(players)
    q = np.zeros((n, n))
    rates = np.zeros(n)
    for a, i in enumerate(players):
        cov = covariates[i.index]
        lam = holding_rate(params.omega, cov.c)
        eta_i = effects.for_player(i)
        p_succ = success_probability(params.alpha, cov.x1, eta_i[0])
        opp = roster.opponents(i)
        mates = roster.teammates(i)
        eta2 = [effects.for_player(j)[1] for j in opp]
        eta3 = [effects.for_player(j)[2] for j in mates]
        row = np.zeros(n)
        row += lam * (1.0 - p_succ) * failure_pass_distribution(params.beta, cov.x2, eta2, i, roster)
        row += lam * p_succ * success_pass_distribution(params.gamma, cov.x3, eta3, i, roster)
        # Rows sum to zero by construction; the diagonal is exactly -lambda.
        row[a] = -lam
        q[a] = row
        rates[a] = lam
    return GeneratorMatrix(q=q, roster=roster, rates=rates)
