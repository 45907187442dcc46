"""Formations, nearest-neighbour graphs and covariate construction.

Pitch coordinates are normalised to 100 x 100 with every team attacking
towards increasing x.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .model import CovariateBundle, ModelError, PlayerId, PossessionState, RosterState

FORMATION_SCHEMA = "ballnet-formation/1"
BUILTIN_FORMATIONS = ("4-4-2", "3-5-2")

HALF_LINE = 50.0
FINAL_THIRD = 200.0 / 3.0

SUCCESS_COVARIATES = (
    "intercept", "length", "forward", "start_half", "end_third", "air", "winning", "losing",
)
RECEIVER_COVARIATES = ("graph_distance", "pass_received")
FAILURE_RECEIVER_COVARIATES = ("pass_received",)
GEOMETRIC = {"length", "forward", "start_half", "end_third"}


@dataclass(frozen=True)
class FormationGraph:
    name: str
    positions: tuple[str, ...]
    edges: tuple[tuple[str, str], ...]
    depth: Mapping[str, float] = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if len(set(self.positions)) != len(self.positions):
            raise ModelError(f"formation {self.name}: duplicate position labels")
        known = set(self.positions)
        for a, b in self.edges:
            if a not in known or b not in known:
                raise ModelError(f"formation {self.name}: edge ({a}, {b}) references unknown position")
            if a == b:
                raise ModelError(f"formation {self.name}: self-loop at {a}")
        dist = _bfs(self._adjacency(), self.positions[0])
        missing = [p for p in self.positions if p not in dist]
        if missing:
            raise ModelError(f"formation {self.name} is disconnected: {missing} unreachable")

    def _adjacency(self) -> dict[str, list[str]]:
        adj: dict[str, list[str]] = {p: [] for p in self.positions}
        for a, b in self.edges:
            adj[a].append(b)
            adj[b].append(a)
        return adj

    def distances(self) -> dict[str, dict[str, int]]:
        adj = self._adjacency()
        return {p: _bfs(adj, p) for p in self.positions}

    def to_dict(self) -> dict:
        return {
            "schema": FORMATION_SCHEMA,
            "name": self.name,
            "positions": list(self.positions),
            "depth": dict(self.depth),
            "edges": [list(e) for e in self.edges],
        }


def _bfs(adj: Mapping[str, list[str]], source: str) -> dict[str, int]:
    dist = {source: 0}
    queue = deque([source])
    while queue:
        u = queue.popleft()
        for v in adj[u]:
            if v not in dist:
                dist[v] = dist[u] + 1
                queue.append(v)
    return dist


def formation_from_dict(d: Mapping) -> FormationGraph:
    try:
        return FormationGraph(
            name=str(d["name"]),
            positions=tuple(d["positions"]),
            edges=tuple((str(a), str(b)) for a, b in d["edges"]),
            depth={k: float(v) for k, v in d.get("depth", {}).items()},
        )
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ModelError):
            raise
        raise ModelError(f"malformed formation document: {exc}") from exc


def load_formation(name_or_path: str | Path) -> FormationGraph:
    """Load a built-in formation by name or a formation JSON file."""
    if str(name_or_path) in BUILTIN_FORMATIONS:
        text = resources.files("ballnet.data.formations").joinpath(f"{name_or_path}.json").read_text()
        return formation_from_dict(json.loads(text))
    path = Path(name_or_path)
    if not path.exists():
        raise ModelError(f"unknown formation {name_or_path!r}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ModelError(f"{path}: invalid JSON ({exc})") from exc
    return formation_from_dict(doc)


_DIST_CACHE: dict[tuple, dict[str, dict[str, int]]] = {}


def graph_distance(g: FormationGraph, a: str, b: str) -> int:
    """Shortest-path length between two positions of a formation graph."""
    key = (g.name, g.positions, g.edges)
    table = _DIST_CACHE.get(key)
    if table is None:
        table = _DIST_CACHE[key] = g.distances()
    try:
        return table[a][b]
    except KeyError:
        raise ModelError(f"position {a!r} or {b!r} not in formation {g.name}") from None


# ---------------------------------------------------------------------------
# Covariate configuration


@dataclass(frozen=True)
class CovariateConfig:
    """Which covariates enter the holding (M1), success (M2) and receiver (M3)
    models. Holding covariates are one indicator per position plus the optional
    winning/losing indicators."""

    positions: tuple[str, ...]
    holding_score: tuple[str, ...] = ("winning", "losing")
    success: tuple[str, ...] = SUCCESS_COVARIATES
    receiver: tuple[str, ...] = RECEIVER_COVARIATES
    failure_receiver: tuple[str, ...] = ()
    pass_received_scope: str = "match"

    def __post_init__(self):
        if "intercept" not in self.success:
            raise ModelError("success covariates must include an intercept")
        bad = [c for c in self.success if c not in SUCCESS_COVARIATES]
        bad += [c for c in self.holding_score if c not in ("winning", "losing")]
        bad += [c for c in self.receiver if c not in RECEIVER_COVARIATES]
        bad += [c for c in self.failure_receiver if c not in FAILURE_RECEIVER_COVARIATES]
        if bad:
            raise ModelError(f"unknown covariates: {bad}")
        if self.pass_received_scope not in ("match", "season"):
            raise ModelError("pass_received_scope must be 'match' or 'season'")
        if len(set(self.positions)) != len(self.positions):
            raise ModelError("duplicate positions in covariate config")

    @classmethod
    def for_formations(cls, *formations: FormationGraph, **kw) -> "CovariateConfig":
        positions: list[str] = []
        for f in formations:
            positions += [p for p in f.positions if p not in positions]
        return cls(positions=tuple(positions), **kw)

    @property
    def holding_names(self) -> tuple[str, ...]:
        return self.positions + self.holding_score

    @property
    def dims(self) -> tuple[int, int, int, int]:
        return (
            len(self.holding_names),
            len(self.success),
            len(self.failure_receiver),
            len(self.receiver),
        )

    @property
    def needs_geometry(self) -> bool:
        return bool(GEOMETRIC & set(self.success))

    def to_dict(self) -> dict:
        return {
            "positions": list(self.positions),
            "holding_score": list(self.holding_score),
            "success": list(self.success),
            "receiver": list(self.receiver),
            "failure_receiver": list(self.failure_receiver),
            "pass_received_scope": self.pass_received_scope,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "CovariateConfig":
        return cls(
            positions=tuple(d["positions"]),
            holding_score=tuple(d.get("holding_score", ("winning", "losing"))),
            success=tuple(d.get("success", SUCCESS_COVARIATES)),
            receiver=tuple(d.get("receiver", RECEIVER_COVARIATES)),
            failure_receiver=tuple(d.get("failure_receiver", ())),
            pass_received_scope=d.get("pass_received_scope", "match"),
        )


@dataclass(frozen=True)
class MatchContext:
    """What covariate construction needs to know about a match."""

    roster: RosterState
    graphs: Mapping[int, FormationGraph]


def score_indicators(score: tuple[int, int], team: int) -> tuple[float, float]:
    own, other = (score[0], score[1]) if team == 1 else (score[1], score[0])
    return float(own > other), float(own < other)


def holding_covariates(holder: PlayerId, team: int, score, cfg: CovariateConfig) -> np.ndarray:
    c = np.zeros(len(cfg.holding_names))
    try:
        c[cfg.positions.index(holder.position)] = 1.0
    except ValueError:
        raise ModelError(f"position {holder.position!r} of {holder.label} not in covariate config") from None
    winning, losing = score_indicators(score, team)
    k = len(cfg.positions)
    for name in cfg.holding_score:
        c[k] = winning if name == "winning" else losing
        k += 1
    return c


def pass_features(geometry) -> dict[str, float]:
    sx, sy, ex, ey = geometry
    return {
        "length": float(np.hypot(ex - sx, ey - sy)),
        "forward": float(ex > sx),
        "start_half": float(sx > HALF_LINE),
        "end_third": float(ex > FINAL_THIRD),
    }


def build_covariates(event, state: PossessionState, cfg: CovariateConfig, ctx: MatchContext) -> CovariateBundle:
    """Covariates of the possession that ends with ``event``.

    ``event`` needs ``geometry`` (start_x, start_y, end_x, end_y, or None) and
    ``air``; ``state`` is the possession state at the moment the holder gained
    control.
    """
    holder = state.holder
    roster = ctx.roster
    team = roster.team_of(holder)
    c = holding_covariates(holder, team, state.score, cfg)

    geometry = getattr(event, "geometry", None)
    if geometry is None and cfg.needs_geometry:
        raise ModelError("pass geometry is required by the enabled success covariates")
    feats = pass_features(geometry) if geometry is not None else {}
    winning, losing = score_indicators(state.score, team)
    feats.update(intercept=1.0, air=float(bool(getattr(event, "air", False))),
                 winning=winning, losing=losing)
    x1 = np.array([feats[name] for name in cfg.success])

    mates = roster.teammates(holder)
    graph = ctx.graphs[team]
    x3 = np.zeros((len(mates), len(cfg.receiver)))
    for r, j in enumerate(mates):
        for k, name in enumerate(cfg.receiver):
            if name == "graph_distance":
                x3[r, k] = graph_distance(graph, holder.position, j.position)
            else:
                x3[r, k] = state.count(j.label)
    opp = roster.opponents(holder)
    x2 = np.zeros((len(opp), len(cfg.failure_receiver)))
    for r, j in enumerate(opp):
        for k, _ in enumerate(cfg.failure_receiver):
            x2[r, k] = state.count(j.label)
    return CovariateBundle(
        c=c, x1=x1, x2=x2, x3=x3,
        fail_candidates=tuple(p.index for p in opp),
        succ_candidates=tuple(p.index for p in mates),
    )


# ---------------------------------------------------------------------------
# Pass geometry for simulation


def _lateral(position: str) -> float:
    if position.startswith("L"):
        return 25.0
    if position.startswith("R"):
        return 75.0
    return 50.0


@dataclass(frozen=True)
class GeometrySampler:
    """Draws pass start/end points and the air-pass flag.

    Start points scatter around a position's typical depth; pass lengths are
    Gamma distributed with a uniform direction biased forwards.
    """

    depth_sd: float = 12.0
    lateral_sd: float = 15.0
    length_shape: float = 2.0
    length_scale: float = 9.0
    p_forward: float = 0.55
    p_air: float = 0.15

    def sample(self, position: str, depth: float, rng: np.random.Generator):
        sx = float(np.clip(depth + self.depth_sd * rng.standard_normal(), 0.0, 100.0))
        sy = float(np.clip(_lateral(position) + self.lateral_sd * rng.standard_normal(), 0.0, 100.0))
        length = float(rng.gamma(self.length_shape, self.length_scale))
        forward = rng.random() < self.p_forward
        angle = float(rng.uniform(-np.pi / 2, np.pi / 2))
        dx = length * np.cos(angle) * (1.0 if forward else -1.0)
        dy = length * np.sin(angle)
        ex = float(np.clip(sx + dx, 0.0, 100.0))
        ey = float(np.clip(sy + dy, 0.0, 100.0))
        air = bool(rng.random() < self.p_air)
        return (round(sx, 6), round(sy, 6), round(ex, 6), round(ey, 6)), air


def formation_roster(
    team1: FormationGraph, team2: FormationGraph, labels: Iterable[str] | None = None
) -> RosterState:
    """An 11-v-11 roster with one player per formation position.

    Players are labelled ``"<team>:<position>"`` unless ``labels`` are given.
    """
    names = list(labels) if labels is not None else (
        [f"1:{p}" for p in team1.positions] + [f"2:{p}" for p in team2.positions]
    )
    positions = list(team1.positions) + list(team2.positions)
    players = [PlayerId(k, names[k], positions[k]) for k in range(len(positions))]
    n1 = len(team1.positions)
    return RosterState(tuple(players[:n1]), tuple(players[n1:]))
