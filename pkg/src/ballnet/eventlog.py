"""Event-log files: parsing, writing, covariate attachment and descriptives.

The canonical schema (``ballnet-events/1``) is one record per row with the
columns in :data:`COLUMNS`. Record kinds:

``match``   match header; ``time`` is the stop time T
``team``    ``team`` (1 or 2), ``player`` = team name, ``position`` = formation
``player``  roster entry active from ``time``
``leave``   player leaves the roster at ``time`` (substitution)
``goal``    goal for ``team`` at ``time``
``gain``    ``player`` gains control at ``time``; starts a possession chain
``pass``    pass from ``player`` to ``receiver`` at ``time``
``stop``    non-pass interruption at ``time``; ends the current chain

CSV files start with a ``# ballnet-events/1`` line followed by the header;
JSON-lines files carry ``"schema"`` in a first metadata object.
"""

from __future__ import annotations

import csv
import io
import json
import warnings
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .model import MatchEvent, MatchLog, ModelError, PlayerId, PossessionState, RosterState
from .pitch import (
    CovariateConfig,
    FormationGraph,
    MatchContext,
    build_covariates,
    holding_covariates,
    load_formation,
)

EVENT_SCHEMA = "ballnet-events/1"
COLUMNS = (
    "kind", "match_id", "time", "team", "player", "position", "receiver", "success",
    "start_x", "start_y", "end_x", "end_y", "air", "note",
)
KINDS = ("match", "team", "player", "leave", "goal", "gain", "pass", "stop")


class EventLogError(ModelError):
    """Schema or consistency violation in an event file (carries row numbers)."""


class EventLogWarning(UserWarning):
    pass


@dataclass(frozen=True)
class RawEventRecord:
    row: int
    kind: str
    match_id: str
    time: float
    team: int | None = None
    player: str = ""
    position: str = ""
    receiver: str = ""
    success: bool | None = None
    geometry: tuple[float, float, float, float] | None = None
    air: bool = False
    note: str = ""


# ---------------------------------------------------------------------------
# Reading


def _fmt(x: float) -> str:
    return repr(float(x))


def _num(value, row: int, name: str, required: bool = True) -> float | None:
    if value is None or value == "":
        if required:
            raise EventLogError(f"row {row}: missing {name}")
        return None
    try:
        v = float(value)
    except (TypeError, ValueError):
        raise EventLogError(f"row {row}: {name} is not a number ({value!r})") from None
    if not np.isfinite(v):
        raise EventLogError(f"row {row}: {name} must be finite")
    return v


def _flag(value, row: int, name: str) -> bool | None:
    if value is None or value == "":
        return None
    if value in ("1", 1, True, "true"):
        return True
    if value in ("0", 0, False, "false"):
        return False
    raise EventLogError(f"row {row}: {name} must be 0 or 1 ({value!r})")


def _record(d: Mapping, row: int) -> RawEventRecord:
    kind = d.get("kind")
    if kind not in KINDS:
        raise EventLogError(f"row {row}: unknown record kind {kind!r}")
    match_id = d.get("match_id")
    if not match_id:
        raise EventLogError(f"row {row}: missing match_id")
    t = _num(d.get("time"), row, "time", required=kind not in ("team",))
    if t is not None and t < 0:
        raise EventLogError(f"row {row}: negative timestamp")
    team = d.get("team")
    team_v = None
    if team not in (None, ""):
        try:
            team_v = int(team)
        except (TypeError, ValueError):
            raise EventLogError(f"row {row}: team must be 1 or 2") from None
        if team_v not in (1, 2):
            raise EventLogError(f"row {row}: team must be 1 or 2")
    coords = [_num(d.get(k), row, k, required=False) for k in ("start_x", "start_y", "end_x", "end_y")]
    present = [c is not None for c in coords]
    if any(present) and not all(present):
        raise EventLogError(f"row {row}: pass geometry needs all four coordinates")
    geometry = tuple(coords) if all(present) else None
    rec = RawEventRecord(
        row=row, kind=kind, match_id=str(match_id), time=0.0 if t is None else t,
        team=team_v, player=str(d.get("player") or ""), position=str(d.get("position") or ""),
        receiver=str(d.get("receiver") or ""), success=_flag(d.get("success"), row, "success"),
        geometry=geometry, air=bool(_flag(d.get("air"), row, "air")), note=str(d.get("note") or ""),
    )
    need = {
        "team": ("team",), "player": ("team", "player"), "leave": ("player",), "goal": ("team",),
        "gain": ("player",), "pass": ("player", "receiver", "success"),
    }.get(kind, ())
    for name in need:
        if getattr(rec, name) in (None, ""):
            raise EventLogError(f"row {row}: {kind} record needs {name}")
    return rec


def read_records(path: str | Path) -> list[RawEventRecord]:
    """Read raw records from a CSV or JSON-lines event file."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise EventLogError(f"{path}: cannot read ({exc.strerror})") from exc
    lines = text.splitlines()
    if path.suffix in (".jsonl", ".json") or (lines and lines[0].lstrip().startswith("{")):
        return _read_jsonl(lines, path)
    return _read_csv(lines, path)


def _read_csv(lines: list[str], path: Path) -> list[RawEventRecord]:
    if not lines or lines[0].strip() != f"# {EVENT_SCHEMA}":
        raise EventLogError(f"{path}: row 1: expected schema line '# {EVENT_SCHEMA}'")
    reader = csv.reader(lines[1:])
    try:
        header = next(reader)
    except StopIteration:
        raise EventLogError(f"{path}: row 2: missing header") from None
    if tuple(header) != COLUMNS:
        raise EventLogError(f"{path}: row 2: header must be {','.join(COLUMNS)}")
    out = []
    for k, values in enumerate(reader, start=3):
        if not values:
            continue
        if len(values) != len(COLUMNS):
            raise EventLogError(f"{path}: row {k}: expected {len(COLUMNS)} fields, got {len(values)}")
        out.append(_record(dict(zip(COLUMNS, values)), k))
    return out


def _read_jsonl(lines: list[str], path: Path) -> list[RawEventRecord]:
    out = []
    seen_schema = False
    for k, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            d = json.loads(line)
        except json.JSONDecodeError as exc:
            raise EventLogError(f"{path}: row {k}: invalid JSON ({exc.msg})") from None
        if not isinstance(d, dict):
            raise EventLogError(f"{path}: row {k}: expected a JSON object")
        if "schema" in d:
            if d["schema"] != EVENT_SCHEMA:
                raise EventLogError(f"{path}: row {k}: unsupported schema {d['schema']!r}")
            seen_schema = True
            continue
        if not seen_schema:
            raise EventLogError(f"{path}: row {k}: schema line must come first")
        unknown = set(d) - set(COLUMNS)
        if unknown:
            raise EventLogError(f"{path}: row {k}: unknown fields {sorted(unknown)}")
        out.append(_record(d, k))
    if not seen_schema:
        raise EventLogError(f"{path}: missing schema line")
    return out


# ---------------------------------------------------------------------------
# Assembling logs


@dataclass
class _MatchDraft:
    match_id: str
    stop: float | None = None
    team_names: dict = field(default_factory=dict)
    formations: dict = field(default_factory=dict)
    players: dict = field(default_factory=dict)  # label -> PlayerId
    roster_changes: list = field(default_factory=list)  # (time, row, kind, label, team)
    goals: list = field(default_factory=list)
    flow: list = field(default_factory=list)  # gain / pass / stop records


def _rosters(draft: _MatchDraft) -> tuple[RosterState, ...]:
    members: dict[str, int] = {}
    states: list[RosterState] = []
    changes = sorted(draft.roster_changes, key=lambda c: (c[0], c[1]))
    times = sorted({c[0] for c in changes})
    if not times:
        raise EventLogError(f"match {draft.match_id}: no player records")
    for t in times:
        for when, row, kind, label, team in changes:
            if when != t:
                continue
            if kind == "player":
                members[label] = team
            elif label not in members:
                raise EventLogError(f"row {row}: {label!r} leaves but is not on the roster")
            else:
                del members[label]
        t1 = tuple(draft.players[l] for l, tm in members.items() if tm == 1)
        t2 = tuple(draft.players[l] for l, tm in members.items() if tm == 2)
        try:
            states.append(RosterState(t1, t2, effective_from=t))
        except ModelError as exc:
            raise EventLogError(f"match {draft.match_id} at time {t!r}: {exc}") from None
    return tuple(states)


def parse_event_log(path: str | Path, strict: bool = True) -> list[MatchLog]:
    """Parse an event file into possession chains (one MatchLog per chain).

    Chains start at ``gain`` records and end at ``stop`` records or the match
    stop time. A pass whose passer is not the current holder is a chain break:
    an error in strict mode, otherwise a new chain starts at the previous
    timestamp with a warning. Equal timestamps are separated by the smallest
    representable gap, also with a warning.
    """
    records = read_records(path)
    drafts: dict[str, _MatchDraft] = {}
    for rec in records:
        d = drafts.setdefault(rec.match_id, _MatchDraft(rec.match_id))
        if rec.kind == "match":
            if d.stop is not None:
                raise EventLogError(f"row {rec.row}: duplicate match record for {rec.match_id}")
            d.stop = rec.time
        elif rec.kind == "team":
            d.team_names[rec.team] = rec.player or f"team{rec.team}"
            d.formations[rec.team] = rec.position
        elif rec.kind == "player":
            if rec.player not in d.players:
                d.players[rec.player] = PlayerId(len(d.players), rec.player, rec.position)
            elif d.players[rec.player].position != rec.position:
                raise EventLogError(f"row {rec.row}: player {rec.player!r} changes position")
            d.roster_changes.append((rec.time, rec.row, "player", rec.player, rec.team))
        elif rec.kind == "leave":
            d.roster_changes.append((rec.time, rec.row, "leave", rec.player, rec.team))
        elif rec.kind == "goal":
            d.goals.append((rec.time, rec.team))
        else:
            d.flow.append(rec)
    logs: list[MatchLog] = []
    for d in drafts.values():
        if d.stop is None:
            raise EventLogError(f"match {d.match_id}: missing match record")
        logs.extend(_segments(d, strict))
    return logs


def _segments(d: _MatchDraft, strict: bool) -> list[MatchLog]:
    rosters = _rosters(d)
    formations = (d.formations.get(1, ""), d.formations.get(2, ""))
    names = (d.team_names.get(1, "team1"), d.team_names.get(2, "team2"))
    goals = tuple(sorted(d.goals))
    out: list[MatchLog] = []
    flow = sorted(d.flow, key=lambda r: r.row)

    def player(label: str, row: int) -> PlayerId:
        try:
            return d.players[label]
        except KeyError:
            raise EventLogError(f"row {row}: unknown player {label!r}") from None

    seg: dict | None = None
    prev_t = -np.inf

    def close(stop: float):
        nonlocal seg
        if seg is None:
            return
        try:
            out.append(MatchLog(
                events=tuple(seg["events"]), initial_holder=seg["holder0"], stop_time=stop,
                roster_timeline=rosters, score_timeline=goals, match_id=d.match_id,
                start_time=seg["start"], formations=formations, team_names=names,
                segment=len(out),
            ))
        except ModelError as exc:
            raise EventLogError(f"match {d.match_id} chain starting row {seg['row']}: {exc}") from None
        seg = None

    for rec in flow:
        t = rec.time
        if t < prev_t:
            raise EventLogError(f"row {rec.row}: timestamp {t!r} precedes the previous record")
        if rec.kind == "gain":
            close(max(t, prev_t) if seg is not None else t)
            seg = {"events": [], "holder0": player(rec.player, rec.row), "start": t,
                   "holder": player(rec.player, rec.row), "row": rec.row, "t": t}
            prev_t = t
            continue
        if rec.kind == "stop":
            if seg is None:
                raise EventLogError(f"row {rec.row}: stop record outside a possession chain")
            close(t)
            prev_t = t
            continue
        # pass
        passer = player(rec.player, rec.row)
        receiver = player(rec.receiver, rec.row)
        if seg is None or passer.index != seg["holder"].index:
            if strict:
                if seg is None:
                    raise EventLogError(f"row {rec.row}: pass before any gain record")
                raise EventLogError(
                    f"row {rec.row}: chain break, passer {passer.label} is not the holder "
                    f"{seg['holder'].label}"
                )
            start = seg["t"] if seg is not None else t
            warnings.warn(f"row {rec.row}: chain break, new chain starts at {start!r}", EventLogWarning)
            close(start)
            seg = {"events": [], "holder0": passer, "start": start, "holder": passer,
                   "row": rec.row, "t": start}
        if t <= seg["t"]:
            shifted = float(np.nextafter(seg["t"], np.inf))
            warnings.warn(f"row {rec.row}: duplicate timestamp shifted to {shifted!r}", EventLogWarning)
            t = shifted
        ev = MatchEvent(
            index=len(seg["events"]) + 1, time=t, holding_time=t - seg["t"],
            passer=passer, receiver=receiver, success=bool(rec.success),
            geometry=rec.geometry, air=rec.air,
        )
        seg["events"].append(ev)
        seg["holder"] = receiver
        seg["t"] = t
        prev_t = t
    close(d.stop)
    return out


# ---------------------------------------------------------------------------
# Writing


def _row(kind, match_id, time="", team="", player="", position="", receiver="", success="",
         geometry=None, air="", note="") -> list[str]:
    g = ["", "", "", ""] if geometry is None else [_fmt(v) for v in geometry]
    return [kind, match_id, time, str(team), player, position, receiver, success, *g, air, note]


def _match_rows(logs: Sequence[MatchLog]) -> list[list[str]]:
    head = logs[0]
    mid = head.match_id
    stop = logs[-1].stop_time
    rows = [_row("match", mid, _fmt(stop))]
    for k in (1, 2):
        rows.append(_row("team", mid, "", k, head.team_names[k - 1], head.formations[k - 1]))
    prev: dict[str, PlayerId] = {}
    teams: dict[str, int] = {}
    for roster in head.roster_timeline:
        now = {p.label: p for p in roster.players}
        for label, p in prev.items():
            if label not in now:
                rows.append(_row("leave", mid, _fmt(roster.effective_from), teams[label], label))
        for p in roster.players:
            if p.label not in prev:
                teams[p.label] = roster.team_of(p)
                rows.append(_row("player", mid, _fmt(roster.effective_from), teams[p.label],
                                 p.label, p.position))
        prev = now
    for t, team in head.score_timeline:
        rows.append(_row("goal", mid, _fmt(t), team))
    for k, log in enumerate(logs):
        rows.append(_row("gain", mid, _fmt(log.start_time), player=log.initial_holder.label))
        for ev in log.events:
            rows.append(_row(
                "pass", mid, _fmt(ev.time), player=ev.passer.label, receiver=ev.receiver.label,
                success="1" if ev.success else "0", geometry=ev.geometry, air="1" if ev.air else "0",
            ))
        if k < len(logs) - 1:
            rows.append(_row("stop", mid, _fmt(log.stop_time)))
    return rows


def _check_writable_order(logs: Sequence[MatchLog]) -> None:
    for a, b in zip(logs, logs[1:]):
        if b.start_time < a.stop_time:
            raise EventLogError(f"match {a.match_id}: chains overlap in time")
    first = logs[0].roster_timeline
    for log in logs:
        if log.roster_timeline != first or log.score_timeline != logs[0].score_timeline:
            raise EventLogError(f"match {log.match_id}: chains disagree on roster or score timeline")
    idx = [p.index for r in first for p in r.players]
    labels_in_order = []
    for r in first:
        for p in r.players:
            if p.label not in labels_in_order:
                labels_in_order.append(p.label)
    if sorted(set(idx)) != list(range(len(labels_in_order))):
        raise EventLogError(f"match {logs[0].match_id}: player indices must be dense")


def format_event_log(logs: Sequence[MatchLog], fmt: str = "csv") -> str:
    """Serialize logs; chains sharing a match id are written as one match."""
    groups: dict[str, list[MatchLog]] = defaultdict(list)
    for log in logs:
        groups[log.match_id].append(log)
    rows: list[list[str]] = []
    for mid, group in groups.items():
        group = sorted(group, key=lambda l: l.start_time)
        _check_writable_order(group)
        rows.extend(_match_rows(group))
    if fmt == "csv":
        buf = io.StringIO()
        buf.write(f"# {EVENT_SCHEMA}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(COLUMNS)
        w.writerows(rows)
        return buf.getvalue()
    if fmt == "jsonl":
        lines = [json.dumps({"schema": EVENT_SCHEMA})]
        for r in rows:
            d = {k: v for k, v in zip(COLUMNS, r) if v != ""}
            lines.append(json.dumps(d, sort_keys=False))
        return "\n".join(lines) + "\n"
    raise EventLogError(f"unknown event format {fmt!r}")


def write_event_log(logs: Sequence[MatchLog], path: str | Path, fmt: str | None = None) -> None:
    path = Path(path)
    if fmt is None:
        fmt = "jsonl" if path.suffix in (".jsonl", ".json") else "csv"
    text = format_event_log(logs, fmt)
    try:
        path.write_text(text)
    except OSError as exc:
        raise EventLogError(f"{path}: cannot write ({exc.strerror})") from exc


def write_match_log(log: MatchLog, path: str | Path, fmt: str | None = None) -> None:
    write_event_log([log], path, fmt)


# ---------------------------------------------------------------------------
# Covariates and descriptives


def _graphs_for(log: MatchLog, graphs: Mapping[int, FormationGraph] | None) -> dict[int, FormationGraph]:
    if graphs is not None:
        return dict(graphs)
    out = {}
    for team, name in zip((1, 2), log.formations):
        if not name:
            raise ModelError(f"match {log.match_id}: team {team} has no formation")
        out[team] = load_formation(name)
    return out


def attach_covariates(
    logs: Sequence[MatchLog],
    cfg: CovariateConfig,
    graphs: Mapping[int, FormationGraph] | None = None,
) -> list[MatchLog]:
    """Rebuild every event's covariates from the log history.

    Pass-received counts restart with each new match id under match scope and
    accumulate over the list order under season scope.
    """
    from dataclasses import replace

    out = []
    received: dict[str, int] = {}
    current_match = None
    for log in logs:
        if cfg.pass_received_scope == "match" and log.match_id != current_match:
            received = {}
        current_match = log.match_id
        g = _graphs_for(log, graphs)
        state = PossessionState(log.initial_holder, log.start_time, log.score_at(log.start_time), received)
        events = []
        for ev in log.events:
            roster = log.roster_at(state.clock)
            try:
                bundle = build_covariates(ev, state, cfg, MatchContext(roster, g))
            except ModelError as exc:
                raise ModelError(f"match {log.match_id} event {ev.index}: {exc}") from None
            events.append(replace(ev, covariates=bundle))
            if ev.success:
                received[ev.receiver.label] = received.get(ev.receiver.label, 0) + 1
            state.holder = ev.receiver
            state.clock = ev.time
            state.score = log.score_at(ev.time)
        roster = log.roster_at(state.clock)
        censor = holding_covariates(state.holder, roster.team_of(state.holder), state.score, cfg)
        out.append(replace(log, events=tuple(events), censor_c=censor))
    return out


@dataclass(frozen=True)
class Descriptives:
    passes: int
    successes: int
    by_team: dict
    by_position: dict
    by_player: dict

    @property
    def success_rate(self) -> float:
        return self.successes / self.passes if self.passes else float("nan")


def describe(logs: Iterable[MatchLog]) -> Descriptives:
    """Pass and success counts overall and by team name, position and player."""
    n = s = 0
    by_team: dict = defaultdict(lambda: [0, 0])
    by_pos: dict = defaultdict(lambda: [0, 0])
    by_player: dict = defaultdict(lambda: [0, 0])
    for log in logs:
        for ev in log.events:
            team = log.roster_at(ev.time - ev.holding_time).team_of(ev.passer)
            k = int(ev.success)
            n += 1
            s += k
            for table, key in ((by_team, log.team_names[team - 1]), (by_pos, ev.passer.position),
                               (by_player, ev.passer.label)):
                table[key][0] += 1
                table[key][1] += k
    conv = lambda t: {k: tuple(v) for k, v in sorted(t.items())}
    return Descriptives(n, s, conv(by_team), conv(by_pos), conv(by_player))
