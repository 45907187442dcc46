import csv
import io
import json
import math
import warnings
from importlib import resources

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ballnet import fixtures
from ballnet import rng as rngmod
from ballnet.eventlog import (
    COLUMNS,
    EventLogError,
    EventLogWarning,
    attach_covariates,
    describe,
    format_event_log,
    parse_event_log,
    write_match_log,
)
from ballnet.model import ModelError, PlayerId, PossessionState
from ballnet.pitch import (
    CovariateConfig,
    MatchContext,
    build_covariates,
    formation_roster,
    graph_distance,
    load_formation,
)
from ballnet.simulator import PitchCovariates, SimulationConfig, simulate_match

# Shortest GK -> CF path in the shipped 4-4-2 graph, from the Floyd-Warshall
# oracle below: GK - RCB - RCMF - CF.
GK_TO_CF_442 = 3


def _floyd_warshall(name: str) -> dict:
    doc = json.loads(resources.files("ballnet.data.formations").joinpath(f"{name}.json").read_text())
    pos = doc["positions"]
    n = len(pos)
    d = np.full((n, n), np.inf)
    np.fill_diagonal(d, 0)
    for a, b in doc["edges"]:
        i, j = pos.index(a), pos.index(b)
        d[i, j] = d[j, i] = 1
    for k in range(n):
        d = np.minimum(d, d[:, [k]] + d[[k], :])
    return {(a, b): d[i, j] for i, a in enumerate(pos) for j, b in enumerate(pos)}


def test_builtin_formations():
    assert set(load_formation("4-4-2").positions) == {
        "GK", "LB", "LCB", "RCB", "RB", "LW", "LCMF", "RCMF", "RW", "SS", "CF"}
    assert set(load_formation("3-5-2").positions) == {
        "GK", "LCB3", "CB", "RCB3", "LWB", "LCMF3", "DMF", "RCMF3", "RWB", "SS", "CF"}
    with pytest.raises(ModelError):
        load_formation("4-3-3")


def test_formation_file_errors(tmp_path):
    doc = {"name": "x", "positions": ["A", "B", "C"], "edges": [["A", "B"]]}
    p = tmp_path / "x.json"
    p.write_text(json.dumps(doc))
    with pytest.raises(ModelError, match="disconnected"):
        load_formation(p)
    p.write_text(json.dumps({"name": "x", "positions": ["A", "B"], "edges": [["A", "Z"]]}))
    with pytest.raises(ModelError):
        load_formation(p)
    p.write_text("{not json")
    with pytest.raises(ModelError):
        load_formation(p)
    p.write_text(json.dumps({"name": "y", "positions": ["A", "B"], "edges": [["A", "B"]]}))
    assert graph_distance(load_formation(p), "A", "B") == 1


@pytest.mark.parametrize("name", ["4-4-2", "3-5-2"])
def test_graph_distance_matches_oracle_and_is_metric(name):
    g = load_formation(name)
    oracle = _floyd_warshall(name)
    P = g.positions
    for a in P:
        for b in P:
            d = graph_distance(g, a, b)
            assert d == oracle[(a, b)]
            assert d == graph_distance(g, b, a)
            assert (d == 0) == (a == b)
            for c in P:
                assert d <= graph_distance(g, a, c) + graph_distance(g, c, b)
    for a, b in g.edges:
        assert graph_distance(g, a, b) == 1
    with pytest.raises(ModelError):
        graph_distance(g, "GK", "nope")


def test_gk_to_cf_frozen():
    assert graph_distance(load_formation("4-4-2"), "GK", "CF") == GK_TO_CF_442


class _Ev:
    def __init__(self, geometry, air=False):
        self.geometry = geometry
        self.air = air


def _ctx():
    g = load_formation("4-4-2")
    roster = formation_roster(g, g)
    cfg = CovariateConfig.for_formations(g)
    return g, roster, cfg, MatchContext(roster, {1: g, 2: g})


def test_build_covariates_definitions():
    g, roster, cfg, ctx = _ctx()
    holder = roster.by_label("1:GK")
    state = PossessionState(holder, 0.0, (0, 0), {})
    b = build_covariates(_Ev((10.0, 50.0, 40.0, 10.0)), state, cfg, ctx)
    x = dict(zip(cfg.success, b.x1))
    assert x["length"] == 50.0
    assert x["forward"] == 1.0 and x["start_half"] == 0.0 and x["end_third"] == 0.0
    assert x["winning"] == 0.0 and x["losing"] == 0.0 and x["intercept"] == 1.0 and x["air"] == 0.0
    # First pass under match scope: no receptions yet.
    assert np.all(b.x3[:, list(cfg.receiver).index("pass_received")] == 0)
    mates = roster.teammates(holder)
    dist = b.x3[:, list(cfg.receiver).index("graph_distance")]
    assert list(dist) == [graph_distance(g, "GK", j.position) for j in mates]
    c = dict(zip(cfg.holding_names, b.c))
    assert c["GK"] == 1.0 and sum(b.c) == 1.0
    b2 = build_covariates(_Ev((60.0, 50.0, 70.0, 50.0), air=True),
                          PossessionState(holder, 0.0, (2, 1), {"1:CF": 3}), cfg, ctx)
    x2 = dict(zip(cfg.success, b2.x1))
    assert x2["start_half"] == 1.0 and x2["end_third"] == 1.0 and x2["air"] == 1.0
    assert x2["winning"] == 1.0 and x2["losing"] == 0.0
    cf = [j.label for j in mates].index("1:CF")
    assert b2.x3[cf, list(cfg.receiver).index("pass_received")] == 3
    away = roster.by_label("2:GK")
    b3 = build_covariates(_Ev((60.0, 50.0, 50.0, 50.0)), PossessionState(away, 0.0, (2, 1), {}), cfg, ctx)
    x3 = dict(zip(cfg.success, b3.x1))
    assert x3["losing"] == 1.0 and x3["winning"] == 0.0 and x3["forward"] == 0.0
    # Pure: same inputs, same outputs.
    again = build_covariates(_Ev((10.0, 50.0, 40.0, 10.0)), state, cfg, ctx)
    assert np.array_equal(again.x3, b.x3) and np.array_equal(again.x1, b.x1)
    with pytest.raises(ModelError):
        build_covariates(_Ev(None), state, cfg, ctx)


def _write_rows(path, rows):
    buf = io.StringIO()
    buf.write("# ballnet-events/1\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COLUMNS)
    for r in rows:
        w.writerow([r.get(c, "") for c in COLUMNS])
    path.write_text(buf.getvalue())


def _roster_rows(mid, names=("home", "away")):
    rows = [{"kind": "match", "match_id": mid, "time": "90"}]
    for k, n in ((1, names[0]), (2, names[1])):
        rows.append({"kind": "team", "match_id": mid, "team": k, "player": n, "position": "4-4-2"})
    for k in (1, 2):
        for p in load_formation("4-4-2").positions:
            rows.append({"kind": "player", "match_id": mid, "time": "0", "team": k,
                         "player": f"{k}:{p}", "position": p})
    return rows


def test_parse_three_passes(tmp_path):
    rows = _roster_rows("m1") + [
        {"kind": "gain", "match_id": "m1", "time": "0.5", "player": "1:GK"},
        {"kind": "pass", "match_id": "m1", "time": "1.25", "player": "1:GK", "receiver": "1:LB", "success": 1},
        {"kind": "pass", "match_id": "m1", "time": "2", "player": "1:LB", "receiver": "2:CF", "success": 0},
        {"kind": "pass", "match_id": "m1", "time": "4.5", "player": "2:CF", "receiver": "2:SS", "success": 1},
    ]
    p = tmp_path / "three.csv"
    _write_rows(p, rows)
    logs = parse_event_log(p)
    assert len(logs) == 1
    log = logs[0]
    assert [ev.holding_time for ev in log.events] == [0.75, 0.75, 2.5]
    assert log.stop_time == 90.0 and log.start_time == 0.5 and log.team_names == ("home", "away")


def test_duplicate_timestamp_shift(tmp_path):
    rows = _roster_rows("m1") + [
        {"kind": "gain", "match_id": "m1", "time": "0", "player": "1:GK"},
        {"kind": "pass", "match_id": "m1", "time": "1", "player": "1:GK", "receiver": "1:LB", "success": 1},
        {"kind": "pass", "match_id": "m1", "time": "1", "player": "1:LB", "receiver": "1:LW", "success": 1},
    ]
    p = tmp_path / "dup.csv"
    _write_rows(p, rows)
    with pytest.warns(EventLogWarning, match="duplicate timestamp"):
        log = parse_event_log(p)[0]
    assert log.events[1].time == np.nextafter(1.0, np.inf)
    assert log.events[1].holding_time > 0


def test_chain_breaks_and_errors(tmp_path):
    base = _roster_rows("m1") + [
        {"kind": "gain", "match_id": "m1", "time": "0", "player": "1:GK"},
        {"kind": "pass", "match_id": "m1", "time": "1", "player": "1:GK", "receiver": "1:LB", "success": 1},
        {"kind": "pass", "match_id": "m1", "time": "2", "player": "1:RB", "receiver": "1:LW", "success": 1},
    ]
    p = tmp_path / "brk.csv"
    _write_rows(p, base)
    with pytest.raises(EventLogError, match=r"row \d+: chain break"):
        parse_event_log(p)
    with pytest.warns(EventLogWarning):
        logs = parse_event_log(p, strict=False)
    assert [len(l.events) for l in logs] == [1, 1]
    bad = base[:-1] + [{"kind": "pass", "match_id": "m1", "time": "x", "player": "1:LB", "receiver": "1:LW",
                        "success": 1}]
    _write_rows(p, bad)
    with pytest.raises(EventLogError, match=rf"row {len(bad) + 2}: time is not a number"):
        parse_event_log(p)
    wrong = base[:-1] + [{"kind": "pass", "match_id": "m1", "time": "3", "player": "1:LB", "receiver": "2:LW",
                          "success": 1}]
    _write_rows(p, wrong)
    with pytest.raises(EventLogError, match="success flag"):
        parse_event_log(p)
    p.write_text("kind,match_id\n")
    with pytest.raises(EventLogError, match="row 1"):
        parse_event_log(p)


def test_stop_records_segment_chains(tmp_path):
    rows = _roster_rows("m1") + [
        {"kind": "gain", "match_id": "m1", "time": "0", "player": "1:GK"},
        {"kind": "pass", "match_id": "m1", "time": "1", "player": "1:GK", "receiver": "1:LB", "success": 1},
        {"kind": "stop", "match_id": "m1", "time": "1.5"},
        {"kind": "gain", "match_id": "m1", "time": "2", "player": "2:GK"},
        {"kind": "pass", "match_id": "m1", "time": "3", "player": "2:GK", "receiver": "2:LB", "success": 1},
    ]
    p = tmp_path / "seg.csv"
    _write_rows(p, rows)
    logs = parse_event_log(p)
    assert [(l.start_time, l.stop_time, l.segment) for l in logs] == [(0.0, 1.5, 0), (2.0, 90.0, 1)]
    assert logs[1].initial_holder.label == "2:GK"
    # Round trip keeps the segmentation.
    out = tmp_path / "seg2.csv"
    out.write_text(format_event_log(logs))
    assert parse_event_log(out) == logs


# ---------------------------------------------------------------------------
# Juventus 4-4-2 descriptive fixture: 15,832 passes, 14,138 successful.

JUVE_PASSES = 15832
JUVE_SUCCESSES = 14138


def _juventus_fixture(path):
    rng = np.random.default_rng(2015)
    flags = np.zeros(JUVE_PASSES, bool)
    flags[rng.choice(JUVE_PASSES, JUVE_SUCCESSES, replace=False)] = True
    positions = load_formation("4-4-2").positions
    rows = []
    n_matches = 20
    per = np.array_split(np.arange(JUVE_PASSES), n_matches)
    for m, idx in enumerate(per):
        mid = f"juve-{m:02d}"
        rows += _roster_rows(mid, ("Juventus", "Opponent"))
        t = 0.0
        holder = None
        for k in idx:
            if holder is None:
                holder = f"1:{positions[rng.integers(11)]}"
                rows.append({"kind": "gain", "match_id": mid, "time": repr(t), "player": holder})
            t = round(t + 0.1, 6)
            if flags[k]:
                rec = f"1:{rng.choice([p for p in positions if f'1:{p}' != holder])}"
            else:
                rec = f"2:{positions[rng.integers(11)]}"
            rows.append({"kind": "pass", "match_id": mid, "time": repr(t), "player": holder,
                         "receiver": rec, "success": int(flags[k])})
            if flags[k]:
                holder = rec
            else:
                t = round(t + 0.05, 6)
                rows.append({"kind": "stop", "match_id": mid, "time": repr(t)})
                holder = None
    _write_rows(path, rows)
    return rows


def test_juventus_fixture_aggregates(tmp_path):
    p = tmp_path / "juve.csv"
    rows = _juventus_fixture(p)
    logs = parse_event_log(p)
    d = describe(logs)
    assert d.passes == JUVE_PASSES and d.successes == JUVE_SUCCESSES
    assert round(100 * d.success_rate, 2) == 89.30
    assert d.by_team == {"Juventus": (JUVE_PASSES, JUVE_SUCCESSES)}
    # Brute-force recount of the raw rows by position and by player.
    by_pos: dict = {}
    by_player: dict = {}
    for r in rows:
        if r["kind"] != "pass":
            continue
        pos = r["player"].split(":")[1]
        for table, key in ((by_pos, pos), (by_player, r["player"])):
            n, s = table.get(key, (0, 0))
            table[key] = (n + 1, s + int(r["success"]))
    assert d.by_position == dict(sorted(by_pos.items()))
    assert d.by_player == dict(sorted(by_player.items()))


# ---------------------------------------------------------------------------
# Serialization


def _sim_log(seed: int, T: float, goals=()):
    g = fixtures.study_graph()
    cov = fixtures.study_covariates()
    cfg = SimulationConfig(fixtures.study_roster(), PitchCovariates(cov, {1: g, 2: g}), T=T, short_season=True,
                           goals=goals, formations=(g.name, g.name), team_names=("home", "away"),
                           match_id=f"m{seed}")
    return simulate_match(cfg, fixtures.true_params(cov), fixtures.true_effects(cov), rngmod.stream(seed, 0))


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**63), T=st.floats(0.001, 30.0),
       goals=st.lists(st.tuples(st.floats(0.0, 30.0), st.sampled_from([1, 2])), max_size=3),
       fmt=st.sampled_from(["csv", "jsonl"]))
def test_round_trip_random_logs(tmp_path_factory, seed, T, goals, fmt):
    log = _sim_log(seed, T, tuple(g for g in goals if g[0] <= T))
    path = tmp_path_factory.mktemp("rt") / f"log.{fmt}"
    write_match_log(log, path)
    back = parse_event_log(path)
    assert back == [log]
    for a, b in zip(back[0].events, log.events):
        assert a.time == b.time and a.holding_time == b.holding_time and a.geometry == b.geometry
    assert format_event_log(back, fmt) == path.read_text()


def test_empty_log_round_trip(tmp_path):
    log = _sim_log(1, 0.0001)
    assert len(log.events) == 0
    p = tmp_path / "empty.csv"
    write_match_log(log, p)
    lines = p.read_text().splitlines()
    assert not any(line.startswith("pass,") for line in lines)
    assert parse_event_log(p) == [log]


def test_canonical_bytes_frozen():
    from ballnet.model import MatchEvent, MatchLog, RosterState
    a, b = PlayerId(0, "a", "GK"), PlayerId(1, "b", "CF")
    log = MatchLog((MatchEvent(1, 0.1, 0.1, a, b, False, geometry=(1.0, 2.5, 3.0, 4.0)),), a, 90.0,
                   (RosterState((a,), (b,)),), match_id="x", formations=("f", "f"))
    assert format_event_log([log]) == (
        "# ballnet-events/1\n"
        "kind,match_id,time,team,player,position,receiver,success,start_x,start_y,end_x,end_y,air,note\n"
        "match,x,90.0,,,,,,,,,,,\n"
        "team,x,,1,team1,f,,,,,,,,\n"
        "team,x,,2,team2,f,,,,,,,,\n"
        "player,x,0.0,1,a,GK,,,,,,,,\n"
        "player,x,0.0,2,b,CF,,,,,,,,\n"
        "gain,x,0.0,,a,,,,,,,,,\n"
        "pass,x,0.1,,a,,b,0,1.0,2.5,3.0,4.0,0,\n"
    )


def test_attach_covariates_scopes():
    logs = [_sim_log(s, 400.0) for s in (1, 2)]
    match_cfg = fixtures.study_covariates("match")
    season_cfg = fixtures.study_covariates("season")
    k = list(match_cfg.receiver).index("pass_received")
    m = attach_covariates(logs, match_cfg)
    s = attach_covariates(logs, season_cfg)
    assert np.all(m[1].events[0].covariates.x3[:, k] == 0)
    assert s[1].events[0].covariates.x3[:, k].sum() > 0
    again = attach_covariates(logs, match_cfg)
    for x, y in zip(m[0].events, again[0].events):
        assert np.array_equal(x.covariates.x3, y.covariates.x3)
    # Re-attaching to simulated logs reproduces the simulator's covariates.
    for x, y in zip(m[0].events, logs[0].events):
        assert np.array_equal(x.covariates.x1, y.covariates.x1)
        assert np.array_equal(x.covariates.x3, y.covariates.x3)
        assert np.array_equal(x.covariates.c, y.covariates.c)
