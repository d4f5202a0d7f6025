from __future__ import annotations

import io
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import minigame
from courtplan.ingest import (
    REWARDS,
    AlignmentError,
    EventType,
    MotionParseError,
    PbpEvent,
    PbpParseError,
    frames_from_array,
    frames_to_array,
    label_reward,
    parse_motion,
    parse_pbp,
    possession_counts,
    segment_possessions,
    serialize_motion,
    serialize_pbp,
    write_possession_index,
)

ZERO_TYPES = {EventType.START_OF_PERIOD, EventType.JUMP_BALL, EventType.TIMEOUT,
              EventType.SUBSTITUTION, EventType.END_OF_PERIOD}


def _event(etype, team=1, clock=100.0, quarter=1):
    return PbpEvent(0, quarter, clock, etype, team, 0, "g")


def _moment(n_players=10, wall=0):
    rows = [[-1, -1, 1.0, 2.0, 3.0]]
    rows += [[1 if k < 5 else 2, k, float(k), 1.0, 0.0] for k in range(n_players)]
    return [1, wall, 700.0, 20.0, None, rows]


# --- label_reward ----------------------------------------------------------

@pytest.mark.parametrize("etype,team,expected", [
    (EventType.THREE_MADE, 1, 3.0),
    (EventType.TURNOVER, 1, -1.0),
    (EventType.TWO_MADE, 2, -2.0),
])
def test_label_reward_examples(etype, team, expected):
    assert label_reward(_event(etype, team=1), team) == expected


@given(st.sampled_from(list(EventType)))
def test_label_reward_antisymmetric(etype):
    e = _event(etype, team=7)
    a, b = label_reward(e, 7), label_reward(e, 8)
    if etype in ZERO_TYPES:
        assert a == 0.0 and b == 0.0
    else:
        assert a == -b != 0.0


def test_reward_table_covers_every_type():
    assert set(REWARDS) == set(EventType)
    assert len(EventType) == 12


# --- parse_motion ----------------------------------------------------------

def test_parse_motion_empty():
    assert parse_motion(b'{"gameid": "x", "events": []}').frames == []


def test_parse_motion_one_moment():
    doc = {"gameid": "x", "events": [{"eventId": "1", "moments": [_moment()]}]}
    m = parse_motion(json.dumps(doc).encode())
    assert len(m.frames) == 1 and m.skipped == 0
    f = m.frames[0]
    assert f.ball == (1.0, 2.0, 3.0) and len(f.players) == 10


def test_parse_motion_skips_short_moment():
    doc = {"gameid": "x", "events": [{"eventId": "1", "moments": [_moment(9, 0), _moment(10, 40)]}]}
    m = parse_motion(json.dumps(doc))
    assert m.skipped == 1 and len(m.frames) == 1


def test_parse_motion_sorts_and_dedupes():
    doc = {"gameid": "x", "events": [
        {"eventId": "2", "moments": [_moment(wall=80), _moment(wall=40)]},
        {"eventId": "1", "moments": [_moment(wall=40), _moment(wall=0)]},
    ]}
    walls = [f.wall_time_ms for f in parse_motion(json.dumps(doc)).frames]
    assert walls == [0, 40, 80]


def test_parse_motion_bad_json_reports_offset():
    with pytest.raises(MotionParseError) as exc:
        parse_motion(b'{"gameid": "x", "events": [')
    assert exc.value.offset == 27
    with pytest.raises(MotionParseError):
        parse_motion(b"[1, 2]")


# --- parse_pbp ---------------------------------------------------------------

HEADER = "game_id,quarter,game_clock_s,wall_time_ms,event_type,acting_team_id,points\n"


def test_parse_pbp_direct_mapping():
    (e,) = parse_pbp(HEADER + "g,1,700.5,10,turnover,5,0\n")
    assert e.event_type is EventType.TURNOVER and e.acting_team_id == 5 and e.game_clock_s == 700.5


def test_parse_pbp_unknown_type_is_row_error():
    with pytest.raises(PbpParseError) as exc:
        parse_pbp(HEADER + "g,1,700,10,turnover,5,0\ng,1,690,20,alley-oop,5,0\n")
    assert exc.value.row_errors[0][0] == 3
    assert "alley-oop" in exc.value.row_errors[0][1]


def test_parse_pbp_orders_by_quarter_then_clock():
    text = HEADER + "g,2,700,1,rebound,1,0\ng,1,300,2,rebound,1,0\ng,1,600,3,rebound,1,0\n"
    assert [(e.quarter, e.game_clock_s) for e in parse_pbp(text)] == [(1, 600.0), (1, 300.0), (2, 700.0)]


def test_twelve_type_fixture_roundtrip():
    events = [PbpEvent(k, 1, 700.0 - k, t, 1 + k % 2, 0, "g") for k, t in enumerate(EventType)]
    text = serialize_pbp(events)
    assert parse_pbp(text) == events
    assert serialize_pbp(parse_pbp(text)) == text


clocks = st.floats(0, 720, allow_nan=False).map(lambda c: round(c, 2))


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.integers(1, 4), clocks, st.sampled_from(list(EventType)), st.integers(1, 3),
                          st.integers(0, 3)), max_size=15))
def test_pbp_roundtrip_property(rows):
    events = [PbpEvent(k, q, c, t, team, pts, "g") for k, (q, c, t, team, pts) in enumerate(rows)]
    events.sort(key=lambda e: (e.quarter, -e.game_clock_s))
    assert parse_pbp(serialize_pbp(events)) == events


def test_motion_roundtrip(synthetic_games):
    g = synthetic_games[0]
    m = parse_motion(serialize_motion(g.game_id, g.frames))
    assert m.frames == g.frames and m.game_id == g.game_id
    assert serialize_motion(m.game_id, m.frames) == serialize_motion(g.game_id, g.frames)


def test_frame_store_roundtrip():
    fr = minigame.frames()
    back = frames_from_array(frames_to_array(fr))
    assert [(f.ball, f.players, f.game_clock_s) for f in back] == [(f.ball, f.players, f.game_clock_s) for f in fr]


# --- segmentation --------------------------------------------------------------

def test_minigame_oracle():
    recs = segment_possessions(minigame.frames(), minigame.events(), minigame.GAME_ID)
    got = [(r.start_frame_idx, r.end_frame_idx, r.offense_team_id, r.reward_offense, len(r.extra_events))
           for r in recs]
    assert got == minigame.EXPECTED
    for r in recs:
        assert r.reward_defense == -r.reward_offense


def test_timeout_frames_unassigned():
    recs = segment_possessions(minigame.frames(), minigame.events())
    covered = {k for r in recs for k in range(r.start_frame_idx, r.end_frame_idx)}
    assert not covered & set(range(50, 60))


def test_period_markers_only():
    ev = [e for e in minigame.events() if e.event_type in (EventType.START_OF_PERIOD, EventType.END_OF_PERIOD)]
    assert segment_possessions(minigame.frames(), ev) == []
    assert segment_possessions(minigame.frames(), []) == []


def test_alignment_error_names_event():
    bad = _event(EventType.TWO_MADE, clock=100.0)
    with pytest.raises(AlignmentError, match="2 pointer made"):
        segment_possessions(minigame.frames(), [bad])


def test_synthetic_spans_partition_and_match_sidecar(synthetic_games):
    for g in synthetic_games:
        recs = segment_possessions(g.frames, g.events, g.game_id)
        spans = [(r.start_frame_idx, r.end_frame_idx) for r in recs]
        assert all(a < b for a, b in spans)
        assert all(spans[k][1] <= spans[k + 1][0] for k in range(len(spans) - 1))
        assert [(r.possession_ref, r.reward_offense) for r in recs] == g.true_returns


def test_possession_index_and_counts():
    recs = segment_possessions(minigame.frames(), minigame.events(), minigame.GAME_ID)
    buf = io.StringIO()
    write_possession_index(recs, buf)
    lines = buf.getvalue().splitlines()
    assert len(lines) == 4 and lines[1].startswith("mini,0,30,100,2 pointer made")
    assert possession_counts(recs) == {"games": 1, "possessions": 3, "frames": 70}
