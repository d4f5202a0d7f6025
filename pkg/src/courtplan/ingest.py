"""
Motion-tracking and play-by-play parsing, possession segmentation, reward labels.

Motion files follow the public SportVU JSON layout; play-by-play files are
CSV with the header in ``PBP_COLUMNS``. Both formats can be written back out
with :func:`serialize_motion` / :func:`serialize_pbp`.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import IO, Iterable, NamedTuple, Optional, Sequence, Union

import numpy as np

from .core import Frame, PlayerPos, RejectedInput

log = logging.getLogger(__name__)

CLOCK_TOLERANCE_S = 2.0
# a player this close to the ball is treated as controlling it
CONTROL_RADIUS_FT = 3.0
PBP_COLUMNS = ["game_id", "quarter", "game_clock_s", "wall_time_ms", "event_type", "acting_team_id", "points"]


class EventType(str, Enum):
    START_OF_PERIOD = "start of period"
    JUMP_BALL = "jump ball"
    REBOUND = "rebound"
    FOUL = "foul"
    TURNOVER = "turnover"
    TIMEOUT = "timeout"
    SUBSTITUTION = "substitution"
    END_OF_PERIOD = "end of period"
    VIOLATION = "violation"
    THREE_MADE = "3 pointer made"
    TWO_MADE = "2 pointer made"
    FREE_THROW_MADE = "free-throw made"


# Reward to the acting team; the other team receives the negation.
REWARDS: dict[EventType, float] = {
    EventType.START_OF_PERIOD: 0.0,
    EventType.JUMP_BALL: 0.0,
    EventType.REBOUND: 0.25,
    EventType.FOUL: -0.25,
    EventType.TURNOVER: -1.0,
    EventType.TIMEOUT: 0.0,
    EventType.SUBSTITUTION: 0.0,
    EventType.END_OF_PERIOD: 0.0,
    EventType.VIOLATION: -0.25,
    EventType.THREE_MADE: 3.0,
    EventType.TWO_MADE: 2.0,
    EventType.FREE_THROW_MADE: 1.0,
}

# Events that discard the open possession span instead of closing it.
_RESETS = {EventType.START_OF_PERIOD, EventType.JUMP_BALL, EventType.TIMEOUT, EventType.SUBSTITUTION}
# Events whose acting team is necessarily the offense.
_OFFENSE_ACTS = {EventType.THREE_MADE, EventType.TWO_MADE, EventType.FREE_THROW_MADE, EventType.TURNOVER}


class MotionParseError(ValueError):
    def __init__(self, msg: str, offset: int):
        super().__init__(f"{msg} (byte offset {offset})")
        self.offset = offset


class PbpParseError(ValueError):
    def __init__(self, row_errors: list[tuple[int, str]]):
        lines = "; ".join(f"line {ln}: {msg}" for ln, msg in row_errors)
        super().__init__(f"{len(row_errors)} bad play-by-play row(s): {lines}")
        self.row_errors = row_errors


class AlignmentError(ValueError):
    pass


@dataclass(frozen=True)
class PbpEvent:
    wall_time_ms: int
    quarter: int
    game_clock_s: float
    event_type: EventType
    acting_team_id: int
    points: int = 0
    game_id: str = ""

    @property
    def reward_bearing(self) -> bool:
        return REWARDS[self.event_type] != 0.0


@dataclass(frozen=True)
class PossessionRecord:
    game_id: str
    start_frame_idx: int
    end_frame_idx: int
    offense_team_id: int
    terminal_event: PbpEvent
    reward_offense: float
    reward_defense: float
    extra_events: tuple[PbpEvent, ...] = field(default=())

    def __post_init__(self) -> None:
        if self.start_frame_idx >= self.end_frame_idx:
            raise RejectedInput("possession span is empty")

    @property
    def n_frames(self) -> int:
        return self.end_frame_idx - self.start_frame_idx

    @property
    def possession_ref(self) -> str:
        return f"{self.game_id}:{self.start_frame_idx}"

    @property
    def events(self) -> tuple[PbpEvent, ...]:
        return (self.terminal_event,) + self.extra_events


class MotionData(NamedTuple):
    game_id: str
    frames: list[Frame]
    skipped: int


def label_reward(event: PbpEvent, perspective_team_id: int) -> float:
    """Table reward of ``event`` seen from ``perspective_team_id``."""
    value = REWARDS[EventType(event.event_type)]
    if value == 0.0:
        return 0.0
    return value if event.acting_team_id == perspective_team_id else -value


def _read(source: Union[bytes, str, IO]) -> bytes:
    if isinstance(source, bytes):
        return source
    if isinstance(source, str):
        return source.encode()
    data = source.read()
    return data.encode() if isinstance(data, str) else data


def _frame_from_moment(moment: list, event_id: str) -> Frame:
    quarter, wall_ms, game_clock, shot_clock, _, rows = moment[:6]
    if len(rows) != 11:
        raise RejectedInput(f"moment has {len(rows)} position rows, expected 11")
    ball_rows = [r for r in rows if int(r[0]) == -1]
    if len(ball_rows) != 1 or int(rows[0][0]) != -1:
        raise RejectedInput("moment must start with exactly one ball row")
    bx, by, bz = (float(c) for c in rows[0][2:5])
    players = tuple(
        PlayerPos(int(r[0]), int(r[1]), float(r[2]), float(r[3]), 0.0) for r in rows[1:]
    )
    return Frame(
        game_clock_s=float(game_clock),
        shot_clock_s=None if shot_clock is None else float(shot_clock),
        quarter=int(quarter),
        wall_time_ms=int(wall_ms),
        ball=(bx, by, bz),
        players=players,
        event_id=str(event_id),
    )


def parse_motion(source: Union[bytes, str, IO]) -> MotionData:
    """
    Parse one game's motion JSON into frames ordered by wall time.

    Malformed moments (wrong player count, bad team split, non-finite values)
    are skipped and counted. Moments repeated across events (same wall time)
    are kept once.
    """
    raw = _read(source)
    try:
        doc = json.loads(raw)
    except json.JSONDecodeError as exc:
        offset = len(raw[: exc.pos].encode()) if isinstance(raw, str) else exc.pos
        raise MotionParseError(f"invalid motion JSON: {exc.msg}", offset) from exc
    except UnicodeDecodeError as exc:
        raise MotionParseError("motion file is not UTF-8", exc.start) from exc
    if not isinstance(doc, dict) or not isinstance(doc.get("events"), list):
        raise MotionParseError("motion JSON must be an object with an 'events' list", 0)

    frames: list[Frame] = []
    seen: set[int] = set()
    skipped = 0
    for event in doc["events"]:
        event_id = str(event.get("eventId", event.get("eventid", "0")))
        for moment in event.get("moments", []):
            try:
                frame = _frame_from_moment(moment, event_id)
            except (RejectedInput, TypeError, ValueError, IndexError) as exc:
                skipped += 1
                log.warning("skipping moment in event %s: %s", event_id, exc)
                continue
            if frame.wall_time_ms in seen:
                continue
            seen.add(frame.wall_time_ms)
            frames.append(frame)
    frames.sort(key=lambda f: f.wall_time_ms)
    return MotionData(str(doc.get("gameid", "")), frames, skipped)


def _num(x: float) -> Union[int, float]:
    return int(x) if float(x).is_integer() and abs(x) < 2**53 else float(x)


def serialize_motion(game_id: str, frames: Sequence[Frame]) -> str:
    """Write frames back to the motion JSON layout, one event per run of equal ``event_id``."""
    events: list[dict] = []
    for f in frames:
        if not events or events[-1]["eventId"] != f.event_id:
            events.append({"eventId": f.event_id, "moments": []})
        rows = [[-1, -1, f.ball[0], f.ball[1], f.ball[2]]]
        rows += [[p.team_id, p.player_id, p.x, p.y, p.z] for p in f.players]
        events[-1]["moments"].append(
            [f.quarter, f.wall_time_ms, f.game_clock_s, f.shot_clock_s, None, rows]
        )
    return json.dumps({"gameid": game_id, "events": events}, separators=(",", ":"))


def parse_pbp(source: Union[bytes, str, IO]) -> list[PbpEvent]:
    """Parse a play-by-play CSV; rows sort by (quarter asc, game clock desc)."""
    text = _read(source).decode()
    reader = csv.DictReader(io.StringIO(text))
    missing = [c for c in PBP_COLUMNS if c not in (reader.fieldnames or [])]
    if missing:
        raise PbpParseError([(1, f"missing column(s) {missing}")])
    events: list[PbpEvent] = []
    errors: list[tuple[int, str]] = []
    for row in reader:
        line = reader.line_num
        try:
            etype = EventType(row["event_type"])
        except ValueError:
            errors.append((line, f"unknown event_type {row['event_type']!r}"))
            continue
        try:
            ev = PbpEvent(
                wall_time_ms=int(row["wall_time_ms"]),
                quarter=int(row["quarter"]),
                game_clock_s=float(row["game_clock_s"]),
                event_type=etype,
                acting_team_id=int(row["acting_team_id"]),
                points=int(row["points"]),
                game_id=row["game_id"],
            )
        except (TypeError, ValueError) as exc:
            errors.append((line, str(exc)))
            continue
        if ev.points < 0 or not math.isfinite(ev.game_clock_s):
            errors.append((line, "negative points or non-finite clock"))
            continue
        events.append(ev)
    if errors:
        raise PbpParseError(errors)
    events.sort(key=lambda e: (e.quarter, -e.game_clock_s))
    return events


def serialize_pbp(events: Iterable[PbpEvent]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(PBP_COLUMNS)
    for e in events:
        w.writerow([e.game_id, e.quarter, repr(_num(e.game_clock_s)), e.wall_time_ms,
                    EventType(e.event_type).value, e.acting_team_id, e.points])
    return buf.getvalue()


def _match_frame(frames: Sequence[Frame], start: int, event: PbpEvent) -> int:
    """Index of the frame at which ``event`` happened, searching from ``start``."""
    candidate: Optional[int] = None
    last_in_quarter: Optional[int] = None
    for j in range(start, len(frames)):
        f = frames[j]
        if f.quarter < event.quarter:
            continue
        if f.quarter > event.quarter:
            break
        last_in_quarter = j
        if f.game_clock_s <= event.game_clock_s + 1e-6:
            candidate = j
            break
    if candidate is None:
        candidate = last_in_quarter
    if candidate is None or abs(frames[candidate].game_clock_s - event.game_clock_s) > CLOCK_TOLERANCE_S:
        got = "no frames" if candidate is None else f"nearest frame clock {frames[candidate].game_clock_s}"
        raise AlignmentError(
            f"cannot align {event.event_type.value!r} (Q{event.quarter} {event.game_clock_s}s): {got}"
        )
    return candidate


def _ball_holder_team(frames: Sequence[Frame], start: int, end: int) -> Optional[int]:
    """Team controlling the ball in the most frames of the span; frames with the ball in flight do not vote."""
    votes: dict[int, int] = {}
    for f in frames[start:end]:
        bx, by = f.ball[0], f.ball[1]
        nearest = min(f.players, key=lambda p: (p.x - bx) ** 2 + (p.y - by) ** 2)
        if math.hypot(nearest.x - bx, nearest.y - by) > CONTROL_RADIUS_FT:
            continue
        votes[nearest.team_id] = votes.get(nearest.team_id, 0) + 1
    if not votes:
        return None
    ranked = sorted(votes.items(), key=lambda kv: (-kv[1], kv[0]))
    if len(ranked) > 1 and ranked[0][1] == ranked[1][1]:
        return None
    return ranked[0][0]


def _offense_team(frames: Sequence[Frame], start: int, end: int, event: PbpEvent) -> int:
    if event.event_type in _OFFENSE_ACTS:
        return event.acting_team_id
    team = _ball_holder_team(frames, start, end)
    return event.acting_team_id if team is None else team


def _record(game_id: str, start: int, end: int, offense: int, terminal: PbpEvent,
            extras: tuple[PbpEvent, ...]) -> PossessionRecord:
    reward = sum(label_reward(e, offense) for e in (terminal,) + extras)
    return PossessionRecord(game_id, start, end, offense, terminal, reward, -reward, extras)


def segment_possessions(frames: Sequence[Frame], events: Sequence[PbpEvent], game_id: str = "") -> list[PossessionRecord]:
    """
    Split a game into possessions.

    A possession runs from the first frame after the previous boundary up to
    and including the frame matching its terminal (reward-bearing) event.
    Period starts, jump balls, timeouts and substitutions drop the open span.
    A reward-bearing event that shares the previous terminal event's clock
    (free throws after a foul) or whose span would hold no frames is attached
    to the previous possession.
    """
    if not events:
        return []
    out: list[PossessionRecord] = []
    start = 0
    quarter = None
    for ev in events:
        if ev.quarter != quarter:
            quarter = ev.quarter
            # skip frames from earlier quarters
            while start < len(frames) and frames[start].quarter < quarter:
                start += 1
            prev_terminal: Optional[PbpEvent] = None
        if ev.event_type == EventType.END_OF_PERIOD:
            continue
        if ev.event_type in _RESETS:
            if ev.event_type == EventType.START_OF_PERIOD:
                continue
            start = _match_frame(frames, start, ev) + 1
            prev_terminal = None
            continue
        if not ev.reward_bearing:
            continue
        same_clock = prev_terminal is not None and abs(prev_terminal.game_clock_s - ev.game_clock_s) < 1e-6
        end = start if same_clock else _match_frame(frames, start, ev) + 1
        if end <= start:
            if out and prev_terminal is not None:
                last = out[-1]
                out[-1] = _record(game_id or last.game_id, last.start_frame_idx, last.end_frame_idx,
                                  last.offense_team_id, last.terminal_event, last.extra_events + (ev,))
            continue
        offense = _offense_team(frames, start, end, ev)
        out.append(_record(game_id or ev.game_id, start, end, offense, ev, ()))
        prev_terminal = ev
        start = end
    return out


def possession_counts(records: Sequence[PossessionRecord]) -> dict[str, int]:
    return {
        "games": len({r.game_id for r in records}),
        "possessions": len(records),
        "frames": int(sum(r.n_frames for r in records)),
    }


def frames_to_array(frames: Sequence[Frame]) -> np.ndarray:
    """Frame store layout: n x (4 meta + 3 ball + 10 x 5 player) float array."""
    rows = []
    for f in frames:
        row = [f.quarter, f.game_clock_s, np.nan if f.shot_clock_s is None else f.shot_clock_s, f.wall_time_ms]
        row += list(f.ball)
        for p in f.players:
            row += [p.team_id, p.player_id, p.x, p.y, p.z]
        rows.append(row)
    return np.asarray(rows, dtype=float).reshape(len(rows), 57)


def frames_from_array(arr: np.ndarray) -> list[Frame]:
    frames = []
    for row in np.asarray(arr, dtype=float):
        players = tuple(
            PlayerPos(int(row[7 + 5 * k]), int(row[8 + 5 * k]), float(row[9 + 5 * k]),
                      float(row[10 + 5 * k]), float(row[11 + 5 * k]))
            for k in range(10)
        )
        frames.append(Frame(
            game_clock_s=float(row[1]),
            shot_clock_s=None if np.isnan(row[2]) else float(row[2]),
            quarter=int(row[0]),
            wall_time_ms=int(row[3]),
            ball=(float(row[4]), float(row[5]), float(row[6])),
            players=players,
        ))
    return frames


POSSESSION_COLUMNS = [
    "game_id", "start_frame_idx", "end_frame_idx", "offense_team_id", "terminal_event_type",
    "terminal_acting_team_id", "terminal_quarter", "terminal_game_clock_s", "reward_offense",
    "reward_defense", "n_extra_events",
]


def write_possession_index(records: Sequence[PossessionRecord], fh: IO[str]) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(POSSESSION_COLUMNS)
    for r in records:
        t = r.terminal_event
        w.writerow([r.game_id, r.start_frame_idx, r.end_frame_idx, r.offense_team_id, t.event_type.value,
                    t.acting_team_id, t.quarter, repr(_num(t.game_clock_s)), repr(r.reward_offense),
                    repr(r.reward_defense), len(r.extra_events)])
