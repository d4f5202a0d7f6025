"""
Domain types, court geometry, channel layout and min/max normalization.

Every trajectory in the package uses one fixed column layout. Row ``t`` of a
trajectory holds 66 values::

    [ball xyz, offense 1-5 xyz, defense 1-5 xyz,   <- 33 state columns (ft)
     ball v,   offense 1-5 v,   defense 1-5 v]     <- 33 action columns (ft/s)

The possessing team always fills object slots 1-5, so the defensive block is
the same five slots (6-10) in every tensor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

FPS = 25
N_OBJECTS = 11
STATE_DIM = 3 * N_OBJECTS
ACTION_DIM = 3 * N_OBJECTS
TRANSITION_DIM = STATE_DIM + ACTION_DIM
LAYOUT_VERSION = 1

BALL = 0
OFFENSE_SLOTS = (1, 2, 3, 4, 5)
DEFENSE_SLOTS = (6, 7, 8, 9, 10)
AXES = ("x", "y", "z")


class RejectedInput(ValueError):
    """Input violates a documented precondition."""


def column_index(obj: int, axis: int, kind: str = "state") -> int:
    """Column of ``(object slot, axis)`` in a trajectory row. ``kind`` is "state" or "action"."""
    if not 0 <= obj < N_OBJECTS or not 0 <= axis < 3:
        raise RejectedInput(f"no column for object {obj}, axis {axis}")
    if kind == "state":
        return 3 * obj + axis
    if kind == "action":
        return STATE_DIM + 3 * obj + axis
    raise RejectedInput(f"unknown column kind {kind!r}")


def slot_columns(slots: Sequence[int], kind: str = "state", axes: Sequence[int] = (0, 1, 2)) -> list[int]:
    return [column_index(s, a, kind) for s in slots for a in axes]


@dataclass(frozen=True)
class CourtSpec:
    length_ft: float = 94.0
    width_ft: float = 50.0
    max_height_ft: float = 20.0
    basket_positions: tuple[tuple[float, float, float], tuple[float, float, float]] = (
        (5.25, 25.0, 10.0),
        (88.75, 25.0, 10.0),
    )

    def __post_init__(self) -> None:
        if not (self.length_ft > 0 and self.width_ft > 0 and self.max_height_ft > 0):
            raise RejectedInput("court extents must be positive")
        for b in self.basket_positions:
            if not 0.0 <= b[0] <= self.length_ft:
                raise RejectedInput(f"basket {b} outside court length")

    @property
    def lower(self) -> np.ndarray:
        return np.zeros(3)

    @property
    def upper(self) -> np.ndarray:
        return np.array([self.length_ft, self.width_ft, self.max_height_ft])

    def clamp(self, xyz: np.ndarray) -> np.ndarray:
        """Clamp an array whose last axis is (x, y, z) or (x, y) to the court box."""
        xyz = np.asarray(xyz, dtype=float)
        hi = self.upper[: xyz.shape[-1]]
        return np.clip(xyz, 0.0, hi)

    def nearest_basket(self, xy: Sequence[float]) -> np.ndarray:
        baskets = np.asarray(self.basket_positions, dtype=float)
        d = np.hypot(baskets[:, 0] - xy[0], baskets[:, 1] - xy[1])
        return baskets[int(np.argmin(d))]


@dataclass(frozen=True)
class PlayerPos:
    team_id: int
    player_id: int
    x: float
    y: float
    z: float = 0.0


@dataclass(frozen=True)
class Frame:
    """One 25 Hz snapshot. ``players`` holds exactly ten entries, five per team."""

    game_clock_s: float
    shot_clock_s: Optional[float]
    quarter: int
    wall_time_ms: int
    ball: tuple[float, float, float]
    players: tuple[PlayerPos, ...]
    event_id: str = "0"

    def __post_init__(self) -> None:
        if len(self.players) != 10:
            raise RejectedInput(f"frame has {len(self.players)} players, expected 10")
        teams: dict[int, int] = {}
        for p in self.players:
            teams[p.team_id] = teams.get(p.team_id, 0) + 1
        if sorted(teams.values()) != [5, 5]:
            raise RejectedInput(f"frame team split {teams} is not 5 v 5")
        coords = list(self.ball) + [c for p in self.players for c in (p.x, p.y, p.z)]
        if not all(math.isfinite(c) for c in coords):
            raise RejectedInput("frame has non-finite coordinates")

    @property
    def team_ids(self) -> tuple[int, int]:
        ids = sorted({p.team_id for p in self.players})
        return ids[0], ids[1]

    def team(self, team_id: int) -> list[PlayerPos]:
        """Players of one team ordered by player id."""
        return sorted((p for p in self.players if p.team_id == team_id), key=lambda p: p.player_id)

    def state_vector(self, offense_team_id: int) -> np.ndarray:
        """The 33 state columns of this frame with ``offense_team_id`` in slots 1-5."""
        a, b = self.team_ids
        if offense_team_id not in (a, b):
            raise RejectedInput(f"team {offense_team_id} not on court")
        defense = b if offense_team_id == a else a
        rows = [self.ball]
        rows += [(p.x, p.y, p.z) for p in self.team(offense_team_id)]
        rows += [(p.x, p.y, p.z) for p in self.team(defense)]
        return np.asarray(rows, dtype=float).reshape(STATE_DIM)


@dataclass(frozen=True)
class TrajectoryTensor:
    """H x 66 trajectory. Rows at and after ``valid_len`` are padding."""

    values: np.ndarray
    valid_len: int
    normalized: bool = False

    def __post_init__(self) -> None:
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 2 or v.shape[1] != TRANSITION_DIM:
            raise RejectedInput(f"trajectory must be H x {TRANSITION_DIM}, got {v.shape}")
        if not 1 <= self.valid_len <= v.shape[0]:
            raise RejectedInput(f"valid_len {self.valid_len} outside [1, {v.shape[0]}]")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def horizon(self) -> int:
        return self.values.shape[0]

    @property
    def states(self) -> np.ndarray:
        return self.values[:, :STATE_DIM]

    @property
    def actions(self) -> np.ndarray:
        return self.values[:, STATE_DIM:]

    def positions(self) -> np.ndarray:
        """H x 11 x 3 object positions."""
        return self.states.reshape(-1, N_OBJECTS, 3)


@dataclass(frozen=True)
class NormalizationStats:
    min: np.ndarray
    max: np.ndarray
    constant: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        lo = np.asarray(self.min, dtype=float)
        hi = np.asarray(self.max, dtype=float)
        if lo.shape != hi.shape or lo.ndim != 1:
            raise RejectedInput("min/max must be equal-length vectors")
        if np.any(hi < lo):
            raise RejectedInput("max < min for some feature")
        for a in (lo, hi):
            a.setflags(write=False)
        const = hi == lo
        const.setflags(write=False)
        object.__setattr__(self, "min", lo)
        object.__setattr__(self, "max", hi)
        object.__setattr__(self, "constant", const)

    @property
    def dim(self) -> int:
        return self.min.shape[0]

    def _check(self, width: int) -> None:
        if width != self.dim:
            raise RejectedInput(f"stats cover {self.dim} features, input has {width}")

    def normalize_array(self, x: np.ndarray, cols: slice | None = None) -> np.ndarray:
        lo, hi, const = self.min, self.max, self.constant
        if cols is not None:
            lo, hi, const = lo[cols], hi[cols], const[cols]
        else:
            self._check(np.shape(x)[-1])
        span = np.where(const, 1.0, hi - lo)
        out = 2.0 * (np.asarray(x, dtype=float) - lo) / span - 1.0
        return np.where(const, 0.0, out)

    def denormalize_array(self, x: np.ndarray, cols: slice | None = None) -> np.ndarray:
        lo, hi, const = self.min, self.max, self.constant
        if cols is not None:
            lo, hi, const = lo[cols], hi[cols], const[cols]
        else:
            self._check(np.shape(x)[-1])
        out = (np.asarray(x, dtype=float) + 1.0) * 0.5 * (hi - lo) + lo
        return np.where(const, lo, out)

    def normalize_state(self, s: np.ndarray) -> np.ndarray:
        return self.normalize_array(s, slice(0, STATE_DIM))

    def denormalize_state(self, s: np.ndarray) -> np.ndarray:
        return self.denormalize_array(s, slice(0, STATE_DIM))


def normalize(traj: TrajectoryTensor, stats: NormalizationStats) -> TrajectoryTensor:
    if traj.normalized:
        raise RejectedInput("trajectory is already normalized")
    stats._check(traj.values.shape[1])
    return replace(traj, values=stats.normalize_array(traj.values), normalized=True)


def denormalize(traj: TrajectoryTensor, stats: NormalizationStats) -> TrajectoryTensor:
    if not traj.normalized:
        raise RejectedInput("trajectory is not normalized")
    stats._check(traj.values.shape[1])
    return replace(traj, values=stats.denormalize_array(traj.values), normalized=False)
