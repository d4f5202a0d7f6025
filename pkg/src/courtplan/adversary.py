"""
Heuristic defenses and the segment-wise defensive overwrite rollout.

Defenders move in the court plane; their z stays 0.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Union

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment

from .core import (
    DEFENSE_SLOTS,
    FPS,
    STATE_DIM,
    CourtSpec,
    Frame,
    RejectedInput,
    TrajectoryTensor,
    slot_columns,
)
from .dataset import build_from_states, compute_actions
from .diffusion import Denoiser, NoiseSchedule
from .planner import PlanConfig, best_plan_index, check_compatible, plan
from .value import ValueModel

DEFAULT_MAX_SPEED = 26.0
ATTACKER_WEIGHT = 0.7
ZONE_BALL_PULL = 0.3

# Court-relative (x / length, y / width) anchors for a defense protecting the right-hand basket:
# two up top at the free-throw line extended, three across the paint.
ZONE_2_3_FRACTIONS = np.array([
    [75.0 / 94.0, 0.32],
    [75.0 / 94.0, 0.68],
    [86.0 / 94.0, 0.26],
    [86.0 / 94.0, 0.50],
    [86.0 / 94.0, 0.74],
])

DEF_XY = slot_columns(DEFENSE_SLOTS, axes=(0, 1))
DEF_XYZ = slot_columns(DEFENSE_SLOTS)
DEF_V = slot_columns(DEFENSE_SLOTS, kind="action")


def default_zone_anchors(court: CourtSpec, basket_xy) -> np.ndarray:
    anchors = ZONE_2_3_FRACTIONS * [court.length_ft, court.width_ft]
    if basket_xy[0] < court.length_ft / 2:
        anchors[:, 0] = court.length_ft - anchors[:, 0]
    return anchors


@dataclass(frozen=True)
class DefensePolicy:
    kind: str = "man_to_man"
    max_speed_ftps: float = DEFAULT_MAX_SPEED
    zone_anchors: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        if self.kind not in ("man_to_man", "zone_2_3"):
            raise RejectedInput(f"unknown defense {self.kind!r}")
        if not self.max_speed_ftps > 0:
            raise RejectedInput("max_speed_ftps must be positive")
        if self.zone_anchors is not None and np.shape(self.zone_anchors) != (5, 2):
            raise RejectedInput("zone_anchors must be 5 x 2")


@dataclass(frozen=True)
class AdversarialConfig:
    segment_len: int
    total_len: int
    policy: DefensePolicy = DefensePolicy()

    def __post_init__(self) -> None:
        if not 1 <= self.segment_len <= self.total_len:
            raise RejectedInput("need 1 <= segment_len <= total_len")


def assign_defenders(def_pos: np.ndarray, off_pos: np.ndarray) -> np.ndarray:
    """Minimum-total-distance bijection; entry k is the attacker index guarded by defender k."""
    cost = np.linalg.norm(def_pos[:, None, :] - off_pos[None, :, :], axis=-1)
    rows, cols = linear_sum_assignment(cost)
    out = np.empty(len(def_pos), dtype=int)
    out[rows] = cols
    return out


def _move_toward(pos: np.ndarray, target: np.ndarray, max_step: float) -> np.ndarray:
    delta = target - pos
    dist = np.linalg.norm(delta, axis=-1, keepdims=True)
    scale = np.where(dist > max_step, max_step / np.maximum(dist, 1e-300), 1.0)
    return pos + delta * scale


def man_to_man_step(def_pos, off_pos, ball, speed: float, dt: float, basket_xy,
                    court: CourtSpec = CourtSpec()) -> np.ndarray:
    """Each defender steps toward the point 70% of the way from the basket to its assigned attacker."""
    def_pos = court.clamp(np.asarray(def_pos, dtype=float))
    off_pos = court.clamp(np.asarray(off_pos, dtype=float))
    basket = np.asarray(basket_xy, dtype=float)[:2]
    assigned = off_pos[assign_defenders(def_pos, off_pos)]
    target = basket + ATTACKER_WEIGHT * (assigned - basket)
    return court.clamp(_move_toward(def_pos, target, speed * dt))


def zone_2_3_step(def_pos, ball, speed: float, dt: float, anchors,
                  court: CourtSpec = CourtSpec()) -> np.ndarray:
    """Defender k steps toward its anchor shifted 30% of the way toward the ball."""
    def_pos = court.clamp(np.asarray(def_pos, dtype=float))
    anchors = np.asarray(anchors, dtype=float)
    ball_xy = court.clamp(np.asarray(ball, dtype=float)[:2])
    target = anchors + ZONE_BALL_PULL * (ball_xy - anchors)
    return court.clamp(_move_toward(def_pos, target, speed * dt))


def policy_step(policy: DefensePolicy, def_pos, off_pos, ball, basket_xy, court: CourtSpec,
                dt: float = 1.0 / FPS) -> np.ndarray:
    if policy.kind == "man_to_man":
        return man_to_man_step(def_pos, off_pos, ball, policy.max_speed_ftps, dt, basket_xy, court)
    anchors = policy.zone_anchors if policy.zone_anchors is not None else default_zone_anchors(court, basket_xy)
    return zone_2_3_step(def_pos, ball, policy.max_speed_ftps, dt, anchors, court)


def heuristic_rollout(policy: DefensePolicy, def0, offense, ball, basket_xy, court: CourtSpec = CourtSpec()) -> np.ndarray:
    """
    Defender positions [T, 5, 2] reacting to given offense [T, 5, 2] and ball [T, 3] tracks.

    Row 0 is ``def0``; row t+1 is one policy step from row t against frame t.
    """
    offense = np.asarray(offense, dtype=float)
    ball = np.asarray(ball, dtype=float)
    out = np.empty((len(offense), 5, 2))
    out[0] = def0
    for t in range(len(offense) - 1):
        out[t + 1] = policy_step(policy, out[t], offense[t], ball[t], basket_xy, court)
    return out


def attacked_basket(state: np.ndarray, court: CourtSpec) -> np.ndarray:
    """The basket nearest the ball."""
    return court.nearest_basket(np.asarray(state)[:2])


def split_state_rows(rows: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """[T, 33] state rows -> ball [T, 3], offense xy [T, 5, 2], defense xy [T, 5, 2]."""
    pos = np.asarray(rows)[:, :STATE_DIM].reshape(len(rows), 11, 3)
    return pos[:, 0], pos[:, 1:6, :2], pos[:, 6:11, :2]


@dataclass
class RolloutResult:
    trajectory: TrajectoryTensor   # raw, total_len rows
    predicted_return: float
    n_segments: int
    policy_kind: str
    segment_len: int


def trajectory_return(value: ValueModel, raw_rows: np.ndarray) -> float:
    """Value at step 0 of raw trajectory rows, fitted to the model horizon (final rows kept, stationary padding)."""
    H = value.arch.horizon
    rows = np.asarray(raw_rows, dtype=float)[-H:]
    if len(rows) < H:
        rows = np.concatenate([rows, np.repeat(rows[-1:], H - len(rows), axis=0)])
    x = torch.from_numpy(value.stats.normalize_array(rows))[None]
    return float(value.predict(x, 0)[0])


def adversarial_rollout(denoiser: Denoiser, value: ValueModel, schedule: NoiseSchedule, config: AdversarialConfig,
                        initial: Union[Frame, np.ndarray], plan_config: PlanConfig,
                        court: CourtSpec = CourtSpec(), offense_team_id: Optional[int] = None) -> RolloutResult:
    """
    Alternate planning and defensive overwrite until ``total_len`` frames exist.

    Each iteration plans from the last composite state, appends up to
    ``segment_len`` new frames of the best plan, and replaces the five defensive
    tracks of those frames with the heuristic policy's response. Offense and
    ball columns are kept as planned; defender velocities are finite
    differences of the overwritten positions.
    """
    check_compatible(denoiser, value, schedule, plan_config)
    H = plan_config.horizon
    if config.segment_len > H - 1:
        raise RejectedInput(f"segment_len {config.segment_len} needs a planning horizon > {config.segment_len}")
    if isinstance(initial, Frame):
        if offense_team_id is None:
            raise RejectedInput("offense_team_id is required with a Frame")
        s0 = initial.state_vector(offense_team_id)
    else:
        s0 = np.asarray(initial, dtype=float)
    basket = attacked_basket(s0, court)

    rows = [np.concatenate([s0, np.zeros(STATE_DIM)])]
    seg = 0
    while len(rows) < config.total_len:
        state = rows[-1][:STATE_DIM]
        result = plan(denoiser, value, schedule, replace(plan_config, initial_state=state, seed=plan_config.seed + seg))
        best = result.trajectories[best_plan_index(result)].values
        if seg == 0:
            rows[0][STATE_DIM:] = best[0, STATE_DIM:]
        k = min(config.segment_len, config.total_len - len(rows))
        for t in range(1, k + 1):
            row = best[t].copy()
            ball, off, dfn = split_state_rows(np.stack([rows[-1]]))
            row[DEF_XY] = policy_step(config.policy, dfn[0], off[0], ball[0], basket, court).reshape(-1)
            row[DEF_XYZ[2::3]] = 0.0
            rows.append(row)
        seg += 1

    comp = np.stack(rows)
    comp[:, DEF_V] = compute_actions(comp[:, DEF_XYZ])
    traj = TrajectoryTensor(comp, valid_len=len(comp))
    return RolloutResult(traj, trajectory_return(value, comp), seg, config.policy.kind, config.segment_len)
