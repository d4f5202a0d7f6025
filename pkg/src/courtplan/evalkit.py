"""
Synthetic games, the random-walk baseline and return-based evaluation.

Synthetic possessions are half-court sets against the right-hand basket. The
possession's outcome is drawn from a distance-dependent make probability, so
the true return is a noisy function of where the ball ends up; the value model
has to learn that relationship from the trajectories.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np
import torch

from . import container
from .core import (
    FPS,
    N_OBJECTS,
    STATE_DIM,
    CourtSpec,
    Frame,
    PlayerPos,
    RejectedInput,
    TrajectoryTensor,
)
from .dataset import build_from_states
from .ingest import EventType, PbpEvent, REWARDS, serialize_motion, serialize_pbp
from .planner import PlanConfig, plan
from .value import ValueModel

QUARTER_S = 720.0
AT_RIM_FT = 4.0
DECAY_FT = 15.0
THREE_POINT_FT = 23.75
TEAM_IDS = (1610612744, 1610612739)


@dataclass(frozen=True)
class SyntheticSpec:
    seed: int = 0
    n_possessions: int = 200
    frames_per_possession: tuple[int, int] = (48, 64)
    offense_script: str = "mixed"
    score_prob_at_rim: float = 0.8
    court: CourtSpec = CourtSpec()
    possessions_per_game: int = 250
    turnover_prob: float = 0.1
    foul_prob: float = 0.08
    free_throw_prob: float = 0.75

    def __post_init__(self) -> None:
        for name in ("score_prob_at_rim", "turnover_prob", "foul_prob", "free_throw_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise RejectedInput(f"{name} must lie in [0, 1]")
        if self.n_possessions < 1:
            raise RejectedInput("n_possessions must be >= 1")
        lo, hi = self.frames_per_possession
        if not 2 <= lo <= hi:
            raise RejectedInput("frames_per_possession must be a range with lower bound >= 2")
        if self.offense_script not in ("drive", "perimeter_pass", "mixed"):
            raise RejectedInput(f"unknown offense script {self.offense_script!r}")


def make_probability(distance_ft: float, score_prob_at_rim: float) -> float:
    """Make probability: flat at the rim, exponential decay beyond ``AT_RIM_FT``."""
    return score_prob_at_rim * math.exp(-max(0.0, distance_ft - AT_RIM_FT) / DECAY_FT)


@dataclass
class SyntheticGame:
    game_id: str
    frames: list[Frame]
    events: list[PbpEvent]
    true_returns: list[tuple[str, float]]

    def motion_json(self) -> str:
        return serialize_motion(self.game_id, self.frames)

    def pbp_csv(self) -> str:
        return serialize_pbp(self.events)


@dataclass
class _Possession:
    positions: np.ndarray    # [T, 11, 3]
    events: list[tuple[EventType, int]]   # (type, acting slot side: +1 offense / -1 defense)
    script: str


def _smooth(rng: np.random.Generator, T: int, scale: float) -> np.ndarray:
    """Low-frequency 2D wander of amplitude ~``scale`` ft over T frames."""
    knots = rng.normal(0.0, scale, size=(4, 2))
    s = np.linspace(0, 3, T)
    idx = np.clip(s.astype(int), 0, 2)
    w = (s - idx)[:, None]
    w = w * w * (3 - 2 * w)
    return knots[idx] * (1 - w) + knots[idx + 1] * w - knots[0]


def _ease(T: int) -> np.ndarray:
    u = np.linspace(0.0, 1.0, T)
    return u * u * (3 - 2 * u)


class _Scripter:
    def __init__(self, spec: SyntheticSpec, rng: np.random.Generator):
        self.spec = spec
        self.rng = rng
        c = spec.court
        self.basket = np.array(c.basket_positions[1][:2])
        self.rim_z = c.basket_positions[1][2]
        L, W = c.length_ft, c.width_ft
        self.spots = np.array([[L - 28, W / 2], [L - 24, W / 2 - 17], [L - 24, W / 2 + 17],
                               [L - 5, 3.0], [L - 5, W - 3.0]])

    def _base(self, T: int) -> tuple[np.ndarray, np.ndarray]:
        rng = self.rng
        start = self.spots + rng.normal(0.0, 1.5, size=(5, 2))
        off = start[None] + np.stack([_smooth(rng, T, 2.0) for _ in range(5)], axis=1)
        return off, start

    def _defense(self, off: np.ndarray) -> np.ndarray:
        from .adversary import man_to_man_step
        d = self.basket + 0.7 * (off[0] - self.basket) + self.rng.normal(0.0, 1.0, size=(5, 2))
        out = [d]
        for t in range(len(off) - 1):
            out.append(man_to_man_step(out[-1], off[t], None, 20.0, 1.0 / FPS, self.basket, self.spec.court))
        return np.stack(out)

    def _dribble(self, carrier_xy: np.ndarray, T: int, phase: float) -> np.ndarray:
        z = 1.0 + 2.5 * np.abs(np.sin(np.arange(T) * 0.35 + phase))
        return np.concatenate([carrier_xy, z[:, None]], axis=1)

    def _shot(self, ball: np.ndarray, n: int) -> None:
        """Arc the last ``n`` ball frames toward the rim."""
        start = ball[-n - 1].copy()
        target = np.array([*self.basket, self.rim_z])
        u = np.linspace(0, 1, n + 1)[1:, None]
        arc = start + u * (target - start)
        arc[:, 2] += 6.0 * np.sin(np.pi * u[:, 0])
        ball[-n:] = arc

    def drive(self, T: int):
        off, _ = self._base(T)
        rng = self.rng
        r = rng.uniform(0.5, AT_RIM_FT - 0.5)
        ang = rng.uniform(-np.pi / 2, np.pi / 2) + np.pi
        end = self.basket + r * np.array([np.cos(ang), np.sin(ang)])
        off[:, 0] = off[0, 0] + _ease(T)[:, None] * (end - off[0, 0])
        ball = self._dribble(off[:, 0] + 0.6, T, rng.uniform(0, np.pi))
        self._shot(ball, 4)
        return off, ball, float(np.linalg.norm(end - self.basket))

    def perimeter(self, T: int):
        off, _ = self._base(T)
        rng = self.rng
        order = [0] + list(rng.choice([1, 2, 3, 4], size=2, replace=False))
        seg = T // len(order)
        ball_xy = np.empty((T, 2))
        z = np.full(T, 5.0)
        for k, holder in enumerate(order):
            a, b = k * seg, (k + 1) * seg if k < len(order) - 1 else T
            ball_xy[a:b] = off[a:b, holder] + 0.6
            if k > 0:
                n = min(8, b - a)
                prev = off[a, order[k - 1]] + 0.6
                u = np.linspace(0, 1, n)[:, None]
                ball_xy[a:a + n] = prev + u * (off[a + n - 1, holder] + 0.6 - prev)
        ball = np.concatenate([ball_xy, z[:, None]], axis=1)
        shooter = order[-1]
        self._shot(ball, 4)
        return off, ball, float(np.linalg.norm(off[-5, shooter] - self.basket))

    def turnover(self, T: int):
        off, ball, _ = self.perimeter(T)
        dfn = self._defense(off)
        steal = dfn[-1, int(self.rng.integers(5))]
        n = 6
        u = np.linspace(0, 1, n + 1)[1:, None]
        ball[-n:, :2] = ball[-n - 1, :2] + u * (steal - ball[-n - 1, :2])
        ball[-n:, 2] = 3.0
        return off, ball, dfn

    def possession(self) -> _Possession:
        spec, rng = self.spec, self.rng
        T = int(rng.integers(spec.frames_per_possession[0], spec.frames_per_possession[1] + 1))
        script = spec.offense_script
        if script == "mixed":
            u = rng.random()
            if u < spec.turnover_prob:
                script = "turnover"
            else:
                script = "drive" if rng.random() < 0.5 else "perimeter_pass"
        events: list[tuple[EventType, int]] = []
        if script == "turnover":
            off, ball, dfn = self.turnover(T)
            events.append((EventType.TURNOVER, +1))
        else:
            off, ball, dist = self.drive(T) if script == "drive" else self.perimeter(T)
            dfn = self._defense(off)
            if script == "drive" and spec.offense_script == "mixed" and rng.random() < spec.foul_prob:
                events.append((EventType.FOUL, -1))
                for _ in range(2):
                    if rng.random() < spec.free_throw_prob:
                        events.append((EventType.FREE_THROW_MADE, +1))
            elif rng.random() < make_probability(dist, spec.score_prob_at_rim):
                events.append((EventType.THREE_MADE if dist > THREE_POINT_FT else EventType.TWO_MADE, +1))
            else:
                events.append((EventType.REBOUND, -1))
        pos = np.zeros((T, N_OBJECTS, 3))
        pos[:, 0] = ball
        pos[:, 1:6, :2] = off
        pos[:, 6:11, :2] = dfn
        c = spec.court
        pos = np.clip(pos, 0.0, [c.length_ft, c.width_ft, c.max_height_ft])
        return _Possession(np.round(pos, 3), events, script)


def generate_games(spec: SyntheticSpec) -> list[SyntheticGame]:
    """Build synthetic games in memory; identical specs give identical games."""
    rng = np.random.default_rng(spec.seed)
    scripter = _Scripter(spec, rng)
    games: list[SyntheticGame] = []
    remaining = spec.n_possessions
    g = 0
    while remaining > 0:
        n_here = min(remaining, spec.possessions_per_game)
        remaining -= n_here
        game_id = f"00{2150000 + g:08d}"
        frames: list[Frame] = []
        events: list[PbpEvent] = []
        truths: list[tuple[str, float]] = []
        quarter, k_in_q = 0, 0
        wall = 1_450_000_000_000 + g * 10_000_000
        offense_side = 0

        def clock() -> float:
            return round(QUARTER_S - k_in_q / FPS, 2)

        def event(etype: EventType, team: int, c: float) -> PbpEvent:
            pts = {EventType.THREE_MADE: 3, EventType.TWO_MADE: 2, EventType.FREE_THROW_MADE: 1}.get(etype, 0)
            return PbpEvent(wall + 40 * len(frames), quarter, c, etype, team, pts, game_id)

        for p in range(n_here):
            poss = scripter.possession()
            T = len(poss.positions)
            if quarter == 0 or (k_in_q + T) / FPS > QUARTER_S - 1:
                if quarter > 0:
                    events.append(event(EventType.END_OF_PERIOD, TEAM_IDS[0], round(QUARTER_S - (k_in_q - 1) / FPS, 2)))
                quarter += 1
                k_in_q = 0
                events.append(event(EventType.START_OF_PERIOD, TEAM_IDS[0], QUARTER_S))
            offense, defense = TEAM_IDS[offense_side], TEAM_IDS[1 - offense_side]
            start_idx = len(frames)
            for t in range(T):
                pp = poss.positions[t]
                players = tuple(
                    [PlayerPos(offense, offense * 100 + j, float(pp[1 + j, 0]), float(pp[1 + j, 1]), 0.0) for j in range(5)]
                    + [PlayerPos(defense, defense * 100 + j, float(pp[6 + j, 0]), float(pp[6 + j, 1]), 0.0) for j in range(5)]
                )
                frames.append(Frame(
                    game_clock_s=clock(),
                    shot_clock_s=round(24.0 - t / FPS, 2),
                    quarter=quarter,
                    wall_time_ms=wall + 40 * len(frames),
                    ball=(float(pp[0, 0]), float(pp[0, 1]), float(pp[0, 2])),
                    players=players,
                    event_id=str(p + 1),
                ))
                k_in_q += 1
            end_clock = round(QUARTER_S - (k_in_q - 1) / FPS, 2)
            total = 0.0
            for etype, side in poss.events:
                team = offense if side > 0 else defense
                events.append(event(etype, team, end_clock))
                total += REWARDS[etype] * (1 if side > 0 else -1)
            truths.append((f"{game_id}:{start_idx}", total))
            offense_side = 1 - offense_side
        events.append(event(EventType.END_OF_PERIOD, TEAM_IDS[0], round(QUARTER_S - (k_in_q - 1) / FPS, 2)))
        games.append(SyntheticGame(game_id, frames, events, truths))
        g += 1
    return games


def generate_synthetic(spec: SyntheticSpec, out_dir: Union[str, Path]) -> list[Path]:
    """Write ``<game>.json`` motion files, ``<game>_pbp.csv`` and ``sidecar.csv``; returns written paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    sidecar = io.StringIO()
    w = csv.writer(sidecar, lineterminator="\n")
    w.writerow(["possession_id", "true_return"])
    for game in generate_games(spec):
        mp = out / f"{game.game_id}.json"
        pp = out / f"{game.game_id}_pbp.csv"
        mp.write_text(game.motion_json())
        pp.write_text(game.pbp_csv())
        written += [mp, pp]
        for pid, r in game.true_returns:
            w.writerow([pid, repr(r)])
    sc = out / "sidecar.csv"
    sc.write_text(sidecar.getvalue())
    written.append(sc)
    return written


def read_sidecar(path: Union[str, Path]) -> dict[str, float]:
    with open(path, newline="") as fh:
        return {r["possession_id"]: float(r["true_return"]) for r in csv.DictReader(fh)}


def random_walk(initial: Union[Frame, np.ndarray], horizon: int, seed: int, step_std_ft: float = 0.3,
                court: CourtSpec = CourtSpec(), offense_team_id: Optional[int] = None) -> TrajectoryTensor:
    """
    Every object takes independent Gaussian steps, clamped to the court.

    Players move in the plane; the ball also moves vertically.
    """
    if isinstance(initial, Frame):
        if offense_team_id is None:
            offense_team_id = initial.team_ids[0]
        s0 = initial.state_vector(offense_team_id)
    else:
        s0 = np.asarray(initial, dtype=float)
    rng = np.random.default_rng(seed)
    pos = np.empty((horizon, N_OBJECTS, 3))
    pos[0] = s0.reshape(N_OBJECTS, 3)
    mask = np.zeros((N_OBJECTS, 3))
    mask[:, :2] = 1.0
    mask[0, 2] = 1.0
    for t in range(1, horizon):
        step = rng.normal(0.0, 1.0, size=(N_OBJECTS, 3)) * step_std_ft * mask
        pos[t] = court.clamp(pos[t - 1] + step)
    return build_from_states(pos.reshape(horizon, STATE_DIM), horizon)


@dataclass
class EvalReport:
    returns: list[float]
    avg: float
    max: float
    n_runs: int
    out_of_bounds_rate: float
    fingerprint: str = ""
    alpha: Optional[float] = None
    run_oob: list[float] = field(default_factory=list)

    @property
    def std(self) -> float:
        return float(np.std(self.returns, ddof=1)) if self.n_runs > 1 else 0.0

    @property
    def stderr(self) -> float:
        return self.std / math.sqrt(self.n_runs) if self.n_runs > 1 else 0.0


def out_of_bounds_rate(raw: np.ndarray, court: CourtSpec = CourtSpec()) -> float:
    """Fraction of position entries ([..., 33] state part) outside the court box."""
    pos = np.asarray(raw)[..., :STATE_DIM].reshape(-1, 3)
    hi = court.upper
    return float(np.mean((pos < 0.0) | (pos > hi)))


def predicted_returns(value: ValueModel, raw: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Value at step 0 of raw (feet) trajectories [B, H, 66]."""
    raw = np.asarray(raw, dtype=float)
    if raw.ndim != 3 or raw.shape[1:] != (value.arch.horizon, value.arch.transition_dim):
        raise RejectedInput(f"trajectories {raw.shape} do not fit the value model")
    norm = value.stats.normalize_array(raw)
    out = [value.predict(torch.from_numpy(norm[k:k + batch_size]), 0).numpy() for k in range(0, len(norm), batch_size)]
    return np.concatenate(out).astype(float)


def evaluate(runs: Sequence[np.ndarray], value: ValueModel, n_runs: Optional[int] = None,
             court: CourtSpec = CourtSpec(), alpha: Optional[float] = None) -> EvalReport:
    """Per run, the mean predicted return of its trajectories; AVG and MAX over runs."""
    if n_runs is not None and n_runs != len(runs):
        raise RejectedInput(f"expected {n_runs} runs, got {len(runs)}")
    if not runs:
        raise RejectedInput("nothing to evaluate")
    per_run = [float(np.mean(predicted_returns(value, r))) for r in runs]
    oob = [out_of_bounds_rate(r, court) for r in runs]
    return EvalReport(
        returns=per_run,
        avg=float(np.mean(per_run)),
        max=float(np.max(per_run)),
        n_runs=len(per_run),
        out_of_bounds_rate=float(np.mean(oob)),
        fingerprint=value.stats_fingerprint,
        alpha=alpha,
        run_oob=oob,
    )


def run_alpha_sweep(denoiser, value: ValueModel, schedule, alphas: Sequence[float], initial_states: np.ndarray,
                    n_runs: int = 5, seed: int = 0, court: CourtSpec = CourtSpec(),
                    grad_clip: Optional[float] = None) -> list[EvalReport]:
    """One report per guidance scale; run r of every scale uses seed ``seed + r`` and the same initial states."""
    if not alphas:
        raise RejectedInput("alphas must be nonempty")
    states = np.asarray(initial_states, dtype=float)
    reports = []
    for alpha in alphas:
        runs = []
        for r in range(n_runs):
            cfg = PlanConfig(alpha=float(alpha), n_steps=schedule.n_steps, horizon=denoiser.arch.horizon,
                             seed=seed + r, initial_state=states, batch=len(states),
                             **({} if grad_clip is None else {"grad_clip": grad_clip}))
            runs.append(plan(denoiser, value, schedule, cfg).raw)
        reports.append(evaluate(runs, value, n_runs, court, alpha=float(alpha)))
    return reports


REPORT_COLUMNS = ["alpha", "run", "return", "oob_rate"]


def write_report_csv(reports: Iterable[EvalReport], fh) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for rep in reports:
        for k, (ret, oob) in enumerate(zip(rep.returns, rep.run_oob)):
            w.writerow(["" if rep.alpha is None else repr(rep.alpha), k, repr(ret), repr(oob)])


def report_summary(reports: Iterable[EvalReport]) -> list[dict]:
    return [{"alpha": r.alpha, "AVG": r.avg, "MAX": r.max, "std": r.std, "n_runs": r.n_runs,
             "out_of_bounds_rate": r.out_of_bounds_rate, "fingerprint": r.fingerprint} for r in reports]


def trend_ok(reports: Sequence[EvalReport]) -> tuple[bool, list[int]]:
    """
    AVG nondecreasing along the sweep, tolerating one adjacent inversion that
    lies within one joint standard error. Returns (ok, inverted indices).
    """
    bad = []
    for k in range(len(reports) - 1):
        a, b = reports[k], reports[k + 1]
        if b.avg < a.avg:
            bad.append(k)
    if not bad:
        return True, bad
    if len(bad) > 1:
        return False, bad
    a, b = reports[bad[0]], reports[bad[0] + 1]
    joint = math.sqrt(a.stderr ** 2 + b.stderr ** 2)
    return (a.avg - b.avg) <= joint, bad
