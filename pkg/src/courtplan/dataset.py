"""
Possession -> fixed-horizon trajectory tensors with velocity actions.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .core import (
    FPS,
    LAYOUT_VERSION,
    STATE_DIM,
    TRANSITION_DIM,
    Frame,
    NormalizationStats,
    RejectedInput,
    TrajectoryTensor,
    normalize,
)
from .ingest import PossessionRecord, label_reward

log = logging.getLogger(__name__)

DEFAULT_HORIZON = 64
FULL_SCALE_HORIZON = 1024


@dataclass(frozen=True)
class TrainingExample:
    tensor: TrajectoryTensor
    return_target: float
    possession_ref: str


def compute_actions(positions: np.ndarray) -> np.ndarray:
    """
    Finite-difference velocities (ft/s) for a T x 33 position array.

    The last row repeats the penultimate velocity; a single frame gets zeros.
    """
    p = np.asarray(positions, dtype=float)
    if p.ndim != 2:
        raise RejectedInput("positions must be T x 33")
    if len(p) < 2:
        log.warning("single frame: velocities set to zero")
        return np.zeros_like(p)
    v = np.empty_like(p)
    v[:-1] = (p[1:] - p[:-1]) * FPS
    v[-1] = v[-2]
    return v


def frame_states(frames: Sequence[Frame], offense_team_id: int) -> np.ndarray:
    return np.stack([f.state_vector(offense_team_id) for f in frames])


def build_from_states(states: np.ndarray, horizon: int) -> TrajectoryTensor:
    """Assemble a raw trajectory from T x 33 positions: keep the last ``horizon`` rows, pad by repetition."""
    if horizon < 1:
        raise RejectedInput(f"horizon must be >= 1, got {horizon}")
    states = np.asarray(states, dtype=float)
    if len(states) == 0:
        raise RejectedInput("empty possession")
    rows = np.concatenate([states, compute_actions(states)], axis=1)
    rows = rows[-horizon:]
    valid = len(rows)
    if valid < horizon:
        rows = np.concatenate([rows, np.repeat(rows[-1:], horizon - valid, axis=0)])
    return TrajectoryTensor(rows, valid_len=valid, normalized=False)


def build_trajectory(possession: PossessionRecord, frames: Sequence[Frame], horizon: int) -> TrajectoryTensor:
    span = frames[possession.start_frame_idx:possession.end_frame_idx]
    if not span:
        raise RejectedInput(f"possession {possession.possession_ref} has no frames")
    return build_from_states(frame_states(span, possession.offense_team_id), horizon)


def return_target(possession: PossessionRecord) -> float:
    """Undiscounted offense-perspective sum of every reward attached to the possession."""
    return float(sum(label_reward(e, possession.offense_team_id) for e in possession.events))


def fit_stats(tensors: Iterable[TrajectoryTensor]) -> NormalizationStats:
    lo = hi = None
    for t in tensors:
        valid = t.values[: t.valid_len]
        cur_lo, cur_hi = valid.min(axis=0), valid.max(axis=0)
        lo = cur_lo if lo is None else np.minimum(lo, cur_lo)
        hi = cur_hi if hi is None else np.maximum(hi, cur_hi)
    if lo is None:
        raise RejectedInput("fit_stats needs at least one example")
    return NormalizationStats(lo, hi)


def build_examples(
    games: Iterable[tuple[Sequence[PossessionRecord], Sequence[Frame]]], horizon: int
) -> tuple[list[TrainingExample], NormalizationStats]:
    raw: list[tuple[TrajectoryTensor, float, str]] = []
    for records, frames in games:
        for rec in records:
            raw.append((build_trajectory(rec, frames, horizon), return_target(rec), rec.possession_ref))
    stats = fit_stats(t for t, _, _ in raw)
    examples = [TrainingExample(normalize(t, stats), r, ref) for t, r, ref in raw]
    return examples, stats


class TrajectoryDataset:
    """In-memory normalized examples plus their stats; saved as a directory."""

    def __init__(self, examples: Sequence[TrainingExample], stats: NormalizationStats):
        if not examples:
            raise RejectedInput("dataset is empty")
        self.examples = list(examples)
        self.stats = stats
        self.horizon = examples[0].tensor.horizon
        self.values = np.stack([e.tensor.values for e in examples])
        self.returns = np.array([e.return_target for e in examples], dtype=float)
        self.valid_lens = np.array([e.tensor.valid_len for e in examples], dtype=int)

    def __len__(self) -> int:
        return len(self.examples)

    def initial_states(self) -> np.ndarray:
        """Raw (feet) row-0 states of every example."""
        return self.stats.denormalize_state(self.values[:, 0, :STATE_DIM])

    def save(self, root: Path | str, shard_size: int = 4096) -> None:
        root = Path(root)
        root.mkdir(parents=True, exist_ok=True)
        np.save(root / "stats_min.npy", self.stats.min)
        np.save(root / "stats_max.npy", self.stats.max)
        n_shards = (len(self) + shard_size - 1) // shard_size
        for k in range(n_shards):
            np.save(root / f"shard_{k:04d}.npy", self.values[k * shard_size:(k + 1) * shard_size])
        meta = {
            "layout_version": LAYOUT_VERSION,
            "horizon": self.horizon,
            "transition_dim": TRANSITION_DIM,
            "n_examples": len(self),
            "n_shards": n_shards,
            "shard_size": shard_size,
        }
        (root / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
        with open(root / "index.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["example", "possession_ref", "valid_len", "return_target"])
            for k, e in enumerate(self.examples):
                w.writerow([k, e.possession_ref, e.tensor.valid_len, repr(e.return_target)])

    @classmethod
    def load(cls, root: Path | str) -> "TrajectoryDataset":
        root = Path(root)
        meta = json.loads((root / "meta.json").read_text())
        if meta["layout_version"] != LAYOUT_VERSION or meta["transition_dim"] != TRANSITION_DIM:
            raise RejectedInput(f"dataset layout {meta['layout_version']} is not supported")
        stats = NormalizationStats(np.load(root / "stats_min.npy"), np.load(root / "stats_max.npy"))
        values = np.concatenate([np.load(root / f"shard_{k:04d}.npy") for k in range(meta["n_shards"])])
        with open(root / "index.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        examples = [
            TrainingExample(
                TrajectoryTensor(values[k], valid_len=int(r["valid_len"]), normalized=True),
                float(r["return_target"]),
                r["possession_ref"],
            )
            for k, r in enumerate(rows)
        ]
        return cls(examples, stats)
