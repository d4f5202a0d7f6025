"""Value-guided diffusion planning of basketball possessions from tracking and play-by-play data."""

from __future__ import annotations

from .core import CourtSpec, Frame, NormalizationStats, PlayerPos, RejectedInput, TrajectoryTensor
from .diffusion import Denoiser, NoiseSchedule, NumericAbort, TrainConfig, make_schedule
from .ingest import EventType, label_reward
from .networks import ArchSpec
from .planner import PlanConfig, plan, sample_unguided
from .value import ValueModel

__version__ = "0.1.0"

__all__ = [
    "ArchSpec", "CourtSpec", "Denoiser", "EventType", "Frame", "NoiseSchedule", "NormalizationStats",
    "NumericAbort", "PlanConfig", "PlayerPos", "RejectedInput", "TrainConfig", "TrajectoryTensor",
    "ValueModel", "label_reward", "make_schedule", "plan", "sample_unguided",
]
