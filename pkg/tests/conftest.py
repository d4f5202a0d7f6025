from __future__ import annotations

import numpy as np
import pytest
import torch

from courtplan.core import TRANSITION_DIM, NormalizationStats
from courtplan.diffusion import Denoiser, make_schedule
from courtplan.evalkit import SyntheticSpec, generate_games
from courtplan.ingest import segment_possessions
from courtplan.dataset import TrajectoryDataset, build_examples
from courtplan.networks import ArchSpec
from courtplan.value import ValueModel

torch.set_num_threads(1)

SMALL_ARCH = ArchSpec(horizon=16, base_width=8, dim_mults=(1, 2))


def random_stats(seed: int = 0) -> NormalizationStats:
    rng = np.random.default_rng(seed)
    lo = rng.uniform(-5, 5, TRANSITION_DIM)
    hi = lo + rng.uniform(1, 10, TRANSITION_DIM)
    return NormalizationStats(lo, hi)


def perturb_weights(model: torch.nn.Module, seed: int, scale: float = 0.05) -> None:
    """Fresh models have zero-initialized output layers; give them something to say."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(scale * torch.randn(p.shape, generator=gen, dtype=p.dtype))


@pytest.fixture
def small_models():
    stats = random_stats()
    schedule = make_schedule(5)
    den = Denoiser(SMALL_ARCH, schedule, stats, seed=1)
    val = ValueModel(SMALL_ARCH, schedule, stats, seed=2)
    perturb_weights(den.model, 10)
    perturb_weights(val.model, 11)
    return den, val, schedule


@pytest.fixture(scope="session")
def synthetic_games():
    return generate_games(SyntheticSpec(seed=5, n_possessions=40, frames_per_possession=(20, 30)))


@pytest.fixture(scope="session")
def synthetic_dataset(synthetic_games):
    pairs = [(segment_possessions(g.frames, g.events, g.game_id), g.frames) for g in synthetic_games]
    examples, stats = build_examples(pairs, SMALL_ARCH.horizon)
    return TrajectoryDataset(examples, stats)
