"""
Possession-return predictor over noised trajectories and its input gradient.
"""

from __future__ import annotations

from typing import Optional

import numpy as np
import torch

from .core import NormalizationStats, RejectedInput, TrajectoryTensor
from .diffusion import (
    Denoiser,
    NoiseSchedule,
    TrainConfig,
    TrainResult,
    _batched_q_sample,
    _train_loop,
    seeded_init,
)
from .networks import ArchSpec, ValueNet


class ValueModel(Denoiser):
    """Return predictor sharing the denoiser's checkpoint container, tagged ``role = value``."""

    role = "value"

    def __init__(self, arch: ArchSpec, schedule: NoiseSchedule, stats: NormalizationStats,
                 seed: int = 0, model: Optional[ValueNet] = None, zero_init_head: bool = True):
        if model is None:
            model = seeded_init(lambda: ValueNet(arch, zero_init_head), seed)
        super().__init__(arch, schedule, stats, seed=seed, model=model)

    def predict(self, tau_i: torch.Tensor, i) -> torch.Tensor:
        dtype = next(self.model.parameters()).dtype
        t = torch.as_tensor(i).long().expand(tau_i.shape[0])
        with torch.no_grad():
            return self.model(tau_i.to(dtype), t).to(tau_i.dtype)

    def value_and_grad(self, tau_i: torch.Tensor, i) -> tuple[torch.Tensor, torch.Tensor]:
        """Per-trajectory predicted return and its gradient w.r.t. ``tau_i`` ([B, H, D])."""
        dtype = next(self.model.parameters()).dtype
        t = torch.as_tensor(i).long().expand(tau_i.shape[0])
        x = tau_i.detach().to(dtype).requires_grad_(True)
        with torch.enable_grad():
            y = self.model(x, t)
            (grad,) = torch.autograd.grad(y.sum(), x)
        return y.detach().to(tau_i.dtype), grad.to(tau_i.dtype)


def _check(value: ValueModel, tau_i: TrajectoryTensor, i: int) -> int:
    if not tau_i.normalized:
        raise RejectedInput("value model expects a normalized trajectory")
    if tau_i.values.shape != (value.arch.horizon, value.arch.transition_dim):
        raise RejectedInput(
            f"trajectory shape {tau_i.values.shape} does not match "
            f"({value.arch.horizon}, {value.arch.transition_dim})"
        )
    return value.schedule.check_step(i)


def predict_return(value: ValueModel, tau_i: TrajectoryTensor, i: int) -> float:
    i = _check(value, tau_i, i)
    x = torch.from_numpy(np.array(tau_i.values))[None]
    return float(value.predict(x, i)[0])


def grad_return(value: ValueModel, tau_i: TrajectoryTensor, i: int) -> np.ndarray:
    i = _check(value, tau_i, i)
    x = torch.from_numpy(np.array(tau_i.values))[None]
    return value.value_and_grad(x, i)[1][0].numpy()


def train_value(value: ValueModel, data: np.ndarray, targets: np.ndarray, cfg: TrainConfig) -> TrainResult:
    """
    Regress possession returns from noised trajectories with squared error.

    Each batch draws step indices uniformly and unit-Gaussian noise, so the
    model is usable at every intermediate step of the reverse chain.
    """
    if len(data) == 0 or len(data) != len(targets):
        raise RejectedInput("need matching, nonempty trajectories and targets")
    dtype = next(value.model.parameters()).dtype
    x = torch.as_tensor(np.asarray(data), dtype=dtype)
    y = torch.as_tensor(np.asarray(targets), dtype=dtype)
    n_steps = value.schedule.n_steps

    def loss_fn(x0: torch.Tensor, idx: torch.Tensor, gen: torch.Generator) -> torch.Tensor:
        t = torch.randint(0, n_steps, (x0.shape[0],), generator=gen)
        eps = torch.randn(x0.shape, generator=gen, dtype=dtype)
        xt = _batched_q_sample(value.schedule, x0, t, eps)
        return ((value.model(xt, t) - y[idx]) ** 2).mean()

    return _train_loop(value.model, x, cfg, loss_fn)
