"""
Value-guided reverse sampling with initial-state conditioning.

Each batch element draws its noise from its own generator seeded with
``(seed, element index)``, so results do not depend on batch composition and
the guided sampler at ``alpha = 0`` consumes exactly the same draws as
:func:`sample_unguided`.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .core import STATE_DIM, RejectedInput, TrajectoryTensor
from .diffusion import Denoiser, NoiseSchedule, posterior_mean
from .value import ValueModel

log = logging.getLogger(__name__)

DEFAULT_GRAD_CLIP = 100.0


class GuidanceError(RuntimeError):
    pass


class IncompatibleCheckpoints(RejectedInput):
    pass


@dataclass(frozen=True)
class PlanConfig:
    alpha: float = 0.1
    n_steps: int = 20
    horizon: int = 64
    seed: int = 0
    initial_state: Optional[np.ndarray] = None
    batch: int = 1
    grad_clip: float = DEFAULT_GRAD_CLIP

    def __post_init__(self) -> None:
        if not math.isfinite(self.alpha) or self.alpha < 0:
            raise RejectedInput(f"guidance scale must be finite and >= 0, got {self.alpha}")
        if self.batch < 1:
            raise RejectedInput("batch must be >= 1")
        if self.initial_state is not None:
            s = np.asarray(self.initial_state, dtype=float)
            if s.shape not in ((STATE_DIM,), (self.batch, STATE_DIM)):
                raise RejectedInput(f"initial_state must be ({STATE_DIM},) or ({self.batch}, {STATE_DIM})")

    def states(self) -> Optional[np.ndarray]:
        """Initial states broadcast to [batch, 33] (feet)."""
        if self.initial_state is None:
            return None
        return np.broadcast_to(np.asarray(self.initial_state, dtype=float), (self.batch, STATE_DIM)).copy()

    def echo(self) -> dict:
        return {"alpha": self.alpha, "N": self.n_steps, "H": self.horizon, "seed": self.seed,
                "batch": self.batch, "grad_clip": self.grad_clip}


@dataclass
class PlanResult:
    normalized: np.ndarray            # [B, H, D]
    trajectories: list[TrajectoryTensor]
    predicted_returns: np.ndarray     # [B]
    config: PlanConfig
    fingerprints: dict = field(default_factory=dict)

    @property
    def raw(self) -> np.ndarray:
        return np.stack([t.values for t in self.trajectories])


def perturbed_mean(mu, var: float, grad, alpha: float):
    """Reverse-step mean shifted along the value gradient."""
    return mu + alpha * var * grad


def clip_gradient(grad: torch.Tensor, max_norm: float) -> torch.Tensor:
    """Rescale each trajectory's gradient to L2 norm at most ``max_norm``."""
    norms = grad.flatten(1).norm(dim=1)
    scale = torch.clamp(max_norm / torch.clamp(norms, min=1e-300), max=1.0)
    return grad * scale[:, None, None]


def element_rngs(seed: int, batch: int, offset: int = 0) -> list[np.random.Generator]:
    return [np.random.default_rng([seed, offset + k]) for k in range(batch)]


def _draw(rngs: Sequence[np.random.Generator], shape: tuple[int, int]) -> torch.Tensor:
    return torch.from_numpy(np.stack([r.standard_normal(shape) for r in rngs]))


def guided_step(denoiser: Denoiser, value: ValueModel, schedule: NoiseSchedule, tau_i: torch.Tensor, i: int,
                alpha: float, rngs: Sequence[np.random.Generator], grad_clip: float = DEFAULT_GRAD_CLIP) -> torch.Tensor:
    """One reverse step from ``tau_i`` ([B, H, D], float64) with the mean nudged by ``alpha * var * grad``."""
    i = schedule.check_step(i)
    mu = posterior_mean(schedule, tau_i, denoiser.predict(tau_i, i), i)
    _, grad = value.value_and_grad(mu, i)
    if not torch.isfinite(grad).all():
        raise GuidanceError(f"non-finite value gradient at reverse step {i}")
    grad = clip_gradient(grad, grad_clip)
    var = float(schedule.posterior_var[i])
    mean = perturbed_mean(mu, var, grad, alpha)
    if i == 0:
        return mean
    return mean + math.sqrt(var) * _draw(rngs, tuple(tau_i.shape[1:]))


def unguided_step(denoiser: Denoiser, schedule: NoiseSchedule, tau_i: torch.Tensor, i: int,
                  rngs: Sequence[np.random.Generator]) -> torch.Tensor:
    i = schedule.check_step(i)
    mean = posterior_mean(schedule, tau_i, denoiser.predict(tau_i, i), i)
    if i == 0:
        return mean
    return mean + math.sqrt(float(schedule.posterior_var[i])) * _draw(rngs, tuple(tau_i.shape[1:]))


def condition_initial_state(tau, s):
    """Overwrite row 0's state columns with ``s`` (normalized, [33] or [B, 33]). Accepts arrays or tensors."""
    if np.shape(s)[-1] != STATE_DIM:
        raise RejectedInput(f"conditioning state must have {STATE_DIM} entries")
    if isinstance(tau, TrajectoryTensor):
        if not tau.normalized:
            raise RejectedInput("conditioning expects a normalized trajectory")
        v = np.array(tau.values)
        v[0, :STATE_DIM] = s
        return replace(tau, values=v)
    out = tau.clone() if isinstance(tau, torch.Tensor) else np.array(tau)
    if isinstance(out, torch.Tensor):
        out[..., 0, :STATE_DIM] = torch.as_tensor(s, dtype=out.dtype)
    else:
        out[..., 0, :STATE_DIM] = s
    return out


def check_compatible(denoiser: Denoiser, value: ValueModel, schedule: NoiseSchedule,
                     config: Optional[PlanConfig] = None) -> None:
    problems = []
    if denoiser.stats_fingerprint != value.stats_fingerprint:
        problems.append(f"stats fingerprints differ ({denoiser.stats_fingerprint} vs {value.stats_fingerprint})")
    if denoiser.arch.horizon != value.arch.horizon:
        problems.append(f"horizons differ ({denoiser.arch.horizon} vs {value.arch.horizon})")
    if denoiser.arch.transition_dim != value.arch.transition_dim:
        problems.append("transition dims differ")
    for name, m in (("denoiser", denoiser), ("value", value)):
        if m.schedule.n_steps != schedule.n_steps or m.schedule.kind != schedule.kind:
            problems.append(f"{name} schedule {m.schedule.to_dict()} != {schedule.to_dict()}")
    if config is not None:
        if config.horizon != denoiser.arch.horizon:
            problems.append(f"plan horizon {config.horizon} != checkpoint horizon {denoiser.arch.horizon}")
        if config.n_steps != schedule.n_steps:
            problems.append(f"plan N {config.n_steps} != schedule N {schedule.n_steps}")
    if problems:
        raise IncompatibleCheckpoints("; ".join(problems))


def _initial_noise(rngs: Sequence[np.random.Generator], horizon: int, dim: int) -> torch.Tensor:
    return _draw(rngs, (horizon, dim))


def _finish(denoiser: Denoiser, value: ValueModel, tau: torch.Tensor, config: PlanConfig) -> PlanResult:
    norm = tau.numpy().copy()
    returns = value.predict(tau, 0).numpy().astype(float)
    stats = denoiser.stats
    trajs = [TrajectoryTensor(stats.denormalize_array(norm[k]), valid_len=norm.shape[1]) for k in range(len(norm))]
    fps = {"stats": denoiser.stats_fingerprint}
    return PlanResult(norm, trajs, returns, config, fps)


def plan(denoiser: Denoiser, value: ValueModel, schedule: NoiseSchedule, config: PlanConfig) -> PlanResult:
    """Sample ``config.batch`` trajectories guided by the value gradient, conditioned on the initial state."""
    check_compatible(denoiser, value, schedule, config)
    rngs = element_rngs(config.seed, config.batch)
    tau = _initial_noise(rngs, config.horizon, denoiser.arch.transition_dim)
    raw = config.states()
    s = None if raw is None else torch.from_numpy(denoiser.stats.normalize_state(raw))
    for i in reversed(range(schedule.n_steps)):
        tau = guided_step(denoiser, value, schedule, tau, i, config.alpha, rngs, config.grad_clip)
        if s is not None:
            tau = condition_initial_state(tau, s)
    return _finish(denoiser, value, tau, config)


def sample_unguided(denoiser: Denoiser, value: ValueModel, schedule: NoiseSchedule, config: PlanConfig) -> PlanResult:
    """Plain reverse chain with the same noise streams and conditioning as :func:`plan`."""
    check_compatible(denoiser, value, schedule, config)
    rngs = element_rngs(config.seed, config.batch)
    tau = _initial_noise(rngs, config.horizon, denoiser.arch.transition_dim)
    raw = config.states()
    s = None if raw is None else torch.from_numpy(denoiser.stats.normalize_state(raw))
    for i in reversed(range(schedule.n_steps)):
        tau = unguided_step(denoiser, schedule, tau, i, rngs)
        if s is not None:
            tau = condition_initial_state(tau, s)
    return _finish(denoiser, value, tau, config)


def best_plan_index(result: PlanResult) -> int:
    return int(np.argmax(result.predicted_returns))


@dataclass
class ExecutedTrajectory:
    states: np.ndarray           # [steps + 1, 33], feet
    actions: np.ndarray          # [steps, 33], ft/s
    planned_initial_states: np.ndarray  # [steps, 33]
    n_plans: int


EnvStep = Callable[[np.ndarray, np.ndarray], np.ndarray]


def receding_horizon(denoiser: Denoiser, value: ValueModel, schedule: NoiseSchedule, config: PlanConfig,
                     env_step: EnvStep, steps: int) -> ExecutedTrajectory:
    """Plan, execute the first action of the best plan through ``env_step``, re-plan; ``steps`` times."""
    if config.initial_state is None or np.ndim(config.initial_state) != 1:
        raise RejectedInput("receding_horizon needs a single initial state")
    state = np.asarray(config.initial_state, dtype=float)
    states = [state]
    actions, planned = [], []
    for k in range(steps):
        result = plan(denoiser, value, schedule, replace(config, initial_state=state, seed=config.seed + k))
        best = result.trajectories[best_plan_index(result)]
        planned.append(best.values[0, :STATE_DIM].copy())
        action = best.values[0, STATE_DIM:].copy()
        try:
            state = np.asarray(env_step(state, action), dtype=float)
        except Exception as exc:
            raise RuntimeError(f"env_step failed at step {k}: {exc}") from exc
        actions.append(action)
        states.append(state)
    return ExecutedTrajectory(np.stack(states), np.stack(actions), np.stack(planned), steps)
