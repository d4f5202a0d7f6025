"""
Noise schedules, forward noising, reverse-process means and denoiser training.

Step indices run ``0 .. N-1``; index ``i`` corresponds to the noised trajectory
after ``i + 1`` forward steps, so ``alpha_bar[0]`` is close to one and
``alpha_bar[N-1]`` close to zero.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch

from . import container
from .core import LAYOUT_VERSION, NormalizationStats, RejectedInput, TrajectoryTensor
from .networks import ArchSpec, TemporalUnet

log = logging.getLogger(__name__)

FULL_SCALE_N_STEPS = 20
FULL_SCALE_LR = 2e-5
FULL_SCALE_BATCH = 512
FULL_SCALE_TRAIN_STEPS = 245_000
MAX_BETA = 0.999


class NumericAbort(RuntimeError):
    """Training produced a non-finite loss; ``state`` holds the last finite weights."""

    def __init__(self, msg: str, state: Optional[dict] = None, step: int = -1):
        super().__init__(msg)
        self.state = state
        self.step = step


@dataclass(frozen=True)
class NoiseSchedule:
    kind: str
    alpha: np.ndarray
    alpha_bar: np.ndarray = field(init=False)
    posterior_var: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        a = np.asarray(self.alpha, dtype=np.float64)
        if a.ndim != 1 or len(a) < 1 or np.any(a <= 0) or np.any(a > 1):
            raise RejectedInput("alpha must be a nonempty vector in (0, 1]")
        ab = np.cumprod(a)
        prev = np.concatenate([[1.0], ab[:-1]])
        var = (1.0 - a) * (1.0 - prev) / np.maximum(1.0 - ab, 1e-300)
        # step 0 has zero true posterior variance; borrow step 1's (or beta_0 when N == 1)
        var[0] = var[1] if len(a) > 1 else 1.0 - a[0]
        for arr in (a, ab, var):
            arr.setflags(write=False)
        object.__setattr__(self, "alpha", a)
        object.__setattr__(self, "alpha_bar", ab)
        object.__setattr__(self, "posterior_var", var)

    @property
    def n_steps(self) -> int:
        return len(self.alpha)

    @property
    def beta(self) -> np.ndarray:
        return 1.0 - self.alpha

    def check_step(self, i: int) -> int:
        if not 0 <= int(i) < self.n_steps:
            raise RejectedInput(f"step index {i} outside [0, {self.n_steps - 1}]")
        return int(i)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "n_steps": self.n_steps}


def cosine_alpha_bar(n_steps: int, s: float = 0.008) -> np.ndarray:
    """Unclipped cosine cumulative products at steps 1..N."""
    t = np.arange(n_steps + 1, dtype=np.float64) / n_steps
    f = np.cos((t + s) / (1 + s) * math.pi / 2) ** 2
    return f[1:] / f[0]


def make_schedule(n_steps: int, kind: str = "cosine") -> NoiseSchedule:
    if n_steps < 1:
        raise RejectedInput(f"need at least one diffusion step, got {n_steps}")
    if kind == "cosine":
        ab = np.concatenate([[1.0], cosine_alpha_bar(n_steps)])
        beta = np.clip(1.0 - ab[1:] / ab[:-1], 0.0, MAX_BETA)
    elif kind == "linear":
        scale = 1000.0 / n_steps
        if n_steps == 1:
            beta = np.array([min(scale * 0.02, MAX_BETA)])
        else:
            beta = np.clip(np.linspace(scale * 1e-4, scale * 0.02, n_steps), 0.0, MAX_BETA)
    else:
        raise RejectedInput(f"unknown schedule kind {kind!r}")
    return NoiseSchedule(kind, 1.0 - beta)


def q_sample(schedule: NoiseSchedule, tau0: np.ndarray, i: int, eps: np.ndarray) -> np.ndarray:
    """Closed-form forward noising of a clean (normalized) trajectory to step ``i``."""
    i = schedule.check_step(i)
    tau0 = np.asarray(tau0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != tau0.shape:
        raise RejectedInput(f"noise shape {eps.shape} != trajectory shape {tau0.shape}")
    ab = schedule.alpha_bar[i]
    return math.sqrt(ab) * tau0 + math.sqrt(1.0 - ab) * eps


def posterior_mean(schedule: NoiseSchedule, tau_i, eps_hat, i: int):
    """Mean of the reverse step from ``tau_i`` given a noise estimate. Works on numpy arrays or tensors."""
    i = schedule.check_step(i)
    a = schedule.alpha[i]
    ab = schedule.alpha_bar[i]
    coef = (1.0 - a) / math.sqrt(1.0 - ab) if ab < 1.0 else 0.0
    return (tau_i - coef * eps_hat) / math.sqrt(a)


def noise_loss(eps_hat: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    return ((eps_hat - eps) ** 2).mean()


def _batched_q_sample(schedule: NoiseSchedule, x0: torch.Tensor, t: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    ab = torch.tensor(schedule.alpha_bar, dtype=x0.dtype)[t][:, None, None]
    return ab.sqrt() * x0 + (1.0 - ab).sqrt() * eps


@dataclass(frozen=True)
class TrainConfig:
    lr: float = FULL_SCALE_LR
    batch_size: int = FULL_SCALE_BATCH
    steps: int = FULL_SCALE_TRAIN_STEPS
    seed: int = 0
    log_every: int = 100


def seeded_init(factory: Callable[[], torch.nn.Module], seed: int) -> torch.nn.Module:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return factory()


def model_arrays(model: torch.nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy().copy() for k, v in model.state_dict().items()}


def load_arrays(model: torch.nn.Module, arrays: dict[str, np.ndarray]) -> None:
    model.load_state_dict({k: torch.from_numpy(np.array(v)) for k, v in arrays.items()})


class Denoiser:
    """Noise-prediction U-Net with its schedule, normalization stats and training seed."""

    role = "denoiser"

    def __init__(self, arch: ArchSpec, schedule: NoiseSchedule, stats: NormalizationStats,
                 seed: int = 0, model: Optional[TemporalUnet] = None, zero_init_final: bool = True):
        if stats.dim != arch.transition_dim:
            raise RejectedInput("stats width does not match architecture")
        self.arch = arch
        self.schedule = schedule
        self.stats = stats
        self.seed = seed
        self.model = model if model is not None else seeded_init(lambda: TemporalUnet(arch, zero_init_final), seed)
        self.model.eval()
        self.extra: dict = {}

    @property
    def stats_fingerprint(self) -> str:
        return container.fingerprint_arrays(self.stats.min, self.stats.max)

    def predict(self, tau_i: torch.Tensor, i) -> torch.Tensor:
        """Batched noise estimate; ``tau_i`` is [B, H, D] in any float dtype, returned in the same dtype."""
        dtype = next(self.model.parameters()).dtype
        t = torch.as_tensor(i).long().expand(tau_i.shape[0])
        with torch.no_grad():
            return self.model(tau_i.to(dtype), t).to(tau_i.dtype)

    def meta(self) -> dict:
        return {
            "role": self.role,
            "layout_version": LAYOUT_VERSION,
            "arch": self.arch.to_dict(),
            "schedule": self.schedule.to_dict(),
            "seed": self.seed,
            "stats_fingerprint": self.stats_fingerprint,
        }

    def save(self, path: Path | str, extra: Optional[dict] = None) -> str:
        arrays = {f"w/{k}": v for k, v in model_arrays(self.model).items()}
        arrays["stats/min"] = self.stats.min
        arrays["stats/max"] = self.stats.max
        meta = self.meta()
        meta["extra"] = self.extra if extra is None else extra
        return container.save(path, meta, arrays)

    @classmethod
    def _parts(cls, path: Path | str):
        meta, arrays = container.load(path)
        if meta.get("role") != cls.role:
            raise RejectedInput(f"{path} holds a {meta.get('role')!r} checkpoint, expected {cls.role!r}")
        if meta.get("layout_version") != LAYOUT_VERSION:
            raise RejectedInput(f"{path}: layout version {meta.get('layout_version')} unsupported")
        arch = ArchSpec.from_dict(meta["arch"])
        schedule = make_schedule(meta["schedule"]["n_steps"], meta["schedule"]["kind"])
        stats = NormalizationStats(arrays["stats/min"], arrays["stats/max"])
        weights = {k[2:]: v for k, v in arrays.items() if k.startswith("w/")}
        return meta, arch, schedule, stats, weights

    @classmethod
    def load(cls, path: Path | str) -> "Denoiser":
        meta, arch, schedule, stats, weights = cls._parts(path)
        obj = cls(arch, schedule, stats, seed=meta["seed"])
        load_arrays(obj.model, weights)
        obj.extra = meta.get("extra", {})
        return obj


def predict_noise(denoiser: Denoiser, tau_i: TrajectoryTensor, i: int) -> np.ndarray:
    if not tau_i.normalized:
        raise RejectedInput("predict_noise expects a normalized trajectory")
    i = denoiser.schedule.check_step(i)
    x = torch.from_numpy(np.array(tau_i.values))[None]
    return denoiser.predict(x, i)[0].numpy()


@dataclass
class TrainResult:
    losses: list[float]
    first_loss: float


def _train_loop(model: torch.nn.Module, data: torch.Tensor, cfg: TrainConfig,
                loss_fn: Callable[[torch.Tensor, torch.Tensor, torch.Generator], torch.Tensor]) -> TrainResult:
    gen = torch.Generator().manual_seed(cfg.seed)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    model.train()
    losses: list[float] = []
    last_good = {k: v.clone() for k, v in model.state_dict().items()}
    n = data.shape[0]
    for step in range(cfg.steps):
        idx = torch.randint(0, n, (cfg.batch_size,), generator=gen)
        loss = loss_fn(data[idx], idx, gen)
        value = float(loss.detach())
        if not math.isfinite(value):
            model.load_state_dict(last_good)
            model.eval()
            raise NumericAbort(f"non-finite loss at step {step}", state=model_arrays(model), step=step)
        # weights that produced a finite loss
        last_good = {k: v.clone() for k, v in model.state_dict().items()}
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(value)
        if cfg.log_every and step % cfg.log_every == 0:
            log.info("step %d loss %.5f", step, value)
    model.eval()
    return TrainResult(losses, losses[0] if losses else float("nan"))


def train_diffusion(denoiser: Denoiser, data: np.ndarray, cfg: TrainConfig) -> TrainResult:
    """
    Fit the noise predictor by minimizing the mean squared noise error.

    ``data`` is an [n, H, D] array of normalized clean trajectories. Steps and
    noise are drawn from a generator seeded with ``cfg.seed``.
    """
    if len(data) == 0:
        raise RejectedInput("cannot train on an empty dataset")
    dtype = next(denoiser.model.parameters()).dtype
    x = torch.as_tensor(np.asarray(data), dtype=dtype)
    n_steps = denoiser.schedule.n_steps

    def loss_fn(x0: torch.Tensor, _idx: torch.Tensor, gen: torch.Generator) -> torch.Tensor:
        t = torch.randint(0, n_steps, (x0.shape[0],), generator=gen)
        eps = torch.randn(x0.shape, generator=gen, dtype=dtype)
        xt = _batched_q_sample(denoiser.schedule, x0, t, eps)
        return noise_loss(denoiser.model(xt, t), eps)

    return _train_loop(denoiser.model, x, cfg, loss_fn)


def evaluate_noise_loss(denoiser: Denoiser, data: np.ndarray, n_draws: int = 64, seed: int = 12345) -> float:
    """Monte-Carlo estimate of the noise-prediction loss, averaged over every step index."""
    dtype = next(denoiser.model.parameters()).dtype
    x = torch.as_tensor(np.asarray(data), dtype=dtype)
    gen = torch.Generator().manual_seed(seed)
    total = 0.0
    count = 0
    with torch.no_grad():
        for i in range(denoiser.schedule.n_steps):
            for _ in range(max(1, n_draws // len(x))):
                t = torch.full((x.shape[0],), i, dtype=torch.long)
                eps = torch.randn(x.shape, generator=gen, dtype=dtype)
                xt = _batched_q_sample(denoiser.schedule, x, t, eps)
                total += float(noise_loss(denoiser.model(xt, t), eps)) * x.shape[0]
                count += x.shape[0]
    return total / count
