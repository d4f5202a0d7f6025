"""
Temporal U-Net noise predictor and its encoder-half value network.

Inputs are batches of trajectories shaped [B, H, D]; convolutions run along
the time axis with the D features as channels.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import RejectedInput


@dataclass(frozen=True)
class ArchSpec:
    transition_dim: int = 66
    horizon: int = 64
    base_width: int = 32
    dim_mults: tuple[int, ...] = (1, 2, 4)
    kernel_size: int = 5
    n_groups: int = 8

    @property
    def downsample_factor(self) -> int:
        return 2 ** (len(self.dim_mults) - 1)

    @property
    def padded_horizon(self) -> int:
        f = self.downsample_factor
        return -(-self.horizon // f) * f

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dim_mults"] = list(self.dim_mults)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchSpec":
        d = dict(d)
        d["dim_mults"] = tuple(d["dim_mults"])
        return cls(**d)


class SinusoidalPosEmb(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        half = dim // 2
        self.register_buffer("freq", torch.exp(torch.arange(half) * -(math.log(10000.0) / (half - 1))))

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        arg = t.to(self.freq.dtype)[:, None] * self.freq[None, :]
        return torch.cat([arg.sin(), arg.cos()], dim=-1)


class Conv1dBlock(nn.Sequential):
    def __init__(self, inp: int, out: int, kernel_size: int, n_groups: int):
        super().__init__(
            nn.Conv1d(inp, out, kernel_size, padding=kernel_size // 2),
            nn.GroupNorm(min(n_groups, out), out),
            nn.Mish(),
        )


class ResidualTemporalBlock(nn.Module):
    def __init__(self, inp: int, out: int, embed_dim: int, kernel_size: int, n_groups: int):
        super().__init__()
        self.blocks = nn.ModuleList([
            Conv1dBlock(inp, out, kernel_size, n_groups),
            Conv1dBlock(out, out, kernel_size, n_groups),
        ])
        self.time_mlp = nn.Sequential(nn.Mish(), nn.Linear(embed_dim, out))
        self.residual = nn.Conv1d(inp, out, 1) if inp != out else nn.Identity()

    def forward(self, x: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        h = self.blocks[0](x) + self.time_mlp(t)[:, :, None]
        h = self.blocks[1](h)
        return h + self.residual(x)


def _step_embedding(width: int) -> nn.Module:
    return nn.Sequential(
        SinusoidalPosEmb(width),
        nn.Linear(width, width * 4),
        nn.Mish(),
        nn.Linear(width * 4, width),
    )


class _Encoder(nn.Module):
    """Down path shared in shape by the U-Net and the value network."""

    def __init__(self, arch: ArchSpec):
        super().__init__()
        w = arch.base_width
        dims = [arch.transition_dim] + [w * m for m in arch.dim_mults]
        self.arch = arch
        self.time_mlp = _step_embedding(w)
        self.downs = nn.ModuleList()
        pairs = list(zip(dims[:-1], dims[1:]))
        for k, (d_in, d_out) in enumerate(pairs):
            last = k == len(pairs) - 1
            self.downs.append(nn.ModuleList([
                ResidualTemporalBlock(d_in, d_out, w, arch.kernel_size, arch.n_groups),
                ResidualTemporalBlock(d_out, d_out, w, arch.kernel_size, arch.n_groups),
                nn.Conv1d(d_out, d_out, 3, stride=2, padding=1) if not last else nn.Identity(),
            ]))
        self.out_dim = dims[-1]

    def prepare(self, x: torch.Tensor) -> torch.Tensor:
        """[B, H, D] -> [B, D, H_padded], padding time by edge replication."""
        if x.shape[1] != self.arch.horizon or x.shape[2] != self.arch.transition_dim:
            raise RejectedInput(
                f"expected [B, {self.arch.horizon}, {self.arch.transition_dim}] input, got {list(x.shape)}"
            )
        x = x.transpose(1, 2)
        extra = self.arch.padded_horizon - self.arch.horizon
        if extra:
            x = F.pad(x, (0, extra), mode="replicate")
        return x

    def encode(self, x: torch.Tensor, t: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, list[torch.Tensor]]:
        temb = self.time_mlp(t)
        skips = []
        for res1, res2, down in self.downs:
            x = res2(res1(x, temb), temb)
            skips.append(x)
            x = down(x)
        return x, temb, skips


class TemporalUnet(nn.Module):
    """Noise predictor: trajectory [B, H, D] and step index [B] -> noise estimate [B, H, D]."""

    def __init__(self, arch: ArchSpec, zero_init_final: bool = True):
        super().__init__()
        self.arch = arch
        self.encoder = _Encoder(arch)
        w = arch.base_width
        dims = [arch.transition_dim] + [w * m for m in arch.dim_mults]
        mid = dims[-1]
        self.mid1 = ResidualTemporalBlock(mid, mid, w, arch.kernel_size, arch.n_groups)
        self.mid2 = ResidualTemporalBlock(mid, mid, w, arch.kernel_size, arch.n_groups)
        self.ups = nn.ModuleList()
        pairs = list(zip(dims[1:-1], dims[2:]))
        for d_in, d_out in reversed(pairs):
            self.ups.append(nn.ModuleList([
                ResidualTemporalBlock(d_out * 2, d_in, w, arch.kernel_size, arch.n_groups),
                ResidualTemporalBlock(d_in, d_in, w, arch.kernel_size, arch.n_groups),
                nn.ConvTranspose1d(d_in, d_in, 4, stride=2, padding=1),
            ]))
        self.final_block = Conv1dBlock(w, w, arch.kernel_size, arch.n_groups)
        self.final_conv = nn.Conv1d(w, arch.transition_dim, 1)
        # Step-dependent per-channel gain on the input. The noise target is white
        # along time and cannot pass the downsampled path; this skip carries it.
        self.input_gain = nn.Linear(w, arch.transition_dim)
        if zero_init_final:
            for layer in (self.final_conv, self.input_gain):
                nn.init.zeros_(layer.weight)
                nn.init.zeros_(layer.bias)

    def forward(self, x: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        x0 = self.encoder.prepare(x)
        h, temb, skips = self.encoder.encode(x0, t)
        h = self.mid2(self.mid1(h, temb), temb)
        for res1, res2, up in self.ups:
            h = torch.cat([h, skips.pop()], dim=1)
            h = up(res2(res1(h, temb), temb))
        h = self.final_conv(self.final_block(h)) + self.input_gain(temb)[:, :, None] * x0
        return h[:, :, : self.arch.horizon].transpose(1, 2)


class ValueNet(nn.Module):
    """Encoder half of the U-Net followed by one linear layer to a scalar return."""

    def __init__(self, arch: ArchSpec, zero_init_head: bool = True):
        super().__init__()
        self.arch = arch
        self.encoder = _Encoder(arch)
        length = arch.padded_horizon // arch.downsample_factor
        self.head = nn.Linear(self.encoder.out_dim * length, 1)
        if zero_init_head:
            nn.init.zeros_(self.head.weight)
            nn.init.zeros_(self.head.bias)

    def forward(self, x: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        h = self.encoder.prepare(x)
        h, _, _ = self.encoder.encode(h, t)
        return self.head(h.flatten(1)).squeeze(-1)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
