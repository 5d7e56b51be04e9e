"""Text-conditioned noise generator: latent projection, SSACN blocks, bounded head."""

from __future__ import annotations

import math
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import checkpoint
from .nn_core import SSCBN

DEFAULT_EPSILON = 8 / 255
LEAK = 0.2


def check_on_grid(epsilon: float) -> int:
    """Return k for epsilon == k/255; raise if epsilon is not positive and on the grid."""
    k = round(epsilon * 255)
    if epsilon <= 0 or k < 1 or not math.isclose(epsilon * 255, k, rel_tol=0, abs_tol=1e-9):
        raise ValueError(f"epsilon {epsilon} must be a positive multiple of 1/255")
    return k


class SSACNBlock(nn.Module):
    """Nearest x2 upsample, then two (SSCBN -> leaky ReLU -> 3x3 conv) stages plus a skip path."""

    def __init__(self, in_ch: int, out_ch: int, cond_dim: int):
        super().__init__()
        self.in_ch, self.out_ch = in_ch, out_ch
        self.norm1 = SSCBN(in_ch, cond_dim)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, 1, 1)
        self.norm2 = SSCBN(out_ch, cond_dim)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, 1, 1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x: torch.Tensor, emb_t: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.in_ch:
            raise ValueError(f"block expects {self.in_ch} channels, got {x.shape[1]}")
        x = F.interpolate(x, scale_factor=2, mode="nearest")
        h = self.conv1(F.leaky_relu(self.norm1(x, emb_t), LEAK))
        h = self.conv2(F.leaky_relu(self.norm2(h, emb_t), LEAK))
        return self.skip(x) + h


def ssacn_block_forward(block: SSACNBlock, features: torch.Tensor, emb_t: torch.Tensor) -> torch.Tensor:
    return block(features, emb_t)


class GeneratorModel(nn.Module):
    def __init__(self, cond_dim: int = 64, latent_dim: int = 64, base_channels: int = 128,
                 block_channels: tuple[int, ...] = (64, 32, 16), epsilon: float = DEFAULT_EPSILON,
                 head_init_scale: float = 0.1):
        super().__init__()
        check_on_grid(epsilon)
        self.config = {"cond_dim": cond_dim, "latent_dim": latent_dim, "base_channels": base_channels,
                       "block_channels": list(block_channels), "epsilon": epsilon,
                       "head_init_scale": head_init_scale}
        self.epsilon = epsilon
        self.cond_dim, self.latent_dim, self.base_channels = cond_dim, latent_dim, base_channels
        self.project = nn.Linear(latent_dim, 4 * 4 * base_channels)
        chans = [base_channels, *block_channels]
        self.blocks = nn.ModuleList(SSACNBlock(a, b, cond_dim) for a, b in zip(chans, chans[1:]))
        self.head = nn.Conv2d(chans[-1], 3, 3, 1, 1)
        with torch.no_grad():
            self.head.weight.mul_(head_init_scale)
            self.head.bias.zero_()

    @property
    def resolution(self) -> int:
        return 4 * 2 ** len(self.blocks)

    def raw(self, emb_t: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        if emb_t.ndim != 2 or emb_t.shape[1] != self.cond_dim:
            raise ValueError(f"emb_t must be N x {self.cond_dim}, got {tuple(emb_t.shape)}")
        if z.ndim != 2 or z.shape[1] != self.latent_dim:
            raise ValueError(f"z must be N x {self.latent_dim}, got {tuple(z.shape)}")
        if z.shape[0] != emb_t.shape[0]:
            raise ValueError("emb_t and z batch sizes differ")
        h = self.project(z).view(-1, self.base_channels, 4, 4)
        for block in self.blocks:
            h = block(h, emb_t)
        return self.head(F.leaky_relu(h, LEAK))

    def forward(self, emb_t: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        return self.epsilon * torch.tanh(self.raw(emb_t, z))

    def save(self, path: str | Path, extra: dict | None = None) -> Path:
        header = {"role": "generator", "config": self.config, **(extra or {})}
        return checkpoint.save(path, self.state_dict(), header)

    @classmethod
    def load(cls, path: str | Path) -> tuple["GeneratorModel", dict]:
        header, state = checkpoint.load(path)
        if header.get("role") != "generator":
            raise ValueError(f"{path} is not a generator checkpoint")
        cfg = dict(header["config"])
        cfg["block_channels"] = tuple(cfg["block_channels"])
        model = cls(**cfg)
        model.load_state_dict(state)
        model.eval()
        return model, header


def generate_noise(model: GeneratorModel, emb_t: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
    """Noise batch N x 3 x H x W with every entry in [-epsilon, epsilon]."""
    return model(emb_t, z)


def quantize_noise(delta: torch.Tensor) -> torch.Tensor:
    """Round to the nearest multiple of 1/255, ties away from zero."""
    steps = torch.floor(delta.abs() * 255 + 0.5)
    return torch.sign(delta) * steps / 255


def noise_steps(delta: torch.Tensor) -> torch.Tensor:
    """Integer grid steps k with quantize_noise(delta) == k/255."""
    return (torch.sign(delta) * torch.floor(delta.abs() * 255 + 0.5)).to(torch.int16)
