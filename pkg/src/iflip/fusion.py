"""Query fusion against the content feature, the live/spoof classifier, and the
cue-map generator with its piecewise loss.

The style feature is deliberately absent from fusion: it is domain-bound
context, and feeding it here would leak domain identity into the score path.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .attention import TransformerBlock
from .config import FusionConfig


@dataclass
class FusedState:
    q_hat: torch.Tensor   # (B, M, d)
    t_cls: torch.Tensor   # (B, d), row 0
    t_cue: torch.Tensor   # (B, M-1, d), rows 1..


class FusionBlock(nn.Module):
    """One transformer block (MSA -> MCA vs f_c -> FFN) over concatenated queries."""

    def __init__(self, d: int, heads: int, ffn_mult: int = 4):
        super().__init__()
        self.block = TransformerBlock(d, heads, ffn_mult, cross=True, zero_init=True)

    def forward(self, queries: list[torch.Tensor], f_c: torch.Tensor) -> FusedState:
        if not queries:
            raise ValueError("fusion requires at least one branch's queries")
        widths = {q.shape[-1] for q in queries}
        if len(widths) != 1 or queries[0].shape[-1] != f_c.shape[-1]:
            raise ValueError("query/feature widths must agree")
        q = torch.cat(queries, dim=1)
        q_hat = self.block(q, kv=f_c)
        return FusedState(q_hat=q_hat, t_cls=q_hat[:, 0, :], t_cue=q_hat[:, 1:, :])


class SpoofClassifier(nn.Module):
    """t_cls -> two logits; fake score is the spoof-class probability."""

    def __init__(self, d: int):
        super().__init__()
        self.fc = nn.Linear(d, 2)

    def forward(self, t_cls: torch.Tensor) -> torch.Tensor:
        return self.fc(t_cls)

    def fake_score(self, t_cls: torch.Tensor) -> torch.Tensor:
        return F.softmax(self.forward(t_cls), dim=-1)[..., 1]

    def loss(self, t_cls: torch.Tensor, spoof_labels: torch.Tensor) -> torch.Tensor:
        return F.cross_entropy(self.forward(t_cls), spoof_labels)


class CueGenerator(nn.Module):
    """Project cue tokens onto a square grid, upsample, convolve, squash to [0,1].

    During training, unit-variance gaussian noise scaled by `noise_scale` is
    added to the convolution input; inference is noise-free and deterministic.
    """

    def __init__(self, d: int, cfg: FusionConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.proj = nn.Linear(d, cfg.cue_channels)
        self.conv = nn.Conv2d(cfg.cue_channels, 1, kernel_size=3, padding=1)

    def forward(self, t_cue: torch.Tensor, training: bool = False,
                noise_seed: int | None = None) -> torch.Tensor:
        b, m, _ = t_cue.shape
        side = math.isqrt(m - 1) + 1  # smallest square grid holding m tokens
        cells = self.proj(t_cue)                                   # (B, M, c)
        pad = side * side - m
        if pad:
            cells = torch.cat([cells, cells.new_zeros(b, pad, cells.shape[-1])], dim=1)
        grid = cells.transpose(1, 2).reshape(b, self.cfg.cue_channels, side, side)
        grid = F.interpolate(grid, size=(self.cfg.cue_grid, self.cfg.cue_grid),
                             mode="bilinear", align_corners=False)
        if training:
            gen = None
            if noise_seed is not None:
                gen = torch.Generator(device=grid.device).manual_seed(noise_seed)
            noise = torch.randn(grid.shape, generator=gen, device=grid.device,
                                dtype=grid.dtype)
            grid = grid + self.cfg.noise_scale * noise
        return torch.sigmoid(self.conv(grid).squeeze(1))           # (B, g, g)


def cue_loss(p_cue: torch.Tensor, y_mask: torch.Tensor, beta: float,
             continuous: bool = False) -> torch.Tensor:
    """Piecewise distance loss between the cue map and the constant mask target.

    Default branch pair is d^2/beta below beta and d - beta/2 above, which has
    a jump of beta/2 at d == beta; `continuous=True` switches the quadratic
    branch to d^2/(2*beta), the standard smooth-L1 form.
    """
    if beta <= 0:
        raise ValueError(f"beta must be > 0, got {beta}")
    d = (p_cue - y_mask).abs()
    quad = d ** 2 / (2.0 * beta) if continuous else d ** 2 / beta
    return torch.where(d < beta, quad, d - beta / 2.0).mean()


def mask_to_cue_target(mask_value: torch.Tensor, grid: int) -> torch.Tensor:
    """Expand per-sample constant mask values (B,) to (B, g, g) cue targets."""
    return mask_value.view(-1, 1, 1).expand(-1, grid, grid)
