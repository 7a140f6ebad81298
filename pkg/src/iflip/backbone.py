"""Small patch-token visual encoder with a per-block feature pyramid.

The content feature is the (layer-normed) final level; the style feature stacks
per-level channel mean/std over patch tokens, two rows per level, so each level
keeps its own statistics instead of being averaged away.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .attention import TransformerBlock
from .config import EncoderConfig

STYLE_STD_EPS = 1e-5


@dataclass
class FeatureBundle:
    f_c: torch.Tensor  # (B, N, d), final pyramid level
    f_s: torch.Tensor  # (B, 2L, d)
    pyramid: list[torch.Tensor]


class VisionEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        n_patches = (cfg.image_size // cfg.patch_size) ** 2
        self.patch_embed = nn.Conv2d(3, cfg.width, kernel_size=cfg.patch_size,
                                     stride=cfg.patch_size)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, cfg.width))
        self.pos_embed = nn.Parameter(torch.empty(1, n_patches + 1, cfg.width))
        nn.init.normal_(self.pos_embed, std=0.02)
        self.blocks = nn.ModuleList(
            TransformerBlock(cfg.width, cfg.heads, cross=False) for _ in range(cfg.depth))
        self.final_norm = nn.LayerNorm(cfg.width)

    @property
    def num_tokens(self) -> int:
        return (self.cfg.image_size // self.cfg.patch_size) ** 2 + 1

    def forward(self, images: torch.Tensor) -> list[torch.Tensor]:
        """images (B, 3, H, W) in [0,1] -> L levels of (B, N, d).

        The last level carries the final layer norm so it can be used directly
        as the content feature.
        """
        expect = (3, self.cfg.image_size, self.cfg.image_size)
        if tuple(images.shape[-3:]) != expect:
            raise ValueError(f"expected image shape {expect}, got {tuple(images.shape[-3:])}")
        x = self.patch_embed(images)                      # (B, d, H/p, W/p)
        x = x.flatten(2).transpose(1, 2)                  # (B, P, d)
        cls = self.cls_token.expand(x.shape[0], -1, -1)
        h = torch.cat([cls, x], dim=1) + self.pos_embed
        levels = []
        for i, block in enumerate(self.blocks):
            h = block(h)
            levels.append(self.final_norm(h) if i == len(self.blocks) - 1 else h)
        return levels

    def encode_bundle(self, images: torch.Tensor) -> FeatureBundle:
        pyramid = self.forward(images)
        return FeatureBundle(f_c=pyramid[-1], f_s=style_feature(pyramid), pyramid=pyramid)


def style_feature(pyramid: list[torch.Tensor]) -> torch.Tensor:
    """Stack per-level (mean, std) over patch tokens -> (B, 2L, d).

    Class tokens are excluded: the statistics characterize spatial texture.
    Rows are level-major: [mu_1, sigma_1, mu_2, sigma_2, ...].
    """
    rows = []
    for level in pyramid:
        patches = level[:, 1:, :]
        mu = patches.mean(dim=1)
        var = patches.var(dim=1, unbiased=False)
        sigma = torch.sqrt(var + STYLE_STD_EPS)
        rows.extend([mu, sigma])
    return torch.stack(rows, dim=1)
