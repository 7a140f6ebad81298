"""Instruction-conditioned query transformer (one instance per branch).

The initial hidden state is [learnable queries ; instruction embedding]; each
block runs self-attention over the whole state, cross-attention of the whole
state against the branch's visual feature, then a feed-forward, all residual.
The first k rows of the final state are the processed queries.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .attention import TransformerBlock
from .config import QFormerConfig


@dataclass
class BranchOutput:
    processed_queries: torch.Tensor        # (B, k, d)
    soft_prompt: torch.Tensor | None       # (B, k + j, d_lm), None until assembled
    trace: list[torch.Tensor] | None = None


class QFormerBranch(nn.Module):
    def __init__(self, cfg: QFormerConfig, d_lm: int):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.queries = nn.Parameter(torch.empty(1, cfg.queries, cfg.width))
        nn.init.normal_(self.queries, std=0.02)
        self.blocks = nn.ModuleList(
            TransformerBlock(cfg.width, cfg.heads, cfg.ffn_mult, cross=True, zero_init=True)
            for _ in range(cfg.depth))
        self.lm_proj = nn.Linear(cfg.width, d_lm)

    def forward(self, instr: torch.Tensor, feat: torch.Tensor,
                return_trace: bool = False) -> BranchOutput:
        """instr (B, j, d) instruction embedding; feat (B, m, d) visual feature."""
        b = feat.shape[0]
        if instr.dim() == 2:
            instr = instr.unsqueeze(0).expand(b, -1, -1)
        h = torch.cat([self.queries.expand(b, -1, -1), instr], dim=1)
        trace = [h] if return_trace else None
        for block in self.blocks:
            h = block(h, kv=feat)
            if return_trace:
                trace.append(h)
        processed = h[:, : self.cfg.queries, :]
        return BranchOutput(processed_queries=processed, soft_prompt=None, trace=trace)

    def soft_prompt(self, processed_queries: torch.Tensor,
                    instr_lm_embeds: torch.Tensor) -> torch.Tensor:
        """[project(queries) ; frozen-LM instruction embeddings] -> (B, k+j, d_lm)."""
        b = processed_queries.shape[0]
        if instr_lm_embeds.dim() == 2:
            instr_lm_embeds = instr_lm_embeds.unsqueeze(0).expand(b, -1, -1)
        return torch.cat([self.lm_proj(processed_queries), instr_lm_embeds], dim=1)
