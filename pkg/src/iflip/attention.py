"""Pre-norm residual attention blocks shared by the encoder, the query
transformers, the fusion block, and the tiny language model."""
from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F


def _split_heads(x: torch.Tensor, heads: int) -> torch.Tensor:
    b, n, d = x.shape
    return x.view(b, n, heads, d // heads).transpose(1, 2)  # (b, h, n, dh)


def _merge_heads(x: torch.Tensor) -> torch.Tensor:
    b, h, n, dh = x.shape
    return x.transpose(1, 2).reshape(b, n, h * dh)


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention with separate q/k/v/out projections."""

    def __init__(self, d: int, heads: int, zero_init_out: bool = False):
        super().__init__()
        if d % heads != 0:
            raise ValueError("d must be divisible by heads")
        self.d = d
        self.heads = heads
        self.q_proj = nn.Linear(d, d)
        self.k_proj = nn.Linear(d, d)
        self.v_proj = nn.Linear(d, d)
        self.out_proj = nn.Linear(d, d)
        if zero_init_out:
            nn.init.zeros_(self.out_proj.weight)
            nn.init.zeros_(self.out_proj.bias)

    def forward(self, q_in: torch.Tensor, kv_in: torch.Tensor,
                causal: bool = False, need_weights: bool = False):
        q = _split_heads(self.q_proj(q_in), self.heads)
        k = _split_heads(self.k_proj(kv_in), self.heads)
        v = _split_heads(self.v_proj(kv_in), self.heads)
        scores = q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1])
        if causal:
            n, m = scores.shape[-2], scores.shape[-1]
            mask = torch.ones(n, m, dtype=torch.bool, device=scores.device).triu(m - n + 1)
            scores = scores.masked_fill(mask, float("-inf"))
        weights = F.softmax(scores, dim=-1)
        out = self.out_proj(_merge_heads(weights @ v))
        if need_weights:
            return out, weights
        return out


class SelfAttention(nn.Module):
    """h -> h + attention(LN(h)); multi-head, residual."""

    def __init__(self, d: int, heads: int, zero_init_out: bool = False, causal: bool = False):
        super().__init__()
        self.norm = nn.LayerNorm(d)
        self.attn = MultiHeadAttention(d, heads, zero_init_out)
        self.causal = causal

    def forward(self, h: torch.Tensor, need_weights: bool = False):
        x = self.norm(h)
        if need_weights:
            out, w = self.attn(x, x, causal=self.causal, need_weights=True)
            return h + out, w
        return h + self.attn(x, x, causal=self.causal)


class CrossAttention(nn.Module):
    """h -> h + attention(LN(h), LN(f)); keys/values come from the feature f."""

    def __init__(self, d: int, heads: int, zero_init_out: bool = False):
        super().__init__()
        self.norm_q = nn.LayerNorm(d)
        self.norm_kv = nn.LayerNorm(d)
        self.attn = MultiHeadAttention(d, heads, zero_init_out)

    def forward(self, h: torch.Tensor, f: torch.Tensor, need_weights: bool = False):
        if f.shape[-1] != h.shape[-1]:
            raise ValueError(f"feature width {f.shape[-1]} != hidden width {h.shape[-1]}")
        if need_weights:
            out, w = self.attn(self.norm_q(h), self.norm_kv(f), need_weights=True)
            return h + out, w
        return h + self.attn(self.norm_q(h), self.norm_kv(f))


class FeedForward(nn.Module):
    """h -> h + W2 gelu(W1 LN(h)); two linear layers with activation, residual."""

    def __init__(self, d: int, mult: int = 4, zero_init_out: bool = False):
        super().__init__()
        self.norm = nn.LayerNorm(d)
        self.fc1 = nn.Linear(d, d * mult)
        self.fc2 = nn.Linear(d * mult, d)
        if zero_init_out:
            nn.init.zeros_(self.fc2.weight)
            nn.init.zeros_(self.fc2.bias)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        return h + self.fc2(F.gelu(self.fc1(self.norm(h))))


class TransformerBlock(nn.Module):
    """LN->MSA [-> LN->MCA] -> LN->FFN, all residual.

    With zero-initialized output projections the block is the identity, so
    stacks start as pass-throughs and training perturbs them gradually.
    """

    def __init__(self, d: int, heads: int, ffn_mult: int = 4, cross: bool = False,
                 zero_init: bool = False, causal: bool = False):
        super().__init__()
        self.msa = SelfAttention(d, heads, zero_init_out=zero_init, causal=causal)
        self.mca = CrossAttention(d, heads, zero_init_out=zero_init) if cross else None
        self.ffn = FeedForward(d, ffn_mult, zero_init_out=zero_init)

    def forward(self, h: torch.Tensor, kv: torch.Tensor | None = None) -> torch.Tensor:
        h = self.msa(h)
        if self.mca is not None:
            if kv is None:
                raise ValueError("cross block requires a key/value feature")
            h = self.mca(h, kv)
        h = self.ffn(h)
        return h
