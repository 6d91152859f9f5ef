"""Small transformer pieces shared by the denoiser and the context encoder."""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention with an optional additive per-head logit bias.

    ``bias`` broadcasts against ``[B, H, Nq, Nk]``. ``key_mask`` is ``[B, Nk]``,
    True for keys that may be attended.
    """

    def __init__(self, dim: int, heads: int, out_bias: bool = True):
        super().__init__()
        if dim % heads:
            raise ValueError("latent dim must be divisible by head count")
        self.heads = heads
        self.head_dim = dim // heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim, bias=out_bias)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        b, n, _ = x.shape
        return x.view(b, n, self.heads, self.head_dim).transpose(1, 2)

    def weights(self, x, ctx=None, bias=None, key_mask=None) -> torch.Tensor:
        ctx = x if ctx is None else ctx
        q, k = self._split(self.q(x)), self._split(self.k(ctx))
        logits = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        if bias is not None:
            logits = logits + bias
        if key_mask is not None:
            logits = logits.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        return logits.softmax(dim=-1)

    def forward(self, x, ctx=None, bias=None, key_mask=None) -> torch.Tensor:
        attn = self.weights(x, ctx, bias, key_mask)
        v = self._split(self.v(x if ctx is None else ctx))
        mixed = (attn @ v).transpose(1, 2).reshape(x.shape[0], x.shape[1], -1)
        return self.out(mixed)


class FeedForward(nn.Sequential):
    def __init__(self, dim: int, mult: int = 2):
        super().__init__(nn.Linear(dim, dim * mult), nn.GELU(), nn.Linear(dim * mult, dim))


class EncoderBlock(nn.Module):
    """Pre-norm transformer encoder block."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = FeedForward(dim)

    def forward(self, x, key_mask=None):
        x = x + self.attn(self.norm1(x), key_mask=key_mask)
        return x + self.mlp(self.norm2(x))


def sinusoidal_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[..., None] * freqs
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    return F.pad(emb, (0, dim % 2))
