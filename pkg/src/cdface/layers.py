import math

import torch
import torch.nn as nn
import torch.nn.functional as F


def sinusoidal_encoding(length: int, dim: int) -> torch.Tensor:
    pos = torch.arange(length, dtype=torch.float32)[:, None]
    div = torch.exp(torch.arange(0, dim, 2, dtype=torch.float32) * (-math.log(10000.0) / dim))
    pe = torch.zeros(length, dim)
    pe[:, 0::2] = torch.sin(pos * div)
    pe[:, 1::2] = torch.cos(pos * div[: dim // 2])
    return pe


def causal_mask(q_len: int, k_len: int, window: int = None, device=None) -> torch.Tensor:
    """Boolean mask, True where query position p may NOT attend key position k.

    Position p sees keys k <= p, and only the last ``window`` of them if set.
    """
    q = torch.arange(q_len, device=device)[:, None]
    k = torch.arange(k_len, device=device)[None, :]
    blocked = k > q
    if window is not None:
        blocked |= k <= q - window
    return blocked


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, x, ctx, blocked=None):
        b, lq, d = x.shape
        lk = ctx.shape[1]
        h = self.heads
        q = self.q(x).view(b, lq, h, d // h).transpose(1, 2)
        k = self.k(ctx).view(b, lk, h, d // h).transpose(1, 2)
        v = self.v(ctx).view(b, lk, h, d // h).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(d // h)
        if blocked is not None:
            scores = scores.masked_fill(blocked, float("-inf"))
        w = F.softmax(scores, dim=-1)
        y = (w @ v).transpose(1, 2).reshape(b, lq, d)
        return self.out(y)


class Block(nn.Module):
    """Pre-norm residual block: causal self-attention, any number of
    cross-attentions (each over its own context), then a feed-forward layer."""

    def __init__(self, dim: int, heads: int, n_cross: int = 0, ff_mult: int = 2):
        super().__init__()
        self.norm_self = nn.LayerNorm(dim)
        self.self_attn = Attention(dim, heads)
        self.norm_cross = nn.ModuleList(nn.LayerNorm(dim) for _ in range(n_cross))
        self.cross = nn.ModuleList(Attention(dim, heads) for _ in range(n_cross))
        self.norm_ff = nn.LayerNorm(dim)
        self.ff = nn.Sequential(nn.Linear(dim, ff_mult * dim), nn.GELU(), nn.Linear(ff_mult * dim, dim))

    def forward(self, x, self_blocked, contexts=(), cross_blocked=()):
        y = self.norm_self(x)
        x = x + self.self_attn(y, y, self_blocked)
        for norm, attn, ctx, blk in zip(self.norm_cross, self.cross, contexts, cross_blocked):
            x = x + attn(norm(x), ctx, blk)
        return x + self.ff(self.norm_ff(x))
