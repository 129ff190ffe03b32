"""Vector-quantized motion prior for one face region (lip or upper face).

The encoder maps each region frame to ``h`` latent embeddings of size ``d``;
each embedding is snapped to its nearest codebook token; the decoder maps the
(quantized) codes back to region offsets. Encoder and decoder are small causal
self-attention stacks, so a decoded frame only depends on codes up to that
frame and the prior can be used incrementally during autoregressive rollout.
"""

from typing import NamedTuple

import numpy as np
import torch
import torch.nn as nn

from cdface import _kernels
from cdface.errors import ContractViolation
from cdface.layers import Block, causal_mask, sinusoidal_encoding

REGIONS = ("lip", "upper")


class Quantized(NamedTuple):
    embeddings: torch.Tensor  # same shape as the input codes
    token_ids: torch.Tensor  # input shape without the trailing d


class Codebook(nn.Module):
    def __init__(self, num_tokens: int, dim: int, region: str = "lip"):
        super().__init__()
        if num_tokens < 1:
            raise ContractViolation("codebook needs at least one token")
        if region not in REGIONS:
            raise ContractViolation(f"unknown region {region!r}")
        self.region = region
        self.tokens = nn.Parameter(torch.empty(num_tokens, dim).uniform_(-1.0 / num_tokens, 1.0 / num_tokens))

    @property
    def num_tokens(self) -> int:
        return self.tokens.shape[0]

    @property
    def dim(self) -> int:
        return self.tokens.shape[1]

    def forward(self, z):
        return quantize(z, self.tokens)


def quantize(z, tokens) -> Quantized:
    """Replace every d-dim row of ``z`` with its nearest token (Euclidean).

    Ties go to the lowest token index.
    """
    z = torch.as_tensor(z)
    tokens = torch.as_tensor(tokens)
    if tokens.ndim != 2 or tokens.shape[0] == 0:
        raise ContractViolation("empty codebook")
    if z.shape[-1] != tokens.shape[1]:
        raise ContractViolation(f"code dim {z.shape[-1]} != codebook dim {tokens.shape[1]}")
    flat = z.reshape(-1, z.shape[-1])
    dist = ((flat[:, None, :] - tokens[None, :, :].to(flat.dtype)) ** 2).sum(-1)
    ids = dist.argmin(dim=1)
    q = tokens[ids].reshape(z.shape)
    return Quantized(q, ids.reshape(z.shape[:-1]))


def straight_through(z, q):
    """Forward value q, gradient passed to z unchanged."""
    return z + (q - z).detach()


def vq_loss(x, x_hat, z, q):
    """Reconstruction + codebook + commitment terms, all squared L2 sums.

    The codebook term only reaches the tokens (z is detached), the commitment
    term only reaches the encoder (q is detached).
    """
    if x.shape != x_hat.shape:
        raise ContractViolation(f"target {tuple(x.shape)} vs reconstruction {tuple(x_hat.shape)}")
    if z.shape != q.shape:
        raise ContractViolation(f"latent {tuple(z.shape)} vs quantized {tuple(q.shape)}")
    rec = ((x - x_hat) ** 2).sum()
    codebook = ((z.detach() - q) ** 2).sum()
    commit = ((z - q.detach()) ** 2).sum()
    total = rec + codebook + commit
    return total, {"reconstruction": rec, "codebook": codebook, "commitment": commit}


class _Stack(nn.Module):
    def __init__(self, d_in, d_out, dim, heads, depth, context):
        super().__init__()
        self.context = context
        self.inp = nn.Linear(d_in, dim)
        self.blocks = nn.ModuleList(Block(dim, heads) for _ in range(depth))
        self.norm = nn.LayerNorm(dim)
        self.outp = nn.Linear(dim, d_out)

    def forward(self, x):
        t_len = x.shape[1]
        h = self.inp(x) + sinusoidal_encoding(t_len, self.inp.out_features).to(x.dtype)
        blocked = causal_mask(t_len, t_len, self.context)
        for blk in self.blocks:
            h = blk(h, blocked)
        return self.outp(self.norm(h))


class RegionPrior(nn.Module):
    def __init__(
        self,
        n_features: int,
        region: str = "lip",
        num_tokens: int = 256,
        code_dim: int = 64,
        codes_per_frame: int = 1,
        width: int = 64,
        heads: int = 4,
        depth: int = 1,
        context: int = None,
    ):
        super().__init__()
        self.region = region
        self.n_features = n_features
        self.h = codes_per_frame
        self.d = code_dim
        self.encoder = _Stack(n_features, codes_per_frame * code_dim, width, heads, depth, context)
        self.decoder = _Stack(codes_per_frame * code_dim, n_features, width, heads, depth, context)
        self.codebook = Codebook(num_tokens, code_dim, region)
        # fixed motion scale so the networks see O(1) inputs; set from data
        self.register_buffer("scale", torch.ones(()))

    def set_scale(self, motions) -> None:
        data = np.concatenate([np.asarray(m).reshape(-1) for m in motions])
        self.scale.fill_(float(np.sqrt(np.mean(data.astype(np.float64) ** 2))) or 1.0)

    def _check(self, x):
        if x.shape[-1] != self.n_features:
            raise ContractViolation(f"{self.region} prior expects width {self.n_features}, got {x.shape[-1]}")

    def encode(self, x):
        """B x T x F offsets -> B x T x h x d latents."""
        self._check(x)
        z = self.encoder(x / self.scale)
        return z.view(*z.shape[:2], self.h, self.d)

    def decode(self, codes):
        """B x T x h x d codes -> B x T x F offsets."""
        flat = codes.reshape(*codes.shape[:2], self.h * self.d)
        return self.decoder(flat) * self.scale

    def forward(self, x):
        z = self.encode(x)
        q = self.codebook(z)
        x_hat = self.decode(straight_through(z, q.embeddings))
        return x_hat, z, q

    def loss(self, x):
        # reconstruction measured in scale-normalized motion units
        x_hat, z, q = self(x)
        return vq_loss(x / self.scale, x_hat / self.scale, z, q.embeddings)


def encode_decode(motion, prior: RegionPrior) -> np.ndarray:
    """Encode, quantize and decode one region sequence (T x F array)."""
    x = torch.as_tensor(np.asarray(motion, dtype=np.float32))[None]
    with torch.no_grad():
        x_hat, _, _ = prior(x)
    return x_hat[0].numpy()


def token_usage(prior: RegionPrior, motions) -> np.ndarray:
    """How often each codebook token is the nearest one over a set of motions."""
    tokens = prior.codebook.tokens.detach().numpy().astype(np.float64)
    counts = np.zeros(prior.codebook.num_tokens, dtype=np.int64)
    with torch.no_grad():
        for m in motions:
            z = prior.encode(torch.as_tensor(np.asarray(m, dtype=np.float32))[None])
            flat = z.reshape(-1, prior.d).numpy().astype(np.float64)
            counts += np.bincount(_kernels.nearest_rows(flat, tokens), minlength=counts.size)
    return counts
