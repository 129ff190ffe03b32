"""Autoregressive multi-head code querying for lip and upper face.

At every frame the lip querier reads the past lip motion (self-attention),
the audio features up to the current frame (cross-attention) and a per-subject
style embedding, and emits N^l codes through N^l independent output heads.
For each lip sample the upper querier emits N^u codes, additionally attending
to that sample's past lip motion. Codes are decoded by the frozen region
priors. Diversity comes from the parallel heads; inference is deterministic.
"""

from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn

from cdface.codebook import RegionPrior
from cdface.errors import ContractViolation
from cdface.geometry import RegionPartition, mask_values, merge_regions
from cdface.layers import Block, causal_mask, sinusoidal_encoding


@dataclass
class ModelConfig:
    lip_features: int
    upper_features: int
    audio_dim: int
    num_styles: int
    num_tokens: int = 256
    code_dim: int = 64
    codes_per_frame: int = 1
    prior_width: int = 64
    prior_depth: int = 1
    prior_context: int = None
    width: int = 64
    heads: int = 4
    depth: int = 1
    n_lip: int = 5
    n_upper: int = 3

    def to_dict(self):
        return asdict(self)


class StyleTable(nn.Module):
    def __init__(self, num_styles: int, dim: int):
        super().__init__()
        self.table = nn.Embedding(num_styles, dim)
        nn.init.normal_(self.table.weight, std=0.1)

    @property
    def num_styles(self) -> int:
        return self.table.num_embeddings

    def forward(self, style):
        style = torch.as_tensor(style, dtype=torch.long)
        if style.min() < 0 or style.max() >= self.num_styles:
            raise ContractViolation(f"style id out of range 0..{self.num_styles - 1}")
        return self.table(style)


class _MotionTokens(nn.Module):
    """Start token followed by embeddings of the frames before each step."""

    def __init__(self, n_features: int, width: int):
        super().__init__()
        self.proj = nn.Linear(n_features, width)
        self.start = nn.Parameter(torch.randn(width) * 0.1)
        self.register_buffer("scale", torch.ones(()))
        self.dropout = 0.0  # per-frame history-token dropout, training only

    def forward(self, history):
        b = history.shape[0]
        start = self.start.expand(b, 1, -1)
        if history.shape[1] == 0:
            return start
        emb = self.proj(history / self.scale)
        if self.training and self.dropout > 0:
            keep = torch.rand(emb.shape[:2]) >= self.dropout
            emb = emb * keep[..., None].to(emb.dtype)
        return torch.cat([start, emb], dim=1)


class _Querier(nn.Module):
    def __init__(self, n_features, audio_dim, code_shape, n_out, num_styles, width, heads, depth, extra_streams=()):
        super().__init__()
        self.code_shape = tuple(code_shape)
        self.width = width
        self.n_out = n_out
        self.motion = _MotionTokens(n_features, width)
        self.streams = nn.ModuleList(_MotionTokens(f, width) for f in extra_streams)
        self.audio = nn.Linear(audio_dim, width)
        self.style = StyleTable(num_styles, width)
        n_cross = len(extra_streams) + 1
        self.blocks = nn.ModuleList(Block(width, heads, n_cross=n_cross) for _ in range(depth))
        self.norm = nn.LayerNorm(width)
        code_size = int(np.prod(self.code_shape))
        self.heads = nn.ModuleList(nn.Linear(width, code_size) for _ in range(n_out))

    def trunk(self, history, extra, audio, style):
        """history: B x (L-1) x F; extra: list of B x (L-1) x F_k; audio: B x T_a x d_a."""
        b, prev = history.shape[:2]
        steps = prev + 1
        if audio.shape[1] < steps:
            raise ContractViolation(f"{audio.shape[1]} audio frames cannot drive step {steps}")
        for e in extra:
            if e.shape[1] != prev:
                raise ContractViolation(f"conditioning history length {e.shape[1]} != {prev}")
        pe = sinusoidal_encoding(max(steps, audio.shape[1]), self.width).to(history.dtype)
        # the query at step p also carries its own aligned audio frame
        x = self.motion(history) + pe[:steps] + self.style(style)[:, None, :] + self.audio(audio[:, :steps])
        contexts = [s(e) + pe[:steps] for s, e in zip(self.streams, extra)]
        contexts.append(self.audio(audio) + pe[: audio.shape[1]])
        blocked = [causal_mask(steps, steps)] * len(self.streams) + [causal_mask(steps, audio.shape[1])]
        self_blocked = causal_mask(steps, steps)
        for blk in self.blocks:
            x = blk(x, self_blocked, contexts, blocked)
        return self.norm(x)

    def head(self, i, feats):
        out = self.heads[i](feats)
        return out.view(*feats.shape[:-1], *self.code_shape)

    def all_heads(self, feats, n=None):
        """B x L x W -> B x n x L x h x d."""
        n = self.n_out if n is None else n
        return torch.stack([self.head(i, feats) for i in range(n)], dim=1)


class LipQuerier(_Querier):
    def __init__(self, n_features, audio_dim, code_shape, n_out, num_styles, width=64, heads=4, depth=1):
        super().__init__(n_features, audio_dim, code_shape, n_out, num_styles, width, heads, depth)

    def forward(self, history, audio, style, n=None):
        return self.all_heads(self.trunk(history, [], audio, style), n)


class UpperQuerier(_Querier):
    def __init__(self, n_features, lip_features, audio_dim, code_shape, n_out, num_styles, width=64, heads=4, depth=1):
        super().__init__(
            n_features, audio_dim, code_shape, n_out, num_styles, width, heads, depth, extra_streams=(lip_features,)
        )

    def forward(self, history, lip_history, audio, style, n=None):
        return self.all_heads(self.trunk(history, [lip_history], audio, style), n)


class CDFace(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        code_shape = (cfg.codes_per_frame, cfg.code_dim)
        prior_kw = dict(
            num_tokens=cfg.num_tokens,
            code_dim=cfg.code_dim,
            codes_per_frame=cfg.codes_per_frame,
            width=cfg.prior_width,
            heads=cfg.heads,
            depth=cfg.prior_depth,
            context=cfg.prior_context,
        )
        self.priors = nn.ModuleDict(
            {
                "lip": RegionPrior(cfg.lip_features, "lip", **prior_kw),
                "upper": RegionPrior(cfg.upper_features, "upper", **prior_kw),
            }
        )
        self.lip = LipQuerier(
            cfg.lip_features, cfg.audio_dim, code_shape, cfg.n_lip, cfg.num_styles, cfg.width, cfg.heads, cfg.depth
        )
        self.upper = UpperQuerier(
            cfg.upper_features,
            cfg.lip_features,
            cfg.audio_dim,
            code_shape,
            cfg.n_upper,
            cfg.num_styles,
            cfg.width,
            cfg.heads,
            cfg.depth,
        )

    def sync_scales(self):
        """Copy the priors' motion scales into the queriers' motion embeddings."""
        with torch.no_grad():
            self.lip.motion.scale.copy_(self.priors["lip"].scale)
            self.upper.motion.scale.copy_(self.priors["upper"].scale)
            self.upper.streams[0].scale.copy_(self.priors["lip"].scale)

    def set_history_dropout(self, p: float):
        for tokens in (self.lip.motion, self.upper.motion, *self.upper.streams):
            tokens.dropout = p

    def freeze_priors(self):
        for p in self.priors.parameters():
            p.requires_grad_(False)


def _t(x, dtype=torch.float32):
    return torch.as_tensor(np.asarray(x), dtype=dtype) if not torch.is_tensor(x) else x.to(dtype)


def teacher_forced_forward(model: CDFace, gt_lip, gt_upper, audio, style: int, mask=None, regions=("lip", "upper")):
    """Predict per-frame sample sets with ground-truth histories.

    Returns a dict with ``lip_codes`` (N^l x T x h x d), ``lip`` (N^l x T x F_l)
    and, if requested, ``upper_codes`` (N^l x N^u x T x h x d) and ``upper``
    (N^l x N^u x T x F_u). Upper histories are ground truth; the lip stream
    each upper set conditions on is the corresponding predicted lip sample.
    """
    gt_lip, gt_upper, audio = _t(gt_lip), _t(gt_upper), _t(audio)
    t_len = gt_lip.shape[0]
    if gt_upper.shape[0] != t_len or audio.shape[0] != t_len:
        raise ContractViolation("ground truth regions and audio must share T")
    if mask is not None and len(mask_values(mask)) != t_len:
        raise ContractViolation(f"mask length != T={t_len}")
    style_t = torch.tensor([style])
    out = {}
    codes = model.lip(gt_lip[None, :-1], audio[None], style_t)[0]  # N^l x T x h x d
    lip = model.priors["lip"].decode(codes)
    out["lip_codes"], out["lip"] = codes, lip
    if "upper" in regions:
        n_l = lip.shape[0]
        hist = gt_upper[None, :-1].expand(n_l, -1, -1)
        ucodes = model.upper(hist, lip[:, :-1], audio[None].expand(n_l, -1, -1), style_t.expand(n_l))
        n_u = ucodes.shape[1]
        upper = model.priors["upper"].decode(ucodes.reshape(n_l * n_u, *ucodes.shape[2:]))
        out["upper_codes"] = ucodes
        out["upper"] = upper.view(n_l, n_u, t_len, -1)
    return out


@torch.no_grad()
def rollout(
    model: CDFace,
    audio,
    style: int,
    n_lip: int = None,
    n_upper: int = None,
    num_frames: int = None,
    fixed_lip=None,
    partition: RegionPartition = None,
):
    """Autoregressive synthesis of n_lip * n_upper full-face samples.

    ``audio`` must already be aligned to the motion frame rate (T x d_a).
    With ``fixed_lip`` (T x F_l) the lip rollout is skipped and every upper
    sample conditions on that one lip track (control mode).
    """
    model.eval()
    audio = _t(audio)
    t_len = audio.shape[0] if num_frames is None else num_frames
    if t_len < 1:
        raise ContractViolation("need at least one frame")
    if audio.shape[0] != t_len:
        raise ContractViolation(f"audio aligned to {audio.shape[0]} frames, {t_len} requested")
    n_l = model.cfg.n_lip if n_lip is None else n_lip
    n_u = model.cfg.n_upper if n_upper is None else n_upper
    if not (1 <= n_l <= model.cfg.n_lip and 1 <= n_u <= model.cfg.n_upper):
        raise ContractViolation(f"model has {model.cfg.n_lip} lip / {model.cfg.n_upper} upper heads")
    lip_prior, upper_prior = model.priors["lip"], model.priors["upper"]
    code_shape = model.lip.code_shape

    if fixed_lip is not None:
        fixed_lip = _t(fixed_lip)
        if fixed_lip.shape != (t_len, model.cfg.lip_features):
            raise ContractViolation(f"fixed lip track shape {tuple(fixed_lip.shape)} != {(t_len, model.cfg.lip_features)}")
        n_l = 1
        lip_x = fixed_lip[None].clone()
        lip_z = None
    else:
        lip_x = torch.zeros(n_l, t_len, model.cfg.lip_features)
        lip_z = torch.zeros(n_l, t_len, *code_shape)
    b = n_l * n_u
    upper_x = torch.zeros(b, t_len, model.cfg.upper_features)
    upper_z = torch.zeros(b, t_len, *code_shape)
    parent = torch.arange(n_l).repeat_interleave(n_u)
    head_j = torch.arange(n_u).repeat(n_l)

    lip_audio = audio[None].expand(n_l, -1, -1)
    up_audio = audio[None].expand(b, -1, -1)
    lip_style = torch.full((n_l,), style)
    up_style = torch.full((b,), style)
    for t in range(t_len):
        if fixed_lip is None:
            feats = model.lip.trunk(lip_x[:, :t], [], lip_audio, lip_style)[:, t]
            for i in range(n_l):
                lip_z[i, t] = model.lip.head(i, feats[i])
            lip_x[:, t] = lip_prior.decode(lip_z[:, : t + 1])[:, t]
        lip_hist = lip_x[parent, :t]
        feats = model.upper.trunk(upper_x[:, :t], [lip_hist], up_audio, up_style)[:, t]
        for k in range(b):
            upper_z[k, t] = model.upper.head(int(head_j[k]), feats[k])
        upper_x[:, t] = upper_prior.decode(upper_z[:, : t + 1])[:, t]

    result = {
        "lip": lip_x.numpy(),
        "lip_codes": None if lip_z is None else lip_z.numpy(),
        "upper": upper_x.view(n_l, n_u, t_len, -1).numpy(),
        "upper_codes": upper_z.view(n_l, n_u, t_len, *code_shape).numpy(),
        "lineage": [(int(i), int(j)) for i, j in zip(parent, head_j)],
    }
    if partition is not None:
        lip_rep = result["lip"][parent.numpy()]
        result["full"] = merge_regions(lip_rep, result["upper"].reshape(b, t_len, -1), partition)
    return result
