"""Diversity, min-of-N reconstruction, closure-aware and codebook losses.

Sample sets are tensors shaped N x T x F (N samples, T frames, F features).
Norms are unsquared Euclidean norms of the flattened frame (or code) vector.
Minimum ties resolve to the first candidate in index order (for pairs, the
lexicographically first (i, j)), which fixes where the subgradient goes.
"""

from dataclasses import asdict, dataclass

import torch

from cdface.codebook import quantize
from cdface.errors import ContractViolation
from cdface.geometry import mask_values


@dataclass
class LossWeights:
    diversity_lip: float = 0.2
    diversity_upper: float = 0.2
    reconstruction_lip: float = 10.0
    reconstruction_upper: float = 10.0
    regularizer: float = 20.0
    epsilon: float = 0.01

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v < 0:
                raise ContractViolation(f"loss weight {k} must be >= 0, got {v}")

    @classmethod
    def biwi(cls):
        return cls(0.2, 0.2, 10.0, 10.0, 20.0, 0.01)

    @classmethod
    def vocaset(cls):
        return cls(0.02, 0.02, 1.0, 1.0, 1.0, 0.005)


def _check_set(samples, name="samples"):
    if samples.ndim != 3:
        raise ContractViolation(f"{name} must be N x T x F, got shape {tuple(samples.shape)}")


def pairwise_frame_distances(samples):
    """(N(N-1)/2) x T distances for pairs i<j in lexicographic order."""
    n = samples.shape[0]
    iu, ju = torch.triu_indices(n, n, offset=1)
    return torch.linalg.vector_norm(samples[iu] - samples[ju], dim=-1)


def diversity_loss(samples):
    """Negative sum over frames of the closest pairwise sample distance."""
    _check_set(samples)
    if samples.shape[0] < 2:
        raise ContractViolation("diversity loss needs at least two samples")
    d = pairwise_frame_distances(samples)
    idx = d.argmin(dim=0, keepdim=True)
    return -d.gather(0, idx).sum()


def min_reconstruction_loss(samples, gt, per_frame: bool = True):
    """Sum over frames of the distance from ground truth to its best sample.

    With ``per_frame=False`` one sample must win for the whole sequence.
    """
    _check_set(samples)
    if samples.shape[1:] != gt.shape:
        raise ContractViolation(f"samples {tuple(samples.shape)} vs ground truth {tuple(gt.shape)}")
    d = torch.linalg.vector_norm(samples - gt[None], dim=-1)  # N x T
    if per_frame:
        return d.gather(0, d.argmin(dim=0, keepdim=True)).sum()
    totals = d.sum(dim=1)
    return totals[totals.argmin()]


def _mask_tensor(mask, samples):
    m = torch.as_tensor(mask_values(mask), dtype=samples.dtype)
    if m.ndim != 1 or m.shape[0] != samples.shape[1]:
        raise ContractViolation(f"mask length {tuple(m.shape)} != T={samples.shape[1]}")
    return m


def lip_diversity_loss(lip_samples, mask):
    _check_set(lip_samples, "lip samples")
    m = _mask_tensor(mask, lip_samples)
    return diversity_loss(lip_samples * m[None, :, None])


def lip_reconstruction_loss(lip_samples, gt_lip, mask, per_frame: bool = True):
    """Min-of-N term plus a closed-frame term charged to every sample."""
    _check_set(lip_samples, "lip samples")
    m = _mask_tensor(mask, lip_samples)
    best = min_reconstruction_loss(lip_samples, gt_lip, per_frame)
    closed = torch.linalg.vector_norm((gt_lip[None] - lip_samples) * (1 - m)[None, :, None], dim=-1)
    return best + closed.sum() / lip_samples.shape[0]


def upper_losses(upper_sets, gt_upper, per_frame: bool = True):
    """Diversity and reconstruction summed over the lip parents.

    ``upper_sets`` is N^l x N^u x T x F.
    """
    if upper_sets.ndim != 4:
        raise ContractViolation(f"upper sets must be N^l x N^u x T x F, got {tuple(upper_sets.shape)}")
    if upper_sets.shape[1] >= 2:
        div = sum(diversity_loss(s) for s in upper_sets)
    else:
        div = upper_sets.new_zeros(())
    rec = sum(min_reconstruction_loss(s, gt_upper, per_frame) for s in upper_sets)
    return div, rec


def code_regularizer(codes, tokens):
    """Sum of distances from predicted codes to their (detached) nearest tokens.

    ``codes`` has trailing shape (..., h, d); each code vector is one frame's
    h x d block, flattened.
    """
    q = quantize(codes.detach(), tokens.detach()).embeddings
    diff = (codes - q).reshape(*codes.shape[:-2], -1)
    return torch.linalg.vector_norm(diff, dim=-1).sum()


def total_losses(terms: dict, w: LossWeights):
    """Weighted lip and upper objectives from a dict of raw terms.

    Expected keys: lip_diversity, lip_reconstruction, lip_regularizer,
    upper_diversity, upper_reconstruction, upper_regularizer. Missing keys
    count as zero.
    """
    zero = 0.0
    get = lambda k: terms.get(k, zero)  # noqa: E731
    lip = (
        w.diversity_lip * get("lip_diversity")
        + w.reconstruction_lip * get("lip_reconstruction")
        + w.regularizer * get("lip_regularizer")
    )
    upper = (
        w.diversity_upper * get("upper_diversity")
        + w.reconstruction_upper * get("upper_reconstruction")
        + w.regularizer * get("upper_regularizer")
    )
    breakdown = {k: float(torch.as_tensor(v).detach()) for k, v in terms.items()}
    breakdown["lip_total"] = float(torch.as_tensor(lip).detach())
    breakdown["upper_total"] = float(torch.as_tensor(upper).detach())
    return lip, upper, breakdown
