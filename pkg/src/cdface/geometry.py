"""Face template, lip/upper-face partition, lip aperture and closure masks."""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from cdface.errors import ContractViolation, PartitionError


@dataclass
class FaceTemplate:
    vertices: np.ndarray  # flat, length 3V

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1)
        if self.vertices.size == 0 or self.vertices.size % 3:
            raise ContractViolation(f"template length {self.vertices.size} is not a positive multiple of 3")
        if not np.all(np.isfinite(self.vertices)):
            raise ContractViolation("template has non-finite coordinates")

    @property
    def vertex_count(self) -> int:
        return self.vertices.size // 3

    def points(self) -> np.ndarray:
        return self.vertices.reshape(-1, 3)


@dataclass
class RegionPartition:
    lip_indices: np.ndarray
    upper_indices: np.ndarray
    closure_pair: tuple

    def __post_init__(self):
        self.lip_indices = np.unique(np.asarray(self.lip_indices, dtype=np.int64))
        self.upper_indices = np.unique(np.asarray(self.upper_indices, dtype=np.int64))
        self.closure_pair = (int(self.closure_pair[0]), int(self.closure_pair[1]))
        if np.intersect1d(self.lip_indices, self.upper_indices).size:
            raise PartitionError("lip and upper-face regions overlap")
        everything = np.concatenate([self.lip_indices, self.upper_indices])
        if everything.size and (everything.min() < 0 or not np.array_equal(np.sort(everything), np.arange(everything.size))):
            raise PartitionError("lip and upper-face regions must cover vertex ids 0..V-1 exactly")
        for v in self.closure_pair:
            if v not in set(self.lip_indices.tolist()):
                raise PartitionError(f"closure vertex {v} is not a lip vertex")

    @property
    def vertex_count(self) -> int:
        return self.lip_indices.size + self.upper_indices.size

    @property
    def upper_count(self) -> int:
        return self.upper_indices.size

    @property
    def lip_count(self) -> int:
        return self.lip_indices.size

    def coord_index(self, region: str) -> np.ndarray:
        """Flat column indices (3 per vertex) of a region inside a 3V frame."""
        if region not in ("lip", "upper"):
            raise ValueError(f"unknown region {region!r}")
        idx = self.lip_indices if region == "lip" else self.upper_indices
        return (3 * idx[:, None] + np.arange(3)[None, :]).reshape(-1)

    def check(self, vertex_count: int) -> None:
        if self.vertex_count != vertex_count:
            raise PartitionError(f"partition covers {self.vertex_count} vertices, data has {vertex_count}")

    def to_dict(self) -> dict:
        return {
            "lip_indices": self.lip_indices.tolist(),
            "upper_indices": self.upper_indices.tolist(),
            "closure_pair": list(self.closure_pair),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RegionPartition":
        return cls(d["lip_indices"], d["upper_indices"], tuple(d["closure_pair"]))


@dataclass
class MotionSequence:
    offsets: np.ndarray  # T x 3V (or T x region width for views)
    fps: float = 25.0
    subject_id: Optional[str] = None

    def __post_init__(self):
        self.offsets = np.asarray(self.offsets)
        if self.offsets.ndim != 2 or self.offsets.shape[0] < 1:
            raise ContractViolation(f"motion must be T x F with T >= 1, got shape {self.offsets.shape}")
        if not np.all(np.isfinite(self.offsets)):
            raise ContractViolation("motion has non-finite entries")

    @property
    def num_frames(self) -> int:
        return self.offsets.shape[0]

    def vertices(self) -> np.ndarray:
        return self.offsets.reshape(self.num_frames, -1, 3)


@dataclass
class ClosureMask:
    values: np.ndarray
    threshold: float = field(default=0.01)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.int64).reshape(-1)
        if not np.all((self.values == 0) | (self.values == 1)):
            raise ContractViolation("closure mask must be binary")

    def __len__(self):
        return self.values.size


def mask_values(mask):
    """Raw per-frame values of a ClosureMask, or the argument itself."""
    return mask.values if isinstance(mask, ClosureMask) else mask


def lip_aperture(motion: MotionSequence, template: FaceTemplate, part: RegionPartition) -> np.ndarray:
    """Distance between the closure-pair vertices of template + offsets, per frame."""
    v = template.vertex_count
    if motion.offsets.shape[1] != 3 * v:
        raise PartitionError(f"motion width {motion.offsets.shape[1]} does not match template with {v} vertices")
    a, b = part.closure_pair
    if not (0 <= a < v and 0 <= b < v):
        raise PartitionError(f"closure pair {part.closure_pair} out of range for V={v}")
    pts = template.points()
    frames = motion.vertices()
    upper = frames[:, a] + pts[a]
    lower = frames[:, b] + pts[b]
    return np.linalg.norm(upper - lower, axis=-1)


def closure_mask(aperture, eps: float) -> ClosureMask:
    """m_t = 1 where the lips are open wider than eps (strictly), else 0."""
    if not eps > 0:
        raise ContractViolation(f"threshold must be positive, got {eps}")
    aperture = np.asarray(aperture, dtype=np.float64)
    if not np.all(np.isfinite(aperture)):
        raise ContractViolation("aperture contains non-finite values")
    return ClosureMask((aperture > eps).astype(np.int64), float(eps))


def split_regions(motion: MotionSequence, part: RegionPartition):
    part.check(motion.offsets.shape[1] // 3)
    if motion.offsets.shape[1] % 3:
        raise PartitionError("motion width is not a multiple of 3")
    lip = motion.offsets[:, part.coord_index("lip")]
    upper = motion.offsets[:, part.coord_index("upper")]
    return (
        MotionSequence(lip, motion.fps, motion.subject_id),
        MotionSequence(upper, motion.fps, motion.subject_id),
    )


def merge_regions(lip: np.ndarray, upper: np.ndarray, part: RegionPartition) -> np.ndarray:
    """Inverse of split_regions on raw arrays; leading axes are broadcast."""
    lip = np.asarray(lip)
    upper = np.asarray(upper)
    li, ui = part.coord_index("lip"), part.coord_index("upper")
    if lip.shape[-1] != li.size or upper.shape[-1] != ui.size:
        raise PartitionError(
            f"region widths ({lip.shape[-1]}, {upper.shape[-1]}) do not match partition ({li.size}, {ui.size})"
        )
    out = np.empty(lip.shape[:-1] + (li.size + ui.size,), dtype=np.result_type(lip, upper))
    out[..., li] = lip
    out[..., ui] = upper
    return out
