"""Accuracy and diversity metrics over vertex-offset sequences.

All functions accept raw arrays (T x 3V) or MotionSequence objects. Sample
sets are sequences of such arrays, or one S x T x 3V array.
"""

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from cdface import _kernels
from cdface.errors import ContractViolation
from cdface.geometry import FaceTemplate, MotionSequence, RegionPartition, lip_aperture


def _arr(x) -> np.ndarray:
    if isinstance(x, MotionSequence):
        x = x.offsets
    return np.asarray(x, dtype=np.float64)


def _stack(samples) -> np.ndarray:
    if isinstance(samples, np.ndarray):
        arr = samples.astype(np.float64)
    else:
        arrs = [_arr(s) for s in samples]
        shapes = {a.shape for a in arrs}
        if len(shapes) > 1:
            raise ContractViolation(f"samples have unequal shapes {sorted(shapes)}")
        arr = np.stack(arrs)
    if arr.ndim != 3:
        raise ContractViolation(f"sample set must be S x T x F, got shape {arr.shape}")
    return arr


def _pair(pred, gt):
    pred, gt = _arr(pred), _arr(gt)
    if pred.shape != gt.shape:
        raise ContractViolation(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    return pred, gt


def _vertex_errors(pred, gt) -> np.ndarray:
    t_len = pred.shape[0]
    return _kernels.vertex_errors(
        np.ascontiguousarray(pred.reshape(t_len, -1, 3)), np.ascontiguousarray(gt.reshape(t_len, -1, 3))
    )


def lve(pred, gt, part: RegionPartition) -> float:
    """Mean over frames of the largest lip-vertex L2 error."""
    pred, gt = _pair(pred, gt)
    err = _vertex_errors(pred, gt)[:, part.lip_indices]
    return float(err.max(axis=1).mean())


def mve(pred, gt) -> float:
    pred, gt = _pair(pred, gt)
    return float(_vertex_errors(pred, gt).mean())


def fdd(pred, gt, part: RegionPartition) -> float:
    """Signed upper-face dynamics deviation.

    Per upper vertex: std over time of the offset magnitude, prediction minus
    ground truth, averaged over the upper-face vertices.
    """
    pred, gt = _pair(pred, gt)
    t_len = pred.shape[0]
    ui = part.upper_indices
    mag_p = np.linalg.norm(pred.reshape(t_len, -1, 3)[:, ui], axis=-1)
    mag_g = np.linalg.norm(gt.reshape(t_len, -1, 3)[:, ui], axis=-1)
    return float((mag_p.std(axis=0) - mag_g.std(axis=0)).sum() / part.upper_count)


def _distance_matrix(samples: np.ndarray) -> np.ndarray:
    flat = np.ascontiguousarray(samples.reshape(samples.shape[0], -1))
    return _kernels.pairwise_distances(flat)


def apd(samples) -> float:
    """Average distance over all ordered pairs of distinct samples."""
    arr = _stack(samples)
    s = arr.shape[0]
    if s < 2:
        raise ContractViolation("APD needs at least two samples")
    d = _distance_matrix(arr)
    return float(d.sum() / (s * (s - 1)))


def _region(samples, part: RegionPartition, region: str) -> np.ndarray:
    return _stack(samples)[..., part.coord_index(region)]


def upd(samples, part: RegionPartition) -> float:
    return apd(_region(samples, part, "upper"))


def lpd(samples, part: RegionPartition) -> float:
    return apd(_region(samples, part, "lip"))


def mpd(samples) -> float:
    arr = _stack(samples)
    s = arr.shape[0]
    if s < 2:
        raise ContractViolation("MPD needs at least two samples")
    d = _distance_matrix(arr)
    return float(d[np.triu_indices(s, k=1)].min())


def alve(samples, gt, part: RegionPartition) -> float:
    arr = _stack(samples)
    return float(np.mean([lve(x, gt, part) for x in arr]))


def aperture_curves(samples, template: FaceTemplate, part: RegionPartition) -> np.ndarray:
    """S x T lip-aperture table, one row per sample."""
    arr = _stack(samples)
    return np.stack([lip_aperture(MotionSequence(x), template, part) for x in arr])


def closure_violations(samples, template, part, mask_gt, eps: float, factor: float = 2.0) -> int:
    """Count (sample, frame) pairs open wider than factor*eps on ground-truth closed frames."""
    curves = aperture_curves(samples, template, part)
    closed = np.asarray(mask_gt) == 0
    return int((curves[:, closed] > factor * eps).sum())


# --------------------------------------------------------------------------
# reporting

UNITS_SYNTHETIC = "mesh units"


@dataclass
class MetricReport:
    values: dict = field(default_factory=dict)  # name -> float
    units: dict = field(default_factory=dict)  # name -> unit string
    sample_count: int = 0
    partition: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def add(self, name: str, value, unit: str = UNITS_SYNTHETIC):
        self.values[name] = float(value)
        self.units[name] = unit

    def to_dict(self) -> dict:
        return {
            "metrics": {k: {"value": v, "unit": self.units[k]} for k, v in self.values.items()},
            "sample_count": self.sample_count,
            "partition": self.partition,
            "extra": self.extra,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        rep = cls(sample_count=d.get("sample_count", 0), partition=d.get("partition", {}), extra=d.get("extra", {}))
        for k, v in d["metrics"].items():
            rep.add(k, v["value"], v["unit"])
        return rep

    def to_table(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "value", "unit"])
        for k in sorted(self.values):
            w.writerow([k, repr(self.values[k]), self.units[k]])
        return buf.getvalue()


def curves_table(curves: np.ndarray, fps: float = None) -> str:
    """Delimiter-separated table: frame[, time], sample_0 ... sample_{S-1}."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    header = ["frame"] + (["time_s"] if fps else []) + [f"sample_{i}" for i in range(curves.shape[0])]
    w.writerow(header)
    for t in range(curves.shape[1]):
        row = [t] + ([t / fps] if fps else []) + [repr(float(v)) for v in curves[:, t]]
        w.writerow(row)
    return buf.getvalue()
