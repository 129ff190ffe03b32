"""Audio feature providers and time alignment to the motion frame rate.

A provider turns some audio source into an ``AudioFeatureSequence``. Two ship
with the package: ``synthetic`` passes through the phoneme-embedding track
of a corpus clip, ``precomputed`` reads features from a container directory.
Register more with :func:`register_provider`.
"""

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from cdface.container import read_container, write_container
from cdface.errors import ConfigError, ContainerError, ContractViolation


@dataclass
class AudioFeatureSequence:
    features: np.ndarray  # T_a x d_a
    native_rate: float
    source_tag: str = "unknown"

    def __post_init__(self):
        self.features = np.asarray(self.features)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ContractViolation(f"features must be T_a x d_a with T_a >= 1, got {self.features.shape}")
        if not np.all(np.isfinite(self.features)):
            raise ContractViolation("audio features contain non-finite values")

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def duration(self) -> float:
        return self.features.shape[0] / self.native_rate


def _synthetic(source, **_):
    # source: a CorpusClip
    if getattr(source, "features", None) is None:
        raise ContractViolation("synthetic provider needs a corpus clip carrying a feature track")
    return AudioFeatureSequence(np.array(source.features, copy=True), source.motion.fps, "synthetic")


def _precomputed(source, **_):
    try:
        arrays, meta = read_container(source)
    except ContainerError:
        raise
    except OSError as exc:
        raise ContainerError(f"cannot read features from {source}: {exc}") from exc
    if "features" not in arrays or "rate" not in meta:
        raise ContainerError(f"{source}: not a precomputed feature container")
    feats = arrays["features"]
    if meta.get("dim") is not None and feats.shape[1] != meta["dim"]:
        raise ContainerError(f"{source}: manifest dim {meta['dim']} vs array width {feats.shape[1]}")
    return AudioFeatureSequence(feats, float(meta["rate"]), "precomputed")


_PROVIDERS = {"synthetic": _synthetic, "precomputed": _precomputed}


def register_provider(name: str, fn) -> None:
    _PROVIDERS[name] = fn


def providers():
    return sorted(_PROVIDERS)


def extract_features(source, provider: str = "synthetic", expected_dim: int = None) -> AudioFeatureSequence:
    if provider not in _PROVIDERS:
        raise ConfigError(f"unknown audio provider {provider!r}; registered: {providers()}")
    seq = _PROVIDERS[provider](source)
    if expected_dim is not None and seq.dim != expected_dim:
        raise ConfigError(f"provider {provider!r} yields {seq.dim}-dim features, model expects {expected_dim}")
    return seq


def save_features(path, seq: AudioFeatureSequence) -> Path:
    return write_container(
        path,
        {"features": seq.features},
        {"kind": "audio-features", "rate": seq.native_rate, "dim": seq.dim, "source": seq.source_tag},
    )


def align_to_motion(seq: AudioFeatureSequence, target_fps: float, target_frames: int) -> np.ndarray:
    """Linearly resample the feature track to exactly ``target_frames`` rows.

    Endpoints map to endpoints; the rates only matter for the caller's
    consistency checks, the resampling itself is by relative position.
    """
    if target_frames < 1:
        raise ContractViolation("target frame count must be >= 1")
    feats = seq.features
    t_a = feats.shape[0]
    if t_a == 0:
        raise ContractViolation("empty feature track")
    if t_a == target_frames:
        return feats.copy()
    if t_a == 1:
        return np.repeat(feats, target_frames, axis=0)
    src = np.linspace(0.0, 1.0, t_a)
    dst = np.linspace(0.0, 1.0, target_frames)
    out = np.empty((target_frames, feats.shape[1]), dtype=feats.dtype)
    for k in range(feats.shape[1]):
        out[:, k] = np.interp(dst, src, feats[:, k])
    return out


def check_duration(seq: AudioFeatureSequence, fps: float, frames: int, tolerance_frames: float = 1.0) -> None:
    if abs(seq.duration - frames / fps) * fps > tolerance_frames:
        raise ContractViolation(
            f"audio lasts {seq.duration:.3f}s but {frames} frames at {fps} fps last {frames / fps:.3f}s"
        )
