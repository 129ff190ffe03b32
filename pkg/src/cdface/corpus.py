"""Procedural talking-face corpus with known one-to-many structure.

Every sentence (a phoneme timeline, i.e. the "audio") is rendered once per
speaking style. Styles differ in lip amplitude/shape and in upper-face
expression, but plosive frames are fully closed under every style, so all
renditions of a sentence share one closure mask.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from cdface.container import read_container, read_manifest, write_container
from cdface.errors import ContainerError, ContractViolation, PartitionError
from cdface.geometry import (
    ClosureMask,
    FaceTemplate,
    MotionSequence,
    RegionPartition,
    closure_mask,
    lip_aperture,
)

# (name, aperture target in mesh units); zero marks a plosive / bilabial
PHONEMES = (
    ("p", 0.0),
    ("b", 0.0),
    ("m", 0.0),
    ("a", 0.09),
    ("o", 0.07),
    ("e", 0.05),
    ("i", 0.035),
    ("u", 0.04),
    ("s", 0.025),
    ("t", 0.03),
)
LIP_GAP = 0.002  # neutral-template distance of the closure pair
NUM_EXPRESSIONS = 3

LAYOUTS = {"biwi": (23370, 25.0), "vocaset": (5023, 60.0)}


@dataclass
class PhonemeSpec:
    id: int
    name: str
    embedding: np.ndarray
    aperture_target: float
    duration_frames: int = 3

    @property
    def plosive(self) -> bool:
        return self.aperture_target == 0.0


@dataclass
class StyleSpec:
    id: int
    lip_amplitude: float
    lip_spread: float
    lip_protrusion: float
    expression: np.ndarray  # NUM_EXPRESSIONS coefficients

    def to_dict(self):
        return {
            "id": self.id,
            "lip_amplitude": self.lip_amplitude,
            "lip_spread": self.lip_spread,
            "lip_protrusion": self.lip_protrusion,
            "expression": [float(c) for c in self.expression],
        }


@dataclass
class CorpusClip:
    name: str
    features: Optional[np.ndarray]  # T x d_a
    motion: MotionSequence
    mask_gt: Optional[ClosureMask]
    style: int = 0
    sentence: int = 0
    phonemes: list = field(default_factory=list)  # [(phoneme id, frames), ...]

    @property
    def num_frames(self) -> int:
        return self.motion.num_frames


def save_clip(path, clip: CorpusClip) -> Path:
    arrays = {"motion": clip.motion.offsets}
    if clip.features is not None:
        arrays["features"] = clip.features
    if clip.mask_gt is not None:
        arrays["mask"] = clip.mask_gt.values
    meta = {
        "kind": "clip",
        "name": clip.name,
        "fps": clip.motion.fps,
        "subject_id": clip.motion.subject_id,
        "style": clip.style,
        "sentence": clip.sentence,
        "phonemes": [list(map(int, p)) for p in clip.phonemes],
        "epsilon": None if clip.mask_gt is None else clip.mask_gt.threshold,
    }
    return write_container(path, arrays, meta)


def load_clip(path) -> CorpusClip:
    arrays, meta = read_container(path)
    if "motion" not in arrays:
        raise ContainerError(f"{path}: clip has no motion array")
    motion = arrays["motion"]
    t_len = motion.shape[0]
    features = arrays.get("features")
    if features is not None and features.shape[0] != t_len:
        raise ContainerError(f"{path}: {features.shape[0]} feature frames vs {t_len} motion frames")
    mask = None
    if "mask" in arrays:
        if arrays["mask"].shape != (t_len,):
            raise ContainerError(f"{path}: mask shape {arrays['mask'].shape} vs T={t_len}")
        mask = ClosureMask(arrays["mask"].astype(np.int64), meta.get("epsilon") or 0.01)
    return CorpusClip(
        name=meta.get("name", Path(path).name),
        features=features,
        motion=MotionSequence(motion, float(meta.get("fps", 25.0)), meta.get("subject_id")),
        mask_gt=mask,
        style=int(meta.get("style", 0)),
        sentence=int(meta.get("sentence", 0)),
        phonemes=[tuple(p) for p in meta.get("phonemes", [])],
    )


# --------------------------------------------------------------------------
# generator


def _face_layout(num_vertices: int, rng: np.random.Generator):
    if num_vertices < 6:
        raise PartitionError(f"need at least 6 vertices, got {num_vertices}")
    cols = max(1, num_vertices // 6)
    if cols % 2 == 0:
        cols -= 1
    n_lip = 2 * cols
    xs = np.linspace(-0.5, 0.5, cols) if cols > 1 else np.zeros(1)
    lip = np.zeros((n_lip, 3))
    lip[:cols, 0] = xs
    lip[:cols, 1] = LIP_GAP / 2
    lip[cols:, 0] = xs
    lip[cols:, 1] = -LIP_GAP / 2
    n_upper = num_vertices - n_lip
    upper = np.column_stack(
        [
            rng.uniform(-0.6, 0.6, n_upper),
            rng.uniform(0.3, 1.0, n_upper),
            rng.uniform(-0.1, 0.1, n_upper),
        ]
    )
    template = FaceTemplate(np.concatenate([lip, upper]).reshape(-1))
    part = RegionPartition(np.arange(n_lip), np.arange(n_lip, num_vertices), (cols // 2, cols + cols // 2))
    return template, part, xs


def _ema(signal: np.ndarray, alpha: float) -> np.ndarray:
    out = np.empty_like(signal)
    acc = signal[0]
    for t in range(signal.shape[0]):
        acc = alpha * signal[t] + (1 - alpha) * acc
        out[t] = acc
    return out


def _make_styles(num_styles: int, rng: np.random.Generator):
    styles = []
    for s in range(num_styles):
        frac = s / (num_styles - 1)
        expression = rng.normal(0.0, 1.0, NUM_EXPRESSIONS)
        # push styles apart in expression space
        expression[s % NUM_EXPRESSIONS] += 2.0 if s % 2 == 0 else -2.0
        styles.append(
            StyleSpec(
                id=s,
                lip_amplitude=0.8 + 0.7 * frac,
                lip_spread=(0.5 if s % 2 == 0 else -0.5) * (1.0 + 0.5 * frac),
                lip_protrusion=float(rng.uniform(-0.4, 0.4)),
                expression=expression,
            )
        )
    return styles


def _sentence(rng: np.random.Generator, num_phonemes: int):
    ids = rng.integers(0, len(PHONEMES), num_phonemes)
    # every sentence carries at least two plosives
    ids[rng.choice(num_phonemes, 2, replace=False)] = rng.integers(0, 3, 2)
    durations = rng.integers(2, 6, num_phonemes)
    return [(int(i), int(d)) for i, d in zip(ids, durations)]


def render_motion(timeline, style: StyleSpec, xs, part: RegionPartition, expr_basis, phoneme_expr, eps: float):
    """Offsets T x 3V for one sentence under one style."""
    ids = np.concatenate([[i] * d for i, d in timeline]).astype(int)
    t_len = ids.size
    targets = np.array([PHONEMES[i][1] for i in ids])
    plosive = targets == 0.0
    aperture = _ema(targets, 0.6) * style.lip_amplitude
    aperture[~plosive] = np.maximum(aperture[~plosive], 1.5 * eps)
    aperture[plosive] = 0.0

    cols = xs.size
    w = np.cos(np.pi * xs / 1.2)
    v_total = part.vertex_count
    out = np.zeros((t_len, v_total, 3))
    a = aperture[:, None]
    for row, sign in ((slice(0, cols), 1.0), (slice(cols, 2 * cols), -1.0)):
        out[:, row, 0] = style.lip_spread * a * xs[None, :]
        out[:, row, 1] = sign * 0.5 * a * w[None, :]
        out[:, row, 2] = style.lip_protrusion * a * w[None, :]

    # upper face: style-weighted expression fields driven by a smoothed, causal
    # response to the phoneme sequence
    drive = _ema(phoneme_expr[ids], 0.3)  # T x E
    coeff = drive * style.expression[None, :]
    upper = np.einsum("te,evc->tvc", coeff, expr_basis)
    out[:, part.upper_indices] = upper
    return out.reshape(t_len, -1), plosive


@dataclass
class Corpus:
    root: Path
    template: FaceTemplate
    partition: RegionPartition
    embeddings: np.ndarray
    meta: dict

    @property
    def epsilon(self) -> float:
        return float(self.meta["epsilon"])

    @property
    def fps(self) -> float:
        return float(self.meta["fps"])

    @property
    def num_styles(self) -> int:
        return len(self.meta["styles"])

    @property
    def feature_dim(self) -> int:
        return int(self.embeddings.shape[1])

    def phonemes(self):
        return [
            PhonemeSpec(p["id"], p["name"], self.embeddings[p["id"]], p["aperture_target"])
            for p in self.meta["phonemes"]
        ]

    def clip_names(self, split: str = "all"):
        sentences = self.sentences(split)
        return [n for n in self.meta["clips"] if int(n.split("_")[0]) in sentences]

    def sentences(self, split: str = "all"):
        if split == "all":
            return sorted(self.meta["split"]["train"] + self.meta["split"]["test"])
        if split not in self.meta["split"]:
            raise ContractViolation(f"unknown split {split!r}")
        return list(self.meta["split"][split])

    def clip(self, name: str) -> CorpusClip:
        return load_clip(self.root / "clips" / name)

    def clips(self, split: str = "all") -> Iterator[CorpusClip]:
        for name in self.clip_names(split):
            yield self.clip(name)

    @classmethod
    def load(cls, root) -> "Corpus":
        root = Path(root)
        arrays, meta = read_container(root)
        if meta.get("kind") != "corpus":
            raise ContainerError(f"{root} is not a corpus container")
        return cls(
            root=root,
            template=FaceTemplate(arrays["template"].astype(np.float64)),
            partition=RegionPartition.from_dict(meta["partition"]),
            embeddings=arrays["phoneme_embeddings"],
            meta=meta,
        )


def generate_corpus(
    out_dir,
    seed: int = 0,
    num_styles: int = 2,
    num_sentences: int = 20,
    num_vertices: int = 30,
    fps: float = 25.0,
    epsilon: float = 0.01,
    feature_dim: int = 16,
    test_fraction: float = 0.2,
) -> Corpus:
    if num_styles < 2:
        raise ContractViolation("need at least two styles for one-to-many ground truth")
    if num_sentences < 1:
        raise ContractViolation("need at least one sentence")
    if not epsilon > 0:
        raise ContractViolation("epsilon must be positive")
    if LIP_GAP >= epsilon:
        raise ContractViolation(f"epsilon must exceed the neutral lip gap {LIP_GAP}")
    rng = np.random.default_rng(seed)
    out = Path(out_dir)
    template, part, xs = _face_layout(num_vertices, rng)
    template = FaceTemplate(template.vertices.astype(np.float32).astype(np.float64))

    embeddings = rng.normal(0.0, 1.0, (len(PHONEMES), feature_dim)).astype(np.float32)
    phoneme_expr = rng.uniform(0.0, 1.0, (len(PHONEMES), NUM_EXPRESSIONS))
    basis = rng.normal(0.0, 0.012, (NUM_EXPRESSIONS, part.upper_count, 3))
    styles = _make_styles(num_styles, rng)

    n_test = int(round(num_sentences * test_fraction)) if num_sentences > 1 else 0
    train = list(range(num_sentences - n_test))
    test = list(range(num_sentences - n_test, num_sentences))

    names = []
    for sent in range(num_sentences):
        timeline = _sentence(rng, int(rng.integers(8, 13)))
        ids = np.concatenate([[i] * d for i, d in timeline]).astype(int)
        features = embeddings[ids]
        rendered = []
        for style in styles:
            offsets, plosive = render_motion(timeline, style, xs, part, basis, phoneme_expr, epsilon)
            offsets = offsets.astype(np.float32)
            motion = MotionSequence(offsets, fps, f"S{style.id}")
            mask = closure_mask(lip_aperture(motion, template, part), epsilon)
            if not np.array_equal(mask.values, (~plosive).astype(np.int64)):
                raise RuntimeError("generator produced a mask inconsistent with its phoneme timeline")
            rendered.append(offsets)
            name = f"{sent:03d}_S{style.id}"
            save_clip(out / "clips" / name, CorpusClip(name, features, motion, mask, style.id, sent, timeline))
            names.append(name)
        for i in range(len(rendered)):
            for j in range(i + 1, len(rendered)):
                if np.array_equal(rendered[i], rendered[j]):
                    raise RuntimeError(f"styles {i} and {j} render sentence {sent} identically")

    meta = {
        "kind": "corpus",
        "seed": seed,
        "fps": fps,
        "epsilon": epsilon,
        "vertices": num_vertices,
        "feature_dim": feature_dim,
        "partition": part.to_dict(),
        "phonemes": [{"id": i, "name": n, "aperture_target": a} for i, (n, a) in enumerate(PHONEMES)],
        "styles": [s.to_dict() for s in styles],
        "split": {"train": train, "test": test},
        "clips": names,
    }
    write_container(
        out,
        {"template": template.vertices, "phoneme_embeddings": embeddings},
        meta,
    )
    return Corpus.load(out)


def load_external_dataset_stub(layout: str, root) -> Iterator[CorpusClip]:
    """Iterate clips of a BIWI- or VOCASET-shaped directory of containers.

    Only vertex count and frame rate are validated. Never exercised against the
    licensed datasets themselves.
    """
    if layout not in LAYOUTS:
        raise ContractViolation(f"unknown layout {layout!r}; expected one of {sorted(LAYOUTS)}")
    v_expected, fps_expected = LAYOUTS[layout]
    root = Path(root)
    for sub in sorted(p for p in root.iterdir() if (p / "manifest.json").exists()):
        manifest = read_manifest(sub)
        shape = manifest["arrays"].get("motion", {}).get("shape")
        if shape is None or len(shape) != 2 or shape[1] != 3 * v_expected:
            raise PartitionError(f"{sub}: {layout} clips need {v_expected} vertices, got motion shape {shape}")
        fps = float(manifest["meta"].get("fps", -1))
        if fps != fps_expected:
            raise PartitionError(f"{sub}: {layout} clips are {fps_expected} fps, got {fps}")
        yield load_clip(sub)


def inter_style_apd(corpus: Corpus, sentence: int) -> float:
    from cdface.metrics import apd

    motions = [c.motion.offsets for c in corpus.clips() if c.sentence == sentence]
    return apd(motions)


def dump_summary(corpus: Corpus) -> str:
    return json.dumps(
        {
            "clips": len(corpus.meta["clips"]),
            "styles": corpus.num_styles,
            "vertices": corpus.template.vertex_count,
            "epsilon": corpus.epsilon,
        }
    )
