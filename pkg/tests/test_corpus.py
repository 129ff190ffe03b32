import numpy as np
import pytest

from cdface.container import write_container
from cdface.corpus import (
    LAYOUTS,
    CorpusClip,
    generate_corpus,
    inter_style_apd,
    load_clip,
    load_external_dataset_stub,
    save_clip,
)
from cdface.errors import ContainerError, ContractViolation, PartitionError
from cdface.geometry import ClosureMask, MotionSequence, closure_mask, lip_aperture, split_regions
from cdface.metrics import apd


def _tree(root):
    return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_same_seed_byte_identical(tmp_path):
    a = generate_corpus(tmp_path / "a", seed=5, num_sentences=3, num_vertices=12)
    b = generate_corpus(tmp_path / "b", seed=5, num_sentences=3, num_vertices=12)
    assert _tree(a.root) == _tree(b.root)
    c = generate_corpus(tmp_path / "c", seed=6, num_sentences=3, num_vertices=12)
    assert _tree(a.root) != _tree(c.root)


def test_shape_and_split(corpus):
    assert corpus.template.vertex_count == 30
    assert corpus.num_styles == 2
    assert len(corpus.clip_names()) == 40
    assert set(corpus.sentences("train")).isdisjoint(corpus.sentences("test"))
    assert len(corpus.sentences("test")) == 4


def test_masks_match_geometry(corpus):
    for clip in corpus.clips():
        ap = lip_aperture(clip.motion, corpus.template, corpus.partition)
        np.testing.assert_array_equal(closure_mask(ap, corpus.epsilon).values, clip.mask_gt.values)
        assert np.all(ap[clip.mask_gt.values == 0] <= corpus.epsilon)


def test_styles_share_masks_but_differ(corpus):
    for sent in corpus.sentences():
        clips = [c for c in corpus.clips() if c.sentence == sent]
        assert len(clips) == corpus.num_styles
        np.testing.assert_array_equal(clips[0].mask_gt.values, clips[1].mask_gt.values)
        np.testing.assert_array_equal(clips[0].features, clips[1].features)
        assert inter_style_apd(corpus, sent) > 0
        uppers = [split_regions(c.motion, corpus.partition)[1].offsets for c in clips]
        assert apd(uppers) > 0
        curves = [lip_aperture(c.motion, corpus.template, corpus.partition) for c in clips]
        assert np.corrcoef(curves[0], curves[1])[0, 1] > 0.9
        closed = clips[0].mask_gt.values == 0
        np.testing.assert_allclose(curves[0][closed], curves[1][closed], atol=1e-6)


def test_plosives_have_zero_target(corpus):
    specs = corpus.phonemes()
    assert [p.name for p in specs if p.plosive] == ["p", "b", "m"]
    assert all((p.aperture_target <= corpus.epsilon) == p.plosive for p in specs)


def test_generator_preconditions(tmp_path):
    with pytest.raises(ContractViolation):
        generate_corpus(tmp_path / "x", num_styles=1)
    with pytest.raises(PartitionError):
        generate_corpus(tmp_path / "y", num_vertices=5)


def test_clip_round_trip(tmp_path, corpus):
    clip = corpus.clip(corpus.clip_names()[0])
    save_clip(tmp_path / "c", clip)
    back = load_clip(tmp_path / "c")
    np.testing.assert_array_equal(back.motion.offsets, clip.motion.offsets)
    np.testing.assert_array_equal(back.features, clip.features)
    np.testing.assert_array_equal(back.mask_gt.values, clip.mask_gt.values)
    assert (back.style, back.sentence, back.phonemes) == (clip.style, clip.sentence, clip.phonemes)


def test_clip_shape_disagreement(tmp_path):
    write_container(tmp_path, {"motion": np.zeros((4, 6)), "features": np.zeros((3, 2))})
    with pytest.raises(ContainerError):
        load_clip(tmp_path)


def _fake_clip(root, name, v, fps, t_len=2):
    motion = MotionSequence(np.zeros((t_len, 3 * v), np.float32), fps)
    save_clip(root / name, CorpusClip(name, None, motion, ClosureMask(np.ones(t_len)), 0, 0, []))


@pytest.mark.parametrize("layout", ["biwi", "vocaset"])
def test_external_layout_stub(tmp_path, layout):
    v, fps = LAYOUTS[layout]
    _fake_clip(tmp_path, "a", v, fps)
    clips = list(load_external_dataset_stub(layout, tmp_path))
    assert len(clips) == 1 and clips[0].motion.offsets.shape == (2, 3 * v)


def test_external_layout_constants():
    assert LAYOUTS == {"biwi": (23370, 25.0), "vocaset": (5023, 60.0)}


def test_external_layout_mismatch(tmp_path):
    _fake_clip(tmp_path, "a", 5023, 25.0)
    with pytest.raises(PartitionError):
        list(load_external_dataset_stub("biwi", tmp_path))
    with pytest.raises(PartitionError):
        list(load_external_dataset_stub("vocaset", tmp_path))
    with pytest.raises(ContractViolation):
        list(load_external_dataset_stub("other", tmp_path))
