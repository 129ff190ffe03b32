import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cdface.errors import ContractViolation, PartitionError
from cdface.geometry import (
    ClosureMask,
    FaceTemplate,
    MotionSequence,
    RegionPartition,
    closure_mask,
    lip_aperture,
    merge_regions,
    split_regions,
)

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


def two_vertex_face(a, b):
    return FaceTemplate(np.array([*a, *b], dtype=float)), RegionPartition([0, 1], [], (0, 1))


def test_aperture_zero_when_pair_coincides():
    tmpl, part = two_vertex_face((1, 2, 3), (1, 2, 3))
    np.testing.assert_array_equal(lip_aperture(MotionSequence(np.zeros((4, 6))), tmpl, part), np.zeros(4))


def test_aperture_template_only():
    tmpl, part = two_vertex_face((0, 0, 0), (0, 1, 0))
    np.testing.assert_array_equal(lip_aperture(MotionSequence(np.zeros((3, 6))), tmpl, part), np.ones(3))


def test_aperture_345_triangle():
    tmpl, part = two_vertex_face((0, 0, 0), (0, 0, 0))
    motion = MotionSequence(np.array([[0, 0, 0, 3, 4, 0]], dtype=float))
    assert lip_aperture(motion, tmpl, part)[0] == 5.0


def test_aperture_width_mismatch():
    tmpl, part = two_vertex_face((0, 0, 0), (0, 0, 0))
    with pytest.raises(PartitionError):
        lip_aperture(MotionSequence(np.zeros((2, 9))), tmpl, part)


@settings(max_examples=50, deadline=None)
@given(arrays(float, (5, 6), elements=finite), arrays(float, 3, elements=finite))
def test_aperture_translation_invariant(offsets, shift):
    tmpl, part = two_vertex_face((0.5, -1, 2), (0, 0.25, 1))
    moved = offsets + np.tile(shift, 2)[None, :]
    np.testing.assert_allclose(
        lip_aperture(MotionSequence(moved), tmpl, part), lip_aperture(MotionSequence(offsets), tmpl, part),
        rtol=1e-9, atol=1e-9,
    )


def test_closure_mask_examples():
    np.testing.assert_array_equal(closure_mask([0.02, 0.005], 0.01).values, [1, 0])
    # strict inequality at the threshold
    np.testing.assert_array_equal(closure_mask(np.full(6, 0.01), 0.01).values, np.zeros(6))


def test_closure_mask_matches_loop():
    rng = np.random.default_rng(3)
    ap = rng.uniform(0, 0.03, 200)
    expected = [1 if a > 0.01 else 0 for a in ap]
    assert closure_mask(ap, 0.01).values.tolist() == expected


def test_closure_mask_rejects_bad_input():
    with pytest.raises(ContractViolation):
        closure_mask([0.1, np.nan], 0.01)
    with pytest.raises(ContractViolation):
        closure_mask([0.1], 0.0)
    with pytest.raises(ContractViolation):
        ClosureMask([0, 2])


@settings(max_examples=100, deadline=None)
@given(arrays(float, 12, elements=st.floats(0, 1)), st.floats(0.001, 1), st.floats(0.001, 1))
def test_closure_mask_monotone_and_deterministic(ap, e1, e2):
    lo, hi = min(e1, e2), max(e1, e2)
    assert np.all(closure_mask(ap, lo).values >= closure_mask(ap, hi).values)
    np.testing.assert_array_equal(closure_mask(ap, lo).values, closure_mask(ap, lo).values)


def test_partition_validation():
    with pytest.raises(PartitionError):
        RegionPartition([0, 1], [1, 2], (0, 1))  # overlap
    with pytest.raises(PartitionError):
        RegionPartition([0, 1], [3], (0, 1))  # gap at 2
    with pytest.raises(PartitionError):
        RegionPartition([0, 1], [2], (0, 2))  # closure vertex outside the lip
    part = RegionPartition([3, 1], [0, 2], (1, 3))
    assert part.upper_count == 2 and part.vertex_count == 4
    assert RegionPartition.from_dict(part.to_dict()).to_dict() == part.to_dict()


def test_split_minimal():
    part = RegionPartition([0], [1], (0, 0))
    lip, upper = split_regions(MotionSequence(np.arange(12.0).reshape(2, 6)), part)
    assert lip.offsets.shape == (2, 3) and upper.offsets.shape == (2, 3)
    np.testing.assert_array_equal(lip.offsets, [[0, 1, 2], [6, 7, 8]])


def test_split_matches_gather_loop():
    rng = np.random.default_rng(0)
    perm = rng.permutation(10)
    part = RegionPartition(perm[:4], perm[4:], (int(perm[0]), int(perm[1])))
    x = rng.normal(size=(7, 30))
    lip, upper = split_regions(MotionSequence(x), part)
    for t in range(7):
        expected = [x[t, 3 * v + c] for v in sorted(perm[:4]) for c in range(3)]
        assert lip.offsets[t].tolist() == expected
        expected = [x[t, 3 * v + c] for v in sorted(perm[4:]) for c in range(3)]
        assert upper.offsets[t].tolist() == expected


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 12), st.integers(1, 6), st.integers(0, 2**32 - 1))
def test_region_round_trip(v, t_len, seed):
    rng = np.random.default_rng(seed)
    perm = rng.permutation(v)
    k = int(rng.integers(1, v + 1))
    part = RegionPartition(perm[:k], perm[k:], (int(perm[0]), int(perm[0])))
    x = rng.normal(size=(t_len, 3 * v))
    lip, upper = split_regions(MotionSequence(x), part)
    np.testing.assert_array_equal(merge_regions(lip.offsets, upper.offsets, part), x)


def test_motion_and_template_validation():
    with pytest.raises(ContractViolation):
        MotionSequence(np.zeros((0, 3)))
    with pytest.raises(ContractViolation):
        MotionSequence(np.array([[np.inf, 0, 0]]))
    with pytest.raises(ContractViolation):
        FaceTemplate(np.zeros(4))
