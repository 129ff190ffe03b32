import numpy as np
import pytest
import torch

from cdface.errors import ContractViolation
from cdface.geometry import RegionPartition
from cdface.querier import CDFace, ModelConfig, rollout, teacher_forced_forward

PART = RegionPartition([0, 1], [2, 3, 4], (0, 1))


@pytest.fixture
def model():
    torch.manual_seed(0)
    cfg = ModelConfig(lip_features=6, upper_features=9, audio_dim=4, num_styles=2, num_tokens=8, code_dim=4,
                      prior_width=16, width=16, heads=2, n_lip=2, n_upper=3)
    m = CDFace(cfg)
    m.freeze_priors()
    return m.eval()


def _inputs(t_len=7, seed=0):
    g = torch.Generator().manual_seed(seed)
    return (torch.randn(t_len, 6, generator=g), torch.randn(t_len, 9, generator=g), torch.randn(t_len, 4, generator=g))


def test_teacher_forced_shapes(model):
    lip, up, audio = _inputs()
    out = teacher_forced_forward(model, lip, up, audio, 1)
    assert out["lip_codes"].shape == (2, 7, 1, 4)
    assert out["lip"].shape == (2, 7, 6)
    assert out["upper_codes"].shape == (2, 3, 7, 1, 4)
    assert out["upper"].shape == (2, 3, 7, 9)
    # first frame only sees the start token and its own audio
    assert torch.isfinite(out["lip"][:, 0]).all() and torch.isfinite(out["upper"][:, :, 0]).all()


def test_outputs_ignore_future_audio(model):
    lip, up, audio = _inputs()
    k = 4
    audio2 = audio.clone()
    audio2[k:] += 3.0
    with torch.no_grad():
        a = teacher_forced_forward(model, lip, up, audio, 0)
        b = teacher_forced_forward(model, lip, up, audio2, 0)
    for key in ("lip", "upper"):
        torch.testing.assert_close(a[key][..., :k, :], b[key][..., :k, :], rtol=0, atol=1e-6)
        assert not torch.allclose(a[key][..., k:, :], b[key][..., k:, :])


def test_outputs_ignore_current_and_future_history(model):
    lip, up, audio = _inputs()
    k = 3
    lip2, up2 = lip.clone(), up.clone()
    lip2[k:] += 3.0
    up2[k:] += 3.0
    with torch.no_grad():
        a = teacher_forced_forward(model, lip, up, audio, 0)
        b = teacher_forced_forward(model, lip2, up2, audio, 0)
    # frame k's prediction sees history up to k - 1 only
    for key in ("lip", "upper"):
        torch.testing.assert_close(a[key][..., : k + 1, :], b[key][..., : k + 1, :], rtol=0, atol=1e-6)


def test_rollout_shapes_and_lineage(model):
    _, _, audio = _inputs()
    res = rollout(model, audio, 0, partition=PART)
    assert res["lip"].shape == (2, 7, 6) and res["upper"].shape == (2, 3, 7, 9)
    assert res["full"].shape == (6, 7, 15)
    assert res["lineage"] == [(0, 0), (0, 1), (0, 2), (1, 0), (1, 1), (1, 2)]
    np.testing.assert_array_equal(res["full"][4].reshape(7, 5, 3)[:, :2].reshape(7, 6), res["lip"][1])


def test_rollout_is_deterministic(model):
    _, _, audio = _inputs()
    a, b = rollout(model, audio, 1), rollout(model, audio, 1)
    np.testing.assert_array_equal(a["lip"], b["lip"])
    np.testing.assert_array_equal(a["upper"], b["upper"])


def test_single_head_rollout_is_first_sample(model):
    _, _, audio = _inputs()
    full = rollout(model, audio, 0)
    one = rollout(model, audio, 0, 1, 1)
    np.testing.assert_allclose(one["lip"][0], full["lip"][0], rtol=0, atol=1e-6)
    np.testing.assert_allclose(one["upper"][0, 0], full["upper"][0, 0], rtol=0, atol=1e-6)


def test_rollout_matches_teacher_forcing_on_own_output(model):
    _, _, audio = _inputs()
    res = rollout(model, audio, 0, 1, 1)
    with torch.no_grad():
        tf = teacher_forced_forward(model, res["lip"][0], res["upper"][0, 0], audio, 0)
    np.testing.assert_allclose(tf["lip"][0].numpy(), res["lip"][0], rtol=0, atol=1e-4)
    np.testing.assert_allclose(tf["upper"][0, 0].numpy(), res["upper"][0, 0], rtol=0, atol=1e-4)


def test_control_mode_keeps_lip_bit_identical(model):
    _, _, audio = _inputs()
    track = np.random.default_rng(1).normal(size=(7, 6)).astype(np.float32)
    res = rollout(model, audio, 0, fixed_lip=track, partition=PART)
    assert res["lip_codes"] is None and res["upper"].shape == (1, 3, 7, 9)
    for s in res["full"]:
        np.testing.assert_array_equal(s.reshape(7, 5, 3)[:, :2].reshape(7, 6), track)
    assert not np.array_equal(res["upper"][0, 0], res["upper"][0, 1])


def test_gradients_reach_queriers_not_priors(model):
    model.train()
    lip, up, audio = _inputs()
    out = teacher_forced_forward(model, lip, up, audio, 1)
    (out["lip"].sum() + out["upper"].sum()).backward()
    assert all(p.grad is None for p in model.priors.parameters())
    assert model.lip.style.table.weight.grad[1].abs().sum() > 0
    assert model.lip.style.table.weight.grad[0].abs().sum() == 0
    assert model.upper.style.table.weight.grad.abs().sum() > 0
    for m in (model.lip, model.upper):
        assert sum(float(p.grad.abs().sum()) for p in m.parameters() if p.grad is not None) > 0


def test_contract_errors(model):
    lip, up, audio = _inputs()
    with pytest.raises(ContractViolation):
        teacher_forced_forward(model, lip, up[:5], audio, 0)
    with pytest.raises(ContractViolation):
        teacher_forced_forward(model, lip, up, audio, 0, mask=np.ones(4))
    with pytest.raises(ContractViolation):
        rollout(model, audio, 0, num_frames=5)
    with pytest.raises(ContractViolation):
        rollout(model, audio, 0, n_lip=3)
    with pytest.raises(ContractViolation):
        rollout(model, audio, 0, fixed_lip=np.zeros((6, 6)))
    with pytest.raises(ContractViolation):
        rollout(model, audio, 5)


def test_trained_upper_depends_on_lip_parent(corpus, query_ckpt):
    from cdface.trainer import clip_audio, load_model

    m = load_model(query_ckpt)
    clip = next(iter(corpus.clips("test")))
    res = rollout(m, clip_audio(corpus, clip), clip.style)
    # same upper head, different lip parents
    assert not np.array_equal(res["lip"][0], res["lip"][1])
    assert not np.array_equal(res["upper_codes"][0, 0], res["upper_codes"][1, 0])
