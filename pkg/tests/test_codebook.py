import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from cdface.codebook import Codebook, RegionPrior, encode_decode, quantize, straight_through, token_usage, vq_loss
from cdface.errors import ContractViolation


def test_exact_token_kept():
    tokens = torch.randn(6, 4)
    q = quantize(tokens[3][None], tokens)
    assert q.token_ids.tolist() == [3]
    assert torch.equal(q.embeddings[0], tokens[3])


def test_single_token_codebook():
    q = quantize(torch.randn(5, 2, 3), torch.randn(1, 3))
    assert torch.all(q.token_ids == 0)


def test_quantize_matches_nearest_loop():
    g = torch.Generator().manual_seed(11)
    tokens = torch.randn(8, 4, generator=g, dtype=torch.float64)
    z = torch.randn(20, 4, generator=g, dtype=torch.float64)
    ids = quantize(z, tokens).token_ids.tolist()
    assert ids == [oracles.nearest_token(row, tokens.tolist()) for row in z.tolist()]


def test_quantize_ties_go_to_lowest_index():
    tokens = torch.tensor([[1.0, 0.0], [-1.0, 0.0], [1.0, 0.0]])
    assert quantize(torch.zeros(1, 2), tokens).token_ids.tolist() == [0]
    assert quantize(torch.tensor([[1.0, 0.0]]), tokens).token_ids.tolist() == [0]


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 16), st.integers(1, 6), st.integers(1, 5), st.integers(0, 2**31 - 1))
def test_quantize_rows_exact_and_idempotent(k, d, h, seed):
    g = torch.Generator().manual_seed(seed)
    tokens = torch.randn(k, d, generator=g)
    q = quantize(torch.randn(3, h, d, generator=g), tokens)
    assert torch.equal(q.embeddings, tokens[q.token_ids])
    again = quantize(q.embeddings, tokens)
    assert torch.equal(again.token_ids, q.token_ids)
    assert torch.equal(again.embeddings, q.embeddings)


def test_quantize_errors():
    with pytest.raises(ContractViolation):
        quantize(torch.zeros(2, 3), torch.zeros(0, 3))
    with pytest.raises(ContractViolation):
        quantize(torch.zeros(2, 3), torch.zeros(4, 2))
    with pytest.raises(ContractViolation):
        Codebook(0, 4)


def test_codebook_init_range():
    cb = Codebook(16, 8, "upper")
    assert cb.tokens.abs().max() <= 1 / 16 and cb.region == "upper"


def test_vq_loss_zero_and_closed_form():
    x = torch.randn(1, 4, 6)
    z = torch.randn(1, 4, 2, 3)
    total, _ = vq_loss(x, x.clone(), z, z.clone())
    assert total.item() == 0.0
    # x_hat = x, z - q = c everywhere: 2 * h * d * c^2 per frame (one frame here)
    h, d, c = 2, 3, 0.5
    z = torch.zeros(h, d)
    total, parts = vq_loss(x, x.clone(), z, z - c)
    assert total.item() == pytest.approx(2 * h * d * c**2) == 3.0
    assert parts["codebook"].item() == parts["commitment"].item() == 1.5


def test_vq_loss_term_sum_and_symmetry():
    g = torch.Generator().manual_seed(2)
    x, xh = torch.randn(3, 5, generator=g), torch.randn(3, 5, generator=g)
    z, q = torch.randn(3, 1, 4, generator=g), torch.randn(3, 1, 4, generator=g)
    total, p = vq_loss(x, xh, z, q)
    assert total.item() == pytest.approx(((x - xh) ** 2).sum().item() + 2 * ((z - q) ** 2).sum().item(), rel=1e-6)
    _, swapped = vq_loss(x, xh, q, z)
    assert swapped["codebook"].item() == p["commitment"].item()
    assert swapped["commitment"].item() == p["codebook"].item()
    with pytest.raises(ContractViolation):
        vq_loss(x, xh[:2], z, q)


def test_vq_loss_stop_gradients():
    z = torch.randn(2, 1, 3, requires_grad=True)
    q = torch.randn(2, 1, 3, requires_grad=True)
    x = torch.zeros(2, 3)
    _, p = vq_loss(x, x, z, q)
    gz, gq = torch.autograd.grad(p["codebook"], (z, q), allow_unused=True)
    assert gz is None and gq is not None
    gz, gq = torch.autograd.grad(p["commitment"], (z, q), allow_unused=True)
    assert gz is not None and gq is None


def test_straight_through_value_and_gradient():
    z = torch.randn(4, requires_grad=True)
    q = torch.randn(4)
    out = straight_through(z, q)
    # z + (q - z) equals q up to one rounding step
    torch.testing.assert_close(out.detach(), q, rtol=0, atol=1e-6)
    (out * torch.arange(4.0)).sum().backward()
    assert torch.equal(z.grad, torch.arange(4.0))


def _tiny_prior():
    torch.manual_seed(0)
    return RegionPrior(6, "lip", num_tokens=5, code_dim=3, codes_per_frame=2, width=8, heads=2).double()


def test_straight_through_matches_finite_differences():
    prior = _tiny_prior()
    x = torch.randn(1, 4, 6, dtype=torch.float64)
    with torch.no_grad():
        z0 = prior.encode(x)
        offset = quantize(z0, prior.codebook.tokens).embeddings - z0  # assignment held fixed

    def surrogate():
        return ((x - prior.decode(prior.encode(x) + offset)) ** 2).sum()

    prior.zero_grad()
    x_hat, _, _ = prior(x)
    ((x - x_hat) ** 2).sum().backward()
    for name, param in prior.encoder.named_parameters():
        flat = param.data.view(-1)
        for k in range(0, flat.numel(), max(1, flat.numel() // 4)):
            old = flat[k].item()
            h = 1e-6
            with torch.no_grad():
                flat[k] = old + h
                up = surrogate().item()
                flat[k] = old - h
                down = surrogate().item()
                flat[k] = old
            fd = (up - down) / (2 * h)
            assert param.grad.view(-1)[k].item() == pytest.approx(fd, rel=1e-3, abs=1e-8), name


def test_encode_decode_shape_and_determinism():
    prior = RegionPrior(12, "upper", num_tokens=8, code_dim=4)
    m = np.random.default_rng(0).normal(size=(7, 12)).astype(np.float32)
    out = encode_decode(m, prior)
    assert out.shape == m.shape and np.all(np.isfinite(out))
    np.testing.assert_array_equal(out, encode_decode(m, prior))
    with pytest.raises(ContractViolation):
        encode_decode(m[:, :6], prior)


def test_encoder_is_causal():
    prior = RegionPrior(6, "lip", num_tokens=4, code_dim=3)
    x = torch.randn(1, 8, 6)
    y = x.clone()
    y[:, 5:] += 1.0
    with torch.no_grad():
        assert torch.equal(prior.encode(x)[:, :5], prior.encode(y)[:, :5])


def test_token_usage_counts_every_code(corpus):
    prior = RegionPrior(3 * corpus.partition.lip_count, "lip", num_tokens=8, code_dim=4, codes_per_frame=2)
    motions = [np.zeros((5, 3 * corpus.partition.lip_count)), np.ones((3, 3 * corpus.partition.lip_count))]
    assert token_usage(prior, motions).sum() == (5 + 3) * 2


def test_trained_prior_reconstructs(corpus, priors):
    from cdface.trainer import TrainConfig, _region_data, load_prior

    for region, ck in priors.items():
        prior = load_prior(ck, TrainConfig.from_dict(ck.config), corpus)
        data = _region_data(corpus, region)
        err = np.concatenate([(encode_decode(m, prior) - m).reshape(-1) for m in data])
        scale = np.sqrt(np.mean(np.concatenate([m.reshape(-1) for m in data]) ** 2))
        assert np.sqrt(np.mean(err**2)) < 0.3 * scale, region
