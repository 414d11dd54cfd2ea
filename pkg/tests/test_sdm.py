import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import randomize_, state_numpy
from salseg import oracles
from salseg.core import (
    AttentionMap,
    CorrelationVolume,
    EmbeddingPair,
    GradientError,
    LabelError,
    Stage,
    ValidationError,
    ZeroNormError,
)
from salseg.encoders import DatasetSpec, generate_scene
from salseg.sdm import (
    CorrelationLift,
    CrossAttentionStack,
    ItmHead,
    attention_gradient,
    correlation,
    cosine_map,
    cross_attend,
    itm_loss,
    itm_objective,
    itm_pair_losses,
    matching_score_objective,
    one_hot_match,
    sample_itm_pairs,
    saliency,
    select_tokens,
    split_volume,
)


def _pair(h, w, n, d, gen=None):
    return EmbeddingPair(torch.randn(h, w, d, generator=gen), torch.randn(n, d, generator=gen))


def test_identical_image_tokens_give_uniform_attention():
    stack = randomize_(CrossAttentionStack(6, 16, 4, 3))
    img = torch.randn(6).expand(3, 4, 6).clone()
    attn = cross_attend(EmbeddingPair(img, torch.randn(2, 6)), stack)
    torch.testing.assert_close(attn.values, torch.full((12, 2), 1 / 12), atol=1e-6, rtol=0)


@pytest.mark.parametrize("seed", range(5))
def test_cross_attend_matches_oracle(f64, seed):
    g = torch.Generator().manual_seed(seed)
    stack = randomize_(CrossAttentionStack(5, 8, 2, 3), generator=g)
    pair = _pair(2, 2, 3, 5, g)
    got = cross_attend(pair, stack).values.detach().numpy()
    ref = oracles.naive_cross_attention(state_numpy(stack), pair.image.reshape(4, 5).numpy(),
                                        pair.text.numpy(), 2, 3)
    np.testing.assert_allclose(got, ref, atol=1e-6)


def test_single_class_single_head_hand_oracle(f64):
    stack = randomize_(CrossAttentionStack(3, 4, 1, 1))
    pair = _pair(2, 2, 1, 3)
    w = state_numpy(stack)
    img = pair.image.reshape(4, 3).numpy() @ w["embed.weight"].T
    txt = pair.text.numpy() @ w["embed.weight"].T
    ln = lambda x, p: ((x - x.mean(-1, keepdims=True)) / np.sqrt(x.var(-1, keepdims=True) + 1e-5)
                       * w[p + ".weight"] + w[p + ".bias"])
    q = ln(txt, "layers.0.norm_q") @ w["layers.0.q.weight"].T
    k = ln(img, "layers.0.norm_kv") @ w["layers.0.k.weight"].T
    logits = (q @ k.T)[0] / 2.0
    expected = np.exp(logits) / np.exp(logits).sum()
    np.testing.assert_allclose(cross_attend(pair, stack).values[:, 0].detach().numpy(), expected, atol=1e-6)


def test_attention_argmax_inside_class_region():
    torch.manual_seed(0)
    stack = CrossAttentionStack(32, 64, 8, 3)
    for i in range(4):
        s = generate_scene(DatasetSpec(n_scenes=4), i)
        attn = cross_attend(s.pair, stack).values
        labels = s.gt_grid.flatten()
        for c in labels.unique().tolist():
            assert labels[attn[:, c].argmax()] == c


def test_cross_attend_shape_error():
    from salseg.core import ShapeError
    with pytest.raises(ShapeError):
        cross_attend(_pair(2, 2, 2, 5), CrossAttentionStack(6, 8, 2, 3))


# --------------------------------------------------------------------- ITM

def _attn(hw, n, gen=None):
    return AttentionMap(torch.softmax(torch.randn(hw, n, generator=gen), 0))


def test_itm_uniform_is_ln2():
    head = ItmHead(4)
    with torch.no_grad():
        head.net[2].weight.zero_()
        head.net[2].bias.zero_()
    labels = one_hot_match(torch.tensor([True, False, True]))
    assert itm_loss(_attn(4, 3), labels, head).item() == pytest.approx(math.log(2), abs=1e-7)


def test_itm_matching_prediction_is_zero():
    head = ItmHead(4)
    with torch.no_grad():
        head.net[2].weight.zero_()
        head.net[2].bias.copy_(torch.tensor([-50.0, 50.0]))
    labels = one_hot_match(torch.tensor([True, True]))
    assert itm_loss(_attn(4, 2), labels, head).item() < 1e-12


@pytest.mark.parametrize("seed", range(5))
def test_itm_matches_loop_oracle(seed):
    g = torch.Generator().manual_seed(seed)
    head = randomize_(ItmHead(6), generator=g)
    attn = _attn(6, 4, g)
    present = torch.tensor([True, False, False, True])
    labels = one_hot_match(present)
    logits = head(attn.values).detach().double().numpy()
    ref = []
    for row, lab in zip(logits, labels.numpy()):
        m = max(row)
        lse = m + math.log(sum(math.exp(v - m) for v in row))
        ref.append(-sum(l * (v - lse) for v, l in zip(row, lab)))
    assert itm_loss(attn, labels, head).item() == pytest.approx(sum(ref) / len(ref), rel=1e-5)
    pairs = torch.tensor([0, 2])
    assert itm_loss(attn, labels, head, pairs).item() == pytest.approx((ref[0] + ref[2]) / 2, rel=1e-5)


@pytest.mark.parametrize("labels", [torch.tensor([[1.0, 1.0]]), torch.tensor([[0.5, 0.5]]),
                                    torch.tensor([1.0, 0.0])])
def test_itm_rejects_non_one_hot(labels):
    with pytest.raises(LabelError):
        itm_pair_losses(torch.zeros(1, 2), labels)


def test_itm_head_output_is_distribution():
    probs = torch.softmax(ItmHead(4)(_attn(4, 3).values), -1)
    torch.testing.assert_close(probs.sum(-1), torch.ones(3))


def test_itm_pair_sampling_balanced():
    g = torch.Generator().manual_seed(0)
    present = torch.tensor([True, False, False, True, False, False])
    pairs = sample_itm_pairs(present, g)
    assert len(pairs) == 4 and {0, 3} <= set(pairs.tolist())
    assert set(sample_itm_pairs(torch.ones(3, dtype=torch.bool), g).tolist()) == {0, 1, 2}


# ---------------------------------------------------------------- saliency

def test_constant_objective_raises():
    with pytest.raises(GradientError):
        saliency(_attn(4, 2), lambda a: torch.tensor(3.0), (2, 2))
    with pytest.raises(GradientError):
        saliency(_attn(4, 2), lambda a: a.sum() * 0 + torch.ones(2), (2, 2))


def test_objective_independent_of_value_gives_zero_map():
    attn = _attn(4, 2)
    sal = saliency(attn, lambda a: (a * 0).sum(), (2, 2))
    assert sal.maps.eq(0).all()


def test_sum_objective_gives_attention():
    attn = _attn(6, 2)
    sal = saliency(attn, lambda a: a.sum(), (2, 3))
    torch.testing.assert_close(sal.maps, attn.values.reshape(2, 3, 2))


def test_saliency_is_relu_grad_times_attention():
    attn = _attn(4, 2)
    weight = torch.tensor([[1.0, -2.0], [0.5, 3.0], [-1.0, 0.0], [2.0, -0.5]])
    sal = saliency(attn, lambda a: (a * weight).sum(), (2, 2))
    torch.testing.assert_close(sal.maps.reshape(4, 2), weight.clamp(min=0) * attn.values)


@pytest.mark.parametrize("seed", range(8))
def test_gradient_matches_finite_differences(f64, seed):
    g = torch.Generator().manual_seed(seed)
    head = randomize_(ItmHead(4), generator=g)
    attn = _attn(4, 2, g)
    labels = one_hot_match(torch.tensor([True, False]))
    for objective in (itm_objective(head, labels), matching_score_objective(head)):
        grad = attention_gradient(attn, objective).numpy()
        fd = oracles.finite_difference(lambda a: objective(torch.from_numpy(a)).item(), attn.values.numpy())
        np.testing.assert_allclose(grad, fd, rtol=1e-3, atol=1e-8)


def test_gradient_does_not_reach_upstream():
    stack = CrossAttentionStack(4, 8, 2, 3)
    pair = _pair(2, 2, 2, 4)
    head = ItmHead(4)
    attn = cross_attend(pair, stack)
    saliency(attn, matching_score_objective(head), (2, 2))
    assert all(p.grad is None for p in stack.parameters())
    assert all(p.grad is None for p in head.parameters())


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_saliency_non_negative(seed):
    g = torch.Generator().manual_seed(seed)
    head = randomize_(ItmHead(6), scale=2.0, generator=g)
    sal = saliency(_attn(6, 3, g), matching_score_objective(head), (2, 3))
    assert (sal.maps >= 0).all()


# ------------------------------------------------------------- correlation

def test_cosine_self_similarity_and_layout():
    s = generate_scene(DatasetSpec(n_scenes=1), 0)
    cos = cosine_map(s.pair)
    expected = torch.nn.functional.one_hot(s.gt_grid, 3).to(cos.dtype)
    torch.testing.assert_close(cos, expected, atol=1e-6, rtol=0)
    pair = EmbeddingPair(s.pair.text[1].expand(1, 1, -1).clone(), s.pair.text)
    assert cosine_map(pair)[0, 0, 1].item() == pytest.approx(1.0, abs=1e-6)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 100))
def test_cosine_scale_invariance(seed, scale):
    g = torch.Generator().manual_seed(seed)
    pair = _pair(3, 3, 2, 4, g)
    scaled = pair.image.clone()
    scaled[1, 2] *= scale
    lift = CorrelationLift(5)
    a = correlation(pair, lift).values
    b = correlation(EmbeddingPair(scaled, pair.text), lift).values
    torch.testing.assert_close(a, b, atol=1e-6, rtol=0)


def test_zero_norm_rejected():
    img = torch.randn(2, 2, 3)
    img[0, 1] = 0
    with pytest.raises(ZeroNormError):
        cosine_map(EmbeddingPair(img, torch.randn(2, 3)))
    with pytest.raises(ZeroNormError):
        cosine_map(EmbeddingPair(torch.randn(2, 2, 3), torch.zeros(2, 3)))


def test_correlation_shape_and_stage():
    corr = correlation(_pair(3, 4, 2, 5), CorrelationLift(7))
    assert corr.shape == (3, 4, 2, 7) and corr.stage is Stage.RAW


# ------------------------------------------------------------------ top-k

def test_topk_examples():
    part = select_tokens(torch.tensor([0.9, 0.1, 0.4, 0.4]).reshape(2, 2, 1), 2)
    assert part.fg_mask[:, 0].nonzero().flatten().tolist() == [0, 2]
    part = select_tokens(torch.zeros(2, 2, 1), 2)
    assert part.fg_mask[:, 0].tolist() == [True, True, False, False]
    part = select_tokens(torch.rand(2, 2, 3), 4)
    assert not part.bg_mask.any()
    for k in (0, 5):
        with pytest.raises(ValidationError):
            select_tokens(torch.rand(2, 2, 1), k)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 3), st.data())
def test_topk_matches_sort_oracle(h, w, n, data):
    k = data.draw(st.integers(1, h * w))
    # a small value alphabet forces plenty of ties
    vals = data.draw(st.lists(st.sampled_from([0.0, 0.25, 0.5, 1.0]), min_size=h * w * n, max_size=h * w * n))
    sal = torch.tensor(vals).reshape(h, w, n)
    part = select_tokens(sal, k)
    for c in range(n):
        expected = oracles.naive_topk(sal.reshape(-1, n)[:, c].tolist(), k)
        assert part.fg_mask[:, c].nonzero().flatten().tolist() == expected


# ------------------------------------------------------------------ split

@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 9))
def test_split_identity(seed, k):
    g = torch.Generator().manual_seed(seed)
    corr = CorrelationVolume(torch.randn(3, 3, 2, 4, generator=g))
    part = select_tokens(torch.rand(3, 3, 2, generator=g), k)
    c_f, c_b = split_volume(corr, part)
    assert torch.equal(c_f.values + c_b.values, corr.values)
    vals = corr.values.numpy()
    mask = part.fg_mask.reshape(3, 3, 2).numpy()
    fg_sum = sum(abs(vals[i, j, c]).sum() for i in range(3) for j in range(3) for c in range(2) if mask[i, j, c])
    bg_sum = sum(abs(vals[i, j, c]).sum() for i in range(3) for j in range(3) for c in range(2) if not mask[i, j, c])
    assert c_f.values.abs().sum().item() == pytest.approx(fg_sum, rel=1e-5)
    assert c_b.values.abs().sum().item() == pytest.approx(bg_sum, rel=1e-5)


def test_split_all_foreground():
    corr = CorrelationVolume(torch.randn(2, 2, 1, 3))
    c_f, c_b = split_volume(corr, select_tokens(torch.rand(2, 2, 1), 4))
    assert c_b.values.eq(0).all() and torch.equal(c_f.values, corr.values)
