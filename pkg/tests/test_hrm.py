import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from torch import nn

from conftest import randomize_, state_numpy
from salseg import oracles
from salseg.core import (
    Branch,
    CorrelationVolume,
    EmptyBranchError,
    MaskError,
    PrototypeSet,
    ShapeError,
    Stage,
    TokenPartition,
    ValidationError,
)
from salseg.hrm import (
    BranchRefiner,
    WindowAttentionBlock,
    _mlp,
    category_prototype,
    fuse,
    pixel_refine,
    semantic_prototype,
)
from salseg.sdm import select_tokens, split_volume


def _blocks(d, ws, gen=None, heads=2):
    return nn.ModuleList([randomize_(WindowAttentionBlock(d, ws, False, heads), generator=gen),
                          randomize_(WindowAttentionBlock(d, ws, True, heads), generator=gen)])


def _partition(h, w, n, k, gen=None):
    return select_tokens(torch.rand(h, w, n, generator=gen), k)


@pytest.mark.parametrize("seed", range(6))
@pytest.mark.parametrize("shift", [False, True])
def test_window_block_matches_oracle(f64, seed, shift):
    g = torch.Generator().manual_seed(seed)
    blk = randomize_(WindowAttentionBlock(4, 2, shift, n_heads=2), generator=g)
    x = torch.randn(1, 4, 4, 4, generator=g)
    vis = torch.rand(1, 4, 4, generator=g) > 0.4
    got = blk(x, vis)[0].detach().numpy()
    ref = oracles.naive_window_block(state_numpy(blk), x[0].numpy(), vis[0].numpy(), 2, blk.shift, 2)
    np.testing.assert_allclose(got, ref, atol=1e-5)


@pytest.mark.parametrize("seed", range(4))
def test_pixel_refine_matches_oracle(f64, seed):
    g = torch.Generator().manual_seed(seed)
    blocks = _blocks(4, 2, g)
    corr = CorrelationVolume(torch.randn(4, 4, 2, 4, generator=g))
    part = _partition(4, 4, 2, 6, g)
    c_f, _ = split_volume(corr, part)
    got = pixel_refine(c_f, part, Branch.FOREGROUND, blocks).values.detach().numpy()
    vis = part.grid_mask(4, 4).numpy()
    for c in range(2):
        ref = c_f.values[:, :, c].numpy()
        for blk in blocks:
            ref = oracles.naive_window_block(state_numpy(blk), ref, vis[:, :, c], 2, blk.shift, 2)
        np.testing.assert_allclose(got[:, :, c], ref, atol=1e-5)


def test_identity_block_returns_input():
    blk = randomize_(WindowAttentionBlock(4, 2, True)).identity_()
    x = torch.randn(2, 4, 4, 4)
    assert torch.equal(blk(x, torch.rand(2, 4, 4) > 0.5), x)


def test_single_token_window_with_identity_value_is_residual_double():
    blk = WindowAttentionBlock(2, 1, False, n_heads=1)
    with torch.no_grad():
        for p in blk.parameters():
            p.zero_()
        blk.norm1.weight.fill_(1.0)
        blk.qkv.weight[4:].copy_(torch.eye(2))  # value = normalized token
        blk.proj.weight.copy_(torch.eye(2))
    x = torch.tensor([[[[3.0, 1.0]]]])
    # one token per window: attention is exactly 1 on itself, so the update is its own value
    expected = x + torch.nn.functional.layer_norm(x, (2,))
    torch.testing.assert_close(blk(x), expected)


def test_foreground_branch_passes_background_through():
    blocks = _blocks(4, 2)
    corr = CorrelationVolume(torch.randn(4, 4, 3, 4))
    part = _partition(4, 4, 3, 5)
    c_f, c_b = split_volume(corr, part)
    out_f = pixel_refine(c_f, part, Branch.FOREGROUND, blocks).values
    out_b = pixel_refine(c_b, part, Branch.BACKGROUND, blocks).values
    bg = part.grid_mask(4, 4, foreground=False)
    assert torch.equal(out_f[bg], c_f.values[bg])
    assert torch.equal(out_b[~bg], c_b.values[~bg])


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 15))
def test_mask_non_leakage(seed, k):
    g = torch.Generator().manual_seed(seed)
    blocks = _blocks(4, 2, g)
    vals = torch.randn(4, 4, 2, 4, generator=g)
    part = _partition(4, 4, 2, k, g)
    bg = part.grid_mask(4, 4, foreground=False)[..., None]
    noisy = torch.where(bg, vals + 10 * torch.randn(vals.shape, generator=g), vals)
    a = pixel_refine(CorrelationVolume(vals), part, Branch.FOREGROUND, blocks).values
    b = pixel_refine(CorrelationVolume(noisy), part, Branch.FOREGROUND, blocks).values
    fg = ~bg[..., 0]
    assert (a[fg] - b[fg]).abs().max().item() < 1e-7


def test_masked_keys_get_zero_attention_probability(f64):
    blk = randomize_(WindowAttentionBlock(4, 2, False, n_heads=1))
    x = torch.randn(1, 2, 2, 4)
    vis = torch.tensor([[[True, False], [True, True]]])
    _, probs = oracles.naive_attention(np.zeros((1, 1)), np.zeros((4, 1)), np.zeros((4, 1)),
                                       visible=vis.flatten().numpy())
    assert probs[0, 1] == 0
    # changing the masked token's value cannot move visible outputs
    x2 = x.clone()
    x2[0, 0, 1] += 100
    torch.testing.assert_close(blk(x, vis)[vis], blk(x2, vis)[vis], atol=1e-12, rtol=0)


def test_all_invisible_window_is_identity():
    blk = randomize_(WindowAttentionBlock(4, 2))
    x = torch.randn(1, 4, 4, 4)
    vis = torch.ones(1, 4, 4, dtype=torch.bool)
    vis[0, :2, :2] = False
    out = blk(x, vis)
    assert torch.equal(out[0, :2, :2], x[0, :2, :2])
    assert torch.isfinite(out).all()


def test_mask_shape_checked():
    with pytest.raises(MaskError):
        WindowAttentionBlock(4, 2)(torch.randn(1, 4, 4, 4), torch.ones(1, 3, 4, dtype=torch.bool))


def test_padding_for_indivisible_grid(f64):
    blk = randomize_(WindowAttentionBlock(4, 4, True))
    x = torch.randn(2, 5, 6, 4)
    out = blk(x)
    assert out.shape == x.shape and torch.isfinite(out).all()


def test_shift_coverage():
    plain, shifted = WindowAttentionBlock(4, 4, False), WindowAttentionBlock(4, 4, True)
    first = plain.window_sets(12, 12)
    second = shifted.window_sets(12, 12)
    assert sorted(len(s) for s in first) == [16] * 9
    covered = lambda a, b: any(a in s and b in s for s in first)  # noqa: E731
    new_pairs = [(a, b) for s in second for a in s for b in s if not covered(a, b)]
    assert new_pairs
    # every cell belongs to exactly one shifted group
    cells = [c for s in second for c in s]
    assert len(cells) == len(set(cells)) == 144


# ---------------------------------------------------------------- prototypes

def _pixel(vals):
    return CorrelationVolume(vals, Stage.PIXEL)


def test_constant_volume_prototype_is_twice_value():
    vol = _pixel(torch.full((3, 3, 2, 4), 1.5))
    p = category_prototype(vol, nn.Identity(), nn.Identity())
    torch.testing.assert_close(p, torch.full((1, 2, 4), 3.0))


@pytest.mark.parametrize("seed", range(5))
def test_category_pooling_matches_oracle(f64, seed):
    g = torch.Generator().manual_seed(seed)
    vals = torch.randn(2, 2, 1, 2, generator=g)
    vis = torch.rand(2, 2, 1, generator=g) > 0.3
    vis[0, 0, 0] = True
    mlp_a, mlp_m = randomize_(_mlp(2, 2, 2), generator=g), randomize_(_mlp(2, 2, 2), generator=g)
    got = category_prototype(_pixel(vals), mlp_a, mlp_m, vis)[0, 0].detach().numpy()
    avg, mx = oracles.naive_pool(vals[:, :, 0].numpy(), vis[:, :, 0].numpy())
    sa, sm = state_numpy(mlp_a), state_numpy(mlp_m)
    ref = (oracles.naive_mlp(avg, sa["0.weight"], sa["0.bias"], sa["2.weight"], sa["2.bias"])
           + oracles.naive_mlp(mx, sm["0.weight"], sm["0.bias"], sm["2.weight"], sm["2.bias"]))
    np.testing.assert_allclose(got, ref, atol=1e-6)


def test_category_prototype_spatial_permutation_invariance():
    vals = torch.randn(3, 4, 2, 5)
    mlp_a, mlp_m = _mlp(5, 5, 5), _mlp(5, 5, 5)
    perm = torch.randperm(12)
    shuffled = vals.reshape(12, 2, 5)[perm].reshape(3, 4, 2, 5)
    torch.testing.assert_close(category_prototype(_pixel(vals), mlp_a, mlp_m),
                               category_prototype(_pixel(shuffled), mlp_a, mlp_m))


def test_empty_branch_raises():
    vis = torch.ones(2, 2, 2, dtype=torch.bool)
    vis[:, :, 1] = False
    with pytest.raises(EmptyBranchError):
        category_prototype(_pixel(torch.randn(2, 2, 2, 3)), nn.Identity(), nn.Identity(), vis)


def test_semantic_prototype_single_class_and_shape():
    p_c = torch.randn(1, 1, 4)
    torch.testing.assert_close(semantic_prototype(p_c, nn.Identity(), nn.Identity()), 2 * p_c)
    with pytest.raises(ShapeError):
        semantic_prototype(torch.randn(2, 3, 4), nn.Identity(), nn.Identity())


@pytest.mark.parametrize("seed", range(5))
def test_semantic_prototype_matches_oracle_and_is_order_free(f64, seed):
    g = torch.Generator().manual_seed(seed)
    p_c = torch.randn(1, 3, 4, generator=g)
    mlp_a, mlp_m = randomize_(_mlp(4, 4, 4), generator=g), randomize_(_mlp(4, 4, 4), generator=g)
    got = semantic_prototype(p_c, mlp_a, mlp_m)
    avg, mx = oracles.naive_class_pool(p_c[0].numpy())
    sa, sm = state_numpy(mlp_a), state_numpy(mlp_m)
    ref = (oracles.naive_mlp(avg, sa["0.weight"], sa["0.bias"], sa["2.weight"], sa["2.bias"])
           + oracles.naive_mlp(mx, sm["0.weight"], sm["0.bias"], sm["2.weight"], sm["2.bias"]))
    np.testing.assert_allclose(got[0, 0].detach().numpy(), ref, atol=1e-6)
    torch.testing.assert_close(semantic_prototype(p_c[:, [2, 0, 1]], mlp_a, mlp_m), got)


# ------------------------------------------------------------------- fusion

def _protos(n, d, gen=None):
    return PrototypeSet(torch.randn(1, n, d, generator=gen), torch.randn(1, 1, d, generator=gen))


def test_zero_gate_mlp_halves_volume():
    mlp = _mlp(8, 4, 4)
    with torch.no_grad():
        mlp[2].weight.zero_()
        mlp[2].bias.zero_()
    vol = _pixel(torch.randn(3, 3, 2, 4))
    out = fuse(vol, _protos(2, 4), mlp)
    assert torch.equal(out.values, 0.5 * vol.values) and out.stage is Stage.FUSED


def test_saturated_gate_passes_volume():
    mlp = _mlp(8, 4, 4)
    with torch.no_grad():
        mlp[2].weight.zero_()
        mlp[2].bias.fill_(60.0)
    vol = _pixel(torch.randn(3, 3, 2, 4))
    torch.testing.assert_close(fuse(vol, _protos(2, 4), mlp).values, vol.values)


@pytest.mark.parametrize("seed", range(5))
def test_fuse_matches_oracle(f64, seed):
    g = torch.Generator().manual_seed(seed)
    mlp = randomize_(_mlp(6, 3, 3), generator=g)
    vol = _pixel(torch.randn(2, 3, 2, 3, generator=g))
    protos = _protos(2, 3, g)
    s = state_numpy(mlp)
    ref = oracles.naive_fuse(vol.values.numpy(), protos.category[0].numpy(), protos.semantic[0, 0].numpy(),
                             s["0.weight"], s["0.bias"], s["2.weight"], s["2.bias"])
    np.testing.assert_allclose(fuse(vol, protos, mlp).values.detach().numpy(), ref, atol=1e-6)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_gate_shrinks_magnitudes(seed):
    # float64 so moderate logits cannot round the gate to exactly 0 or 1
    torch.set_default_dtype(torch.float64)
    try:
        _check_gate_bounds(seed)
    finally:
        torch.set_default_dtype(torch.float32)


def _check_gate_bounds(seed):
    g = torch.Generator().manual_seed(seed)
    mlp = randomize_(_mlp(8, 4, 4), scale=1.0, generator=g)
    vol = _pixel(torch.randn(2, 2, 2, 4, generator=g))
    out = fuse(vol, _protos(2, 4, g), mlp).values
    assert (out.abs() <= vol.values.abs()).all()
    nz = vol.values != 0
    ratio = out[nz] / vol.values[nz]
    assert ((ratio > 0) & (ratio < 1)).all()


def test_fuse_shape_error():
    with pytest.raises(ShapeError):
        fuse(_pixel(torch.randn(2, 2, 3, 4)), _protos(2, 4), _mlp(8, 4, 4))


def test_refine_then_fuse_gradient(f64):
    g = torch.Generator().manual_seed(3)
    ref = randomize_(BranchRefiner(2, 2, n_heads=1), generator=g)
    part = TokenPartition(torch.tensor([[True], [False], [True], [True]]), k=3)
    weight = torch.randn(2, 2, 1, 2, generator=g)

    def f(x):
        return (ref(CorrelationVolume(x), part, Branch.FOREGROUND).values * weight).sum()

    x = torch.randn(2, 2, 1, 2, generator=g, requires_grad=True)
    (grad,) = torch.autograd.grad(f(x), x)
    fd = oracles.finite_difference(lambda a: f(torch.from_numpy(a)).item(), x.detach().numpy(), h=1e-6)
    np.testing.assert_allclose(grad.numpy(), fd, rtol=1e-3, atol=1e-8)


def test_refiner_switches():
    vol = CorrelationVolume(torch.randn(4, 4, 2, 4))
    off = BranchRefiner(4, 2, pixel=False, category=False, semantic=False)
    out = off(vol, None, Branch.ALL)
    assert torch.equal(out.values, vol.values) and out.stage is Stage.FUSED
    with pytest.raises(ValueError):
        BranchRefiner(4, 2, category=False, semantic=True)
    trace = []
    BranchRefiner(4, 2, semantic=False)(vol, None, Branch.ALL, trace)
    assert trace == ["pixel_refine[all]", "category_prototype[all]", "fuse[all]"]


def test_stage_order_required():
    with pytest.raises(ValidationError):
        pixel_refine(CorrelationVolume(torch.randn(2, 2, 1, 4), Stage.PIXEL), None, Branch.ALL, _blocks(4, 2))
