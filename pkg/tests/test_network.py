import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from dstdnn.config import ModelConfig, preset
from dstdnn.errors import ConfigError, InvalidInputError, ShapeError
from dstdnn.network import (ASP_EPS, DSTDNN, AttentiveStatsPool, EmbeddingHead, GlobalBlock,
                            LocalBlock, Proj, Res2Conv, SEModule, Stem, count_parameters,
                            fuse_branches, model_parameter_count)
from dstdnn.dynamic import DynamicGlobalFilter

D = torch.float64


def identity_bn(bn):
    bn.eval()
    bn.eps = 0.0
    with torch.no_grad():
        bn.running_mean.zero_()
        bn.running_var.fill_(1.0)
        bn.weight.fill_(1.0)
        bn.bias.zero_()


def identity_proj(p: Proj):
    with torch.no_grad():
        p.conv.weight.copy_(torch.eye(p.conv.out_channels, p.conv.in_channels)[..., None])
        p.conv.bias.zero_()
    identity_bn(p.bn)


def zero_all(m):
    with torch.no_grad():
        for p in m.parameters():
            p.zero_()


# --------------------------------------------------------------------------
# stem


def test_stem_shapes_and_split():
    stem = Stem(80, 8).double()
    x = torch.randn(2, 80, 50, dtype=D)
    xl, xg = stem(x)
    assert xl.shape == xg.shape == (2, 4, 50)
    assert torch.equal(torch.cat([xl, xg], 1), stem.pre_split(x))


def test_stem_zero_input_gives_zero():
    stem = Stem(80, 8).double().eval()
    with torch.no_grad():
        stem.conv.bias.zero_()
    xl, xg = stem(torch.zeros(1, 80, 30, dtype=D))
    assert torch.all(xl == 0) and torch.all(xg == 0)


def test_stem_rejects_odd_width_and_wrong_input():
    with pytest.raises(ConfigError):
        Stem(80, 7)
    with pytest.raises(ShapeError):
        Stem(80, 8)(torch.randn(1, 40, 20))


# --------------------------------------------------------------------------
# Res2Conv


def test_res2_single_scale_is_identity():
    r = Res2Conv(6, 1).double()
    x = torch.randn(2, 6, 11, dtype=D)
    assert torch.equal(r(x), x)


def test_res2_zero_in_zero_out():
    r = Res2Conv(8, 4).double()
    for conv in r.convs:
        torch.nn.init.zeros_(conv.bias)
    r.eval()
    assert torch.all(r(torch.zeros(1, 8, 9, dtype=D)) == 0)


def test_res2_two_group_recursion_by_hand():
    r = Res2Conv(4, 2).double()
    with torch.no_grad():
        r.convs[0].weight.zero_()
        r.convs[0].weight[:, :, 1] = torch.eye(2)
        r.convs[0].bias.zero_()
    identity_bn(r.bns[0])
    x = torch.randn(1, 4, 5, dtype=D)
    x1, x2 = x[:, :2], x[:, 2:]
    want = torch.cat([x1, torch.relu(x2 + x1)], 1)
    assert torch.allclose(r(x), want, atol=1e-15)


def test_res2_rejects_indivisible_width():
    with pytest.raises(ConfigError):
        Res2Conv(6, 4)


# --------------------------------------------------------------------------
# SE


def test_se_zero_weights_halve_input():
    se = SEModule(8).double()
    zero_all(se)
    x = torch.randn(2, 8, 7, dtype=D)
    assert torch.allclose(se(x), x / 2)


def test_se_gates_ignore_frame_order():
    se = SEModule(8).double()
    x = torch.randn(2, 8, 13, dtype=D)
    assert torch.allclose(se.gates(x), se.gates(x[..., torch.randperm(13)]), atol=1e-14)


def test_se_hand_gate():
    se = SEModule(2).double()
    zero_all(se)
    with torch.no_grad():
        se.fc2.bias.copy_(torch.tensor([-1e4, 1e4]))
    x = torch.randn(1, 2, 6, dtype=D)
    y = se(x)
    assert torch.all(y[:, 0] == 0)
    assert torch.equal(y[:, 1], x[:, 1])


def test_se_bottleneck_floor():
    assert SEModule(32).fc1.out_features == 4
    assert SEModule(256).fc1.out_features == 16


# --------------------------------------------------------------------------
# blocks


def test_local_block_shape_and_zero_params():
    b = LocalBlock(8, 2).double()
    x = torch.randn(3, 8, 20, dtype=D)
    assert b(x).shape == x.shape
    zero_all(b)
    b.eval()
    assert torch.all(b(x) == 0)


def test_local_block_with_identity_projections():
    b = LocalBlock(8, 4).double().eval()
    identity_proj(b.proj1)
    identity_proj(b.proj2)
    x = torch.rand(2, 8, 15, dtype=D)  # non-negative so the projection ReLUs are inert
    assert torch.allclose(b(x), b.se(b.res2(x)), atol=1e-14)


def test_global_block_all_pass_doubles_input():
    b = GlobalBlock(6, 30, 1, 0.0).double().eval()
    identity_proj(b.proj1)
    identity_proj(b.proj2)
    with torch.no_grad():
        b.dgf.experts.zero_()
        b.dgf.experts[..., 0] = 1.0
    x = torch.rand(2, 6, 30, dtype=D)
    assert torch.allclose(b(x), 2 * x, atol=1e-12)


def test_global_block_eval_is_deterministic():
    b = GlobalBlock(6, 30, 3, 0.5).double().eval()
    x = torch.randn(2, 6, 30, dtype=D)
    assert torch.equal(b(x), b(x))


def test_global_block_zero_ratio_train_equals_eval():
    b = GlobalBlock(6, 30, 3, 0.0).double()
    x = torch.randn(2, 6, 30, dtype=D)
    b.train()
    for m in b.modules():
        if isinstance(m, torch.nn.BatchNorm1d):
            m.eval()  # frozen statistics
    y_train = b(x)
    assert b.dgf.training
    assert torch.equal(y_train, b.eval()(x))


def test_global_path_is_shift_covariant():
    layer = DynamicGlobalFilter(4, 32, 3).double().eval()
    with torch.no_grad():
        layer.experts.normal_()
    x = torch.randn(2, 4, 32, dtype=D)
    shifted = layer(torch.roll(x, 5, dims=-1))
    assert torch.allclose(shifted, torch.roll(layer(x), 5, dims=-1), atol=1e-12)


# --------------------------------------------------------------------------
# fusion


def test_fusion_examples():
    v = torch.randn(2, 3, 4, dtype=D)
    a, b = fuse_branches(v, v)
    assert torch.allclose(a, v) and torch.allclose(b, v)
    a, b = fuse_branches(v, torch.zeros_like(v))
    assert torch.allclose(a, 0.8 * v)
    l, g = torch.randn(2, 3, 4, dtype=D), torch.randn(2, 3, 4, dtype=D)
    a, b = fuse_branches(l, g)
    assert a[1, 2, 3] == 0.8 * l[1, 2, 3] + 0.2 * g[1, 2, 3]
    assert b[0, 1, 2] == 0.2 * l[0, 1, 2] + 0.8 * g[0, 1, 2]
    with pytest.raises(ShapeError):
        fuse_branches(l, g[..., :2])


def test_fusion_weight_swap_exchanges_branches():
    l, g = torch.randn(2, 3, 4, dtype=D), torch.randn(2, 3, 4, dtype=D)
    a, b = fuse_branches(l, g, (0.8, 0.2))
    a2, b2 = fuse_branches(g, l, (0.2, 0.8))
    assert torch.equal(a, a2) and torch.equal(b, b2)


def test_single_pair_network_is_branch_symmetric():
    # Exchanging the stem halves and the fusion weights leaves every block
    # input unchanged, so the embedding is unchanged.
    cfg = ModelConfig(n_block_pairs=1, channels=8, res2_scales=[2], experts=[2], sparse_ratios=[0.0],
                      mfa_dim=16, filter_frames=20)
    m = DSTDNN(cfg).double().eval()
    swapped = DSTDNN(ModelConfig.from_dict({**cfg.to_dict(), "fusion_weights": [0.2, 0.8]})).double().eval()
    swapped.load_state_dict(m.state_dict())
    perm = torch.cat([torch.arange(4, 8), torch.arange(4)])
    with torch.no_grad():
        for name in ("weight", "bias"):
            getattr(swapped.stem.conv, name).copy_(getattr(m.stem.conv, name)[perm])
            getattr(swapped.stem.bn, name).copy_(getattr(m.stem.bn, name)[perm])
        swapped.stem.bn.running_mean.copy_(m.stem.bn.running_mean[perm])
        swapped.stem.bn.running_var.copy_(m.stem.bn.running_var[perm])
    x = torch.randn(2, 80, 20, dtype=D)
    assert torch.allclose(m(x), swapped(x), atol=1e-12)


# --------------------------------------------------------------------------
# MFA, pooling, head


def test_mfa_projection_shapes_and_selection():
    mfa = Proj(24, 10).double().eval()
    outs = [torch.randn(1, 8, 12, dtype=D) for _ in range(3)]
    cat = torch.cat(outs, 1)
    assert cat.shape[1] == 24
    assert mfa(cat).shape == (1, 10, 12)
    with torch.no_grad():
        mfa.conv.weight.copy_(torch.eye(10, 24)[..., None])
        mfa.conv.bias.zero_()
    assert torch.allclose(mfa.conv(cat), cat[:, :10])
    assert torch.all(mfa.conv(torch.zeros_like(cat)) == 0)


def test_asp_uniform_attention_gives_frame_mean():
    asp = AttentiveStatsPool(3).double()
    with torch.no_grad():
        asp.W.weight.zero_()
        asp.W.bias.zero_()
        asp.v.bias.fill_(2.7)
    h = torch.randn(2, 3, 9, dtype=D)
    out = asp(h)
    assert torch.allclose(asp.attention(h), torch.full((2, 1, 9), 1 / 9, dtype=D))
    assert torch.allclose(out[:, :3], h.mean(-1))


def test_asp_constant_input_has_floor_deviation():
    asp = AttentiveStatsPool(4).double()
    h = torch.randn(1, 4, 1, dtype=D).expand(1, 4, 10)
    sigma = asp(h)[:, 4:]
    assert torch.allclose(sigma, torch.full_like(sigma, math.sqrt(ASP_EPS)))


def test_asp_two_frame_hand_example():
    asp = AttentiveStatsPool(1).double()
    t = 0.5
    with torch.no_grad():
        asp.W.weight.fill_(math.atanh(t) / 2)
        asp.W.bias.zero_()
        asp.v.weight.fill_(math.log(3) / (2 * t))
        asp.v.bias.fill_(-4.0)
    h = torch.tensor([[[2.0, -2.0]]], dtype=D)
    assert torch.allclose(asp.attention(h)[0, 0], torch.tensor([0.75, 0.25], dtype=D))
    mu, sigma = asp(h)[0]
    assert abs(mu.item() - 1.0) < 1e-12
    assert abs(sigma.item() - math.sqrt(3)) < 1e-12


def test_asp_needs_two_frames():
    with pytest.raises(InvalidInputError):
        AttentiveStatsPool(2)(torch.randn(1, 2, 1))


@given(st.integers(2, 30), st.floats(0.01, 100), st.integers(0, 2**31 - 1))
@settings(max_examples=30, deadline=None)
def test_asp_deviation_always_finite(T, scale, seed):
    g = torch.Generator().manual_seed(seed)
    asp = AttentiveStatsPool(5).double()
    h = scale * torch.randn(2, 5, T, generator=g, dtype=D) + 1e3
    sigma = asp(h)[:, 5:]
    assert torch.isfinite(sigma).all()
    assert torch.all(sigma >= math.sqrt(ASP_EPS) * (1 - 1e-12))


def test_embedding_head():
    head = EmbeddingHead(192, 192).double().eval()
    with torch.no_grad():
        head.fc.bias.zero_()
    assert torch.all(head(torch.zeros(3, 192, dtype=D)) == 0)
    pooled = torch.randn(3, 192, dtype=D)
    assert head(pooled).shape == (3, 192)
    with torch.no_grad():
        head.fc.weight.copy_(torch.eye(192))
        head.bn.running_mean.copy_(torch.randn(192))
        head.bn.running_var.copy_(torch.rand(192) + 0.5)
    bn = head.bn
    normalized = (pooled - bn.running_mean) / torch.sqrt(bn.running_var + bn.eps) * bn.weight + bn.bias
    assert torch.allclose(head(pooled), normalized)


# --------------------------------------------------------------------------
# full network


def test_forward_is_deterministic_and_batch_independent(small_cfg):
    m = DSTDNN(small_cfg).double().eval()
    x = torch.randn(1, 80, 40, dtype=D)
    e1, e2 = m(x), m(x)
    assert e1.shape == (1, 192)
    assert torch.equal(e1, e2)
    pair = m(torch.cat([x, x]))
    assert torch.allclose(pair[0], pair[1], atol=1e-12)
    assert m(x[0]).shape == (1, 192)


@pytest.mark.parametrize("T", [100, 200, 400, 1000])
def test_forward_at_other_lengths(T):
    m = DSTDNN(preset("toy")).eval()
    y = m(torch.randn(1, 80, T))
    assert y.shape == (1, 192) and torch.isfinite(y).all()


def test_forward_rejects_single_frame(small_cfg):
    with pytest.raises(InvalidInputError):
        DSTDNN(small_cfg).eval()(torch.randn(1, 80, 1))


def test_dgf_layers_listed(small_cfg):
    assert [l.n_experts for l in DSTDNN(small_cfg).dgf_layers()] == small_cfg.experts


# --------------------------------------------------------------------------
# parameter counting


def test_count_by_hand_single_pair():
    cfg = ModelConfig(n_block_pairs=1, channels=8, res2_scales=[2], experts=[2], sparse_ratios=[0.1],
                      mfa_dim=32, filter_frames=10)
    c, w, B, K, D_, E = 4, 2, 6, 2, 32, 192
    stem = 80 * 8 * 7 + 8 + 2 * 8
    proj_c = c * c + c + 2 * c
    res2 = 1 * (w * w * 3 + w + 2 * w)
    se = c * 4 + 4 + 4 * c + c
    local = 2 * proj_c + res2 + se
    dgf = 2 * K * c * B + (c * K + K) + (K * K + K)
    glob = 2 * proj_c + dgf
    mfa = 8 * D_ + D_ + 2 * D_
    asp = D_ * D_ + D_ + D_ + 1
    head = 2 * (2 * D_) + 2 * D_ * E + E
    want = stem + local + glob + mfa + asp + head
    assert count_parameters(cfg) == want
    assert model_parameter_count(DSTDNN(cfg)) == want


@pytest.mark.parametrize("name", ["toy", "S", "B"])
def test_closed_form_matches_instantiated_model(name):
    cfg = preset(name)
    assert count_parameters(cfg) == model_parameter_count(DSTDNN(cfg))


def test_doubling_mfa_width_delta():
    a = preset("toy")
    b = preset("toy", mfa_dim=2 * a.mfa_dim)
    D_, E, NC = a.mfa_dim, a.embedding_dim, a.n_block_pairs * a.channels

    def width_terms(d):
        return (NC * d + 3 * d) + (d * d + 2 * d + 1) + (4 * d + 2 * d * E)

    assert count_parameters(b) - count_parameters(a) == width_terms(2 * D_) - width_terms(D_)


def test_filter_entries_count_twice():
    layer = DynamicGlobalFilter(4, 20, 3)
    assert layer.experts.numel() == 2 * 3 * 4 * 11
