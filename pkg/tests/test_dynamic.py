import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from dstdnn.dynamic import (AttentionScorer, DynamicGlobalFilter, SparseMask, attention_scores,
                            combine_filters, dgf_forward, sample_sparse_mask, sparse_scale)
from dstdnn.errors import ContractError, ShapeError
from dstdnn.spectral import gf_forward, n_bins


def random_bank(K, C, T, gen=None):
    B = n_bins(T)
    return torch.complex(torch.randn(K, C, B, generator=gen, dtype=torch.float64),
                         torch.randn(K, C, B, generator=gen, dtype=torch.float64))


def scorer(C, K):
    return AttentionScorer(C, K).double()


# --------------------------------------------------------------------------
# attention scores


def test_zero_scorer_is_uniform():
    a = scorer(6, 4)
    for p in a.parameters():
        torch.nn.init.zeros_(p)
    w = attention_scores(torch.randn(3, 6, 20, dtype=torch.float64), a)
    assert torch.allclose(w, torch.full((3, 4), 0.25, dtype=torch.float64))


def test_rows_sum_to_one():
    w = attention_scores(torch.randn(5, 8, 30, dtype=torch.float64) * 10, scorer(8, 3))
    assert torch.allclose(w.sum(-1), torch.ones(5, dtype=torch.float64), atol=1e-7)
    assert torch.all((w > 0) & (w < 1))


def test_hand_set_two_expert_logits():
    a = scorer(2, 2)
    with torch.no_grad():
        a.fc1.weight.zero_()
        a.fc1.bias.zero_()
        a.fc2.weight.zero_()
        a.fc2.bias.copy_(torch.tensor([2.0, 0.0]))
    w = attention_scores(torch.randn(1, 2, 10, dtype=torch.float64), a)[0]
    e2 = math.exp(2)
    assert torch.allclose(w, torch.tensor([e2 / (e2 + 1), 1 / (e2 + 1)], dtype=torch.float64))
    assert abs(w[0].item() - 0.8808) < 1e-4


def test_scores_ignore_frame_order():
    a = scorer(4, 3)
    x = torch.randn(2, 4, 25, dtype=torch.float64)
    perm = torch.randperm(25)
    assert torch.allclose(attention_scores(x, a), attention_scores(x[..., perm], a), atol=1e-14)


# --------------------------------------------------------------------------
# combining filters


def test_single_expert_passes_through():
    bank = random_bank(1, 3, 12)
    w = attention_scores(torch.randn(4, 3, 12, dtype=torch.float64), scorer(3, 1))
    assert torch.equal(combine_filters(bank, w), bank.expand(4, -1, -1))


def test_one_hot_selects_expert():
    bank = random_bank(3, 2, 10)
    w = torch.tensor([[0.0, 1.0, 0.0]], dtype=torch.float64)
    assert torch.equal(combine_filters(bank, w)[0], bank[1])


def test_equal_weights_average():
    bank = torch.stack([torch.ones(2, 4), 3 * torch.ones(2, 4)]).to(torch.complex128)
    f = combine_filters(bank, torch.tensor([[0.5, 0.5]], dtype=torch.float64))
    assert torch.all(f == 2)


def test_expert_count_mismatch():
    with pytest.raises(ShapeError):
        combine_filters(random_bank(3, 2, 10), torch.ones(1, 2, dtype=torch.float64) / 2)


# --------------------------------------------------------------------------
# sparse masks


def test_mask_extremes():
    assert torch.all(sample_sparse_mask(7, 5, 0.0).mask == 1)
    assert torch.all(sample_sparse_mask(7, 5, 1.0).mask == 0)
    with pytest.raises(ValueError):
        sample_sparse_mask(1, 1, 1.5)


def test_mask_zero_fraction():
    g = torch.Generator().manual_seed(3)
    m = sample_sparse_mask(1000, 100, 0.3, g).mask
    assert abs((m == 0).double().mean().item() - 0.3) < 0.01


def test_lambda_is_mean_modulus_of_dynamic_filter():
    f = random_bank(1, 3, 10)[0].expand(2, -1, -1) * torch.tensor([1.0, 2.0], dtype=torch.float64)[:, None, None]
    m = sample_sparse_mask(2, 3, 0.5, dynamic_filter=f)
    want = f.abs().mean(dim=(1, 2))
    assert torch.allclose(m.lambda_s, want)
    assert torch.all(m.lambda_s >= 0)


def test_lambda_carries_no_gradient():
    bank = random_bank(2, 3, 10).requires_grad_()
    assert not sparse_scale(bank).requires_grad


# --------------------------------------------------------------------------
# dgf_forward


def test_all_pass_single_expert_is_identity():
    x = torch.randn(2, 3, 17, dtype=torch.float64)
    bank = torch.ones(1, 3, n_bins(17), dtype=torch.complex128)
    y = dgf_forward(x, bank, scorer(3, 1))
    assert torch.allclose(y, x, atol=1e-12)


def test_full_mask_scales_by_lambda():
    x = torch.randn(3, 4, 20, dtype=torch.float64)
    bank = random_bank(2, 4, 20)
    a = scorer(4, 2)
    mask = SparseMask(torch.zeros(3, 4, dtype=torch.float64), 1.0)
    y = dgf_forward(x, bank, a, mask, training=True)
    f_d = combine_filters(bank, attention_scores(x, a))
    lam = f_d.abs().mean(dim=(1, 2))
    assert torch.allclose(mask.lambda_s, lam)
    want = lam[:, None, None] * x
    assert ((y - want).abs().max() / want.abs().max()).item() < 1e-10


def test_full_keep_mask_is_bit_identical_to_no_mask():
    x = torch.randn(3, 4, 21, dtype=torch.float64)
    bank = random_bank(3, 4, 21)
    a = scorer(4, 3)
    mask = SparseMask(torch.ones(3, 4, dtype=torch.float64), 0.0)
    assert torch.equal(dgf_forward(x, bank, a, mask, training=True), dgf_forward(x, bank, a))


def test_mask_outside_training_is_rejected():
    x = torch.randn(1, 2, 8, dtype=torch.float64)
    with pytest.raises(ContractError):
        dgf_forward(x, random_bank(1, 2, 8), scorer(2, 1), sample_sparse_mask(1, 2, 0.5), training=False)


def test_length_mismatch_needs_interpolation():
    with pytest.raises(ShapeError):
        dgf_forward(torch.randn(1, 2, 10, dtype=torch.float64), random_bank(1, 2, 8), scorer(2, 1))


@given(st.integers(1, 8), st.integers(1, 16), st.integers(2, 64), st.integers(0, 2**31 - 1))
@settings(max_examples=25, deadline=None)
def test_mixing_outputs_equals_mixing_filters(K, C, T, seed):
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(2, C, T, generator=g, dtype=torch.float64)
    bank = random_bank(K, C, T, g)
    a = scorer(C, K)
    w = attention_scores(x, a)
    y = dgf_forward(x, bank, a)
    mixed = sum(w[:, k, None, None] * gf_forward(x, bank[k]) for k in range(K))
    assert ((y - mixed).abs().max() / mixed.abs().max()).item() < 1e-8


def test_uniform_scores_equal_mean_filter():
    x = torch.randn(2, 3, 16, dtype=torch.float64)
    bank = random_bank(4, 3, 16)
    a = scorer(3, 4)
    for p in a.parameters():
        torch.nn.init.zeros_(p)
    assert torch.allclose(dgf_forward(x, bank, a), gf_forward(x, bank.mean(0)), atol=1e-12)


# --------------------------------------------------------------------------
# the layer


def test_layer_zero_ratio_train_equals_eval():
    layer = DynamicGlobalFilter(4, 40, 3, sparse_ratio=0.0).double()
    x = torch.randn(2, 4, 40, dtype=torch.float64)
    y_train = layer.train()(x)
    y_eval = layer.eval()(x)
    assert torch.equal(y_train, y_eval)


def test_layer_resamples_masks_and_replays_frozen_mask():
    layer = DynamicGlobalFilter(8, 30, 2, sparse_ratio=0.5).double().train()
    layer.generator = torch.Generator().manual_seed(0)
    x = torch.randn(4, 8, 30, dtype=torch.float64)
    a, b = layer(x), layer(x)
    assert not torch.equal(a, b)
    layer.record_masks = True
    c = layer(x)
    layer.record_masks = False
    assert torch.equal(layer(x), c)


def test_layer_eval_ignores_ratio_and_runs_at_any_length():
    layer = DynamicGlobalFilter(4, 200, 4, sparse_ratio=1.0).double().eval()
    for T in (100, 400, 1000):
        x = torch.randn(1, 4, T, dtype=torch.float64)
        y = layer(x)
        assert y.shape == x.shape and torch.isfinite(y).all()
    assert torch.equal(layer(x), layer(x))


def test_expert_gradients_flow_through_real_and_imaginary_parts():
    layer = DynamicGlobalFilter(3, 16, 2).double()
    x = torch.randn(2, 3, 16, dtype=torch.float64)
    (layer(x) * torch.randn_like(x)).sum().backward()
    g = layer.experts.grad
    assert g.shape == (2, 3, n_bins(16), 2)
    assert g[..., 0].abs().sum() > 0 and g[..., 1].abs().sum() > 0
