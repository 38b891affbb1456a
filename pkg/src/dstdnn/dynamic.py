"""Dynamic global-aware filtering with sparse regularization.

K expert filters are mixed per input by a small attention network
(GAP -> FC -> ReLU -> FC -> Softmax).  During training a random subset of
channels has its mixed filter switched off; those channels instead pass
through an all-pass response scaled by the mean filter magnitude.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .errors import ContractError, NumericError, ShapeError
from .spectral import HalfSpectrum, as_complex, interpolate_filter, irfft_channels, n_bins, rfft_channels


@dataclass
class SparseMask:
    mask: torch.Tensor  # (batch, C), 1 keeps the channel's filter
    ratio: float
    lambda_s: torch.Tensor | None = None  # (batch,), filled in from the dynamic filter


class AttentionScorer(nn.Module):
    """Maps pooled channel statistics to K mixing weights."""

    def __init__(self, channels: int, n_experts: int):
        super().__init__()
        self.fc1 = nn.Linear(channels, n_experts)
        self.relu = nn.ReLU()
        self.fc2 = nn.Linear(n_experts, n_experts)

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(self.relu(self.fc1(x.mean(dim=-1))))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return attention_scores(x, self)


def attention_scores(x: torch.Tensor, scorer: AttentionScorer) -> torch.Tensor:
    logits = scorer.logits(x)
    if not torch.isfinite(logits).all():
        raise NumericError("non-finite attention logits")
    return torch.softmax(logits, dim=-1)


def combine_filters(bank: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
    """Per-item filter sum_k w[b, k] * bank[k]; bank is complex (K, C, B)."""
    bank = as_complex(bank)
    if w.shape[-1] != bank.shape[0]:
        raise ShapeError(f"{w.shape[-1]} scores for {bank.shape[0]} experts")
    K = bank.shape[0]
    mixed = w.to(bank.real.dtype).to(bank.dtype) @ bank.reshape(K, -1)
    return mixed.reshape(w.shape[0], *bank.shape[1:])


def sample_sparse_mask(batch: int, channels: int, ratio: float,
                       rng: torch.Generator | None = None,
                       dynamic_filter: torch.Tensor | None = None,
                       dtype: torch.dtype = torch.float32) -> SparseMask:
    """Drop each (item, channel) filter independently with probability ``ratio``.

    If the per-item dynamic filter is given, the all-pass gain lambda_s is
    computed from it (mean modulus over channels and bins, no gradient).
    """
    if not 0.0 <= ratio <= 1.0:
        raise ValueError("ratio must lie in [0, 1]")
    u = torch.rand(batch, channels, generator=rng, dtype=torch.float64)
    mask = (u >= ratio).to(dtype)
    lam = None
    if dynamic_filter is not None:
        lam = sparse_scale(dynamic_filter)
    return SparseMask(mask, ratio, lam)


def sparse_scale(dynamic_filter: torch.Tensor) -> torch.Tensor:
    f = as_complex(dynamic_filter).detach()
    return f.abs().mean(dim=(-2, -1))


def dgf_forward(x: torch.Tensor, bank: torch.Tensor, scorer: AttentionScorer,
                mask: SparseMask | None = None, training: bool = False) -> torch.Tensor:
    """Dynamic global filtering of ``x`` (batch, C, T).

    ``bank`` holds the K complex experts (K, C, B) already sized for T.  A
    mask is only legal in training mode; a mask without lambda_s has it
    filled in from this call's dynamic filter.
    """
    if mask is not None and not training:
        raise ContractError("sparse mask supplied outside training mode")
    bank = as_complex(bank)
    T = x.shape[-1]
    if bank.shape[-1] != n_bins(T):
        raise ShapeError("expert filters do not match the input length; interpolate first")
    w = attention_scores(x, scorer)
    f_d = combine_filters(bank, w)
    spec = rfft_channels(x)
    if mask is None:
        modulated = f_d * spec.data
    else:
        if mask.mask.shape != x.shape[:2]:
            raise ShapeError(f"mask shape {tuple(mask.mask.shape)} vs input {tuple(x.shape[:2])}")
        if mask.lambda_s is None:
            mask.lambda_s = sparse_scale(f_d)
        m = mask.mask.to(x.dtype)[..., None]
        lam = mask.lambda_s.to(x.dtype)[:, None, None]
        modulated = (m * f_d) * spec.data + (lam * (1 - m)) * spec.data
    return irfft_channels(HalfSpectrum(modulated, T))


class DynamicGlobalFilter(nn.Module):
    """DGF layer: K experts, an attention scorer and a sparse ratio.

    Experts are stored as real tensors of shape (K, C, B, 2) so that real and
    imaginary parts are independent parameters.  Masks are resampled on
    every training forward unless ``frozen_mask`` is set.
    """

    def __init__(self, channels: int, frames: int, n_experts: int, sparse_ratio: float = 0.0,
                 init_std: float = 0.02):
        super().__init__()
        self.channels = channels
        self.n_experts = n_experts
        self.sparse_ratio = float(sparse_ratio)
        experts = torch.zeros(n_experts, channels, n_bins(frames), 2)
        experts[..., 0] = 1.0
        experts.add_(torch.randn_like(experts) * init_std)
        self.experts = nn.Parameter(experts)
        self.scorer = AttentionScorer(channels, n_experts)
        self.frozen_mask: SparseMask | None = None
        self.record_masks = False
        self.generator: torch.Generator | None = None

    def bank_for(self, frames: int) -> torch.Tensor:
        return interpolate_filter(self.experts, frames)

    def forward(self, x: torch.Tensor, mask: SparseMask | None = None) -> torch.Tensor:
        bank = self.bank_for(x.shape[-1])
        if not self.training:
            return dgf_forward(x, bank, self.scorer, mask, training=False)
        if mask is None:
            mask = self.frozen_mask
        if mask is None and self.sparse_ratio > 0:
            mask = sample_sparse_mask(x.shape[0], self.channels, self.sparse_ratio,
                                      self.generator, dtype=x.dtype)
            if self.record_masks:
                self.frozen_mask = mask
        return dgf_forward(x, bank, self.scorer, mask, training=True)
