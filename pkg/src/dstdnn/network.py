"""The dual-stream TDNN speaker-embedding network.

Data flow for an 80 x T log-Mel input::

    stem -> split -> N x {fuse, local block || global block}
         -> concat of all 2N block outputs -> projection (MFA)
         -> attentive statistics pooling -> BN + linear -> embedding

Each branch works on C/2 channels.  Local blocks mix tokens with a Res2Net
style grouped convolution, global blocks with a dynamic global filter.
"""

from __future__ import annotations

import torch
from torch import nn

from .config import ModelConfig
from .dynamic import DynamicGlobalFilter
from .errors import ConfigError, InvalidInputError, ShapeError

ASP_EPS = 1e-9


class Proj(nn.Module):
    """1x1 convolution followed by ReLU and batch norm."""

    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.conv = nn.Conv1d(c_in, c_out, kernel_size=1)
        self.relu = nn.ReLU()
        self.bn = nn.BatchNorm1d(c_out)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.bn(self.relu(self.conv(x)))


class Stem(nn.Module):
    def __init__(self, n_mels: int, channels: int, kernel: int = 7):
        super().__init__()
        if channels % 2:
            raise ConfigError("stem width must be even to split into two branches")
        self.n_mels = n_mels
        self.conv = nn.Conv1d(n_mels, channels, kernel, stride=1, padding=kernel // 2)
        self.relu = nn.ReLU()
        self.bn = nn.BatchNorm1d(channels)

    def pre_split(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-2] != self.n_mels:
            raise ShapeError(f"stem expects {self.n_mels} input channels, got {x.shape[-2]}")
        return self.bn(self.relu(self.conv(x)))

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        h = self.pre_split(x)
        half = h.shape[1] // 2
        return h[:, :half], h[:, half:]


class Res2Conv(nn.Module):
    """Hierarchical grouped convolution over ``scale`` channel groups.

    The first group passes through; group i >= 2 is
    ReLU(BN(Conv(x_i + y_{i-1}))) where y_1 is the untouched first group.
    """

    def __init__(self, channels: int, scale: int, kernel: int = 3):
        super().__init__()
        if channels % scale:
            raise ConfigError(f"{channels} channels not divisible by scale {scale}")
        self.scale = scale
        width = channels // scale
        self.convs = nn.ModuleList(
            nn.Conv1d(width, width, kernel, padding=kernel // 2) for _ in range(scale - 1))
        self.bns = nn.ModuleList(nn.BatchNorm1d(width) for _ in range(scale - 1))
        self.relu = nn.ReLU()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        groups = torch.chunk(x, self.scale, dim=1)
        outs = [groups[0]]
        prev = groups[0]
        for g, conv, bn in zip(groups[1:], self.convs, self.bns):
            prev = self.relu(bn(conv(g + prev)))
            outs.append(prev)
        return torch.cat(outs, dim=1)


class SEModule(nn.Module):
    def __init__(self, channels: int, reduction: int = 16, min_dim: int = 4):
        super().__init__()
        dim = max(channels // reduction, min_dim)
        self.fc1 = nn.Linear(channels, dim)
        self.relu = nn.ReLU()
        self.fc2 = nn.Linear(dim, channels)

    def gates(self, x: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.fc2(self.relu(self.fc1(x.mean(dim=-1)))))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x * self.gates(x)[..., None]


class LocalBlock(nn.Module):
    def __init__(self, channels: int, scale: int, kernel: int = 3,
                 se_reduction: int = 16, se_min_dim: int = 4):
        super().__init__()
        self.proj1 = Proj(channels, channels)
        self.res2 = Res2Conv(channels, scale, kernel)
        self.proj2 = Proj(channels, channels)
        self.se = SEModule(channels, se_reduction, se_min_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.se(self.proj2(self.res2(self.proj1(x))))


class GlobalBlock(nn.Module):
    def __init__(self, channels: int, frames: int, n_experts: int, sparse_ratio: float):
        super().__init__()
        self.proj1 = Proj(channels, channels)
        self.dgf = DynamicGlobalFilter(channels, frames, n_experts, sparse_ratio)
        self.proj2 = Proj(channels, channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.proj2(self.dgf(self.proj1(x)))


def fuse_branches(x_local: torch.Tensor, x_global: torch.Tensor,
                  weights: tuple[float, float] = (0.8, 0.2)) -> tuple[torch.Tensor, torch.Tensor]:
    """Cross-branch mixing: each branch keeps ``weights[0]`` of itself."""
    if x_local.shape != x_global.shape:
        raise ShapeError(f"branch shapes differ: {tuple(x_local.shape)} vs {tuple(x_global.shape)}")
    own, other = weights
    return own * x_local + other * x_global, other * x_local + own * x_global


class AttentiveStatsPool(nn.Module):
    """Frame-attention weighted mean and standard deviation.

    e_t = v^T tanh(W h_t + b) + k, alpha = softmax_t(e).  The deviation uses
    the attention-weighted mean, so the radicand is non-negative.
    """

    def __init__(self, channels: int):
        super().__init__()
        self.W = nn.Conv1d(channels, channels, kernel_size=1)
        self.v = nn.Conv1d(channels, 1, kernel_size=1)

    def attention(self, h: torch.Tensor) -> torch.Tensor:
        e = self.v(torch.tanh(self.W(h)))
        return torch.softmax(e, dim=-1)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        if h.shape[-1] < 2:
            raise InvalidInputError("attentive pooling needs at least two frames")
        alpha = self.attention(h)
        mu = (alpha * h).sum(dim=-1)
        second = (alpha * h * h).sum(dim=-1)
        sigma = torch.sqrt(torch.clamp(second - mu * mu, min=ASP_EPS))
        return torch.cat([mu, sigma], dim=1)


class EmbeddingHead(nn.Module):
    def __init__(self, in_dim: int, embedding_dim: int):
        super().__init__()
        self.bn = nn.BatchNorm1d(in_dim)
        self.fc = nn.Linear(in_dim, embedding_dim)

    def forward(self, pooled: torch.Tensor) -> torch.Tensor:
        return self.fc(self.bn(pooled))


class DSTDNN(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        c = cfg.branch_channels
        self.stem = Stem(cfg.n_mels, cfg.channels, cfg.stem_kernel)
        self.local_blocks = nn.ModuleList(
            LocalBlock(c, s, cfg.local_kernel, cfg.se_reduction, cfg.se_min_dim)
            for s in cfg.res2_scales)
        self.global_blocks = nn.ModuleList(
            GlobalBlock(c, cfg.filter_frames, k, r)
            for k, r in zip(cfg.experts, cfg.sparse_ratios))
        self.mfa = Proj(cfg.n_block_pairs * cfg.channels, cfg.mfa_dim)
        self.asp = AttentiveStatsPool(cfg.mfa_dim)
        self.head = EmbeddingHead(2 * cfg.mfa_dim, cfg.embedding_dim)

    def dgf_layers(self) -> list[DynamicGlobalFilter]:
        return [b.dgf for b in self.global_blocks]

    def frame_features(self, x: torch.Tensor) -> tuple[list[torch.Tensor], list[torch.Tensor]]:
        """Outputs of every local and global block, in order."""
        x_l, x_g = self.stem(x)
        outs_l, outs_g = [], []
        for local, glob in zip(self.local_blocks, self.global_blocks):
            in_l, in_g = fuse_branches(x_l, x_g, self.cfg.fusion_weights)
            x_l, x_g = local(in_l), glob(in_g)
            outs_l.append(x_l)
            outs_g.append(x_g)
        return outs_l, outs_g

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() == 2:
            x = x[None]
        if x.shape[-1] < 2:
            raise InvalidInputError("need at least two frames")
        outs_l, outs_g = self.frame_features(x)
        h = self.mfa(torch.cat(outs_l + outs_g, dim=1))
        return self.head(self.asp(h))


# --------------------------------------------------------------------------
# parameter accounting


def _proj(c_in: int, c_out: int) -> int:
    return c_in * c_out + c_out + 2 * c_out


def count_parameters(cfg: ModelConfig) -> int:
    """Closed-form number of trainable scalars; complex filter entries count twice."""
    C, c, k = cfg.channels, cfg.branch_channels, cfg.local_kernel
    B = cfg.filter_bins
    total = cfg.n_mels * C * cfg.stem_kernel + C + 2 * C
    for s in cfg.res2_scales:
        w = c // s
        se_dim = max(c // cfg.se_reduction, cfg.se_min_dim)
        total += 2 * _proj(c, c)
        total += (s - 1) * (w * w * k + w + 2 * w)
        total += c * se_dim + se_dim + se_dim * c + c
    for K in cfg.experts:
        total += 2 * _proj(c, c)
        total += 2 * K * c * B
        total += c * K + K + K * K + K
    D = cfg.mfa_dim
    total += _proj(cfg.n_block_pairs * C, D)
    total += D * D + D + D + 1
    total += 2 * (2 * D) + 2 * D * cfg.embedding_dim + cfg.embedding_dim
    return total


def model_parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
