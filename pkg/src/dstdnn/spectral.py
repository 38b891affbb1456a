"""Channel-wise real FFT, the static global-aware filter and its oracles.

Tensors follow the (batch, channels, frames) layout.  A half spectrum keeps
``frames // 2 + 1`` bins, which makes the inverse exact for both odd and even
lengths.  The O(T^2) reference transforms at the bottom of the module are
plain NumPy and share no code with the FFT path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .errors import InvalidInputError, NumericError, ShapeError


def n_bins(frames: int) -> int:
    return frames // 2 + 1


@dataclass
class HalfSpectrum:
    data: torch.Tensor  # complex, (batch, C, frames // 2 + 1)
    origin_length: int


def rfft_channels(x: torch.Tensor) -> HalfSpectrum:
    if x.shape[-1] < 2:
        raise InvalidInputError("need at least two frames")
    if not torch.isfinite(x).all():
        raise NumericError("non-finite values in input to rfft_channels")
    return HalfSpectrum(torch.fft.rfft(x, dim=-1), x.shape[-1])


def irfft_channels(s: HalfSpectrum) -> torch.Tensor:
    if s.data.shape[-1] != n_bins(s.origin_length):
        raise ShapeError(
            f"{s.data.shape[-1]} bins cannot come from a length-{s.origin_length} signal")
    return torch.fft.irfft(s.data, n=s.origin_length, dim=-1)


def as_complex(f: torch.Tensor) -> torch.Tensor:
    """View a (..., 2) real parameter as complex; complex input passes through."""
    if f.is_complex():
        return f
    if f.shape[-1] != 2:
        raise ShapeError("real filter storage needs a trailing dimension of 2")
    return torch.view_as_complex(f.contiguous())


def interpolate_filter(f: torch.Tensor, target_length: int) -> torch.Tensor:
    """Resample a complex filter (..., B) onto the bins of a length-T' signal.

    Real and imaginary parts are linearly interpolated on normalized
    frequency [0, 0.5] with the end bins pinned.
    """
    if target_length < 2:
        raise InvalidInputError("target length must be >= 2")
    f = as_complex(f)
    b_new = n_bins(target_length)
    b_old = f.shape[-1]
    if b_new == b_old:
        return f
    if b_old == 1:
        return f.expand(*f.shape[:-1], b_new)
    lead = f.shape[:-1]
    parts = torch.view_as_real(f).movedim(-1, -2).reshape(-1, 2, b_old)
    parts = F.interpolate(parts, size=b_new, mode="linear", align_corners=True)
    parts = parts.reshape(*lead, 2, b_new).movedim(-2, -1).contiguous()
    return torch.view_as_complex(parts)


def gf_forward(x: torch.Tensor, f: torch.Tensor) -> torch.Tensor:
    """Filter every channel of ``x`` in the frequency domain.

    ``f`` is complex with shape (C, B) or (batch, C, B), B = T // 2 + 1.
    """
    f = as_complex(f)
    T = x.shape[-1]
    if f.shape[-2] != x.shape[-2]:
        raise ShapeError(f"filter has {f.shape[-2]} channels, input has {x.shape[-2]}")
    if f.shape[-1] != n_bins(T):
        raise ShapeError(
            f"filter has {f.shape[-1]} bins but a length-{T} input needs {n_bins(T)}; "
            "interpolate the filter first")
    spec = rfft_channels(x)
    return irfft_channels(HalfSpectrum(f * spec.data, T))


class GlobalFilter(torch.nn.Module):
    """Static global-aware filter layer with one learnable complex filter."""

    def __init__(self, channels: int, frames: int, init: str = "allpass"):
        super().__init__()
        weight = torch.zeros(channels, n_bins(frames), 2)
        if init == "allpass":
            weight[..., 0] = 1.0
        elif init == "random":
            weight.normal_(0.0, 0.02)
        else:
            raise ValueError(f"unknown init {init!r}")
        self.weight = torch.nn.Parameter(weight)

    def filter_for(self, frames: int) -> torch.Tensor:
        return interpolate_filter(self.weight, frames)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return gf_forward(x, self.filter_for(x.shape[-1]))


# --------------------------------------------------------------------------
# O(T^2) reference implementations


def naive_rdft(x: np.ndarray) -> np.ndarray:
    """Half-spectrum DFT by direct summation over the last axis."""
    x = np.asarray(x, dtype=np.float64)
    T = x.shape[-1]
    k = np.arange(n_bins(T))[:, None]
    n = np.arange(T)[None, :]
    basis = np.exp(-2j * np.pi * k * n / T)
    return x @ basis.T


def naive_irdft(X: np.ndarray, length: int) -> np.ndarray:
    """Inverse of ``naive_rdft``: Hermitian-extend and sum directly."""
    X = np.asarray(X, dtype=np.complex128)
    T = length
    if X.shape[-1] != n_bins(T):
        raise ShapeError("bin count does not match length")
    full = np.zeros(X.shape[:-1] + (T,), dtype=np.complex128)
    full[..., : X.shape[-1]] = X
    # bins above Nyquist mirror the conjugate of the lower half
    upper = np.arange(n_bins(T), T)
    full[..., upper] = np.conj(X[..., T - upper])
    # a real signal has real DC (and Nyquist for even T) coefficients
    full[..., 0] = full[..., 0].real
    if T % 2 == 0:
        full[..., T // 2] = full[..., T // 2].real
    n = np.arange(T)[:, None]
    k = np.arange(T)[None, :]
    basis = np.exp(2j * np.pi * n * k / T)
    return (full @ basis.T).real / T


def circular_conv_oracle(x: np.ndarray, w_g: np.ndarray) -> np.ndarray:
    """out[..., c, m] = sum_n x[..., c, n] * w_g[c, (m - n) mod T], summed directly.

    This is the spatial-domain ground truth for ``gf_forward``: a convolution
    whose kernel spans the whole sequence.
    """
    x = np.asarray(x, dtype=np.float64)
    w_g = np.asarray(w_g, dtype=np.float64)
    T = x.shape[-1]
    if w_g.shape[-1] != T or w_g.shape[-2] != x.shape[-2]:
        raise ShapeError(f"kernel shape {w_g.shape} does not match input {x.shape}")
    flat = x.reshape(-1, x.shape[-2], T)
    out = np.empty_like(flat)
    for c in range(flat.shape[1]):
        kernel = np.concatenate([w_g[c], w_g[c]])
        for b in range(flat.shape[0]):
            # linear convolution against the doubled kernel; samples T..2T-1
            # are exactly the circular sum
            out[b, c] = np.convolve(flat[b, c], kernel)[T:2 * T]
    return out.reshape(x.shape)
