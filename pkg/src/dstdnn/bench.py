"""Scaling benchmark: FFT global filtering vs direct circular convolution.

Times are medians over warm repetitions; peak memory is the high-water mark
of bytes held by tensors (or numpy buffers) created while the primitive runs.
"""

from __future__ import annotations

import csv
import time
import tracemalloc
import weakref
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from torch.utils._python_dispatch import TorchDispatchMode
from torch.utils._pytree import tree_flatten

from .errors import InvalidInputError
from .spectral import circular_conv_oracle, gf_forward, n_bins

BENCH_FIELDS = ("primitive", "T", "C", "reps", "median_s", "peak_bytes")
MIN_REPS = 5
MIN_RUN_SECONDS = 1e-3


@dataclass
class BenchRecord:
    primitive: str
    T: int
    C: int
    reps: int
    median_s: float
    peak_bytes: int


class _TensorMemory(TorchDispatchMode):
    """Tracks live bytes of tensors produced by aten ops inside the context."""

    def __init__(self) -> None:
        super().__init__()
        self.live = 0
        self.peak = 0

    def _release(self, n: int) -> None:
        self.live -= n

    def __torch_dispatch__(self, func, types, args=(), kwargs=None):
        out = func(*args, **(kwargs or {}))
        for t in tree_flatten(out)[0]:
            if isinstance(t, torch.Tensor) and t._base is None:
                n = t.untyped_storage().nbytes()
                self.live += n
                self.peak = max(self.peak, self.live)
                weakref.finalize(t, self._release, n)
        return out


def peak_bytes(fn: Callable[[], object], uses_torch: bool) -> int:
    if uses_torch:
        with _TensorMemory() as m:
            out = fn()
            del out
        return m.peak
    tracemalloc.start()
    try:
        out = fn()
        del out
        return tracemalloc.get_traced_memory()[1]
    finally:
        tracemalloc.stop()


def time_median(fn: Callable[[], object], reps: int) -> tuple[float, int]:
    """Median seconds per call over warm runs, growing reps until a run lasts >= 1 ms."""
    reps = max(reps, MIN_REPS)
    fn()  # warm-up, discarded
    inner = 1
    while True:
        t0 = time.perf_counter()
        for _ in range(inner):
            fn()
        if time.perf_counter() - t0 >= MIN_RUN_SECONDS or inner >= 1 << 16:
            break
        inner *= 2
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        for _ in range(inner):
            fn()
        times.append((time.perf_counter() - t0) / inner)
    return float(np.median(times)), reps * inner


def _attention_mix(x: torch.Tensor) -> torch.Tensor:
    # single-head softmax(x^T x / sqrt(C)) token mixing, the quadratic baseline
    a = torch.softmax(x.T @ x / x.shape[0] ** 0.5, dim=-1)
    return x @ a


def _primitives(C: int, T: int, rng: np.random.Generator, include_attention: bool):
    x_np = rng.standard_normal((C, T))
    w_np = rng.standard_normal((C, T))
    x = torch.from_numpy(x_np)
    f = torch.fft.rfft(torch.from_numpy(w_np), dim=-1)
    assert f.shape[-1] == n_bins(T)
    prims = {
        "gf_forward": (lambda: gf_forward(x, f), True),
        "circular_conv": (lambda: circular_conv_oracle(x_np, w_np), False),
    }
    if include_attention:
        prims["attention_mix"] = (lambda: _attention_mix(x), True)
    return prims


def loglog_slope(ts: Sequence[float], times: Sequence[float]) -> float:
    """Least-squares slope of log(time) against log(T)."""
    return float(np.polyfit(np.log(ts), np.log(times), 1)[0])


def bench_scaling(lengths: Sequence[int], C: int = 8, reps: int = MIN_REPS,
                  primitives: Sequence[str] | None = None, include_attention: bool = False,
                  max_direct_length: int | None = None, threads: int | None = 1,
                  seed: int = 0) -> tuple[list[BenchRecord], dict[str, float]]:
    """Time each primitive over ``lengths``; returns records and fitted exponents.

    ``max_direct_length`` skips the quadratic primitives above that T, since
    a direct convolution at T = 65536 takes minutes per call.
    """
    lengths = sorted(int(t) for t in lengths)
    if len(lengths) < 2 or lengths[-1] < 16 * lengths[0]:
        raise InvalidInputError("lengths must span at least a 16x ratio")
    if C < 1:
        raise InvalidInputError("C must be >= 1")
    old_threads = torch.get_num_threads()
    if threads is not None:
        torch.set_num_threads(threads)
    rng = np.random.default_rng(seed)
    records: list[BenchRecord] = []
    try:
        for T in lengths:
            for name, (fn, uses_torch) in _primitives(C, T, rng, include_attention).items():
                if primitives is not None and name not in primitives:
                    continue
                if name != "gf_forward" and max_direct_length is not None and T > max_direct_length:
                    continue
                med, n = time_median(fn, reps)
                records.append(BenchRecord(name, T, C, n, med, peak_bytes(fn, uses_torch)))
    finally:
        torch.set_num_threads(old_threads)
    slopes = {}
    for name in dict.fromkeys(r.primitive for r in records):
        rs = [r for r in records if r.primitive == name]
        if len(rs) >= 2:
            slopes[name] = loglog_slope([r.T for r in rs], [r.median_s for r in rs])
    return records, slopes


def channel_ratio(T: int, C: int, reps: int = 41, threads: int | None = 1, seed: int = 0) -> float:
    """gf_forward time at 2C divided by the time at C, for fixed T.

    The two widths are timed in alternating pairs and the median pair ratio
    is returned, so slow drifts in machine load cancel out.
    """
    old_threads = torch.get_num_threads()
    if threads is not None:
        torch.set_num_threads(threads)
    rng = np.random.default_rng(seed)
    try:
        narrow, _ = _primitives(C, T, rng, False)["gf_forward"]
        wide, _ = _primitives(2 * C, T, rng, False)["gf_forward"]
        narrow()
        wide()
        ratios = []
        for _ in range(max(reps, MIN_REPS)):
            t0 = time.perf_counter()
            narrow()
            t1 = time.perf_counter()
            wide()
            t2 = time.perf_counter()
            ratios.append((t2 - t1) / (t1 - t0))
    finally:
        torch.set_num_threads(old_threads)
    return float(np.median(ratios))


def write_records(path: str | Path, records: Sequence[BenchRecord]) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=BENCH_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in records:
            w.writerow(asdict(r))
