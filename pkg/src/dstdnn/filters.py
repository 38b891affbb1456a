"""Shape analysis of learned global filters.

Each 1D filter is reduced to its magnitude response, a spectral-centroid
"center frequency" on the normalized axis [0, 0.5], and one of four classes.
DGF banks are collapsed with equal expert weights before analysis.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

from .errors import InvalidInputError

LOW_PASS = "low-pass"
HIGH_PASS = "high-pass"
BAND_PASS = "band-pass"
INACTIVE = "all-pass/inactive"
CLASSES = (LOW_PASS, HIGH_PASS, BAND_PASS, INACTIVE)

FLATNESS = 0.05  # spread below this fraction of the mean counts as flat
BAND_MARGIN = 1.2  # lower third must beat the upper third by 20% (or vice versa)


def normalized_frequencies(n_bins: int) -> np.ndarray:
    return np.linspace(0.0, 0.5, n_bins)


def center_frequency(mag: np.ndarray) -> float | None:
    """Energy-weighted mean normalized frequency; None for an all-zero filter."""
    mag = np.asarray(mag, dtype=np.float64)
    energy = mag ** 2
    total = energy.sum()
    if total == 0:
        return None
    return float(normalized_frequencies(len(mag)) @ energy / total)


def classify_magnitude(mag: np.ndarray) -> str:
    mag = np.asarray(mag, dtype=np.float64)
    if mag.ndim != 1 or len(mag) < 3:
        raise InvalidInputError("need a 1D magnitude response with at least 3 bins")
    spread = mag.max() - mag.min()
    mean = mag.mean()
    # an all-zero filter is flat too
    if spread == 0 or spread < FLATNESS * mean:
        return INACTIVE
    third = len(mag) // 3
    lo, hi = mag[:third].mean(), mag[-third:].mean()
    if lo >= BAND_MARGIN * hi:
        return LOW_PASS
    if hi >= BAND_MARGIN * lo:
        return HIGH_PASS
    return BAND_PASS


@dataclass
class FilterInfo:
    channel: int
    cls: str
    center_frequency: float | None


@dataclass
class LayerReport:
    name: str
    filters: list[FilterInfo]
    hist_edges: list[float]
    hist_counts: list[int]

    @property
    def class_counts(self) -> dict[str, int]:
        counts = dict.fromkeys(CLASSES, 0)
        for f in self.filters:
            counts[f.cls] += 1
        return counts


@dataclass
class FilterReport:
    layers: list[LayerReport] = field(default_factory=list)

    @property
    def class_counts(self) -> dict[str, int]:
        counts = dict.fromkeys(CLASSES, 0)
        for layer in self.layers:
            for k, v in layer.class_counts.items():
                counts[k] += v
        return counts

    def to_dict(self) -> dict:
        return {
            "classes": list(CLASSES),
            "class_counts": self.class_counts,
            "layers": [{
                "name": l.name,
                "n_filters": len(l.filters),
                "class_counts": l.class_counts,
                "center_frequency_histogram": {"edges": l.hist_edges, "counts": l.hist_counts},
                "filters": [{"channel": f.channel, "class": f.cls,
                             "center_frequency": f.center_frequency} for f in l.filters],
            } for l in self.layers],
        }

    def write_json(self, path: str | Path) -> None:
        with Path(path).open("w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    def write_csv(self, path: str | Path) -> None:
        """One row per filter, ready for plotting."""
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["layer", "channel", "class", "center_frequency"])
            for l in self.layers:
                for f in l.filters:
                    cf = "" if f.center_frequency is None else repr(f.center_frequency)
                    w.writerow([l.name, f.channel, f.cls, cf])


def analyze_layer(name: str, filters: np.ndarray, n_hist: int = 10) -> LayerReport:
    """``filters`` is complex (C, B) or a real (C, B, 2) view."""
    filters = np.asarray(filters)
    if not np.iscomplexobj(filters):
        if filters.ndim != 3 or filters.shape[-1] != 2:
            raise InvalidInputError(f"{name}: expected complex (C, B) or real (C, B, 2) filters")
        filters = filters[..., 0] + 1j * filters[..., 1]
    mags = np.abs(filters)
    infos = [FilterInfo(c, classify_magnitude(m), center_frequency(m)) for c, m in enumerate(mags)]
    cfs = [f.center_frequency for f in infos if f.center_frequency is not None]
    counts, edges = np.histogram(cfs, bins=n_hist, range=(0.0, 0.5))
    return LayerReport(name, infos, [float(e) for e in edges], [int(c) for c in counts])


def filters_from_state(tensors: Mapping[str, torch.Tensor]) -> dict[str, np.ndarray]:
    """Complex (C, B) filters per layer; expert banks are averaged with w_k = 1/K."""
    out = {}
    for name, t in tensors.items():
        arr = t.detach().double().cpu().numpy()
        if name.endswith(".experts") and arr.ndim == 4:
            arr = arr.mean(axis=0)
        elif not (name.endswith(".weight") and arr.ndim == 3 and arr.shape[-1] == 2
                  and ("filter" in name or "gf" in name)):
            continue
        out[name.rsplit(".", 1)[0]] = arr[..., 0] + 1j * arr[..., 1]
    return out


def analyze_filters(checkpoint: str | Path | Mapping[str, torch.Tensor], n_hist: int = 10) -> FilterReport:
    if isinstance(checkpoint, Mapping):
        tensors = checkpoint
    else:
        from .checkpoint import load_checkpoint

        tensors = load_checkpoint(checkpoint)[0]
    banks = filters_from_state(tensors)
    if not banks:
        raise InvalidInputError("checkpoint contains no global filter banks")
    return FilterReport([analyze_layer(name, f, n_hist) for name, f in banks.items()])
