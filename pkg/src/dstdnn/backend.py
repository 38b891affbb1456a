"""Verification back end: cosine scoring, adaptive score normalization, EER, minDCF.

Operating points are taken at every distinct score (accept when
score >= threshold) plus one point above the maximum that rejects
everything, so both extremes of the error trade-off are always present.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import InvalidInputError, NumericError

REJECT_ALL_MARGIN = 1e-6


@dataclass
class EmbeddingStore:
    vectors: dict[str, np.ndarray] = field(default_factory=dict)
    speaker_of: dict[str, str] = field(default_factory=dict)

    def add(self, utt_id: str, vec: np.ndarray, speaker_id: str | None = None) -> None:
        vec = np.asarray(vec, dtype=np.float64)
        if not np.all(np.isfinite(vec)):
            raise NumericError(f"non-finite embedding for {utt_id}")
        self.vectors[utt_id] = vec
        if speaker_id is not None:
            self.speaker_of[utt_id] = speaker_id

    def __getitem__(self, utt_id: str) -> np.ndarray:
        return self.vectors[utt_id]

    def speaker_means(self) -> dict[str, np.ndarray]:
        """Average embedding per speaker, members visited in sorted utterance order."""
        groups: dict[str, list[np.ndarray]] = {}
        for utt in sorted(self.speaker_of):
            groups.setdefault(self.speaker_of[utt], []).append(self.vectors[utt])
        return {spk: np.mean(vs, axis=0) for spk, vs in sorted(groups.items())}


@dataclass
class TrialScoreSet:
    enroll: list[str]
    test: list[str]
    labels: np.ndarray
    raw: np.ndarray
    normalized: np.ndarray | None = None

    @property
    def scores(self) -> np.ndarray:
        return self.raw if self.normalized is None else self.normalized

    def to_csv(self, path: str | Path) -> None:
        norm = self.normalized if self.normalized is not None else [float("nan")] * len(self.raw)
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["enroll", "test", "label", "raw", "normalized"])
            for row in zip(self.enroll, self.test, self.labels, self.raw, norm):
                w.writerow([row[0], row[1], int(row[2]), repr(float(row[3])), repr(float(row[4]))])


def cosine_score(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise InvalidInputError("cosine score of a zero vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def _unit_rows(m: np.ndarray) -> np.ndarray:
    m = np.atleast_2d(np.asarray(m, dtype=np.float64))
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise InvalidInputError("zero vector in cohort or embeddings")
    return m / norms


def score_trials(trials: Sequence[tuple[str, str, int]], store: EmbeddingStore) -> TrialScoreSet:
    enroll = [t[0] for t in trials]
    test = [t[1] for t in trials]
    labels = np.array([int(t[2]) for t in trials])
    raw = np.array([cosine_score(store[e], store[t]) for e, t in zip(enroll, test)])
    return TrialScoreSet(enroll, test, labels, raw)


def cohort_stats(vec: np.ndarray, cohort: np.ndarray, k: int) -> tuple[float, float]:
    """Mean and std of the k highest cosine scores of ``vec`` against the cohort."""
    s = _unit_rows(cohort) @ _unit_rows(vec)[0]
    # stable sort keeps the lower cohort index first among equal scores
    top = s[np.argsort(-s, kind="stable")[:k]]
    return float(top.mean()), float(top.std())


def as_norm(scores: TrialScoreSet, store: EmbeddingStore, cohort: np.ndarray | Mapping[str, np.ndarray],
            cohort_size: int = 600, min_cohort: int = 10) -> TrialScoreSet:
    """Adaptive s-norm: 0.5 * [(s - mu_e)/sigma_e + (s - mu_t)/sigma_t] over top-k imposters."""
    if isinstance(cohort, Mapping):
        cohort = np.stack([cohort[k] for k in sorted(cohort)])
    cohort = np.asarray(cohort, dtype=np.float64)
    if len(cohort) < min_cohort:
        raise InvalidInputError(f"cohort has {len(cohort)} vectors, need at least {min_cohort}")
    k = min(cohort_size, len(cohort))
    stats: dict[str, tuple[float, float]] = {}
    for utt in dict.fromkeys(scores.enroll + scores.test):
        mu, sd = cohort_stats(store[utt], cohort, k)
        if sd == 0:
            raise NumericError(f"degenerate cohort: zero score spread for {utt}")
        stats[utt] = (mu, sd)
    norm = np.empty_like(scores.raw)
    for i, (e, t, s) in enumerate(zip(scores.enroll, scores.test, scores.raw)):
        mu_e, sd_e = stats[e]
        mu_t, sd_t = stats[t]
        norm[i] = 0.5 * ((s - mu_e) / sd_e + (s - mu_t) / sd_t)
    return TrialScoreSet(scores.enroll, scores.test, scores.labels, scores.raw, norm)


def operating_points(scores: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(thresholds, false-reject rates, false-accept rates), thresholds ascending."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise InvalidInputError("scores and labels must be equal-length vectors")
    tgt = np.sort(scores[labels])
    non = np.sort(scores[~labels])
    if len(tgt) == 0 or len(non) == 0:
        raise InvalidInputError("need both target and nontarget trials")
    thr = np.unique(scores)
    thr = np.append(thr, thr[-1] + REJECT_ALL_MARGIN)
    frr = np.searchsorted(tgt, thr, side="left") / len(tgt)
    far = (len(non) - np.searchsorted(non, thr, side="left")) / len(non)
    return thr, frr, far


def eer_from_points(thr: np.ndarray, frr: np.ndarray, far: np.ndarray) -> tuple[float, float]:
    """Linear interpolation of the FAR = FRR crossing between bracketing points."""
    i = int(np.argmax(frr >= far))
    if i == 0:
        return float(frr[0]), float(thr[0])
    d0 = far[i - 1] - frr[i - 1]
    d1 = far[i] - frr[i]
    a = d0 / (d0 - d1)
    eer = frr[i - 1] + a * (frr[i] - frr[i - 1])
    return float(eer), float(thr[i - 1] + a * (thr[i] - thr[i - 1]))


def compute_eer(scores: np.ndarray, labels: np.ndarray) -> tuple[float, float]:
    return eer_from_points(*operating_points(scores, labels))


def compute_min_dcf(scores: np.ndarray, labels: np.ndarray, p_target: float = 0.01,
                    c_fa: float = 1.0, c_miss: float = 1.0) -> tuple[float, float]:
    thr, frr, far = operating_points(scores, labels)
    dcf = (c_miss * p_target * frr + c_fa * (1 - p_target) * far)
    dcf = dcf / min(c_miss * p_target, c_fa * (1 - p_target))
    i = int(np.argmin(dcf))
    return float(dcf[i]), float(thr[i])


def metrics(scores: np.ndarray, labels: np.ndarray, p_target: float = 0.01) -> dict[str, float]:
    eer, eer_thr = compute_eer(scores, labels)
    dcf, dcf_thr = compute_min_dcf(scores, labels, p_target)
    return {"eer": eer, "eer_threshold": eer_thr, "min_dcf": dcf, "dcf_threshold": dcf_thr}


def write_metrics(path: str | Path, m: dict[str, float]) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        json.dump(m, fh, indent=2)
