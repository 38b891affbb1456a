"""Glue between trained models and the scoring back end."""

from __future__ import annotations

from typing import Sequence

import numpy as np
import torch

from .backend import EmbeddingStore, TrialScoreSet, as_norm, metrics, score_trials
from .network import DSTDNN
from .training import load_features


@torch.no_grad()
def embed_utterances(model: DSTDNN, rows: Sequence[dict],
                     features: dict[str, np.ndarray] | None = None) -> EmbeddingStore:
    """Full-length eval-mode embeddings for every row of a manifest."""
    model.eval()
    feats = features if features is not None else load_features(rows)
    dtype = next(model.parameters()).dtype
    store = EmbeddingStore()
    for r in rows:
        x = torch.from_numpy(feats[r["utt_id"]]).to(dtype)[None]
        store.add(r["utt_id"], model(x)[0].double().numpy(), r["speaker_id"])
    return store


def evaluate_trials(store: EmbeddingStore, trials: Sequence[tuple[str, str, int]],
                    cohort: EmbeddingStore | None = None, cohort_size: int = 600,
                    min_cohort: int = 10) -> tuple[TrialScoreSet, dict[str, dict[str, float]]]:
    """Cosine-score the trials; add as-norm scores when a cohort store is given."""
    scores = score_trials(trials, store)
    result = {"raw": metrics(scores.raw, scores.labels)}
    if cohort is not None:
        scores = as_norm(scores, store, cohort.speaker_means(), cohort_size, min_cohort)
        result["as_norm"] = metrics(scores.normalized, scores.labels)
    return scores, result
