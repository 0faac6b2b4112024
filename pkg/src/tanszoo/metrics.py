"""Ranking metrics for same-pair retrieval."""

from __future__ import annotations

from typing import Sequence

import numpy as np


def rank_order(scores: np.ndarray, ids: Sequence[str]) -> np.ndarray:
    """Indices sorted by descending score, ties broken by ascending id."""
    key = np.argsort(np.argsort(np.asarray(ids, dtype=object), kind="stable"), kind="stable")
    return np.lexsort((key, -np.asarray(scores, dtype=np.float64)))


def pair_rank(scores: np.ndarray, ids: Sequence[str], sources: Sequence[str], target: str) -> int:
    """1-based position of the first model whose source dataset is ``target``."""
    for pos, i in enumerate(rank_order(scores, ids), start=1):
        if sources[i] == target:
            return pos
    raise ValueError(f"no model from dataset {target!r} among the candidates")


def rank_metrics(ranks: Sequence[int], ks: Sequence[int] = (1, 5, 10)) -> dict[str, float]:
    """Recall@k (as fractions) plus mean and median rank."""
    r = np.asarray(ranks, dtype=np.float64)
    if r.size == 0:
        raise ValueError("no ranks to summarize")
    out = {f"R@{k}": float(np.mean(r <= k)) for k in ks}
    out["mean_rank"] = float(r.mean())
    out["median_rank"] = float(np.median(r))
    return out
