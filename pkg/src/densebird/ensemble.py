"""Score-level ensembling and confidence-thresholded pseudo-labelling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .metrics import PredictionSet

METHODS = ("geometric", "arithmetic", "harmonic")


@dataclass
class PseudoLabelConfig:
    low_threshold: float = 0.3
    high_threshold: float = 0.7

    def __post_init__(self):
        if not 0 < self.low_threshold < self.high_threshold < 1:
            raise ValueError("need 0 < low < high < 1")


def _aligned(members: list[PredictionSet]) -> np.ndarray:
    if len(members) < 2:
        raise ValueError("an ensemble needs at least two members")
    ids = members[0].item_ids
    rows = []
    for m in members:
        if m.item_ids == ids:
            rows.append(m.scores)
            continue
        if sorted(m.item_ids) != sorted(ids):
            raise ValueError("ensemble members must cover identical item ids")
        lookup = dict(zip(m.item_ids, m.scores))
        rows.append(np.array([lookup[i] for i in ids]))
    return np.stack(rows, axis=1)


def combine(members: list[PredictionSet], method: str = "geometric", clamp_eps: float = 1e-7) -> PredictionSet:
    """Per-item mean of the members' positive-class scores.

    Scores are clamped to [clamp_eps, 1 - clamp_eps] so one zero cannot
    annihilate a geometric or harmonic mean.
    """
    if method not in METHODS:
        raise ValueError(f"method must be one of {METHODS}")
    # Sorting per item makes the result independent of member order.
    s = np.sort(np.clip(_aligned(members), clamp_eps, 1 - clamp_eps), axis=1)
    k = s.shape[1]
    arith = s.sum(axis=1) / k
    # The classical ordering can fail by an ulp in floating point.
    harm = np.minimum(k / (1.0 / s).sum(axis=1), arith)
    if method == "arithmetic":
        out = arith
    elif method == "harmonic":
        out = harm
    else:
        out = np.clip(np.exp(np.log(s).sum(axis=1) / k), harm, arith)
    first = members[0]
    return PredictionSet(first.item_ids, out, first.labels)


def pseudo_label_select(preds: PredictionSet, config: PseudoLabelConfig | None = None) -> PredictionSet:
    """Keep confident items: score < low becomes label 0, score > high label 1."""
    config = config or PseudoLabelConfig()
    s = preds.scores
    keep = np.flatnonzero((s < config.low_threshold) | (s > config.high_threshold))
    return PredictionSet([preds.item_ids[i] for i in keep], s[keep], (s[keep] > config.high_threshold).astype(int))
