"""Feature-spread and accuracy metrics.

``S_intra`` is the mean squared distance of features to their own class
center, ``S_inter`` the smallest squared distance between two class
centers, and ``R_s`` their ratio (smaller means tighter, better separated
classes).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import EmptyInput, SingleClass, ZeroInterSpread


@dataclass(frozen=True)
class SpreadReport:
    s_intra: float
    s_inter: float
    r_s: float
    class_centers: dict[int, np.ndarray]


def class_centers(features, labels) -> dict[int, np.ndarray]:
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    return {int(c): features[labels == c].mean(axis=0) for c in np.unique(labels)}


def intra_spread(features, labels) -> float:
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if len(features) == 0:
        raise EmptyInput("no features")
    centers = class_centers(features, labels)
    own = np.stack([centers[int(c)] for c in labels])
    return float(np.sum((features - own) ** 2) / len(features))


def inter_spread(centers) -> float:
    """Minimum squared distance over unordered pairs of distinct centers."""
    mu = np.asarray(list(centers.values()) if isinstance(centers, dict) else centers, dtype=np.float64)
    if len(mu) < 2:
        raise SingleClass("inter spread needs at least two classes")
    i, j = np.triu_indices(len(mu), k=1)
    sq = np.sum((mu[i] - mu[j]) ** 2, axis=-1)
    # re-sum the near-minimal pairs with correct rounding so the result does
    # not depend on how numpy orders the additions
    close = np.flatnonzero(sq <= sq.min() * (1 + 1e-9) + 1e-300)
    return min(math.fsum((mu[i[k]] - mu[j[k]]) ** 2) for k in close)


def rs_ratio(s_intra: float, s_inter: float) -> float:
    if s_inter <= 0:
        raise ZeroInterSpread("inter spread is zero")
    return s_intra / s_inter


def spread_report(features, labels) -> SpreadReport:
    centers = class_centers(features, labels)
    s_intra = intra_spread(features, labels)
    s_inter = inter_spread(centers)
    return SpreadReport(s_intra, s_inter, rs_ratio(s_intra, s_inter), centers)


def incremental_accuracy(predictions, truths) -> float:
    predictions = np.asarray(predictions)
    truths = np.asarray(truths)
    if truths.size == 0:
        raise EmptyInput("no inlier test samples")
    if predictions.shape != truths.shape:
        raise ValueError("predictions and truths differ in length")
    return float(np.count_nonzero(predictions == truths) / truths.size)
