"""Open-set scoring against stored exemplar features.

A test feature is compared by cosine similarity with each class's stored
exemplar features; the mean of the top-K similarities gives one score per
class.  Scores are clamped at zero and normalized across classes, and the
largest share is the inlier score ``sc_osr``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .autodiff import EPS
from .errors import DegenerateVector, EmptySide, EmptyStore, MissingThreshold, NoClasses
from .exemplar import ExemplarStore

OUTLIER = "outlier"


@dataclass(frozen=True)
class OsrConfig:
    k_nn: int = 10
    tau_osr: float | None = None

    def __post_init__(self):
        if self.k_nn < 1:
            raise ValueError(f"k_nn must be >= 1, got {self.k_nn}")
        if self.tau_osr is not None and not 0.0 <= self.tau_osr <= 1.0:
            raise ValueError(f"tau_osr must lie in [0, 1], got {self.tau_osr}")


@dataclass(frozen=True)
class ScoreRecord:
    """One scored test row; class fields hold dataset class ids."""

    sample_id: int
    truth: int | str  # class id, or OUTLIER
    class_sims: np.ndarray
    sc_osr: float
    predicted: int  # neural classifier argmax
    knn_class: int  # argmax of the normalized similarities

    @property
    def is_outlier_truth(self) -> bool:
        return self.truth == OUTLIER


def _unit_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(norms <= EPS):
        raise DegenerateVector("cannot take the cosine of a zero vector")
    return x / norms


def knn_class_similarity(z, store: ExemplarStore, k_nn: int) -> np.ndarray:
    """Per-class mean of the ``min(k_nn, n_c)`` largest cosine similarities.

    ``z`` may be one vector or a batch of row vectors; the result has one
    column per class in ``store.classes`` order.
    """
    if not store.per_class or any(len(ex) == 0 for ex in store.per_class.values()):
        raise EmptyStore("every class needs at least one exemplar")
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    q = _unit_rows(np.atleast_2d(z))
    out = np.empty((len(q), len(store.per_class)))
    for col, ex in enumerate(store.per_class.values()):
        sims = q @ _unit_rows(ex.features).T
        k = min(k_nn, sims.shape[1])
        top = -np.sort(-sims, axis=1)[:, :k]
        out[:, col] = top.mean(axis=1)
    return out[0] if single else out


def osr_score(class_sims) -> tuple[float, int]:
    """``(sc_osr, argmax position)`` for one vector of per-class similarities.

    Negative similarities are clamped to 0.  If nothing positive remains
    the score is the uniform share ``1/C`` and the position is 0.
    """
    sims = np.asarray(class_sims, dtype=np.float64)
    if sims.size == 0:
        raise NoClasses("no classes to score against")
    clamped = np.maximum(sims, 0.0)
    total = clamped.sum()
    if total <= EPS:
        return 1.0 / sims.size, 0
    share = clamped / total
    pos = int(np.argmax(share))
    return float(share[pos]), pos


def osr_scores(class_sims: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise :func:`osr_score` over a (N, C) similarity matrix."""
    class_sims = np.atleast_2d(class_sims)
    scores = np.empty(len(class_sims))
    preds = np.empty(len(class_sims), dtype=np.intp)
    for i, row in enumerate(class_sims):
        scores[i], preds[i] = osr_score(row)
    return scores, preds


def decide(sc_osr: float, logits, tau_osr: float | None):
    """Outlier when ``sc_osr < tau_osr``, else the classifier's argmax position."""
    if tau_osr is None:
        raise MissingThreshold("tau_osr must be set to make decisions")
    if sc_osr < tau_osr:
        return OUTLIER
    return int(np.argmax(np.asarray(logits)))


def classify_unified(z, store: ExemplarStore, logits_fn, cfg: OsrConfig):
    """Unified decision for one feature vector.

    Returns ``"outlier"`` or the class id (from ``store.classes``) picked by
    ``logits_fn(z)``, whose positions follow the same class order.
    """
    if cfg.tau_osr is None:
        raise MissingThreshold("tau_osr must be set to make decisions")
    sc, _ = osr_score(knn_class_similarity(z, store, cfg.k_nn))
    verdict = decide(sc, np.asarray(logits_fn(z)).ravel(), cfg.tau_osr)
    return verdict if verdict == OUTLIER else store.classes[verdict]


def auroc(inlier_scores, outlier_scores) -> float:
    """P(inlier score > outlier score) with ties counted as one half.

    This is the Mann-Whitney U statistic divided by ``n_in * n_out``,
    i.e. the area under the full-sweep ROC with outliers as positives
    ranked by ``-sc_osr``.
    """
    inl = np.asarray(inlier_scores, dtype=np.float64).ravel()
    out = np.asarray(outlier_scores, dtype=np.float64).ravel()
    if inl.size == 0 or out.size == 0:
        raise EmptySide("both inlier and outlier scores are required")
    ranks = rankdata(np.concatenate([inl, out]))
    u = ranks[: inl.size].sum() - inl.size * (inl.size + 1) / 2.0
    return float(u / (inl.size * out.size))


def write_score_csv(records: list[ScoreRecord], path, tau_osr: float | None = None) -> None:
    """Score dump; ``predicted`` is the unified decision when ``tau_osr`` is set."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["sample_id", "truth", "sc_osr", "predicted"])
        for r in records:
            pred = OUTLIER if tau_osr is not None and r.sc_osr < tau_osr else r.predicted
            writer.writerow([r.sample_id, r.truth, repr(float(r.sc_osr)), pred])


def read_score_csv(path) -> tuple[np.ndarray, np.ndarray]:
    """(inlier scores, outlier scores) from a score dump."""
    inl, out = [], []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            (out if row["truth"] == OUTLIER else inl).append(float(row["sc_osr"]))
    return np.array(inl), np.array(out)
