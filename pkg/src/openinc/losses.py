"""Training objectives.

SupCon over normalized projections, angle- and distance-wise relational
distillation between a frozen teacher and the student, their weighted
combination, and the cross-entropy / response-distillation pair used by
the CE baselines.  Every loss returns a scalar :class:`Tensor` built from
autodiff ops, so gradients come from the tape.
"""

from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from .autodiff import EPS, Tensor, as_tensor
from .errors import (
    AlphaOutOfRange,
    BatchTooSmall,
    DegenerateTriplet,
    LabelOutOfRange,
    NonUnitRows,
    ShapeMismatch,
)

MAX_TRIPLETS = 5000


class EmptyPositivesWarning(UserWarning):
    """No anchor in a SupCon batch had a same-label partner."""


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.2
    lambda_dis: float = 0.5
    tau: float = 0.05
    kd_temperature: float = 2.0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise AlphaOutOfRange(f"alpha={self.alpha} outside [0, 1]")
        if self.tau <= 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if self.lambda_dis < 0:
            raise ValueError(f"lambda_dis must be non-negative, got {self.lambda_dis}")
        if self.kd_temperature <= 0:
            raise ValueError(f"kd_temperature must be positive, got {self.kd_temperature}")


def _abs(x: Tensor) -> Tensor:
    # |x| = relu(x) + relu(-x); subgradient 0 at the kink
    return ad.add(ad.relu(x), ad.relu(ad.scale(x, -1.0)))


def supcon_loss(proj, labels, tau: float, stats: dict | None = None) -> Tensor:
    """Supervised contrastive loss, summed over anchors.

    For anchor ``i`` the positives are the other rows with the same label
    and the denominator runs over every row except ``i``.  Anchors without
    positives are skipped; if all are skipped the loss is 0 and an
    :class:`EmptyPositivesWarning` is issued.
    """
    proj = as_tensor(proj)
    labels = np.asarray(labels)
    n = proj.shape[0]
    if n < 2:
        raise BatchTooSmall(f"SupCon needs at least 2 rows, got {n}")
    if labels.shape != (n,):
        raise ShapeMismatch(f"labels shape {labels.shape} does not match {n} rows")
    norms = np.linalg.norm(proj.data, axis=1)
    if not np.allclose(norms, 1.0, atol=1e-8):
        raise NonUnitRows(f"max deviation {np.max(np.abs(norms - 1.0)):.3g}")

    others = ~np.eye(n, dtype=bool)
    positive = (labels[:, None] == labels[None, :]) & others
    counts = positive.sum(axis=1)
    valid = counts > 0
    if stats is not None:
        stats["skipped_anchors"] = int(n - valid.sum())
        stats["empty_positives"] = not valid.any()
    if not valid.any():
        warnings.warn("no positive pairs in batch; SupCon loss is 0", EmptyPositivesWarning, stacklevel=2)
        return ad.scale(ad.sum(proj), 0.0)

    sim = ad.scale(ad.matmul(proj, ad.transpose(proj)), 1.0 / tau)
    lse = ad.logsumexp(sim, mask=others)
    weights = np.where(positive, 1.0 / np.maximum(counts, 1)[:, None], 0.0)
    pos_term = ad.sum(ad.mul(sim, Tensor(weights)))
    norm_term = ad.sum(ad.mul(lse, Tensor(valid.astype(np.float64))))
    return ad.sub(norm_term, pos_term)


def _check_labels(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.intp)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise LabelOutOfRange(f"labels must lie in [0, {num_classes})")
    return labels


def ce_loss(logits, labels) -> Tensor:
    """Mean softmax cross-entropy."""
    logits = as_tensor(logits)
    n, c = logits.shape
    labels = _check_labels(labels, c)
    onehot = np.zeros((n, c))
    onehot[np.arange(n), labels] = 1.0
    picked = ad.sum(ad.mul(logits, Tensor(onehot)), axis=1)
    return ad.mean(ad.sub(ad.logsumexp(logits), picked))


def _softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def response_kd_loss(student_logits, teacher_logits, temperature: float) -> Tensor:
    """``T**2`` times the batch-mean KL(softmax(teacher/T) || softmax(student/T)).

    The teacher side is a constant.
    """
    student = as_tensor(student_logits)
    teacher = np.asarray(getattr(teacher_logits, "data", teacher_logits), dtype=np.float64)
    if student.shape != teacher.shape:
        raise ShapeMismatch(f"student {student.shape} vs teacher {teacher.shape}")
    t = float(temperature)
    n = student.shape[0]
    p = _softmax(teacher / t)
    neg_entropy = float(np.sum(p * np.log(np.where(p > 0, p, 1.0))))
    s = ad.scale(student, 1.0 / t)
    # rows of p sum to 1, so sum_c p_c * lse(s) is just lse(s)
    cross = ad.sub(ad.sum(ad.mul(s, Tensor(p))), ad.sum(ad.logsumexp(s)))
    kl = ad.sub(Tensor(neg_entropy), cross)
    return ad.scale(kl, t * t / n)


def angle_similarity(zi, zj, zk, eps: float = EPS) -> float:
    """Cosine of the angle at vertex ``zj`` of the triangle (zi, zj, zk)."""
    zi, zj, zk = (np.asarray(z, dtype=np.float64) for z in (zi, zj, zk))
    a, b = zi - zj, zk - zj
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na <= eps or nb <= eps:
        raise DegenerateTriplet("triplet has coincident points")
    return float(np.dot(a / na, b / nb))


@lru_cache(maxsize=16)
def _all_triplets(n: int) -> np.ndarray:
    return np.array(list(itertools.permutations(range(n), 3)), dtype=np.intp).reshape(-1, 3)


def sample_triplets(n: int, rng: np.random.Generator | None = None, cap: int = MAX_TRIPLETS) -> np.ndarray:
    """All ordered triplets of distinct indices, or a uniform sample of ``cap`` of them."""
    trip = _all_triplets(n)
    if len(trip) <= cap:
        return trip
    if rng is None:
        raise ValueError(f"{len(trip)} triplets exceed the cap of {cap}; an rng is required to sample")
    pick = np.sort(rng.choice(len(trip), size=cap, replace=False))
    return trip[pick]


def all_pairs(n: int) -> np.ndarray:
    i, j = np.triu_indices(n, k=1)
    return np.stack([i, j], axis=1).astype(np.intp)


def _const(x) -> np.ndarray:
    return np.asarray(getattr(x, "data", x), dtype=np.float64)


def _cosines(feats: Tensor, trip: np.ndarray) -> Tensor:
    zi = ad.gather_rows(feats, trip[:, 0])
    zj = ad.gather_rows(feats, trip[:, 1])
    zk = ad.gather_rows(feats, trip[:, 2])
    e_ij = ad.l2_normalize(ad.sub(zi, zj))
    e_kj = ad.l2_normalize(ad.sub(zk, zj))
    return ad.sum(ad.mul(e_ij, e_kj), axis=1)


def _nondegenerate_triplets(feats: np.ndarray, trip: np.ndarray, eps: float) -> np.ndarray:
    d1 = np.linalg.norm(feats[trip[:, 0]] - feats[trip[:, 1]], axis=1)
    d2 = np.linalg.norm(feats[trip[:, 2]] - feats[trip[:, 1]], axis=1)
    return (d1 > eps) & (d2 > eps)


def _check_pair(teacher: np.ndarray, student: Tensor, minimum: int) -> None:
    if teacher.shape != student.shape:
        raise ShapeMismatch(f"teacher {teacher.shape} vs student {student.shape}")
    if teacher.shape[0] < minimum:
        raise BatchTooSmall(f"need at least {minimum} rows, got {teacher.shape[0]}")


def rkd_angle_loss(teacher_feats, student_feats, triplets=None, stats: dict | None = None) -> Tensor:
    """Sum over triplets of |cos_teacher - cos_student|.

    ``triplets`` is an (M, 3) index array; None means all ordered triplets.
    Triplets with coincident points under either network are skipped.
    """
    teacher = _const(teacher_feats)
    student = as_tensor(student_feats)
    _check_pair(teacher, student, 3)
    trip = _all_triplets(teacher.shape[0]) if triplets is None else np.asarray(triplets, dtype=np.intp)
    keep = _nondegenerate_triplets(teacher, trip, EPS) & _nondegenerate_triplets(student.data, trip, EPS)
    if stats is not None:
        stats["skipped_triplets"] = int(len(trip) - keep.sum())
    trip = trip[keep]
    if len(trip) == 0:
        return ad.scale(ad.sum(student), 0.0)
    cos_t = _cosines(Tensor(teacher), trip)
    cos_s = _cosines(student, trip)
    return ad.sum(_abs(ad.sub(cos_t, cos_s)))


def _pair_distances(feats: Tensor, pairs: np.ndarray) -> Tensor:
    diff = ad.sub(ad.gather_rows(feats, pairs[:, 0]), ad.gather_rows(feats, pairs[:, 1]))
    return ad.sqrt(ad.sum(ad.square(diff), axis=1))


def mean_pair_distance(feats) -> float:
    feats = _const(feats)
    pairs = all_pairs(feats.shape[0])
    return float(np.mean(np.linalg.norm(feats[pairs[:, 0]] - feats[pairs[:, 1]], axis=1)))


def rkd_distance_loss(teacher_feats, student_feats, pairs=None, stats: dict | None = None) -> Tensor:
    """Sum over pairs of |d_teacher - d_student| / mu_teacher.

    ``mu_teacher`` is the mean teacher distance over all unordered pairs of
    the batch, whichever ``pairs`` are summed; a batch whose teacher
    points all coincide gives 0.  A pair whose student points
    coincide contributes ``d_teacher / mu`` as a constant: the distance has
    no gradient at zero, so the subgradient 0 is used.
    """
    teacher = _const(teacher_feats)
    student = as_tensor(student_feats)
    _check_pair(teacher, student, 2)
    n = teacher.shape[0]
    pairs = all_pairs(n) if pairs is None else np.asarray(pairs, dtype=np.intp).reshape(-1, 2)
    mu = mean_pair_distance(teacher)
    if mu <= EPS:
        # every teacher point coincides: nothing to normalize against
        return ad.scale(ad.sum(student), 0.0)
    d_t = np.linalg.norm(teacher[pairs[:, 0]] - teacher[pairs[:, 1]], axis=1)
    d_s = np.linalg.norm(student.data[pairs[:, 0]] - student.data[pairs[:, 1]], axis=1)
    live = d_s > EPS
    if stats is not None:
        stats["flat_pairs"] = int(len(pairs) - live.sum())
    flat = Tensor(float(np.sum(np.abs(d_t[~live] - d_s[~live]))))
    if not live.any():
        return ad.add(ad.scale(ad.sum(student), 0.0), ad.scale(flat, 1.0 / mu))
    diff = ad.sub(Tensor(d_t[live]), _pair_distances(student, pairs[live]))
    return ad.scale(ad.add(ad.sum(_abs(diff)), flat), 1.0 / mu)


def distill_loss(
    teacher_feats,
    student_feats,
    lambda_dis: float,
    triplets=None,
    pairs=None,
    stats: dict | None = None,
) -> Tensor:
    """Angle term plus ``lambda_dis`` times the distance term."""
    angle = rkd_angle_loss(teacher_feats, student_feats, triplets, stats)
    if lambda_dis == 0:
        return angle
    dist = rkd_distance_loss(teacher_feats, student_feats, pairs, stats)
    return ad.add(angle, ad.scale(dist, lambda_dis))


def total_loss(supcon, distill, alpha: float) -> Tensor:
    """``alpha * supcon + (1 - alpha) * distill``."""
    if not 0.0 <= alpha <= 1.0:
        raise AlphaOutOfRange(f"alpha={alpha} outside [0, 1]")
    return ad.add(ad.scale(as_tensor(supcon), alpha), ad.scale(as_tensor(distill), 1.0 - alpha))
