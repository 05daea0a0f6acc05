"""Rehearsal memory with isometric exemplar selection.

New classes are sampled at evenly spaced ranks of their distance to the
class center; old classes are shrunk by seeded random subsampling so the
whole store fits a fixed budget ``R``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DuplicateClass, EmptyClass, MemoryTooSmall, QuotaExceedsClass
from .model import ModelState, encode


@dataclass(frozen=True)
class ClassExemplars:
    inputs: np.ndarray  # (n, input_dim) raw rows
    features: np.ndarray  # (n, feature_dim) cached encoder outputs
    source_rows: np.ndarray  # (n,) row indices into the dataset
    distance_ranks: np.ndarray  # (n,) rank by distance to center at selection time

    def __len__(self) -> int:
        return len(self.inputs)

    def take(self, idx) -> "ClassExemplars":
        idx = np.asarray(idx, dtype=np.intp)
        return ClassExemplars(self.inputs[idx], self.features[idx], self.source_rows[idx], self.distance_ranks[idx])


@dataclass(frozen=True)
class ExemplarStore:
    capacity: int
    per_class: dict[int, ClassExemplars] = field(default_factory=dict)

    @property
    def classes(self) -> list[int]:
        return list(self.per_class)

    def __len__(self) -> int:
        return sum(len(ex) for ex in self.per_class.values())

    def counts(self) -> dict[int, int]:
        return {c: len(ex) for c, ex in self.per_class.items()}

    def stacked(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(inputs, features, class ids) concatenated in class insertion order."""
        if not self.per_class:
            raise ValueError("store is empty")
        inputs = np.concatenate([ex.inputs for ex in self.per_class.values()])
        feats = np.concatenate([ex.features for ex in self.per_class.values()])
        labels = np.concatenate([np.full(len(ex), c) for c, ex in self.per_class.items()])
        return inputs, feats, labels


def isometric_select(features, quota: int) -> tuple[np.ndarray, np.ndarray]:
    """Indices picked at distance ranks 0, s, 2s, ... (s = N // quota), and those ranks.

    Distances are Euclidean to the mean feature; ties keep the original order.
    """
    features = np.asarray(features, dtype=np.float64)
    n = len(features)
    if n == 0:
        raise EmptyClass("class has no samples")
    if quota < 1 or quota > n:
        raise QuotaExceedsClass(f"quota {quota} not in [1, {n}]")
    center = features.mean(axis=0)
    dist = np.linalg.norm(features - center, axis=1)
    order = np.argsort(dist, kind="stable")
    stride = n // quota
    ranks = np.arange(0, n, stride)[:quota]
    return order[ranks], ranks


def shrink_old_classes(store: ExemplarStore, new_total_classes: int, rng: np.random.Generator) -> ExemplarStore:
    """Keep a seeded random subset of ``R // new_total_classes`` items per stored class."""
    quota = store.capacity // new_total_classes if new_total_classes > 0 else 0
    if quota < 1:
        raise MemoryTooSmall(f"memory {store.capacity} cannot hold {new_total_classes} classes")
    kept = {}
    for c, ex in store.per_class.items():
        if len(ex) <= quota:
            kept[c] = ex
        else:
            kept[c] = ex.take(np.sort(rng.choice(len(ex), size=quota, replace=False)))
    return replace(store, per_class=kept)


def update_memory(
    store: ExemplarStore,
    new_class_data: dict[int, tuple[np.ndarray, np.ndarray, np.ndarray]],
    rng: np.random.Generator,
) -> ExemplarStore:
    """Shrink old classes, then add isometrically selected exemplars for each new class.

    ``new_class_data`` maps class id to ``(inputs, features, source_rows)``.
    """
    dup = set(new_class_data) & set(store.per_class)
    if dup:
        raise DuplicateClass(f"classes already stored: {sorted(dup)}")
    total = len(store.per_class) + len(new_class_data)
    quota = store.capacity // total if total else 0
    if quota < 1:
        raise MemoryTooSmall(f"memory {store.capacity} cannot hold {total} classes")
    shrunk = shrink_old_classes(store, total, rng) if new_class_data else store
    per_class = dict(shrunk.per_class)
    for c, (inputs, feats, rows) in new_class_data.items():
        idx, ranks = isometric_select(feats, quota)
        per_class[c] = ClassExemplars(
            np.asarray(inputs, dtype=np.float64)[idx],
            np.asarray(feats, dtype=np.float64)[idx],
            np.asarray(rows)[idx],
            ranks,
        )
    return replace(store, per_class=per_class)


def refresh_features(store: ExemplarStore, state: ModelState) -> ExemplarStore:
    """Re-encode every stored raw input with the current encoder."""
    per_class = {c: replace(ex, features=encode(state, ex.inputs).data) for c, ex in store.per_class.items()}
    return replace(store, per_class=per_class)


def write_exemplar_csv(store: ExemplarStore, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["class_id", "exemplar_index", "source_row_index", "distance_rank"])
        for c, ex in store.per_class.items():
            for i, (row, rank) in enumerate(zip(ex.source_rows, ex.distance_ranks)):
                writer.writerow([c, i, int(row), int(rank)])
