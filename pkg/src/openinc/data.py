"""Datasets: seeded Gaussian blobs, CSV ingestion, and session planning."""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import IndivisibleSplit, InvalidSpec, MissingColumn, ParseError

TRAIN, TEST = "train", "test"


@dataclass(frozen=True)
class Dataset:
    inputs: np.ndarray  # (N, input_dim)
    labels: np.ndarray  # (N,) dense ids in [0, C)
    split: np.ndarray  # (N,) "train" / "test"
    label_map: dict = field(default_factory=dict)  # original label -> dense id
    fingerprint: str = ""

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if self.labels.size else 0

    @property
    def input_dim(self) -> int:
        return self.inputs.shape[1]

    def rows(self, classes, part: str) -> np.ndarray:
        """Row indices of ``part`` belonging to ``classes``, in dataset order."""
        mask = np.isin(self.labels, list(classes)) & (self.split == part)
        return np.flatnonzero(mask)


@dataclass(frozen=True)
class BlobSpec:
    num_classes: int = 10
    samples_per_class: int = 200
    input_dim: int = 20
    center_radius: float = 10.0
    sigma: float = 1.0
    seed: int = 0
    test_fraction: float = 0.2

    def validate(self) -> None:
        if self.num_classes < 2:
            raise InvalidSpec("num_classes must be >= 2")
        if self.sigma <= 0:
            raise InvalidSpec("sigma must be positive")
        if self.samples_per_class < 2:
            raise InvalidSpec("samples_per_class must be >= 2 so both splits are populated")
        if self.input_dim < 1 or self.center_radius < 0:
            raise InvalidSpec("input_dim must be >= 1 and center_radius >= 0")
        if not 0.0 < self.test_fraction < 1.0:
            raise InvalidSpec("test_fraction must lie in (0, 1)")

    def fingerprint(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return f"blobs-seed{self.seed}-{hashlib.sha256(blob).hexdigest()[:12]}"


@dataclass(frozen=True)
class SessionPlan:
    sessions: list[list[int]]

    @property
    def outlier_session(self) -> int:
        return len(self.sessions) - 1

    @property
    def inlier_sessions(self) -> list[list[int]]:
        return self.sessions[:-1]

    @property
    def outlier_classes(self) -> list[int]:
        return self.sessions[-1]

    @property
    def inlier_classes(self) -> list[int]:
        return [c for s in self.inlier_sessions for c in s]


def stratified_split(labels: np.ndarray, test_fraction: float, rng: np.random.Generator) -> np.ndarray:
    """Per-class shuffle, then the first ``ceil(n * test_fraction)`` rows go to test."""
    split = np.full(len(labels), TRAIN, dtype=object)
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        n_test = min(max(1, math.ceil(len(idx) * test_fraction)), len(idx) - 1)
        split[rng.permutation(idx)[:n_test]] = TEST
    return split.astype(str)


def generate_blobs(spec: BlobSpec) -> Dataset:
    """Isotropic Gaussian classes around centers drawn uniformly on a sphere."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    directions = rng.standard_normal((spec.num_classes, spec.input_dim))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    centers = spec.center_radius * directions
    labels = np.repeat(np.arange(spec.num_classes), spec.samples_per_class)
    noise = rng.standard_normal((len(labels), spec.input_dim))
    inputs = centers[labels] + spec.sigma * noise
    split = stratified_split(labels, spec.test_fraction, rng)
    return Dataset(
        inputs,
        labels,
        split,
        {c: c for c in range(spec.num_classes)},
        spec.fingerprint(),
    )


def load_csv(path, seed: int = 0, test_fraction: float = 0.2) -> Dataset:
    """Read ``label,f0,f1,...`` rows.

    Labels are re-indexed densely in order of first appearance (the map
    is kept on the dataset); the train/test split is stratified and seeded.
    """
    path = Path(path)
    raw = path.read_bytes()
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise MissingColumn("empty file; expected a header row") from None
        if not header or header[0] != "label":
            raise MissingColumn("first column must be 'label'")
        if len(header) < 2:
            raise MissingColumn("no feature columns")
        label_map: dict[str, int] = {}
        labels, rows = [], []
        for line_no, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(header):
                raise ParseError(f"expected {len(header)} cells, got {len(row)}", line_no)
            key = row[0].strip()
            try:
                values = [float(cell) for cell in row[1:]]
            except ValueError as exc:
                raise ParseError(str(exc), line_no) from None
            if not all(math.isfinite(v) for v in values):
                raise ParseError("non-finite value", line_no)
            labels.append(label_map.setdefault(key, len(label_map)))
            rows.append(values)
    labels_arr = np.array(labels, dtype=np.intp)
    inputs = np.array(rows, dtype=np.float64).reshape(len(rows), len(header) - 1)
    split = stratified_split(labels_arr, test_fraction, np.random.default_rng(seed))
    digest = hashlib.sha256(raw).hexdigest()[:12]
    return Dataset(inputs, labels_arr, split, label_map, f"csv-seed{seed}-{digest}")


def plan_sessions(
    num_classes: int,
    classes_per_session: int,
    num_outlier_classes: int,
    seed: int,
) -> SessionPlan:
    """Shuffle class ids and cut them into equal inlier sessions plus a final outlier session."""
    if num_outlier_classes < 1:
        raise IndivisibleSplit("at least one outlier class is required")
    inliers = num_classes - num_outlier_classes
    if classes_per_session < 1 or inliers < classes_per_session or inliers % classes_per_session:
        raise IndivisibleSplit(
            f"{inliers} inlier classes cannot be split into sessions of {classes_per_session}"
        )
    order = [int(c) for c in np.random.default_rng(seed).permutation(num_classes)]
    sessions = [order[i : i + classes_per_session] for i in range(0, inliers, classes_per_session)]
    sessions.append(order[inliers:])
    return SessionPlan(sessions)


def nearest_center_accuracy(dataset: Dataset) -> float:
    """Test accuracy of classifying raw inputs by the nearest train-class mean."""
    train = dataset.split == TRAIN
    classes = np.unique(dataset.labels)
    centers = np.stack([dataset.inputs[train & (dataset.labels == c)].mean(axis=0) for c in classes])
    test = ~train
    d = np.linalg.norm(dataset.inputs[test][:, None, :] - centers[None], axis=-1)
    return float(np.mean(classes[np.argmin(d, axis=1)] == dataset.labels[test]))
