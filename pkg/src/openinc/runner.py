"""Session-by-session training and evaluation.

Incremental methods train on the base session, then for every later
session snapshot a teacher, train on new-class data mixed with stored
exemplars, update the memory, retrain the linear classifier on exemplars
and evaluate.  Joint methods train once on every inlier class.

Method names:

* ``supcon_rkd``   SupCon + angle/distance relational distillation
* ``ce_reskd``     cross-entropy + response (logit) distillation
* ``ce_rkd``       cross-entropy + relational distillation
* ``supcon_joint`` / ``ce_joint``  offline training on all inlier classes
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import exemplar as ex
from . import losses
from .autodiff import Tape
from .data import TEST, TRAIN, Dataset, SessionPlan
from .errors import MemoryTooSmall
from .losses import LossConfig
from .metrics import incremental_accuracy, spread_report
from .model import (
    ModelState,
    classify,
    encode,
    expand_classifier,
    init_model,
    project,
    save_model,
    snapshot_teacher,
    teacher_classify,
    teacher_encode,
)
from .optim import SGD, Adam
from .osr import OUTLIER, OsrConfig, ScoreRecord, auroc, knn_class_similarity, osr_scores, write_score_csv

log = logging.getLogger(__name__)

INCREMENTAL_METHODS = ("supcon_rkd", "ce_reskd", "ce_rkd")
JOINT_METHODS = ("supcon_joint", "ce_joint")
METHODS = INCREMENTAL_METHODS + JOINT_METHODS

RESULTS_HEADER = ["session", "classes", "accuracy", "auroc", "s_intra", "s_inter", "r_s", "seconds"]


@dataclass(frozen=True)
class RunConfig:
    method: str = "supcon_rkd"
    epochs_base: int = 100
    epochs_incremental: int = 200
    learning_rate: float = 1e-3
    batch_size: int = 64
    memory: int = 40
    loss: LossConfig = field(default_factory=LossConfig)
    osr: OsrConfig = field(default_factory=OsrConfig)
    seed: int = 0
    classifier_lr: float = 0.01
    classifier_epochs: int = 50
    classifier_batch_size: int = 8
    hidden_dims: tuple[int, ...] = (64, 64)
    feature_dim: int = 16
    proj_dim: int = 8
    max_triplets: int = losses.MAX_TRIPLETS
    record_wall_time: bool = False

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.epochs_base < 0 or self.epochs_incremental < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 2 or self.classifier_batch_size < 1:
            raise ValueError("batch sizes too small")
        if self.memory < 1:
            raise ValueError("memory must be >= 1")

    @property
    def contrastive(self) -> bool:
        return self.method.startswith("supcon")

    @property
    def joint(self) -> bool:
        return self.method in JOINT_METHODS


@dataclass
class SessionReport:
    session: int
    classes: int
    accuracy: float
    auroc: float | None
    s_intra: float
    s_inter: float
    r_s: float
    seconds: float = 0.0

    def row(self, with_time: bool) -> list[str]:
        def fmt(x):
            return "" if x is None else repr(float(x))

        return [
            str(self.session),
            str(self.classes),
            fmt(self.accuracy),
            fmt(self.auroc),
            fmt(self.s_intra),
            fmt(self.s_inter),
            fmt(self.r_s),
            fmt(self.seconds) if with_time else "",
        ]


@dataclass
class RunResult:
    reports: list[SessionReport]
    state: ModelState
    store: ex.ExemplarStore
    scores: list[list[ScoreRecord]]
    stores: list[ex.ExemplarStore] = field(default_factory=list)


class _Streams:
    """Independent RNG streams so that e.g. batching does not shift init draws."""

    def __init__(self, seed: int):
        names = ("init", "batches", "exemplars", "memory", "triplets", "classifier")
        children = np.random.SeedSequence(seed).spawn(len(names))
        for name, child in zip(names, children):
            setattr(self, name, np.random.default_rng(child))


class _Observed:
    """Classifier output position <-> dataset class id."""

    def __init__(self):
        self.classes: list[int] = []

    def add(self, classes) -> None:
        self.classes.extend(int(c) for c in classes)

    def positions(self, labels) -> np.ndarray:
        lookup = {c: i for i, c in enumerate(self.classes)}
        return np.array([lookup[int(c)] for c in labels], dtype=np.intp)

    def __len__(self) -> int:
        return len(self.classes)


# --------------------------------------------------------------------------
# training pieces


def _representation_loss(cfg: RunConfig, state: ModelState, z, labels, tape: Tape):
    if cfg.contrastive:
        return losses.supcon_loss(project(state, z, tape), labels, cfg.loss.tau)
    return losses.ce_loss(classify(state, z, tape), labels)


def _distillation_loss(cfg, state, z, xb, ex_rows, old_width, streams):
    if cfg.method == "ce_reskd":
        teacher_logits = teacher_classify(state, teacher_encode(state, xb)).data
        select = np.eye(state.classifier.width)[:, :old_width]
        student_old = ad.matmul(classify(state, z, z.tape), ad.Tensor(select))
        return losses.response_kd_loss(student_old, teacher_logits, cfg.loss.kd_temperature)
    if len(ex_rows) < 3:
        return None
    z_s = ad.gather_rows(z, ex_rows)
    z_t = teacher_encode(state, xb[ex_rows]).data
    trip = losses.sample_triplets(len(ex_rows), streams.triplets, cfg.max_triplets)
    return losses.distill_loss(z_t, z_s, cfg.loss.lambda_dis, triplets=trip)


def _trainable(cfg: RunConfig, state: ModelState) -> list[np.ndarray]:
    params = [p for layer in state.encoder.layers for p in layer.params()]
    if cfg.contrastive:
        params += [p for layer in state.head.layers for p in layer.params()]
    else:
        params += state.classifier_params()
    return params


def fit_backbone(
    cfg: RunConfig,
    state: ModelState,
    inputs: np.ndarray,
    labels: np.ndarray,
    epochs: int,
    streams: _Streams,
    memory: tuple[np.ndarray, np.ndarray] | None = None,
    old_width: int = 0,
) -> list[float]:
    """Adam over minibatches; returns the mean loss per epoch.

    With ``memory=(inputs, labels)`` every minibatch is extended by the
    exemplars (all of them, or a subsample of ``batch_size // 2`` if the
    store is larger than a batch) and the distillation term is added when
    a teacher exists.
    """
    params = _trainable(cfg, state)
    opt = Adam(params, lr=cfg.learning_rate)
    distill = state.teacher is not None and memory is not None and cfg.loss.alpha < 1.0
    n = len(inputs)
    history = []
    for _ in range(epochs):
        perm = streams.batches.permutation(n)
        total, steps = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            xb, yb = inputs[idx], labels[idx]
            ex_rows = np.empty(0, dtype=np.intp)
            if memory is not None and len(memory[0]):
                mx, my = memory
                if len(mx) <= cfg.batch_size:
                    sel = np.arange(len(mx))
                else:
                    sel = np.sort(streams.exemplars.choice(len(mx), size=cfg.batch_size // 2, replace=False))
                ex_rows = np.arange(len(xb), len(xb) + len(sel))
                xb = np.concatenate([xb, mx[sel]])
                yb = np.concatenate([yb, my[sel]])
            if len(xb) < 2:
                continue
            tape = Tape()
            z = encode(state, xb, tape)
            loss = _representation_loss(cfg, state, z, yb, tape)
            if distill:
                dis = _distillation_loss(cfg, state, z, xb, ex_rows, old_width, streams)
                if dis is not None:
                    loss = losses.total_loss(loss, dis, cfg.loss.alpha)
            tape.backward(loss)
            opt.step([tape.grad(p) for p in params])
            total += loss.item()
            steps += 1
        history.append(total / max(steps, 1))
    for p in params:
        if not np.all(np.isfinite(p)):
            raise FloatingPointError("non-finite weights after training")
    return history


def fit_classifier(cfg: RunConfig, state: ModelState, feats: np.ndarray, positions: np.ndarray, rng) -> None:
    """Plain SGD on the linear classifier over fixed features."""
    params = state.classifier_params()
    opt = SGD(params, lr=cfg.classifier_lr)
    n = len(feats)
    for _ in range(cfg.classifier_epochs):
        perm = rng.permutation(n)
        for start in range(0, n, cfg.classifier_batch_size):
            idx = perm[start : start + cfg.classifier_batch_size]
            tape = Tape()
            loss = losses.ce_loss(classify(state, feats[idx], tape), positions[idx])
            tape.backward(loss)
            opt.step([tape.grad(p) for p in params])


def _update_store(state, store, dataset: Dataset, classes, streams) -> ex.ExemplarStore:
    new = {}
    for c in classes:
        rows = dataset.rows([c], TRAIN)
        feats = encode(state, dataset.inputs[rows]).data
        new[int(c)] = (dataset.inputs[rows], feats, rows)
    store = ex.update_memory(store, new, streams.memory)
    return ex.refresh_features(store, state)


def _retrain_classifier(cfg, state, store, observed: _Observed, streams) -> None:
    _, feats, labels = store.stacked()
    fit_classifier(cfg, state, feats, observed.positions(labels), streams.classifier)


# --------------------------------------------------------------------------
# evaluation


def evaluate_session(
    state: ModelState,
    store: ex.ExemplarStore,
    dataset: Dataset,
    observed_classes: list[int],
    outlier_classes: list[int],
    cfg: RunConfig,
    session: int,
) -> tuple[SessionReport, list[ScoreRecord]]:
    """Metrics on the test split.

    Accuracy uses the neural classifier over observed-class rows; AUROC
    compares ``sc_osr`` of those rows against outlier-class rows (absent
    when there are none); spreads use encoder features of observed rows.
    """
    observed = np.asarray(observed_classes)
    in_rows = dataset.rows(observed, TEST)
    out_rows = dataset.rows(outlier_classes, TEST) if outlier_classes else np.empty(0, dtype=np.intp)
    z_in = encode(state, dataset.inputs[in_rows]).data
    truth = dataset.labels[in_rows]
    pred = observed[np.argmax(classify(state, z_in).data, axis=1)]
    accuracy = incremental_accuracy(pred, truth)
    spreads = spread_report(z_in, truth)

    store_classes = np.asarray(store.classes)
    records: list[ScoreRecord] = []
    sims_in = knn_class_similarity(z_in, store, cfg.osr.k_nn)
    sc_in, knn_in = osr_scores(sims_in)
    for row, t, p, s, sc, k in zip(in_rows, truth, pred, sims_in, sc_in, knn_in):
        records.append(ScoreRecord(int(row), int(t), s, float(sc), int(p), int(store_classes[k])))
    au = None
    if len(out_rows):
        z_out = encode(state, dataset.inputs[out_rows]).data
        pred_out = observed[np.argmax(classify(state, z_out).data, axis=1)]
        sims_out = knn_class_similarity(z_out, store, cfg.osr.k_nn)
        sc_out, knn_out = osr_scores(sims_out)
        for row, p, s, sc, k in zip(out_rows, pred_out, sims_out, sc_out, knn_out):
            records.append(ScoreRecord(int(row), OUTLIER, s, float(sc), int(p), int(store_classes[k])))
        au = auroc(sc_in, sc_out)
    report = SessionReport(
        session, len(observed), accuracy, au, spreads.s_intra, spreads.s_inter, spreads.r_s
    )
    return report, records


# --------------------------------------------------------------------------
# protocol


def _new_model(cfg: RunConfig, dataset: Dataset, streams: _Streams) -> ModelState:
    return init_model(
        dataset.input_dim,
        cfg.hidden_dims,
        cfg.feature_dim,
        cfg.proj_dim,
        num_classes=0,
        seed=cfg.seed,
        rng=streams.init,
    )


def _session_data(dataset: Dataset, classes, observed: _Observed):
    rows = dataset.rows(classes, TRAIN)
    return dataset.inputs[rows], observed.positions(dataset.labels[rows])


def _memory_batch(store: ex.ExemplarStore, observed: _Observed):
    inputs, _, labels = store.stacked()
    return inputs, observed.positions(labels)


def train_base_session(cfg: RunConfig, dataset: Dataset, classes, streams: _Streams, observed: _Observed):
    """Train from scratch on the first session, pick exemplars, fit the classifier."""
    if not classes:
        raise ValueError("base session has no classes")
    state = _new_model(cfg, dataset, streams)
    observed.add(classes)
    expand_classifier(state, len(classes))
    x, y = _session_data(dataset, classes, observed)
    fit_backbone(cfg, state, x, y, cfg.epochs_base, streams)
    store = _update_store(state, ex.ExemplarStore(cfg.memory), dataset, classes, streams)
    _retrain_classifier(cfg, state, store, observed, streams)
    return state, store


def train_incremental_session(cfg: RunConfig, state, store, dataset: Dataset, classes, streams, observed: _Observed):
    """Teacher snapshot, mixed new-data/exemplar training, memory update, classifier refit."""
    if not len(store):
        raise ValueError("incremental session needs a non-empty exemplar store")
    snapshot_teacher(state)
    old_width = len(observed)
    observed.add(classes)
    expand_classifier(state, len(classes))
    x, y = _session_data(dataset, classes, observed)
    fit_backbone(
        cfg, state, x, y, cfg.epochs_incremental, streams, memory=_memory_batch(store, observed), old_width=old_width
    )
    store = _update_store(state, store, dataset, classes, streams)
    _retrain_classifier(cfg, state, store, observed, streams)
    return state, store


def run_incremental(cfg: RunConfig, dataset: Dataset, plan: SessionPlan, out_dir=None) -> RunResult:
    if cfg.joint:
        raise ValueError(f"{cfg.method} is a joint method; use run_joint")
    _check_memory(cfg, plan)
    streams = _Streams(cfg.seed)
    observed = _Observed()
    reports, scores, stores = [], [], []
    state = store = None
    for s, classes in enumerate(plan.inlier_sessions):
        t0 = time.perf_counter()
        try:
            if s == 0:
                state, store = train_base_session(cfg, dataset, classes, streams, observed)
            else:
                state, store = train_incremental_session(cfg, state, store, dataset, classes, streams, observed)
            report, records = evaluate_session(
                state, store, dataset, observed.classes, plan.outlier_classes, cfg, s
            )
        except Exception as exc:
            exc.session = s  # picked up by the CLI for error reporting
            raise
        report.seconds = time.perf_counter() - t0
        log.info(
            "%s seed=%d session=%d classes=%d acc=%.4f auroc=%s r_s=%.4f",
            cfg.method, cfg.seed, s, report.classes, report.accuracy,
            "-" if report.auroc is None else f"{report.auroc:.4f}", report.r_s,
        )
        reports.append(report)
        scores.append(records)
        stores.append(store)
        if out_dir is not None:
            _write_session(out_dir, s, state, store, records, cfg)
    result = RunResult(reports, state, store, scores, stores)
    if out_dir is not None:
        write_results_csv(reports, Path(out_dir) / "results.csv", cfg.record_wall_time)
    return result


def run_joint(cfg: RunConfig, dataset: Dataset, plan: SessionPlan, out_dir=None) -> RunResult:
    """Offline training on every inlier class at once; one report.

    Exemplars are still selected for outlier scoring.  ``ce_joint`` keeps
    its jointly trained classifier; ``supcon_joint`` fits the classifier
    on the exemplars.
    """
    if not cfg.joint:
        raise ValueError(f"{cfg.method} is incremental; use run_incremental")
    _check_memory(cfg, plan)
    streams = _Streams(cfg.seed)
    observed = _Observed()
    classes = plan.inlier_classes
    t0 = time.perf_counter()
    try:
        state = _new_model(cfg, dataset, streams)
        observed.add(classes)
        expand_classifier(state, len(classes))
        x, y = _session_data(dataset, classes, observed)
        fit_backbone(cfg, state, x, y, cfg.epochs_base, streams)
        store = _update_store(state, ex.ExemplarStore(cfg.memory), dataset, classes, streams)
        if cfg.contrastive:
            _retrain_classifier(cfg, state, store, observed, streams)
        report, records = evaluate_session(state, store, dataset, observed.classes, plan.outlier_classes, cfg, 0)
    except Exception as exc:
        exc.session = 0
        raise
    report.seconds = time.perf_counter() - t0
    log.info(
        "%s seed=%d joint classes=%d acc=%.4f auroc=%s r_s=%.4f",
        cfg.method, cfg.seed, report.classes, report.accuracy,
        "-" if report.auroc is None else f"{report.auroc:.4f}", report.r_s,
    )
    if out_dir is not None:
        _write_session(out_dir, 0, state, store, records, cfg)
        write_results_csv([report], Path(out_dir) / "results.csv", cfg.record_wall_time)
    return RunResult([report], state, store, [records], [store])


def run(cfg: RunConfig, dataset: Dataset, plan: SessionPlan, out_dir=None) -> RunResult:
    return (run_joint if cfg.joint else run_incremental)(cfg, dataset, plan, out_dir)


def _check_memory(cfg: RunConfig, plan: SessionPlan) -> None:
    if cfg.memory < len(plan.inlier_classes):
        raise MemoryTooSmall(f"memory {cfg.memory} < {len(plan.inlier_classes)} inlier classes")


# --------------------------------------------------------------------------
# output files


def _write_session(out_dir, session: int, state, store, records, cfg: RunConfig) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_score_csv(records, out / f"scores_{session}.csv", cfg.osr.tau_osr)
    ex.write_exemplar_csv(store, out / f"exemplars_{session}.csv")
    save_model(state, out / f"model_{session}.json", session=session)


def write_results_csv(reports: list[SessionReport], path, with_time: bool = False) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(RESULTS_HEADER)
        for r in reports:
            writer.writerow(r.row(with_time))


def read_results_csv(path) -> list[dict]:
    rows = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            rows.append(
                {
                    k: (int(v) if k in ("session", "classes") else (float(v) if v != "" else math.nan))
                    for k, v in row.items()
                }
            )
    return rows
