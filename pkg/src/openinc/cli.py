"""Command line entry point: ``openinc run config.json``.

A config names a dataset, the session split, one or more methods and a
list of seeds.  Every (method, seed) pair is run independently and writes
into ``<output_dir>/<name>/seed_<seed>/``; a ``summary.csv`` of the final
session of every run is then rebuilt from those ``results.csv`` files.

Example::

    {
      "dataset": "default",
      "methods": ["supcon_rkd", {"method": "ce_reskd", "epochs_incremental": 50}],
      "seeds": [0, 1, 2],
      "alpha": 0.2
    }
"""

from __future__ import annotations

import argparse
import concurrent.futures
import csv
import json
import logging
import math
import os
import statistics
import sys
from dataclasses import asdict, dataclass, replace
from pathlib import Path

from .data import BlobSpec, Dataset, generate_blobs, load_csv, plan_sessions
from .errors import InvalidSpec, RunFailed, ValidationError
from .losses import LossConfig
from .osr import OsrConfig
from .runner import METHODS, RunConfig, read_results_csv, run

log = logging.getLogger("openinc")

SUMMARY_HEADER = [
    "method",
    "runs",
    "accuracy_mean",
    "accuracy_std",
    "auroc_mean",
    "auroc_std",
    "r_s_mean",
    "r_s_std",
]

# run parameters accepted at top level (shared) or inside a method object
RUN_KEYS = {
    "alpha": float,
    "lambda_dis": float,
    "tau": float,
    "kd_temperature": float,
    "k_nn": int,
    "tau_osr": float,
    "learning_rate": float,
    "epochs_base": int,
    "epochs_incremental": int,
    "batch_size": int,
    "memory": int,
    "classifier_lr": float,
    "classifier_epochs": int,
    "classifier_batch_size": int,
    "hidden_dims": list,
    "feature_dim": int,
    "proj_dim": int,
    "max_triplets": int,
    "record_wall_time": bool,
}
TOP_KEYS = {"dataset", "dataset_seed", "classes_per_session", "outlier_classes", "methods", "seeds", "output_dir"}
BLOB_KEYS = {f for f in BlobSpec.__dataclass_fields__ if f != "seed"}


@dataclass(frozen=True)
class CsvSource:
    path: str
    test_fraction: float = 0.2


@dataclass(frozen=True)
class MethodRun:
    name: str  # output directory name; defaults to the method
    config: RunConfig  # seed filled in per run


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: BlobSpec | CsvSource
    methods: list[MethodRun]
    seeds: list[int]
    output_dir: Path = Path("results")
    classes_per_session: int = 2
    outlier_classes: int = 2
    dataset_seed: int | None = None  # None: each run uses its own seed

    def dataset_for(self, seed: int) -> Dataset:
        data_seed = seed if self.dataset_seed is None else self.dataset_seed
        if isinstance(self.dataset, CsvSource):
            return load_csv(self.dataset.path, seed=data_seed, test_fraction=self.dataset.test_fraction)
        return generate_blobs(replace(self.dataset, seed=data_seed))


# --------------------------------------------------------------------------
# config parsing


def _typed(key: str, value, kind):
    if kind is bool:
        if not isinstance(value, bool):
            raise ValidationError(key, "expected true or false")
        return value
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ValidationError(key, "expected an integer")
        return value
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
            raise ValidationError(key, "expected a finite number")
        return float(value)
    if kind is list:
        if not isinstance(value, list) or not all(isinstance(v, int) and not isinstance(v, bool) and v > 0 for v in value):
            raise ValidationError(key, "expected a list of positive integers")
        return tuple(value)
    raise AssertionError(kind)


def _check_range(key: str, value, lo=None, hi=None, lo_open=False) -> None:
    if lo is not None and (value <= lo if lo_open else value < lo):
        raise ValidationError(key, f"must be {'>' if lo_open else '>='} {lo}, got {value}")
    if hi is not None and value > hi:
        raise ValidationError(key, f"must be <= {hi}, got {value}")


_RANGES = {
    "alpha": dict(lo=0.0, hi=1.0),
    "lambda_dis": dict(lo=0.0),
    "tau": dict(lo=0.0, lo_open=True),
    "kd_temperature": dict(lo=0.0, lo_open=True),
    "k_nn": dict(lo=1),
    "tau_osr": dict(lo=0.0, hi=1.0),
    "learning_rate": dict(lo=0.0, lo_open=True),
    "epochs_base": dict(lo=0),
    "epochs_incremental": dict(lo=0),
    "batch_size": dict(lo=2),
    "memory": dict(lo=1),
    "classifier_lr": dict(lo=0.0, lo_open=True),
    "classifier_epochs": dict(lo=0),
    "classifier_batch_size": dict(lo=1),
    "feature_dim": dict(lo=1),
    "proj_dim": dict(lo=1),
    "max_triplets": dict(lo=1),
}


def _run_params(obj: dict, where: str) -> dict:
    params = {}
    for key, value in obj.items():
        if key not in RUN_KEYS:
            raise ValidationError(key, f"unknown key in {where}")
        params[key] = _typed(key, value, RUN_KEYS[key])
        if key in _RANGES:
            _check_range(key, params[key], **_RANGES[key])
    return params


def _build_run_config(method: str, params: dict) -> RunConfig:
    loss = LossConfig(
        **{k: params[k] for k in ("alpha", "lambda_dis", "tau", "kd_temperature") if k in params}
    )
    osr = OsrConfig(**{k: params[k] for k in ("k_nn", "tau_osr") if k in params})
    rest = {k: v for k, v in params.items() if k in RunConfig.__dataclass_fields__}
    return RunConfig(method=method, loss=loss, osr=osr, **rest)


def _parse_dataset(value) -> BlobSpec | CsvSource:
    if value == "default":
        return BlobSpec()
    if not isinstance(value, dict) or "kind" not in value:
        raise ValidationError("dataset", 'expected "default" or an object with "kind": "blobs" | "csv"')
    body = {k: v for k, v in value.items() if k != "kind"}
    if value["kind"] == "blobs":
        for key in body:
            if key not in BLOB_KEYS:
                raise ValidationError(key, "unknown key in dataset")
        kinds = {"center_radius": float, "sigma": float, "test_fraction": float}
        spec = BlobSpec(**{k: _typed(k, v, kinds.get(k, int)) for k, v in body.items()})
        try:
            spec.validate()
        except InvalidSpec as exc:
            raise ValidationError("dataset", str(exc)) from None
        return spec
    if value["kind"] == "csv":
        for key in body:
            if key not in ("path", "test_fraction"):
                raise ValidationError(key, "unknown key in dataset")
        if not isinstance(body.get("path"), str):
            raise ValidationError("path", "csv dataset needs a path string")
        frac = _typed("test_fraction", body.get("test_fraction", 0.2), float)
        if not 0.0 < frac < 1.0:
            raise ValidationError("test_fraction", "must lie in (0, 1)")
        return CsvSource(body["path"], frac)
    raise ValidationError("kind", f"unknown dataset kind {value['kind']!r}")


def _parse_methods(value, shared: dict) -> list[MethodRun]:
    if not isinstance(value, list) or not value:
        raise ValidationError("methods", "expected a non-empty list")
    runs, names = [], set()
    for item in value:
        if isinstance(item, str):
            method, name, overrides = item, item, {}
        elif isinstance(item, dict):
            if "method" not in item:
                raise ValidationError("method", "method objects need a 'method' key")
            method = item["method"]
            name = item.get("name", method)
            overrides = _run_params({k: v for k, v in item.items() if k not in ("method", "name")}, "method")
        else:
            raise ValidationError("methods", "entries must be strings or objects")
        if method not in METHODS:
            raise ValidationError("method", f"unknown method {method!r}; expected one of {', '.join(METHODS)}")
        if not isinstance(name, str) or not name or "/" in name or name in names:
            raise ValidationError("name", f"run names must be unique, non-empty directory names ({name!r})")
        names.add(name)
        runs.append(MethodRun(name, _build_run_config(method, {**shared, **overrides})))
    return runs


def parse_config_dict(doc: dict) -> ExperimentConfig:
    if not isinstance(doc, dict):
        raise ValidationError("<root>", "config must be a JSON object")
    for key in doc:
        if key not in TOP_KEYS and key not in RUN_KEYS:
            raise ValidationError(key, "unknown key")
    for key in ("dataset", "methods", "seeds"):
        if key not in doc:
            raise ValidationError(key, "required key missing")
    shared = _run_params({k: v for k, v in doc.items() if k in RUN_KEYS}, "config")
    seeds = doc["seeds"]
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) and not isinstance(s, bool) and s >= 0 for s in seeds):
        raise ValidationError("seeds", "expected a non-empty list of non-negative integers")
    if len(set(seeds)) != len(seeds):
        raise ValidationError("seeds", "seeds must be distinct")
    cps = _typed("classes_per_session", doc.get("classes_per_session", 2), int)
    n_out = _typed("outlier_classes", doc.get("outlier_classes", 2), int)
    _check_range("classes_per_session", cps, lo=1)
    _check_range("outlier_classes", n_out, lo=1)
    data_seed = doc.get("dataset_seed")
    if data_seed is not None:
        data_seed = _typed("dataset_seed", data_seed, int)
    out = doc.get("output_dir", "results")
    if not isinstance(out, str) or not out:
        raise ValidationError("output_dir", "expected a path string")
    try:
        methods = _parse_methods(doc["methods"], shared)
    except (ValueError, TypeError) as exc:
        if isinstance(exc, ValidationError):
            raise
        raise ValidationError("methods", str(exc)) from None
    return ExperimentConfig(
        dataset=_parse_dataset(doc["dataset"]),
        methods=methods,
        seeds=list(seeds),
        output_dir=Path(out),
        classes_per_session=cps,
        outlier_classes=n_out,
        dataset_seed=data_seed,
    )


def parse_config(path) -> ExperimentConfig:
    """Read and validate a JSON config; a relative csv path is resolved against the config's folder."""
    path = Path(path)
    text = path.read_text()  # FileNotFoundError propagates
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValidationError("<json>", f"line {exc.lineno}: {exc.msg}") from None
    cfg = parse_config_dict(doc)
    if isinstance(cfg.dataset, CsvSource) and not Path(cfg.dataset.path).is_absolute():
        cfg = replace(cfg, dataset=replace(cfg.dataset, path=str(path.parent / cfg.dataset.path)))
    return cfg


# --------------------------------------------------------------------------
# execution


def _run_one(cfg: ExperimentConfig, method: MethodRun, seed: int) -> Path:
    out_dir = cfg.output_dir / method.name / f"seed_{seed}"
    run_cfg = replace(method.config, seed=seed)
    session = 0
    try:
        dataset = cfg.dataset_for(seed)
        plan = plan_sessions(dataset.num_classes, cfg.classes_per_session, cfg.outlier_classes, seed)
        out_dir.mkdir(parents=True, exist_ok=True)
        meta = {
            "name": method.name,
            "method": run_cfg.method,
            "seed": seed,
            "dataset_fingerprint": dataset.fingerprint,
            "sessions": plan.sessions,
            "config": _jsonable(asdict(run_cfg)),
        }
        (out_dir / "run.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
        run(run_cfg, dataset, plan, out_dir)
    except Exception as exc:
        session = getattr(exc, "session", session)
        raise RunFailed(method.name, seed, session, exc) from exc
    return out_dir


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def _threads() -> int:
    raw = os.environ.get("OPENINC_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ValidationError("OPENINC_THREADS", f"expected an integer, got {raw!r}") from None


def run_experiment(cfg: ExperimentConfig) -> int:
    """Run every (method, seed); returns 0 when all succeed, 1 otherwise."""
    jobs = [(m, s) for m in cfg.methods for s in cfg.seeds]
    failures: list[RunFailed] = []
    workers = min(_threads(), len(jobs))
    if workers == 1:
        for m, s in jobs:
            try:
                _run_one(cfg, m, s)
            except RunFailed as exc:
                failures.append(exc)
    else:
        with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_run_one, cfg, m, s) for m, s in jobs]
            for fut in futures:
                try:
                    fut.result()
                except RunFailed as exc:
                    failures.append(exc)
    for exc in failures:
        log.error("%s", exc)
    write_summary(cfg.output_dir, [m.name for m in cfg.methods])
    return 1 if failures else 0


def _final_rows(output_dir: Path, name: str) -> list[dict]:
    rows = []
    seed_dirs = sorted((output_dir / name).glob("seed_*"), key=lambda p: int(p.name.split("_", 1)[1]))
    for d in seed_dirs:
        results = d / "results.csv"
        if results.exists():
            table = read_results_csv(results)
            if table:
                rows.append(table[-1])
    return rows


def _mean_std(values: list[float]) -> tuple[str, str]:
    vals = [v for v in values if not math.isnan(v)]
    if not vals:
        return "", ""
    std = statistics.stdev(vals) if len(vals) > 1 else 0.0
    return repr(statistics.fmean(vals)), repr(std)


def write_summary(output_dir, names: list[str]) -> Path:
    """One row per run name: mean and sample std over seeds of the final-session metrics."""
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    path = output_dir / "summary.csv"
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SUMMARY_HEADER)
        for name in names:
            finals = _final_rows(output_dir, name)
            row = [name, str(len(finals))]
            for key in ("accuracy", "auroc", "r_s"):
                row.extend(_mean_std([r[key] for r in finals]))
            writer.writerow(row)
    return path


# --------------------------------------------------------------------------
# argv


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="openinc", description="Incremental open-set recognition experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="run the experiment described by a JSON config")
    p_run.add_argument("config", help="path to the JSON config")
    p_run.add_argument("--output-dir", help="override the config's output_dir")
    p_run.add_argument("--seed", type=int, help="run this single seed instead of the config's list")
    p_run.add_argument("--quiet", action="store_true", help="only log warnings and errors")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO,
        format="%(levelname)s %(message)s",
        stream=sys.stderr,
    )
    try:
        cfg = parse_config(args.config)
    except FileNotFoundError:
        print(f"openinc: config not found: {args.config}", file=sys.stderr)
        return 2
    except ValidationError as exc:
        print(f"openinc: invalid config: {exc}", file=sys.stderr)
        return 2
    if args.output_dir:
        cfg = replace(cfg, output_dir=Path(args.output_dir))
    if args.seed is not None:
        if args.seed < 0:
            print("openinc: --seed must be non-negative", file=sys.stderr)
            return 2
        cfg = replace(cfg, seeds=[args.seed])
    try:
        return run_experiment(cfg)
    except ValidationError as exc:
        print(f"openinc: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
