import csv
import json
import statistics

import pytest

from openinc import cli, runner
from openinc.data import BlobSpec
from openinc.errors import ValidationError

FAST = {
    "dataset": {"kind": "blobs", "num_classes": 6, "samples_per_class": 30, "input_dim": 5},
    "epochs_base": 2,
    "epochs_incremental": 2,
    "classifier_epochs": 3,
    "hidden_dims": [16],
    "feature_dim": 8,
    "memory": 12,
}


def write_config(tmp_path, **doc):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(doc))
    return path


def tree_bytes(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_minimal_config_gets_defaults(tmp_path):
    cfg = cli.parse_config(write_config(tmp_path, dataset="default", methods=["supcon_rkd"], seeds=[1]))
    assert cfg.dataset == BlobSpec()
    assert cfg.seeds == [1] and cfg.classes_per_session == 2 and cfg.outlier_classes == 2
    run_cfg = cfg.methods[0].config
    assert (run_cfg.loss.alpha, run_cfg.loss.lambda_dis, run_cfg.loss.tau) == (0.2, 0.5, 0.05)
    assert run_cfg.osr.k_nn == 10 and run_cfg.learning_rate == 0.001
    assert (run_cfg.epochs_base, run_cfg.epochs_incremental) == (100, 200)


def test_unknown_key_named(tmp_path):
    with pytest.raises(ValidationError) as info:
        cli.parse_config(write_config(tmp_path, dataset="default", methods=["supcon_rkd"], seeds=[1], alpha_kd=3))
    assert info.value.key == "alpha_kd"


@pytest.mark.parametrize(
    "extra, key",
    [
        ({"alpha": 1.5}, "alpha"),
        ({"tau": 0}, "tau"),
        ({"k_nn": 0}, "k_nn"),
        ({"seeds": []}, "seeds"),
        ({"methods": ["svm"]}, "method"),
        ({"methods": [{"method": "ce_joint", "alpha_kd": 1}]}, "alpha_kd"),
        ({"dataset": {"kind": "blobs", "sigma": -1.0}}, "dataset"),
        ({"dataset": {"kind": "blobs", "radius": 3}}, "radius"),
        ({"epochs_base": 2.5}, "epochs_base"),
    ],
)
def test_invalid_values_name_their_key(tmp_path, extra, key):
    doc = {"dataset": "default", "methods": ["supcon_rkd"], "seeds": [1], **extra}
    with pytest.raises(ValidationError) as info:
        cli.parse_config_dict(doc)
    assert info.value.key == key


def test_method_overrides_beat_shared_values():
    cfg = cli.parse_config_dict(
        {"dataset": "default", "seeds": [0], "alpha": 0.4,
         "methods": ["ce_rkd", {"method": "ce_rkd", "name": "ce_rkd_a1", "alpha": 1.0}]}
    )
    assert [m.config.loss.alpha for m in cfg.methods] == [0.4, 1.0]
    with pytest.raises(ValidationError):
        cli.parse_config_dict({"dataset": "default", "seeds": [0], "methods": ["ce_rkd", "ce_rkd"]})


def test_missing_config_file_exit_code(tmp_path, capsys):
    assert cli.main(["run", str(tmp_path / "nope.json")]) == 2
    assert "not found" in capsys.readouterr().err


def test_two_methods_three_seeds_tree_and_summary(tmp_path):
    out = tmp_path / "out"
    path = write_config(tmp_path, **FAST, methods=["supcon_rkd", "ce_joint"], seeds=[0, 1, 2], output_dir=str(out))
    assert cli.main(["run", str(path), "--quiet"]) == 0
    run_dirs = sorted(p.parent for p in out.glob("*/seed_*/results.csv"))
    assert len(run_dirs) == 6
    for d in run_dirs:
        assert (d / "run.json").exists() and (d / "model_0.json").exists()
        assert json.loads((d / "run.json").read_text())["dataset_fingerprint"].startswith("blobs-seed")
    with open(out / "summary.csv") as fh:
        summary = list(csv.DictReader(fh))
    assert [r["method"] for r in summary] == ["supcon_rkd", "ce_joint"]
    for row in summary:
        finals = [runner.read_results_csv(out / row["method"] / f"seed_{s}" / "results.csv")[-1] for s in range(3)]
        for key in ("accuracy", "auroc", "r_s"):
            values = [f[key] for f in finals]
            assert float(row[f"{key}_mean"]) == pytest.approx(sum(values) / 3, rel=1e-12)
            assert float(row[f"{key}_std"]) == pytest.approx(statistics.stdev(values), rel=1e-9, abs=1e-15)


def test_rerun_is_byte_identical_and_overrides_apply(tmp_path):
    path = write_config(tmp_path, **FAST, methods=["ce_reskd"], seeds=[0, 1], output_dir=str(tmp_path / "unused"))
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli.main(["run", str(path), "--quiet", "--output-dir", str(a), "--seed", "4"]) == 0
    assert cli.main(["run", str(path), "--quiet", "--output-dir", str(b), "--seed", "4"]) == 0
    assert not (tmp_path / "unused").exists()
    assert [p.name for p in (a / "ce_reskd").iterdir()] == ["seed_4"]
    assert tree_bytes(a) == tree_bytes(b)


def test_process_parallel_matches_serial(tmp_path, monkeypatch):
    path = write_config(tmp_path, **FAST, methods=["ce_rkd", "ce_joint"], seeds=[0, 1])
    assert cli.main(["run", str(path), "--quiet", "--output-dir", str(tmp_path / "serial")]) == 0
    monkeypatch.setenv("OPENINC_THREADS", "2")
    assert cli.main(["run", str(path), "--quiet", "--output-dir", str(tmp_path / "pool")]) == 0
    assert tree_bytes(tmp_path / "serial") == tree_bytes(tmp_path / "pool")


def test_failure_names_method_seed_session(tmp_path, monkeypatch, caplog):
    real = runner.evaluate_session

    def failing(*args, **kwargs):
        if args[-1] == 1:
            raise FloatingPointError("synthetic failure")
        return real(*args, **kwargs)

    monkeypatch.setattr(runner, "evaluate_session", failing)
    path = write_config(tmp_path, **FAST, methods=["supcon_rkd"], seeds=[7], output_dir=str(tmp_path / "o"))
    assert cli.main(["run", str(path), "--quiet"]) == 1
    assert "method=supcon_rkd seed=7 session=1" in caplog.text
    assert "synthetic failure" in caplog.text


def test_csv_dataset_relative_to_config(tmp_path):
    rows = ["label,a,b"] + [f"{c},{c * 10 + i % 3},{i % 5}" for c in range(4) for i in range(12)]
    (tmp_path / "data.csv").write_text("\n".join(rows) + "\n")
    path = write_config(
        tmp_path,
        dataset={"kind": "csv", "path": "data.csv"},
        methods=["ce_joint"],
        seeds=[0],
        classes_per_session=1,
        outlier_classes=1,
        epochs_base=2,
        memory=6,
        hidden_dims=[4],
        output_dir=str(tmp_path / "o"),
    )
    assert cli.main(["run", str(path), "--quiet"]) == 0
    meta = json.loads((tmp_path / "o" / "ce_joint" / "seed_0" / "run.json").read_text())
    assert meta["dataset_fingerprint"].startswith("csv-seed0-")
