import csv
import json

import pytest
import yaml

from vitguide.cli import EXIT_CONFIG, EXIT_NUMERIC, EXIT_OK, ConfigError, config_hash, load_config, main

from .conftest import tiny_config


def _write_config(tmp_path, **extra):
    tree = tiny_config(epochs=1, teacher_epochs=1).to_dict()
    tree.update(extra)
    path = tmp_path / "exp.yaml"
    path.write_text(yaml.safe_dump(tree))
    return path


def _metrics_without_time(path):
    with open(path) as fh:
        return [row[:-1] for row in csv.reader(fh)]


def test_overrides_and_validation(tmp_path):
    path = _write_config(tmp_path)
    cfg = load_config(str(path), ["beta=1.0", "student.depth=2", "seed=7"], mode="train", out=str(tmp_path / "o"))
    assert cfg.train.beta == 1.0 and cfg.train.student.depth == 2 and cfg.train.seed == 7
    with pytest.raises(ConfigError, match="beta"):
        load_config(str(path), ["beta=-2"])
    with pytest.raises(ConfigError, match="bogus"):
        load_config(str(path), ["bogus=1"])
    with pytest.raises(ConfigError):
        load_config(str(path), ["novalue"])
    with pytest.raises(ConfigError):
        load_config(str(path), mode="sweep")  # empty grid


def test_config_errors_exit_2(tmp_path, capsys):
    path = _write_config(tmp_path)
    assert main(["--config", str(path), "--set", "ratio=3", "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    assert "ratio" in capsys.readouterr().err
    assert main(["--config", str(tmp_path / "missing.yaml")]) == EXIT_CONFIG
    bad = tmp_path / "bad.yaml"
    bad.write_text("- just\n- a list\n")
    assert main(["--config", str(bad)]) == EXIT_CONFIG


def test_train_eval_diagnose(tmp_path, capsys):
    path = _write_config(tmp_path)
    out = tmp_path / "run"
    assert main(["--config", str(path), "--mode", "train", "--out", str(out)]) == EXIT_OK
    for name in ["student.npz", "teacher.npz", "metrics.csv", "manifest.json", "result.json"]:
        assert (out / name).exists(), name
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["status"] == "ok" and manifest["seed"] == 0
    assert set(manifest["versions"]) >= {"numpy", "python", "vitguide"}
    recorded = json.loads((out / "result.json").read_text())["student_test_acc"]
    capsys.readouterr()

    assert main(["--config", str(path), "--mode", "eval", "--out", str(out)]) == EXIT_OK
    printed = capsys.readouterr().out
    acc = float(printed.split("accuracy:")[1].split()[0])
    assert abs(acc - recorded) <= 1e-6

    diag = tmp_path / "diag"
    args = ["--config", str(path), "--mode", "diagnose", "--out", str(diag),
            "--set", f"checkpoint={out / 'student.npz'}", "--set", f"baseline_checkpoint={out / 'student.npz'}"]
    assert main(args) == EXIT_OK
    assert (diag / "attention_distance.csv").exists()
    assert (diag / "rollout" / "sample0.pgm").exists()
    assert json.loads((diag / "diagnostics.json").read_text())["delta"] == 0.0


def test_manifest_reruns_identically(tmp_path):
    path = _write_config(tmp_path, guidance=False)
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["--config", str(path), "--out", str(a)]) == EXIT_OK
    manifest = json.loads((a / "manifest.json").read_text())
    replay = tmp_path / "replay.yaml"
    cfg = manifest["config"]
    cfg["out"] = str(b)
    replay.write_text(yaml.safe_dump(cfg))
    assert main(["--config", str(replay)]) == EXIT_OK
    assert _metrics_without_time(a / "metrics.csv") == _metrics_without_time(b / "metrics.csv")
    assert json.loads((b / "manifest.json").read_text())["config_sha256"] != ""


def test_pretrain_teacher_mode(tmp_path):
    path = _write_config(tmp_path)
    out = tmp_path / "t"
    assert main(["--config", str(path), "--mode", "pretrain-teacher", "--out", str(out)]) == EXIT_OK
    assert (out / "teacher.npz").exists()
    assert "teacher_test_acc" in json.loads((out / "teacher_metrics.json").read_text())


def test_sweep_over_beta(tmp_path):
    path = _write_config(tmp_path, sweep={"beta": [0.0, 1.0, 2.5]})
    out = tmp_path / "s"
    assert main(["--config", str(path), "--mode", "sweep", "--out", str(out)]) == EXIT_OK
    with open(out / "summary.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [float(r["beta"]) for r in rows] == [0.0, 1.0, 2.5]
    for r in rows:
        assert (out / r["metrics"]).exists()
    assert len(list((out / "points").glob("*/metrics.csv"))) == 3


def test_sweep_over_teacher_depth(tmp_path):
    path = _write_config(tmp_path, sweep={"teacher_depth": [8, 14]})
    out = tmp_path / "d"
    assert main(["--config", str(path), "--mode", "sweep", "--out", str(out)]) == EXIT_OK
    with open(out / "summary.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [int(r["teacher_depth"]) for r in rows] == [8, 14]
    assert all(r["teacher_acc"] and r["student_acc"] for r in rows)


def test_numeric_fault_exits_3(tmp_path):
    path = _write_config(tmp_path, base_lr=1e6, final_lr=1e6, warmup_epochs=0, weight_decay=0.0, epochs=4)
    out = tmp_path / "f"
    with pytest.warns(RuntimeWarning):
        code = main(["--config", str(path), "--out", str(out)])
    assert code == EXIT_NUMERIC
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["status"] == "failed" and "failure" in manifest


def test_config_hash_is_stable(tmp_path):
    path = _write_config(tmp_path)
    assert config_hash(load_config(str(path))) == config_hash(load_config(str(path)))
    assert config_hash(load_config(str(path))) != config_hash(load_config(str(path), ["beta=1.0"]))
