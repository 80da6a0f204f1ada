import csv
import json

import numpy as np
import pytest

from mtlab.cli import main
from mtlab.tasks import gen_segmentation_task, load_dataset, save_mask
from mtlab.trainer import load_checkpoint


def _small_config(tmp_path, **overrides):
    cfg = {
        "seed": 5,
        "out_dir": str(tmp_path / "run"),
        "suite": {"tasks": [
            {"kind": "classification", "num_classes": 4, "n_train": 32, "n_eval": 96,
             "difficulty": 0.3, "input_shape": [3, 16, 16]},
            {"kind": "binary-segmentation", "image_size": 16, "max_instances": 2,
             "n_train": 24, "n_eval": 8},
        ]},
        "encoder": [{"type": "conv", "filters": 6, "kernel": 3, "padding": 1},
                    {"type": "relu"}, {"type": "gap"}],
        "iterations": 40,
        "batch_size": 4,
        "checkpoint_every": 20,
        "diagnostics": "exact",
    }
    cfg.update(overrides)
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    return path, tmp_path / "run"


def _rows(path):
    with open(path) as fh:
        return list(csv.DictReader(line for line in fh if not line.startswith("#")))


def test_generate_writes_files_and_manifest(tmp_path):
    cfg, out = _small_config(tmp_path)
    assert main(["generate", "--config", str(cfg), "--no-timestamp"]) == 0
    manifest = json.loads((out / "data" / "manifest.json").read_text())
    assert len(manifest["tasks"]) == 2
    for entry in manifest["tasks"]:
        assert (out / "data" / entry["path"]).exists()
        load_dataset(out / "data" / entry["path"])  # parses cleanly


def test_generate_rerun_is_byte_identical(tmp_path):
    cfg, out = _small_config(tmp_path)
    assert main(["generate", "--config", str(cfg), "--no-timestamp"]) == 0
    first = {p.name: p.read_bytes() for p in (out / "data").iterdir()}
    assert main(["generate", "--config", str(cfg), "--no-timestamp"]) == 0
    second = {p.name: p.read_bytes() for p in (out / "data").iterdir()}
    assert first == second


def test_generate_single_task_config(tmp_path):
    cfg, out = _small_config(tmp_path)
    payload = json.loads(cfg.read_text())
    payload["suite"]["tasks"] = payload["suite"]["tasks"][:1]
    cfg.write_text(json.dumps(payload))
    assert main(["generate", "--config", str(cfg), "--no-timestamp"]) == 0
    files = [p for p in (out / "data").iterdir() if p.suffix == ".mtld"]
    assert len(files) == 1


def test_generate_default_preset_yields_eleven_files(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({
        "seed": 2,
        "out_dir": str(tmp_path / "run"),
        "suite": {"preset": "default", "n_train": 16, "n_eval": 8},
    }))
    assert main(["generate", "--config", str(cfg), "--no-timestamp"]) == 0
    data = tmp_path / "run" / "data"
    files = sorted(p.name for p in data.iterdir() if p.suffix == ".mtld")
    assert len(files) == 11
    manifest = json.loads((data / "manifest.json").read_text())
    assert [e["path"] for e in sorted(manifest["tasks"], key=lambda e: e["task_id"])] \
        == files


def test_invalid_config_leaves_no_outputs(tmp_path):
    out = tmp_path / "run"
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"out_dir": str(out), "checkpoint_every": 0}))
    assert main(["generate", "--config", str(cfg), "--no-timestamp"]) == 2
    assert not out.exists()


def test_train_without_datasets_is_data_error(tmp_path):
    cfg, _ = _small_config(tmp_path)
    assert main(["train", "--config", str(cfg), "--no-timestamp"]) == 3


def test_invalid_config_exit_code(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text('{"iterations": -3}')
    assert main(["train", "--config", str(path)]) == 2


def test_train_log_row_count_and_determinism(tmp_path):
    cfg, out = _small_config(tmp_path)
    assert main(["generate", "--config", str(cfg), "--no-timestamp"]) == 0
    assert main(["train", "--config", str(cfg), "--no-timestamp"]) == 0
    rows = _rows(out / "train_log.csv")
    assert len(rows) == 40
    assert all(int(r["task_id"]) in (0, 1) for r in rows)
    first_log = (out / "train_log.csv").read_bytes()
    first_ck = (out / "checkpoint_final.mtlc").read_bytes()

    assert main(["train", "--config", str(cfg), "--no-timestamp"]) == 0
    assert (out / "train_log.csv").read_bytes() == first_log
    assert (out / "checkpoint_final.mtlc").read_bytes() == first_ck


def test_train_zero_iterations_checkpoint_equals_init(tmp_path):
    from mtlab.cli import _build_models, _load_manifest_tasks
    from mtlab.config import load_config

    cfg, out = _small_config(tmp_path, iterations=0)
    assert main(["generate", "--config", str(cfg), "--no-timestamp"]) == 0
    assert main(["train", "--config", str(cfg), "--no-timestamp"]) == 0
    rows = _rows(out / "train_log.csv")
    assert rows == []

    conf = load_config(cfg)
    tasks = _load_manifest_tasks(conf)
    store, _, _, _ = _build_models(conf, tasks)
    ck = load_checkpoint(out / "checkpoint_final.mtlc")
    assert ck.t == 0
    for group, gdata in ck.groups.items():
        for pid, (theta, _, _) in gdata["params"].items():
            np.testing.assert_array_equal(theta, store.get(pid).data)


def test_eval_untrained_checkpoint_is_chance_level(tmp_path):
    cfg, out = _small_config(tmp_path, iterations=0)
    assert main(["generate", "--config", str(cfg), "--no-timestamp"]) == 0
    assert main(["train", "--config", str(cfg), "--no-timestamp"]) == 0
    assert main(["eval", "--config", str(cfg), "--no-timestamp"]) == 0
    rows = _rows(out / "results.csv")
    assert len(rows) == 2  # one row per task
    cls = next(r for r in rows if r["metric"] == "accuracy")
    assert abs(float(cls["value"]) - 0.25) <= 0.1  # K=4 chance level


def test_eval_checkpoint_model_mismatch_is_data_error(tmp_path):
    cfg, out = _small_config(tmp_path)
    assert main(["generate", "--config", str(cfg), "--no-timestamp"]) == 0
    assert main(["train", "--config", str(cfg), "--no-timestamp"]) == 0
    # same datasets, different encoder: parameter sets disagree
    payload = json.loads(cfg.read_text())
    payload["encoder"][0]["filters"] = 12
    cfg.write_text(json.dumps(payload))
    assert main(["eval", "--config", str(cfg), "--no-timestamp"]) == 3


def test_train_resume_matches_straight_run(tmp_path):
    cfg, out = _small_config(tmp_path, iterations=40, checkpoint_every=20)
    assert main(["generate", "--config", str(cfg), "--no-timestamp"]) == 0
    assert main(["train", "--config", str(cfg), "--no-timestamp"]) == 0
    straight = (out / "checkpoint_final.mtlc").read_bytes()

    half = json.loads(cfg.read_text())
    half["iterations"] = 20
    cfg.write_text(json.dumps(half))
    assert main(["train", "--config", str(cfg), "--no-timestamp"]) == 0

    full = json.loads(cfg.read_text())
    full["iterations"] = 40
    cfg.write_text(json.dumps(full))
    assert main(["train", "--config", str(cfg), "--no-timestamp", "--resume"]) == 0
    assert (out / "checkpoint_final.mtlc").read_bytes() == straight


def test_diagnose_outputs(tmp_path):
    cfg, out = _small_config(tmp_path)
    assert main(["generate", "--config", str(cfg), "--no-timestamp"]) == 0
    assert main(["train", "--config", str(cfg), "--no-timestamp"]) == 0
    assert main(["diagnose", "--config", str(cfg), "--no-timestamp"]) == 0

    smoothed = _rows(out / "diagnostics" / "loss_smoothed.csv")
    raw = _rows(out / "train_log.csv")
    assert len(smoothed) == len(raw) == 40

    consec = _rows(out / "diagnostics" / "consecutive_cosine.csv")
    assert len(consec) == 40 - 1  # no zero-gradient skips in this run
    assert all(0.0 <= float(r["cos_distance"]) <= 2.0 for r in consec)

    matrix = _rows(out / "diagnostics" / "pairwise_matrix.csv")
    assert len(matrix) == 4  # k*k rows for k=2
    for r in matrix:
        if r["samples"] == "0":
            assert r["mean_cos_distance"] == ""
        else:
            assert 0.0 <= float(r["mean_cos_distance"]) <= 2.0


def test_diagnose_without_trace_is_explicit_error(tmp_path, capsys):
    cfg, out = _small_config(tmp_path, diagnostics="off")
    assert main(["generate", "--config", str(cfg), "--no-timestamp"]) == 0
    assert main(["train", "--config", str(cfg), "--no-timestamp"]) == 0
    assert main(["diagnose", "--config", str(cfg), "--no-timestamp"]) == 3
    assert "diagnostics" in capsys.readouterr().err


def test_pq_command_self_comparison(tmp_path, capsys):
    ds = gen_segmentation_task("instance-segmentation", 16, 3, 3, 2, 1, seed=3)
    mask_path = tmp_path / "m.mtlm"
    save_mask(mask_path, ds.gt_mask(0))
    assert main(["pq", str(mask_path), str(mask_path)]) == 0
    out = capsys.readouterr().out
    assert "PQ 1.0" in out


def test_pq_command_hand_fixture(tmp_path, capsys):
    gt = np.zeros((4, 8), dtype=np.int32)
    gt[0, 0:4] = 1
    pred = np.zeros((4, 8), dtype=np.int32)
    pred[0, 1:5] = 1
    pred[3, 0:3] = 2
    from mtlab.metrics import InstanceMask
    save_mask(tmp_path / "gt.mtlm", InstanceMask(gt, {1: 1}))
    save_mask(tmp_path / "pred.mtlm", InstanceMask(pred, {1: 1, 2: 1}))
    assert main(["pq", str(tmp_path / "pred.mtlm"), str(tmp_path / "gt.mtlm")]) == 0
    lines = capsys.readouterr().out.splitlines()
    values = dict(line.split(None, 1) for line in lines)
    assert float(values["PQ"]) == pytest.approx(0.4, abs=5e-16)
    assert values["TP"] == "1" and values["FP"] == "1" and values["FN"] == "0"


def test_pq_command_dimension_mismatch(tmp_path):
    from mtlab.metrics import InstanceMask
    a = np.zeros((4, 4), dtype=np.int32)
    a[0, 0] = 1
    b = np.zeros((5, 5), dtype=np.int32)
    b[0, 0] = 1
    save_mask(tmp_path / "a.mtlm", InstanceMask(a, {1: 1}))
    save_mask(tmp_path / "b.mtlm", InstanceMask(b, {1: 1}))
    assert main(["pq", str(tmp_path / "a.mtlm"), str(tmp_path / "b.mtlm")]) == 3


def test_concentration_std_decreasing_and_deterministic(tmp_path):
    out = tmp_path / "conc"
    args = ["concentration", "--out", str(out), "--no-timestamp",
            "--dims", "4,100,10000", "--pairs", "2000", "--seed", "3"]
    assert main(args) == 0
    rows = _rows(out / "concentration.csv")
    stds = [float(r["std"]) for r in rows]
    assert stds[0] > stds[1] > stds[2]
    first = (out / "concentration.csv").read_bytes()
    assert main(args) == 0
    assert (out / "concentration.csv").read_bytes() == first


def test_concentration_d100_band(tmp_path):
    out = tmp_path / "conc"
    assert main(["concentration", "--out", str(out), "--no-timestamp",
                 "--dims", "100", "--pairs", "20000", "--seed", "1"]) == 0
    (row,) = _rows(out / "concentration.csv")
    assert abs(float(row["std"]) - 0.1) <= 0.005
