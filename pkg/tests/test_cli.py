import json
from pathlib import Path

import numpy as np
import pytest

from bpfree.cli import ConfigError, SCHEMA, load_config, main, parse_config_text

ROOT = Path(__file__).resolve().parents[1]

HJB_TINY = """
task = hjb
dim = 2
mode = fd
width = 8
rank = 2
epochs = 2
steps_per_epoch = 2
batch_size = 5
n_val = 20
record_wall_time = false
"""


def write(tmp_path, text, name="run.cfg"):
    path = tmp_path / name
    path.write_text(text)
    return path


def test_parse_defaults_and_comments():
    cfg = parse_config_text("task = hjb  # trailing comment\n\n# full line\nsigma = 0.2\n")
    assert cfg.task == "hjb"
    assert cfg["sigma"] == 0.2
    assert cfg["mode"] == "sg" and cfg["batch_size"] == 100 and cfg["n_val"] == 10_000


@pytest.mark.parametrize(
    "text, message",
    [
        ("sigma = 0.1", "task"),
        ("task = hjb\nbogus = 1", "unknown key"),
        ("task = hjb\nsigma = -1", "positive"),
        ("task = hjb\nmode = bp", "mode"),
        ("task = hjb\nsigma 0.1", "key = value"),
        ("task = hjb\nsigma = 0.1\nsigma = 0.2", "duplicate"),
        ("task = hjb\noptimizer = hybrid", "does not apply"),
        ("task = mnist\nmomentum = 1.5", "momentum"),
        ("task = hjb\nrecord_wall_time = maybe", "boolean"),
    ],
)
def test_config_errors(text, message):
    with pytest.raises(ConfigError, match=message):
        parse_config_text(text)


def test_missing_data_file_is_a_config_error(tmp_path):
    path = write(tmp_path, "task = mnist\ntrain_images = nope.gz\n")
    with pytest.raises(ConfigError, match="does not exist"):
        load_config(path)
    assert main(["run", str(path)]) == 2


def test_every_schema_key_has_a_task():
    for key, (_, _, tasks) in SCHEMA.items():
        assert set(tasks) <= {"mnist", "hjb"}, key


def test_hjb_run_writes_artifacts(tmp_path):
    cfg = write(tmp_path, HJB_TINY)
    out = tmp_path / "out"
    assert main(["run", str(cfg), "--out", str(out)]) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["task"] == "hjb" and summary["validation_mse"] > 0
    assert summary["total_queries"] == 2 * 2 * 11
    assert summary["diverged"] is False
    lines = (out / "trace.csv").read_text().splitlines()
    assert lines[0] == "epoch,stage,train_loss,val_metric,cumulative_queries,wall_time"
    assert len(lines) == 3
    ck = json.loads((out / "checkpoint.json").read_text())
    assert ck["version"] == 1 and len(ck["params"]) == summary["num_params"]


def test_identical_seeds_give_identical_traces(tmp_path):
    cfg = write(tmp_path, HJB_TINY)
    main(["run", str(cfg), "--out", str(tmp_path / "a")])
    main(["run", str(cfg), "--out", str(tmp_path / "b")])
    assert (tmp_path / "a" / "trace.csv").read_bytes() == (tmp_path / "b" / "trace.csv").read_bytes()


def test_mnist_desk_config_summary(tmp_path, mnist_paths):
    images, labels = mnist_paths["train"]
    val_images, val_labels = mnist_paths["test"]
    text = f"""
task = mnist
train_images = {images}
train_labels = {labels}
val_images = {val_images}
val_labels = {val_labels}
n_train = 64
n_val = 100
rank = 2
optimizer = zo-signrge
epochs = 1
"""
    out = tmp_path / "m"
    assert main(["run", str(write(tmp_path, text)), "--out", str(out)]) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert 0 <= summary["val_accuracy"] <= 1
    assert summary["total_queries"] == 11


def test_divergence_exit_code(tmp_path):
    # a huge step size drives the sine network's residual to overflow
    text = HJB_TINY.replace("epochs = 2", "epochs = 50") + "lr = 1e300\nlr_decay = 1\n"
    out = tmp_path / "d"
    assert main(["run", str(write(tmp_path, text)), "--out", str(out)]) == 3
    summary = json.loads((out / "summary.json").read_text())
    assert summary["diverged"] is True
    assert (out / "trace.csv").exists()


def test_gridgen(tmp_path, capsys):
    assert main(["gridgen", "21", "3", "--cache-dir", str(tmp_path)]) == 0
    assert "925 nodes" in capsys.readouterr().out
    data = np.load(tmp_path / "smolyak_d21_k3.npz")
    assert data["nodes"].shape == (925, 21)
    assert main(["gridgen", "0", "3"]) == 2


def test_verify_passes(capsys):
    assert main(["verify"]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and out.count("PASS") >= 7


def test_bad_thread_count(tmp_path):
    assert main(["run", str(write(tmp_path, HJB_TINY)), "--threads", "0"]) == 2


@pytest.mark.parametrize("path", sorted((ROOT / "configs").glob("*.cfg")), ids=lambda p: p.name)
def test_shipped_configs_parse(path):
    cfg = parse_config_text(path.read_text(), path)
    assert cfg.task in ("mnist", "hjb")
    if cfg.task == "mnist" and "mnist-subset" in cfg["train_images"]:
        load_config(path)  # desk configs point at files that ship with the repo
