import csv
import json

import jsonschema
import numpy as np
import pytest

from fimesh import autograd as ag
from fimesh.cli import SCHEMA_PATH, main
from fimesh.resample import SampleItem, read_items, write_items
from fimesh.train import item_psnrs

SMALL_TRAIN = ["--channels", "4", "--up-channels", "2", "2", "--batch", "16"]


@pytest.fixture
def cache(tmp_path, monkeypatch):
    d = tmp_path / "cache"
    monkeypatch.setenv("FIMESH_CACHE_DIR", str(d))
    return d


def run(*argv):
    return main([str(a) for a in argv])


def make_data(root, seed=1, frames=5):
    assert run("--seed", seed, "synth-frames", "--count", frames, "--width", 64,
               "--levels", 2, 4, "--out-dir", root / "frames") == 0
    assert run("build-dataset", "--manifest", root / "frames" / "manifest.json",
               "--out-dir", root / "data") == 0
    return root / "data"


def metrics_rows(path):
    return [json.loads(line) for line in path.read_text().splitlines()]


def test_full_pipeline(tmp_path, cache, capsys):
    data = make_data(tmp_path)
    assert json.loads((data / "dataset.json").read_text())["items"] == {"train": 320, "test": 80}
    out = tmp_path / "run"
    assert run("train", "--data", data, "--out", out, "--epochs", 2, *SMALL_TRAIN) == 0
    for name in ("best.ckpt", "last.ckpt", "model_config.json", "metrics.jsonl",
                 "resolved_config.json", "summary.json"):
        assert (out / name).is_file(), name
    schema = json.loads(SCHEMA_PATH.read_text())
    rows = metrics_rows(out / "metrics.jsonl")
    assert [r["epoch"] for r in rows] == [0, 1, 2]
    for r in rows:
        jsonschema.validate(r, schema)

    assert run("eval", "--run", out, "--data", data / "test.samples", "--csv", tmp_path / "e.csv") == 0
    report = json.loads((out / "eval.json").read_text())
    assert report["average_floor_psnr"] > 0
    with open(tmp_path / "e.csv") as f:
        assert len(list(csv.DictReader(f))) == 80

    assert run("bench", "--run", out, "--trials", 20) == 0
    bench = json.loads((out / "bench.json").read_text())["models"][str(out)]
    assert bench["per_frame_ms_mean"] > 0 and bench["per_frame_ms_stdev"] >= 0

    frame = tmp_path / "frames" / "frame_0000.png"
    assert run("render", "--image", frame, "--run", out, "--out", tmp_path / "sr.png") == 0
    assert run("render", "--image", frame, "--level", 4, "--faces", "0,5", "--out",
               tmp_path / "rt.png") == 0
    sig = np.random.default_rng(0).random((80, 1, 84))
    np.save(tmp_path / "s.npy", sig)
    assert run("render", "--signal", tmp_path / "s.npy", "--out", tmp_path / "s.png") == 0
    assert (tmp_path / "s.png").is_file()


def test_gen_commands(tmp_path, cache, capsys):
    assert run("gen-mesh", "--level", 4, "--out", tmp_path / "m.mesh") == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["vertices"] == 84
    assert run("gen-ops", "--level", 2, "--kind", "full", "--out", tmp_path / "o.ops") == 0
    assert run("precompute-rotations", "--level", 3) == 0
    assert (cache / "rotations_L3.bin").is_file()
    assert (tmp_path / "resolved_config.json").is_file()


def test_epochs_zero_writes_initial_checkpoint(tmp_path, cache):
    data = make_data(tmp_path)
    out = tmp_path / "run"
    assert run("train", "--data", data, "--out", out, "--epochs", 0, *SMALL_TRAIN) == 0
    rows = metrics_rows(out / "metrics.jsonl")
    assert len(rows) == 1 and rows[0]["epoch"] == 0
    assert (out / "best.ckpt").read_bytes() == (out / "last.ckpt").read_bytes()


def strip_timing(rows):
    return [{k: v for k, v in r.items() if k != "elapsed_s"} for r in rows]


def test_deterministic_reruns(tmp_path, cache):
    outs = []
    for tag in ("a", "b"):
        root = tmp_path / tag
        data = make_data(root, seed=7)
        assert run("--seed", 3, "train", "--data", data, "--out", root / "run", "--epochs", 2,
                   *SMALL_TRAIN) == 0
        outs.append(root)
    a, b = outs
    for rel in ("data/train.samples", "data/test.samples", "run/best.ckpt", "run/last.ckpt"):
        assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel
    assert strip_timing(metrics_rows(a / "run/metrics.jsonl")) == strip_timing(
        metrics_rows(b / "run/metrics.jsonl"))


def test_replay_resolved_config(tmp_path, cache):
    data = make_data(tmp_path)
    out = tmp_path / "run"
    assert run("train", "--data", data, "--out", out, "--epochs", 1, *SMALL_TRAIN) == 0
    first = (out / "last.ckpt").read_bytes()
    assert run("--config", out / "resolved_config.json") == 0
    assert (out / "last.ckpt").read_bytes() == first


def test_exit_codes(tmp_path, cache):
    assert run("build-dataset", "--manifest", tmp_path / "nope.json", "--out-dir", tmp_path) == 3
    assert run("gen-mesh", "--level", 9, "--kind", "full", "--out", tmp_path / "x") == 2
    assert run("eval", "--run", tmp_path / "missing", "--data", tmp_path / "x") == 3
    assert run("--config", tmp_path / "missing.json") == 3
    with pytest.raises(SystemExit) as e:
        run("train")
    assert e.value.code == 2


def test_bad_faces_and_mismatched_checkpoint(tmp_path, cache):
    data = make_data(tmp_path)
    out = tmp_path / "run"
    assert run("train", "--data", data, "--out", out, "--epochs", 0, *SMALL_TRAIN) == 0
    frame = tmp_path / "frames" / "frame_0000.png"
    assert run("render", "--image", frame, "--level", 4, "--faces", "0,99", "--out",
               tmp_path / "x.png") == 2
    cfg = json.loads((out / "model_config.json").read_text())
    cfg["channels"] = 6
    (out / "model_config.json").write_text(json.dumps(cfg))
    assert run("eval", "--run", out, "--data", data / "test.samples") == 2


def test_nan_loss_exits_numeric(tmp_path, cache):
    data = tmp_path / "data"
    data.mkdir()
    rng = np.random.default_rng(0)
    items = [SampleItem(0, f, 2, 4, rng.random((1, 45)), np.full((1, 84), np.nan)) for f in range(4)]
    write_items(items, data / "train.samples")
    assert run("train", "--data", data, "--out", tmp_path / "run", "--epochs", 1, *SMALL_TRAIN) == 4


def test_eval_of_targets_is_capped():
    y = np.random.default_rng(0).random((3, 1, 20))
    assert np.all(item_psnrs(y, y) == 99.0)


def test_threads_do_not_change_dataset(tmp_path, cache):
    make_data(tmp_path)
    assert run("--threads", 3, "build-dataset", "--manifest", tmp_path / "frames/manifest.json",
               "--out-dir", tmp_path / "data3") == 0
    for split in ("train", "test"):
        assert (tmp_path / "data" / f"{split}.samples").read_bytes() == (
            tmp_path / "data3" / f"{split}.samples").read_bytes()
    assert len(read_items(tmp_path / "data3/train.samples")) == 320


def test_tiny_desk_run_reduces_train_mse(tmp_path, cache):
    """20 frames, L4 -> L6, C=8, 5 epochs."""
    assert run("synth-frames", "--count", 20, "--width", 360, "--levels", 4, 6,
               "--out-dir", tmp_path / "frames") == 0
    assert run("build-dataset", "--manifest", tmp_path / "frames/manifest.json",
               "--out-dir", tmp_path / "data") == 0
    out = tmp_path / "run"
    assert run("train", "--data", tmp_path / "data", "--out", out, "--epochs", 5, "--batch", 16,
               "--channels", 8, "--up-channels", 4, 4) == 0
    rows = metrics_rows(out / "metrics.jsonl")
    assert rows[-1]["train_mse"] < rows[0]["train_mse"]
    assert rows[-1]["elapsed_s"] < 600
