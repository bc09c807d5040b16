"""Exercises the command line surface end to end on tiny budgets.

Exit code contract: 0 success, 2 configuration errors, 3 data errors.
"""

import json

import pytest
from click.testing import CliRunner

from guidedseg.checkpoint import load_checkpoint
from guidedseg.cli import main
from guidedseg.shapes import load_dataset


@pytest.fixture(scope="module")
def runner():
    return CliRunner()


def _text(result):
    out = result.output
    try:
        out += result.stderr
    except ValueError:
        pass
    return out


@pytest.fixture(scope="module")
def data_dir(runner, tmp_path_factory):
    d = tmp_path_factory.mktemp("world") / "data"
    r = runner.invoke(main, ["synth", "--out", str(d), "--seed", "4",
                             "--images", "8"])
    assert r.exit_code == 0, _text(r)
    return d


@pytest.fixture(scope="module")
def video_dir(runner, tmp_path_factory):
    d = tmp_path_factory.mktemp("vids") / "data"
    r = runner.invoke(main, ["synth", "--out", str(d), "--seed", "5",
                             "--video-sequences", "2"])
    assert r.exit_code == 0, _text(r)
    return d


@pytest.fixture(scope="module")
def ckpt(runner, data_dir, tmp_path_factory):
    path = tmp_path_factory.mktemp("ckpt") / "model.npz"
    r = runner.invoke(main, ["train", "--data", str(data_dir), "--out", str(path),
                             "--episodes", "3", "--seed", "2"])
    assert r.exit_code == 0, _text(r)
    return path


def test_synth_writes_loadable_dataset(data_dir):
    samples = load_dataset(data_dir)
    assert len(samples) == 8
    assert (data_dir / "index.json").exists()


def test_train_writes_loadable_checkpoint(ckpt):
    tensors, meta = load_checkpoint(ckpt)
    assert meta["head"] == "feature_fusion"
    assert any(k.startswith("enc1.") for k in tensors)


def test_train_heldout_and_head_flags(runner, data_dir, tmp_path):
    out = tmp_path / "proto.npz"
    r = runner.invoke(main, ["train", "--data", str(data_dir), "--out", str(out),
                             "--episodes", "2", "--head", "proto",
                             "--heldout", "2,7"])
    assert r.exit_code == 0, _text(r)
    _, meta = load_checkpoint(out)
    assert meta["head"] == "prototype"


def test_train_rejects_bad_lr(runner, data_dir, tmp_path):
    r = runner.invoke(main, ["train", "--data", str(data_dir),
                             "--out", str(tmp_path / "x.npz"), "--lr", "-1"])
    assert r.exit_code == 2
    assert "error:" in _text(r)


def test_train_missing_data_is_a_data_error(runner, tmp_path):
    r = runner.invoke(main, ["train", "--data", str(tmp_path / "nowhere"),
                             "--out", str(tmp_path / "x.npz")])
    assert r.exit_code == 3


def test_eval_writes_report(runner, data_dir, ckpt, tmp_path):
    report = tmp_path / "report.json"
    r = runner.invoke(main, ["eval", "--ckpt", str(ckpt), "--data", str(data_dir),
                             "--shots", "1", "--points", "1,2",
                             "--episodes-per-cell", "2", "--report", str(report)])
    assert r.exit_code == 0, _text(r)
    assert "S=1 P=1" in r.output
    body = json.loads(report.read_text())
    assert [c["P"] for c in body["cells"]] == [1, 2]
    assert body["config"]["episodes_per_cell"] == 2


def test_eval_with_unguided_baseline_row(runner, data_dir, ckpt, tmp_path):
    fg = tmp_path / "fg.npz"
    r = runner.invoke(main, ["train", "--data", str(data_dir), "--out", str(fg),
                             "--episodes", "2", "--unguided"])
    assert r.exit_code == 0, _text(r)
    report = tmp_path / "report.json"
    r = runner.invoke(main, ["eval", "--ckpt", str(ckpt), "--data", str(data_dir),
                             "--shots", "1", "--points", "1",
                             "--episodes-per-cell", "2", "--report", str(report),
                             "--fgbg-ckpt", str(fg)])
    assert r.exit_code == 0, _text(r)
    body = json.loads(report.read_text())
    assert "fgbg" in body["baselines"]
    assert len(body["baselines"]["fgbg"]) == 1


def test_eval_rejects_bad_point_budget(runner, data_dir, ckpt, tmp_path):
    r = runner.invoke(main, ["eval", "--ckpt", str(ckpt), "--data", str(data_dir),
                             "--points", "0", "--report", str(tmp_path / "r.json")])
    assert r.exit_code == 2
    assert "error:" in _text(r)


def test_eval_missing_checkpoint_is_a_data_error(runner, data_dir, tmp_path):
    r = runner.invoke(main, ["eval", "--ckpt", str(tmp_path / "ghost.npz"),
                             "--data", str(data_dir),
                             "--report", str(tmp_path / "r.json")])
    assert r.exit_code == 3


def test_bench_reports_timing_and_hardware(runner, data_dir, ckpt, tmp_path):
    report = tmp_path / "bench.json"
    r = runner.invoke(main, ["bench", "--ckpt", str(ckpt), "--data", str(data_dir),
                             "--reps", "3", "--report", str(report)])
    assert r.exit_code == 0, _text(r)
    body = json.loads(report.read_text())
    assert body["ratio"] > 0
    assert body["episode"]["mode"] == "semantic"
    assert "machine" in body["hardware"]
    assert "ratio" in r.output


def test_bench_picks_video_mode_for_sequences(runner, video_dir, ckpt, tmp_path):
    report = tmp_path / "bench.json"
    r = runner.invoke(main, ["bench", "--ckpt", str(ckpt), "--data", str(video_dir),
                             "--reps", "2", "--report", str(report)])
    assert r.exit_code == 0, _text(r)
    assert json.loads(report.read_text())["episode"]["mode"] == "video"


def test_serve_rejects_bad_addr_before_binding(runner, ckpt):
    r = runner.invoke(main, ["serve", "--ckpt", str(ckpt), "--addr", "nonsense"])
    assert r.exit_code == 2
    assert "error:" in _text(r)
