import json
import subprocess
import sys

import pytest

from branchformer.checkpoint import load_checkpoint
from branchformer.cli import main

TINY_ENCODER = dict(N=1, d=8, d_hidden=16, h=2, K=3, merge="weighted_average")


def _train_config(tmp_path, **enc):
    cfg = {
        "encoder": {**TINY_ENCODER, **enc},
        "task": {"task": "seqclass", "length": 23},
        "steps": 5,
        "batch_size": 4,
        "eval_every": 5,
        "eval_samples": 20,
        "out_dir": str(tmp_path / "run"),
    }
    path = tmp_path / "train.json"
    path.write_text(json.dumps(cfg))
    return path


def _error(capsys):
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


@pytest.fixture
def checkpoint(tmp_path, capsys):
    assert main(["train", "--config", str(_train_config(tmp_path))]) == 0
    return json.loads(capsys.readouterr().out)["checkpoint"]


def test_train_prints_summary(tmp_path, capsys):
    assert main(["train", "--config", str(_train_config(tmp_path)), "--steps", "3", "--out", str(tmp_path / "o")]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["steps"] == 3 and summary["out_dir"] == str(tmp_path / "o")
    assert (tmp_path / "o" / "checkpoints" / "step_000003.ckpt").exists()


def test_prune_then_analyze(tmp_path, checkpoint, capsys):
    pruned = tmp_path / "p" / "pruned.ckpt"
    assert main(["prune", "--checkpoint", checkpoint, "--out", str(pruned)]) == 0
    assert load_checkpoint(pruned)[1].pruned
    capsys.readouterr()
    assert main(["analyze", "--checkpoint", checkpoint, "--out", str(tmp_path / "a"), "--samples", "20"]) == 0
    assert json.loads(capsys.readouterr().out)["written"] == ["branch_weights.csv", "diagonality.csv"]
    # a pruned model has nothing left to analyze
    assert main(["analyze", "--checkpoint", str(pruned), "--out", str(tmp_path / "b")]) == 2
    assert _error(capsys)["error"] == "config"


def test_gradcheck_passes_and_fails(tmp_path, capsys):
    enc = tmp_path / "enc.json"
    enc.write_text(json.dumps(TINY_ENCODER))
    assert main(["gradcheck", "--config", str(enc), "--frames", "3"]) == 0
    out = capsys.readouterr().out
    assert "# attention=mhsa merge=weighted_average" in out and "FAIL" not in out
    assert main(["gradcheck", "--config", str(enc), "--frames", "3", "--tolerance", "0"]) == 1
    assert _error(capsys)["error"] == "check_failed"


@pytest.mark.parametrize(
    "argv,code",
    [
        (["train", "--config", "/nonexistent.json"], "config"),
        (["analyze", "--checkpoint", "/nonexistent.ckpt", "--out", "/tmp/x"], "io"),
        (["bench", "--tgrid", "1,2,x"], "config"),
        (["bench", "--tgrid", "8,16"], "contract"),
    ],
)
def test_errors_are_json_with_exit_2(argv, code, capsys):
    assert main(argv) == 2
    err = _error(capsys)
    assert err["error"] == code and err["message"]


def test_bad_config_values(tmp_path, capsys):
    path = _train_config(tmp_path, h=3)
    assert main(["train", "--config", str(path)]) == 2
    assert _error(capsys)["error"] == "config"
    path.write_text("{not json")
    assert main(["train", "--config", str(path)]) == 2
    assert "invalid JSON" in _error(capsys)["message"]


def test_corrupt_checkpoint_error_code(tmp_path, checkpoint, capsys):
    blob = bytearray(open(checkpoint, "rb").read())
    (tmp_path / "cut.ckpt").write_bytes(bytes(blob[: len(blob) // 2]))
    assert main(["prune", "--checkpoint", str(tmp_path / "cut.ckpt"), "--out", str(tmp_path / "x.ckpt")]) == 2
    assert _error(capsys)["error"] == "checkpoint_truncated"


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "branchformer", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    for cmd in ("train", "gradcheck", "bench", "analyze", "prune"):
        assert cmd in proc.stdout
