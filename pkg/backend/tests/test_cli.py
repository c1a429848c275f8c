from __future__ import annotations

import json

import pytest

from pixmot.__main__ import EXIT_FAILED, EXIT_OK, EXIT_USAGE, main, read_prompt
from pixmot.dataset import encode_caption
from pixmot.patch_codec import read_ppm

TINY_CONFIG = {
    "seed": 3,
    "steps": 2,
    "batch_size": 1,
    "max_resolution": 64,
    "log_every": 1,
    "model": {"vocab_size": 20, "width": 16, "layers": 1, "head_size": 8, "freq_dim": 8},
    "data": {"seed": 0, "count": 2, "image_size": 32},
}


@pytest.fixture(autouse=True)
def _local_scorer(monkeypatch):
    monkeypatch.delenv("PIXMOT_SCORER_URL", raising=False)
    monkeypatch.delenv("PIXMOT_NUM_THREADS", raising=False)


def test_read_prompt_words_and_ids(tmp_path):
    (tmp_path / "words.txt").write_text("red square at center\n")
    (tmp_path / "ids.txt").write_text("1 4 12 2")
    assert read_prompt(tmp_path / "words.txt") == encode_caption("red square at center")
    assert read_prompt(tmp_path / "ids.txt") == [1, 4, 12, 2]


def test_usage_errors_exit_2(capsys):
    assert main([]) == EXIT_USAGE
    assert main(["sample"]) == EXIT_USAGE
    assert main(["verify", "--filter", "nope"]) == EXIT_USAGE
    assert "unknown module" in capsys.readouterr().err


def test_missing_config_exit_2(tmp_path):
    assert main(["train", "--config", str(tmp_path / "none.json"), "--out", str(tmp_path / "o")]) == EXIT_USAGE


def test_verify_single_module(tmp_path, capsys):
    report = tmp_path / "report.jsonl"
    assert main(["verify", "--filter", "numerics", "--report", str(report)]) == EXIT_OK
    lines = [json.loads(line) for line in report.read_text().splitlines()]
    assert lines and all(line["status"] == "pass" for line in lines)
    assert capsys.readouterr().out == report.read_text()


def test_verify_harness_module(capsys):
    assert main(["verify", "--filter", "harness"]) == EXIT_OK
    names = {json.loads(line)["invariant"] for line in capsys.readouterr().out.splitlines()}
    assert names == {"training_is_deterministic", "ema_follows_recurrence"}


def test_verify_failure_exit_1(monkeypatch):
    from pixmot import invariants

    def failing(module=None, faults=None):
        return [invariants.CheckResult("x", "numerics", "fail", 1.0, 0.5)]

    monkeypatch.setattr(invariants, "run_invariant_suite", failing)
    assert main(["verify"]) == EXIT_FAILED


def test_bench(capsys):
    assert main(["bench", "--layout", "T6,I1x2", "--layout", "T9", "--repeats", "1"]) == EXIT_OK
    out = capsys.readouterr().out.splitlines()
    assert len(out) == 2 and out[0].startswith("layout=T6,I1x2")
    assert main(["bench", "--layout", "T2,N1x1"]) == EXIT_USAGE


def test_train_then_sample(tmp_path, capsys):
    config = tmp_path / "toy.json"
    config.write_text(json.dumps(TINY_CONFIG))
    run = tmp_path / "run"
    assert main(["train", "--config", str(config), "--out", str(run)]) == EXIT_OK
    assert (run / "checkpoint.pxmt").exists()
    assert len((run / "metrics.jsonl").read_text().splitlines()) == 2
    assert json.loads((run / "config.json").read_text())["seed"] == 3

    prompt = tmp_path / "prompt.txt"
    prompt.write_text("blue circle at left")
    args = [
        "sample",
        "--checkpoint", str(run / "checkpoint.pxmt"),
        "--prompt", str(prompt),
        "--height", "32",
        "--width", "32",
        "--steps", "2",
        "--gamma", "1",
        "--seed", "5",
    ]
    assert main(args + ["--out", str(tmp_path / "a.ppm")]) == EXIT_OK
    assert main(args + ["--out", str(tmp_path / "b.ppm")]) == EXIT_OK
    a, b = read_ppm(tmp_path / "a.ppm"), read_ppm(tmp_path / "b.ppm")
    assert a.shape == (3, 32, 32)
    assert (a == b).all()
    assert "image=" in capsys.readouterr().out

    assert main(args + ["--height", "40", "--out", str(tmp_path / "c.ppm")]) == EXIT_USAGE


def test_train_defaults_to_home_runs(tmp_path, monkeypatch):
    monkeypatch.setenv("PIXMOT_HOME", str(tmp_path / "home"))
    config = tmp_path / "tiny.json"
    config.write_text(json.dumps(dict(TINY_CONFIG, steps=1)))
    assert main(["train", "--config", str(config)]) == EXIT_OK
    assert (tmp_path / "home" / "runs" / "tiny" / "checkpoint.pxmt").exists()


def test_reward(tmp_path, capsys):
    (tmp_path / "x.ppm").write_bytes(b"P6\n1 1\n255\n\x00\x00\x00")
    (tmp_path / "x.ref.txt").write_text("open now")
    (tmp_path / "x.ocr.txt").write_text("open now")
    assert main(["reward", "--dir", str(tmp_path), "--epoch", "0"]) == EXIT_OK
    record = json.loads(capsys.readouterr().out.splitlines()[0])
    assert record["name"] == "x" and record["valid"] and record["r_ocr"] == 1.0
    assert main(["reward", "--dir", str(tmp_path / "missing")]) == EXIT_USAGE
