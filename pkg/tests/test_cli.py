"""End-to-end CLI: data generation, training, decoding, bench, scoring,
config files, exit codes."""

import numpy as np
import pytest

from ralab.cli import cli, parse_config_file


def run(argv):
    return cli(argv)


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """Shared tiny dataset + checkpoint for the CLI round trip."""
    root = tmp_path_factory.mktemp("cliwork")
    task = ["--vocab-size", "16", "--feature-dim", "8", "--pairs", "2",
            "--task-seed", "5"]
    assert run(["gen-data", "--out", str(root / "train.bin"), "--regime", "SF",
                "--n", "10"] + task) == 0
    assert run(["gen-data", "--out", str(root / "eval.bin"), "--regime", "SF",
                "--n", "4", "--salt", "3"] + task) == 0
    assert run(["train", "--data", str(root / "train.bin"),
                "--out", str(root / "model.ckpt"),
                "--attention", "rwkv", "--bidirectional",
                "--layers", "2", "--d-model", "16", "--heads", "2",
                "--d-ff", "32", "--conv-kernel", "3", "--ra-chunk", "8",
                "--steps", "3", "--warmup", "2", "--batch-frames", "1024",
                "--log", str(root / "metrics.csv")] + task) == 0
    return root


def test_gen_data_writes_manifest(workdir):
    assert (workdir / "train.bin").exists()
    offsets = (workdir / "train.bin.manifest").read_text().splitlines()
    assert len(offsets) == 11  # 10 records + end sentinel
    assert offsets[0] == "0"


def test_train_writes_checkpoint_and_log(workdir):
    blob = (workdir / "model.ckpt").read_bytes()
    assert blob[:8] == b"RACPKT01"
    log = (workdir / "metrics.csv").read_text().splitlines()
    assert log[0] == "step,lr,loss,wall_ms"
    assert len(log) == 4


def test_decode_writes_report(workdir):
    report = workdir / "decode.csv"
    rc = run(["decode", "--model", str(workdir / "model.ckpt"),
              "--data", str(workdir / "eval.bin"), "--chunk-size", "64",
              "--schedule", "last_bi:1", "--report", str(report)])
    assert rc == 0
    lines = report.read_text().splitlines()
    assert lines[0].startswith("model,policy,schedule")
    assert ",last_bi:1,64," in lines[1]


def test_decode_bad_schedule_is_runtime_error(workdir):
    rc = run(["decode", "--model", str(workdir / "model.ckpt"),
              "--data", str(workdir / "eval.bin"), "--chunk-size", "64",
              "--schedule", "spiral"])
    assert rc == 1


def test_bench_reports_mps(workdir, capsys):
    report = workdir / "bench.csv"
    rc = run(["bench", "--model", str(workdir / "model.ckpt"),
              "--chunk-sizes", "200,400,800", "--batch", "2",
              "--warmup", "1", "--repeats", "1", "--frames", "1600",
              "--report", str(report)])
    assert rc == 0
    out = capsys.readouterr().out
    assert "MPS" in out
    lines = report.read_text().splitlines()
    assert lines[0] == "chunk_size,wall_seconds,audio_minutes,mps,mps_min,mps_max"
    assert len(lines) == 4


def test_eval_wer_files(tmp_path, capsys):
    (tmp_path / "ref.txt").write_text("a b c\nx y\n")
    (tmp_path / "hyp.txt").write_text("a b d\nx y\n")
    rc = run(["eval-wer", str(tmp_path / "ref.txt"), str(tmp_path / "hyp.txt")])
    assert rc == 0
    assert "wer 0.2000" in capsys.readouterr().out


def test_matrix_direction(workdir):
    report = workdir / "matrix.csv"
    rc = run(["matrix", "--mode", "direction",
              "--models", "m=" + str(workdir / "model.ckpt"),
              "--data", str(workdir / "eval.bin"),
              "--schedules", "l2r,bi", "--report", str(report)])
    assert rc == 0
    lines = report.read_text().splitlines()
    assert len(lines) == 3


def test_matrix_length(workdir):
    report = workdir / "matrix_len.csv"
    rc = run(["matrix", "--mode", "length",
              "--models", "m=" + str(workdir / "model.ckpt"),
              "--data", str(workdir / "eval.bin"),
              "--chunk-sizes", "64,128", "--report", str(report)])
    assert rc == 0
    assert len(report.read_text().splitlines()) == 3


def test_unknown_flag_exits_2(workdir):
    assert run(["decode", "--model", "x", "--data", "y",
                "--chunk-size", "8", "--warp-speed"]) == 2


def test_unknown_command_exits_2():
    assert run(["transcend"]) == 2


def test_missing_file_exits_1(workdir):
    assert run(["decode", "--model", str(workdir / "nope.ckpt"),
                "--data", str(workdir / "eval.bin"), "--chunk-size", "64"]) == 1


def test_config_file_with_cli_override(workdir, tmp_path):
    cfg = tmp_path / "decode.cfg"
    cfg.write_text(
        "# decoding defaults\n"
        "chunk_size = 32\n"
        "schedule = bi\n"
        f"model = {workdir / 'model.ckpt'}\n"
        f"data = {workdir / 'eval.bin'}\n")
    report = tmp_path / "out.csv"
    rc = run(["decode", "--config", str(cfg), "--chunk-size", "64",
              "--report", str(report)])
    assert rc == 0
    line = report.read_text().splitlines()[1]
    assert ",64," in line        # CLI chunk size beat the config value
    assert ",bi," in line        # config schedule survived


def test_config_parse_errors(tmp_path):
    bad = tmp_path / "bad.cfg"
    bad.write_text("chunk_size 32\n")
    with pytest.raises(ValueError):
        parse_config_file(str(bad))
    unknown = tmp_path / "unknown.cfg"
    unknown.write_text("warp = 9\n")
    rc = run(["decode", "--config", str(unknown), "--model", "m",
              "--data", "d", "--chunk-size", "8"])
    assert rc == 1


def test_gradcheck_cli(capsys):
    assert run(["gradcheck", "--fragment", "ctc"]) == 0
    assert "[ok]" in capsys.readouterr().out
