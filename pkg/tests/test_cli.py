import json

import pytest

from shrink import checkpoint, cli
from shrink.cli import EXIT_INVALID, EXIT_OK, EXIT_STAGE, main
from shrink.errors import DivergedError
from shrink.pipeline import dump_config, parse_config, run_pipeline

SMALL_ARCH = ["--d-model", "16", "--n-layers", "5", "--n-heads", "2", "--d-ff", "32"]


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """A corpus and a pretrained tiny model, built through the CLI."""
    d = tmp_path_factory.mktemp("cli")
    assert main(["make-corpus", "--out", str(d / "corpus"), "--n-train", "60", "--n-heldout", "8",
                 "--n-calibration", "8", "--n-prompts", "4"]) == EXIT_OK
    assert main(["pretrain", "--corpus", str(d / "corpus/train.txt"), "--out", str(d / "model.shrk"),
                 "--steps", "5", "--batch-size", "4", *SMALL_ARCH]) == EXIT_OK
    return d


def test_help_and_version(capsys):
    assert main(["--help"]) == EXIT_OK
    assert "pipeline" in capsys.readouterr().out
    assert main(["--version"]) == EXIT_OK


class TestExitCodes:
    def test_unknown_command(self):
        assert main(["nope"]) == EXIT_INVALID

    def test_missing_file(self, tmp_path):
        assert main(["score", "--model", str(tmp_path / "none.shrk")]) == EXIT_INVALID

    def test_corrupt_checkpoint(self, workdir, tmp_path):
        raw = bytearray((workdir / "model.shrk").read_bytes())
        raw[40] ^= 0xFF
        (tmp_path / "bad.shrk").write_bytes(bytes(raw))
        assert main(["score", "--model", str(tmp_path / "bad.shrk"), "--criterion", "magnitude"]) == EXIT_INVALID

    def test_k_too_large(self, workdir, tmp_path):
        assert main(["prune", "--model", str(workdir / "model.shrk"), "--k", "3", "--criterion", "magnitude",
                     "--out", str(tmp_path / "p.shrk")]) == EXIT_INVALID

    def test_awq_needs_calibration(self, workdir, tmp_path):
        assert main(["quantize", "--model", str(workdir / "model.shrk"), "--out", str(tmp_path / "q.shrk")]) == EXIT_INVALID

    def test_bad_config(self, tmp_path):
        (tmp_path / "c.yaml").write_text("bogus: 1\n")
        assert main(["pipeline", str(tmp_path / "c.yaml")]) == EXIT_INVALID

    def test_bad_architecture(self, workdir, tmp_path):
        assert main(["pretrain", "--corpus", str(workdir / "corpus/train.txt"), "--out", str(tmp_path / "m.shrk"),
                     "--d-model", "15", "--n-heads", "2", "--steps", "0"]) == EXIT_INVALID

    def test_stage_failure(self, workdir, tmp_path, monkeypatch):
        def diverge(*a, **kw):
            raise DivergedError(3, float("nan"))

        monkeypatch.setattr(cli, "run_finetune", diverge)
        assert main(["finetune", "--model", str(workdir / "model.shrk"), "--corpus", str(workdir / "corpus/train.txt"),
                     "--out", str(tmp_path / "f.shrk")]) == EXIT_STAGE


def test_score_prints_chart(workdir, capsys, tmp_path):
    assert main(["score", "--model", str(workdir / "model.shrk"), "--criterion", "magnitude",
                 "--out", str(tmp_path / "imp.json")]) == EXIT_OK
    out = capsys.readouterr().out
    assert out.count("block ") == 2 and "prune order:" in out
    assert {e["block"] for e in json.loads((tmp_path / "imp.json").read_text())["scores"]} == {2, 3}


def test_rtn_quantize_and_eval(workdir, tmp_path, capsys):
    q = tmp_path / "q.shrk"
    assert main(["quantize", "--model", str(workdir / "model.shrk"), "--out", str(q), "--method", "rtn",
                 "--bits", "3", "--group-size", "16"]) == EXIT_OK
    assert checkpoint.load(q).lm_head.bit_width == 3
    c = workdir / "corpus"
    assert main(["eval", "--model", str(q), "--reference", str(workdir / "model.shrk"), "--heldout", str(c / "heldout.txt"),
                 "--prompts", str(c / "prompts.txt"), "--max-new", "4", "--out", str(tmp_path / "r.jsonl")]) == EXIT_OK
    assert main(["table", str(tmp_path / "r.jsonl")]) == EXIT_OK
    assert capsys.readouterr().out.count("q ") >= 2


def test_manual_steps_equal_pipeline(workdir, tmp_path):
    c = workdir / "corpus"
    cal = ["--calibration", str(c / "calibration.txt"), "--n-samples", "4", "--max-len", "24"]
    model = str(workdir / "model.shrk")
    assert main(["prune", "--model", model, "--k", "1", "--max-new", "4", "--out", str(tmp_path / "p.shrk"), *cal]) == EXIT_OK
    assert main(["finetune", "--model", str(tmp_path / "p.shrk"), "--corpus", str(c / "train.txt"),
                 "--rank", "2", "--steps", "2", "--batch-size", "4", "--out", str(tmp_path / "f.shrk")]) == EXIT_OK
    assert main(["quantize", "--model", str(tmp_path / "f.shrk"), "--group-size", "16", "--alpha-grid", "3",
                 "--max-calib-tokens", "64", "--out", str(tmp_path / "q.shrk"), *cal]) == EXIT_OK

    cfg = parse_config({
        "output_dir": str(tmp_path / "run"),
        "model": {"checkpoint": model},
        "corpus": {"train": str(c / "train.txt"), "calibration": str(c / "calibration.txt"),
                   "heldout": str(c / "heldout.txt"), "prompts": str(c / "prompts.txt")},
        "calibration": {"n_samples": 4, "max_len": 24},
        "prune": {"k": 1, "max_new": 4},
        "sft": {"rank": 2, "steps": 2, "batch_size": 4},
        "quant": {"group_size": 16, "alpha_grid": 3, "max_calib_tokens": 64},
        "eval": {"max_new": 4, "latency_tokens": 2},
    })
    res = run_pipeline(cfg)
    for manual, auto in (("p", "pruned"), ("f", "finetuned"), ("q", "quantized")):
        assert (tmp_path / f"{manual}.shrk").read_bytes() == res.checkpoints[auto].read_bytes(), auto


def test_pipeline_command(workdir, tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("SHRINK_OUTPUT_ROOT", str(tmp_path))
    c = workdir / "corpus"
    cfg = parse_config({
        "output_dir": "out",
        "model": {"checkpoint": str(workdir / "model.shrk")},
        "corpus": {"train": str(c / "train.txt"), "calibration": str(c / "calibration.txt"),
                   "heldout": str(c / "heldout.txt"), "prompts": str(c / "prompts.txt")},
        "calibration": {"n_samples": 4, "max_len": 24},
        "prune": {"k": 1, "criterion": "magnitude"},
        "eval": {"max_new": 4, "latency_tokens": 2},
        "sweep_k": [0, 1],
    })
    dump_config(cfg, tmp_path / "c.yaml")
    assert main(["pipeline", str(tmp_path / "c.yaml"), "--mode", "sweep"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "k=0" in out and "k=1" in out
    assert (tmp_path / "out" / "reports.jsonl").is_file()
