"""Command-line surface tests: wiring, exit codes, reproducibility."""

import json
from pathlib import Path

import numpy as np
import pytest

from moljoint import datagen
from moljoint.cli import main

TRAIN_ARGS = [
    "--embed-dim", "16", "--n-layers", "1", "--n-heads", "2", "--ff-dim", "32",
    "--predictor-hidden-dim", "8", "--max-len", "32",
    "--batch-size", "8", "--warmup-iters", "5", "--lr-max", "2e-3",
]


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    corpus = datagen.toy_corpus(40, seed=31)
    (root / "corpus.txt").write_text("\n".join(corpus) + "\n")
    code = main(["pretrain", "--data", str(root / "corpus.txt"),
                 "--max-iters", "40", *TRAIN_ARGS,
                 "--seed", "3", "--out-dir", str(root / "pre")])
    assert code == 0
    return root


def test_missing_data_path_exits_2(tmp_path, capsys):
    code = main(["pretrain", "--data", str(tmp_path / "nope.txt"),
                 "--out-dir", str(tmp_path / "o")])
    assert code == 2
    assert "nope.txt" in capsys.readouterr().err


def test_unknown_flag_is_fatal_config_error(tmp_path):
    code = main(["pretrain", "--data", "x", "--definitely-not-a-flag", "1"])
    assert code == 1


def test_bad_flag_value_is_config_error(workdir, tmp_path):
    code = main(["sample", "--checkpoint", str(workdir / "pre" / "checkpoint"),
                 "--temperature", "-2", "-n", "1", "--out-dir", str(tmp_path)])
    assert code == 1


def test_pretrain_zero_iters_writes_initialized_checkpoint(workdir, tmp_path):
    out = tmp_path / "run"
    code = main(["pretrain", "--data", str(workdir / "corpus.txt"),
                 "--max-iters", "0", *TRAIN_ARGS, "--seed", "0", "--out-dir", str(out)])
    assert code == 0
    assert (out / "checkpoint" / "meta.json").exists()
    assert json.loads((out / "checkpoint" / "meta.json").read_text())["iteration"] == 0


def test_pretrain_loss_log_iterations_strictly_monotone(workdir):
    lines = (workdir / "pre" / "loss.log").read_text().splitlines()[1:]
    iters = [int(ln.split("\t")[0]) for ln in lines]
    assert iters == sorted(iters)
    assert len(set(iters)) == len(iters)
    assert len(iters) == 40


def test_config_echo_written_and_complete(workdir):
    doc = json.loads((workdir / "pre" / "config_echo.json").read_text())
    assert doc["command"] == "pretrain"
    assert doc["seed"] == 3
    assert doc["train"]["max_iters"] == 40
    assert doc["model"]["embed_dim"] == 16
    assert (workdir / "pre" / "manifest.json").exists()


def test_sample_zero_is_empty_file(workdir, tmp_path):
    out = tmp_path / "s0"
    code = main(["sample", "--checkpoint", str(workdir / "pre" / "checkpoint"),
                 "-n", "0", "--seed", "1", "--out-dir", str(out)])
    assert code == 0
    assert (out / "samples.tsv").read_text() == ""


def test_sample_fixed_seed_byte_identical(workdir, tmp_path):
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        code = main(["sample", "--checkpoint", str(workdir / "pre" / "checkpoint"),
                     "-n", "25", "--seed", "11", "--out-dir", str(out)])
        assert code == 0
        outs.append((out / "samples.tsv").read_bytes())
    assert outs[0] == outs[1]
    assert len(outs[0].splitlines()) == 25


def test_jt_seed_env_fallback(workdir, tmp_path, monkeypatch):
    monkeypatch.setenv("JT_SEED", "11")
    out_env = tmp_path / "env"
    code = main(["sample", "--checkpoint", str(workdir / "pre" / "checkpoint"),
                 "-n", "10", "--out-dir", str(out_env)])
    assert code == 0
    monkeypatch.delenv("JT_SEED")
    out_flag = tmp_path / "flag"
    main(["sample", "--checkpoint", str(workdir / "pre" / "checkpoint"),
          "-n", "10", "--seed", "11", "--out-dir", str(out_flag)])
    assert (out_env / "samples.tsv").read_bytes() == (out_flag / "samples.tsv").read_bytes()


def test_finetune_autolabel_equals_prelabeled(workdir, tmp_path):
    """Auto-labeling with the objective equals a pre-labeled file (purity)."""
    from moljoint.objectives import ObjectiveSpec, evaluate

    corpus = (workdir / "corpus.txt").read_text().splitlines()[:20]
    sub = tmp_path / "sub.txt"
    sub.write_text("\n".join(corpus) + "\n")
    obj = ObjectiveSpec()
    labeled = tmp_path / "labeled.tsv"
    labeled.write_text("".join(f"{s}\t{evaluate(obj, s):.10f}\n" for s in corpus))

    args_common = ["--checkpoint", str(workdir / "pre" / "checkpoint"),
                   "--max-iters", "5", "--batch-size", "4", "--seed", "5"]
    a, b = tmp_path / "auto", tmp_path / "pre"
    assert main(["finetune", *args_common, "--data", str(sub),
                 "--objective", "toy_mpo", "--out-dir", str(a)]) == 0
    assert main(["finetune", *args_common, "--data", str(labeled),
                 "--out-dir", str(b)]) == 0
    pa = (a / "checkpoint" / "params.bin").read_bytes()
    pb = (b / "checkpoint" / "params.bin").read_bytes()
    assert pa == pb


def test_finetune_vocabulary_mismatch_exits_2(workdir, tmp_path):
    bad = tmp_path / "bad.tsv"
    bad.write_text("CS(Br)I\t0.5\n")  # S, Br, I not in the toy vocabulary
    code = main(["finetune", "--checkpoint", str(workdir / "pre" / "checkpoint"),
                 "--data", str(bad), "--max-iters", "2", "--out-dir", str(tmp_path / "o")])
    assert code == 2


def test_finetune_ablation_flags_echoed(workdir, tmp_path):
    corpus = (workdir / "corpus.txt").read_text().splitlines()[:10]
    sub = tmp_path / "sub.txt"
    sub.write_text("\n".join(corpus) + "\n")
    out = tmp_path / "abl"
    code = main(["finetune", "--checkpoint", str(workdir / "pre" / "checkpoint"),
                 "--data", str(sub), "--objective", "toy_mpo",
                 "--encoder-term", "false", "--generation-task", "false",
                 "--max-iters", "3", "--batch-size", "4", "--out-dir", str(out)])
    assert code == 0
    doc = json.loads((out / "config_echo.json").read_text())
    assert doc["train"]["encoder_term"] is False
    assert doc["train"]["generation_task"] is False


def test_optimize_impossible_threshold_empty_but_ok(workdir, tmp_path):
    out = tmp_path / "opt"
    code = main(["optimize", "--checkpoint", str(workdir / "pre" / "checkpoint"),
                 "--y-c", "99.0", "--eval-budget", "5", "--sample-budget", "20",
                 "--seed", "0", "--out-dir", str(out)])
    assert code == 0
    doc = json.loads((out / "summary.json").read_text())
    assert doc["accepted_count"] == 0
    assert doc["draws_used"] == 20
    assert doc["eval_budget"] == 5 and doc["sample_budget"] == 20  # budgets echoed
    assert doc["top1"] is None
    trace = (out / "trace.jsonl").read_text().splitlines()
    assert len(trace) == 20


def test_evaluate_hand_file_reproduces_hand_counts(workdir, tmp_path):
    hand = tmp_path / "hand.txt"
    hand.write_text("CCO\nC1CC1\nC((\n")
    ref = tmp_path / "ref.txt"
    ref.write_text("CCO\nNCN\n")
    out = tmp_path / "ev"
    code = main(["evaluate", "--samples", str(hand), "--data", str(ref),
                 "--seed", "0", "--out-dir", str(out)])
    assert code == 0
    doc = json.loads((out / "metrics.json").read_text())
    assert doc["validity"] == pytest.approx(2 / 3)
    assert doc["uniqueness"] == 1.0
    assert doc["novelty"] == pytest.approx(2 / 3)
    assert "config_hash" in doc["metadata"]


def test_evaluate_histogram_csv_rows_match_bins(workdir, tmp_path):
    from moljoint.evaluation import feature_histograms

    hand = tmp_path / "hand.txt"
    hand.write_text("CCO\nC1CC1\n")
    ref = tmp_path / "ref.txt"
    ref.write_text("CCO\nNCN\nCCC\n")
    out = tmp_path / "ev"
    code = main(["evaluate", "--samples", str(hand), "--data", str(ref),
                 "--histograms", "--seed", "0", "--out-dir", str(out)])
    assert code == 0
    rows = (out / "histograms.csv").read_text().splitlines()
    want = feature_histograms(["CCO", "C1CC1"], ["CCO", "NCN", "CCC"])
    assert len(rows) == len(want) + 1  # header + one row per bin


def test_evaluate_requires_some_input(tmp_path):
    assert main(["evaluate", "--out-dir", str(tmp_path)]) == 1
