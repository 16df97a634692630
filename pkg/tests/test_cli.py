"""End-to-end command-line behavior: exit codes, report files, determinism,
and the freeze audit."""

import json

import numpy as np
import pytest

from fuseformer.cli import main
from fuseformer.data import (RawExample, load_corpus, synth_corpus,
                             write_corpus)


def run_cli(*argv):
    return main([str(a) for a in argv])


def strip_meta(path):
    payload = json.loads(path.read_text(encoding="utf-8"))
    payload.pop("meta", None)
    return json.dumps(payload, sort_keys=True)


@pytest.fixture()
def corpus_path(tmp_path):
    p = tmp_path / "corpus.jsonl"
    write_corpus(synth_corpus(seed=5, n=120), p)
    return p


def table2_corpus(tmp_path):
    """Exactly the reference positive proportions per 100 examples."""
    per_class = [52, 25, 21, 10, 17, 8]
    out = []
    for i in range(100):
        emo = tuple(1.5 if i < per_class[c] else 0.0 for c in range(6))
        out.append(RawExample(id=str(i), text="w", sentiment=0.0, emotions=emo))
    p = tmp_path / "table2.jsonl"
    write_corpus(out, p)
    return p


# ---------------------------------------------------------------------------
# stats
# ---------------------------------------------------------------------------

def test_stats_reproduces_reference_weights(tmp_path, capsys):
    p = table2_corpus(tmp_path)
    assert run_cli("stats", "--corpus", p, "--task", "emotion",
                   "--out", tmp_path) == 0
    payload = json.loads((tmp_path / "stats.json").read_text())
    weights = [payload["classes"][label]["weight"]
               for label in ("joy", "sadness", "anger", "surprise",
                             "disgust", "fear")]
    np.testing.assert_allclose(weights, [48 / 52, 3.0, 79 / 21, 9.0, 83 / 17, 11.5])
    out = capsys.readouterr().out
    assert "11.5" in out and "joy" in out


def test_stats_balanced_corpus_weights_near_one(tmp_path):
    p = tmp_path / "balanced.jsonl"
    write_corpus(synth_corpus(seed=3, n=800, class_priors=(0.5,) * 6), p)
    assert run_cli("stats", "--corpus", p, "--task", "emotion",
                   "--out", tmp_path) == 0
    payload = json.loads((tmp_path / "stats.json").read_text())
    for row in payload["classes"].values():
        assert abs(row["weight"] - 1.0) < 0.25


def test_stats_empty_corpus_exits_2_without_output(tmp_path):
    p = tmp_path / "empty.jsonl"
    p.write_text("", encoding="utf-8")
    assert run_cli("stats", "--corpus", p, "--task", "emotion",
                   "--out", tmp_path / "out") == 2
    assert not (tmp_path / "out" / "stats.json").exists()


def test_stats_missing_file_exits_2(tmp_path):
    assert run_cli("stats", "--corpus", tmp_path / "nope.jsonl",
                   "--task", "emotion") == 2


def test_stats_malformed_line_exits_2(tmp_path, capsys):
    p = tmp_path / "bad.jsonl"
    p.write_text('{"id":"a","text":"x","sentiment":9}\n', encoding="utf-8")
    assert run_cli("stats", "--corpus", p, "--task", "emotion") == 2
    assert "line 1" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------

def test_synth_writes_deterministic_corpus(tmp_path):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    assert run_cli("synth", "--out", a, "--n", 50, "--seed", 9) == 0
    assert run_cli("synth", "--out", b, "--n", 50, "--seed", 9) == 0
    assert a.read_bytes() == b.read_bytes()
    assert len(load_corpus(a, "mosei-style")) == 50


def test_synth_with_vocab_out(tmp_path):
    assert run_cli("synth", "--out", tmp_path / "c.jsonl", "--n", 30,
                   "--seed", 1, "--vocab-out", tmp_path / "v.txt") == 0
    assert (tmp_path / "v.txt").read_text().strip()


# ---------------------------------------------------------------------------
# train / evaluate pipeline
# ---------------------------------------------------------------------------

TRAIN_FLAGS = ["--epochs", 2, "--batch-size", 10, "--max-len", 10,
               "--lr", 0.01, "--loss", "bce"]


def model_json(tmp_path):
    cfg = tmp_path / "config.json"
    cfg.write_text(json.dumps({
        "model": {"num_layers": 1, "hidden_size": 8, "num_heads": 2,
                  "ff_size": 16, "max_positions": 16, "reduction_factor": 2}}),
        encoding="utf-8")
    return cfg


def test_train_adapter_single_run_writes_reports(tmp_path, corpus_path, capsys):
    out = tmp_path / "run"
    code = run_cli("train-adapter", "--task", "emotion",
                   "--corpus", corpus_path, "--config", model_json(tmp_path),
                   "--runs", 1, "--seed", 3, "--out", out, *TRAIN_FLAGS)
    assert code == 0
    assert (out / "adapter-emotion.ckpt").exists()
    assert (out / "adapter-emotion-seed3.ckpt").exists()
    run_report = json.loads((out / "report-emotion-seed3.json").read_text())
    agg = json.loads((out / "aggregate-emotion.json").read_text())
    assert agg["runs"] == 1
    assert run_report["report"]["overall"] == agg["report"]["overall"]
    assert "config" in agg and agg["config"]["train"]["seed"] == 3
    assert "Overall" in capsys.readouterr().out


def test_train_adapter_rerun_is_byte_identical_modulo_meta(tmp_path, corpus_path):
    out1, out2 = tmp_path / "r1", tmp_path / "r2"
    for out in (out1, out2):
        assert run_cli("train-adapter", "--task", "emotion",
                       "--corpus", corpus_path, "--config", model_json(tmp_path),
                       "--runs", 2, "--seed", 3, "--out", out,
                       *TRAIN_FLAGS) == 0
    assert strip_meta(out1 / "aggregate-emotion.json") \
        == strip_meta(out2 / "aggregate-emotion.json")
    assert (out1 / "adapter-emotion.ckpt").read_bytes() \
        == (out2 / "adapter-emotion.ckpt").read_bytes()


def test_train_fusion_audit_and_evaluate_consistency(tmp_path, corpus_path, capsys):
    cfg = model_json(tmp_path)
    out = tmp_path / "run"
    for task in ("emotion", "sent2"):
        assert run_cli("train-adapter", "--task", task, "--corpus", corpus_path,
                       "--config", cfg, "--runs", 1, "--seed", 3, "--out", out,
                       *TRAIN_FLAGS) == 0
    capsys.readouterr()
    code = run_cli("train-fusion", "--task", "emotion", "--corpus", corpus_path,
                   "--config", cfg, "--runs", 1, "--seed", 4, "--out", out,
                   "--adapters", out / "adapter-emotion.ckpt",
                   out / "adapter-sent2.ckpt", *TRAIN_FLAGS)
    assert code == 0
    assert "FROZEN OK" in capsys.readouterr().out
    fusion_report = json.loads((out / "fusion-report-emotion.json").read_text())
    assert all(entry["frozen"] for entry in fusion_report["audit"].values())

    # evaluating the checkpoint on the test corpus reproduces the report
    test_corpus = tmp_path / "test.jsonl"
    corpus = load_corpus(corpus_path, "mosei-style")
    write_corpus([ex for i, ex in enumerate(corpus) if i % 10 == 9], test_corpus)
    capsys.readouterr()
    assert run_cli("evaluate", "--checkpoint", out / "fusion-emotion.ckpt",
                   "--corpus", test_corpus, "--out", out) == 0
    printed = capsys.readouterr().out
    header = printed.splitlines()[1]
    assert [c.strip() for c in header.split("|")] \
        == ["Joy", "Sadness", "Anger", "Surprise", "Disgust", "Fear", "Overall"]
    eval_report = json.loads((out / "eval-emotion.json").read_text())
    assert eval_report["report"]["overall"] \
        == fusion_report["report"]["overall"]


def test_evaluate_empty_corpus_exits_2(tmp_path, corpus_path):
    out = tmp_path / "run"
    assert run_cli("train-adapter", "--task", "emotion", "--corpus", corpus_path,
                   "--config", model_json(tmp_path), "--runs", 1, "--seed", 0,
                   "--out", out, *TRAIN_FLAGS) == 0
    empty = tmp_path / "empty.jsonl"
    empty.write_text("", encoding="utf-8")
    assert run_cli("evaluate", "--checkpoint", out / "adapter-emotion.ckpt",
                   "--corpus", empty) == 2


def test_evaluate_wrong_task_exits_2(tmp_path, corpus_path):
    out = tmp_path / "run"
    assert run_cli("train-adapter", "--task", "emotion", "--corpus", corpus_path,
                   "--config", model_json(tmp_path), "--runs", 1, "--seed", 0,
                   "--out", out, *TRAIN_FLAGS) == 0
    assert run_cli("evaluate", "--checkpoint", out / "adapter-emotion.ckpt",
                   "--corpus", corpus_path, "--task", "sent7") == 2


def test_train_adapter_divergent_lr_exits_3(tmp_path, corpus_path):
    with np.errstate(all="ignore"):
        code = run_cli("train-adapter", "--task", "emotion",
                       "--corpus", corpus_path, "--config", model_json(tmp_path),
                       "--runs", 1, "--seed", 0, "--out", tmp_path / "d",
                       "--epochs", 2, "--batch-size", 10, "--max-len", 10,
                       "--lr", 1e30, "--loss", "bce")
    assert code == 3


def test_train_sent7_path(tmp_path, corpus_path, capsys):
    out = tmp_path / "run"
    code = run_cli("train-adapter", "--task", "sent7", "--corpus", corpus_path,
                   "--config", model_json(tmp_path), "--runs", 1, "--seed", 1,
                   "--out", out, "--epochs", 1, "--batch-size", 10,
                   "--max-len", 10, "--lr", 0.01)
    assert code == 0
    agg = json.loads((out / "aggregate-sent7.json").read_text())
    assert agg["report"]["task_kind"] == "multiclass-7"
    assert 0.0 <= agg["report"]["overall"]["accuracy"] <= 1.0


def test_train_binary_ext_path(tmp_path, capsys):
    corpus = tmp_path / "reviews.jsonl"
    rng = np.random.default_rng(3)
    lines = [json.dumps({"id": str(i),
                         "text": ("good fine nice" if y else "bad awful poor")
                                 + f" filler{i % 7}",
                         "binary_label": int(y)})
             for i, y in enumerate(rng.integers(0, 2, 80))]
    corpus.write_text("\n".join(lines) + "\n", encoding="utf-8")
    out = tmp_path / "run"
    code = run_cli("train-adapter", "--task", "binary-ext", "--corpus", corpus,
                   "--config", model_json(tmp_path), "--runs", 1, "--seed", 1,
                   "--out", out, "--epochs", 1, "--batch-size", 10,
                   "--max-len", 8, "--lr", 0.01, "--loss", "bce")
    assert code == 0
    agg = json.loads((out / "aggregate-binary-ext.json").read_text())
    assert agg["report"]["task_kind"] == "binary"


# ---------------------------------------------------------------------------
# grad-check
# ---------------------------------------------------------------------------

def test_grad_check_passes_and_reports_all_blocks(tmp_path, capsys):
    assert run_cli("grad-check", "--max-coords", 4, "--out", tmp_path) == 0
    out = capsys.readouterr().out
    for block in ("embeddings", "attention", "ff", "adapter", "fusion", "head"):
        assert out.count(f"{block:<12} PASS") == 1
    payload = json.loads((tmp_path / "grad-check.json").read_text())
    assert all(b["passed"] for b in payload["blocks"].values())


def test_grad_check_corrupted_gradient_exits_4(capsys):
    assert run_cli("grad-check", "--max-coords", 4, "--corrupt-grad") == 4
    assert "FAIL" in capsys.readouterr().out


# ---------------------------------------------------------------------------
# count-params
# ---------------------------------------------------------------------------

def test_count_params_full_scale_table(tmp_path, capsys):
    assert run_cli("count-params", "--scale", "full", "--out", tmp_path) == 0
    payload = json.loads((tmp_path / "count-params.json").read_text())
    rows = payload["rows"]
    assert rows["adapter"]["trainable"] == 1_489_734
    assert abs(rows["fusion3"]["trainable"] - 21_800_000) < 100_000
    assert abs(rows["finetune"]["total"] - 108_300_000) < 1_000_000
    out = capsys.readouterr().out
    assert "trainable" in out


def test_count_params_single_mode(capsys):
    assert run_cli("count-params", "--scale", "full", "--mode", "adapter") == 0
    payload = json.loads(capsys.readouterr().out)
    assert payload["trainable"] == 1_489_734
