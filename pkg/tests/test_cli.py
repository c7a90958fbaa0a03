import csv
import json

import numpy as np
import pytest

from most_peft.cli import build_parser, load_model, main, parse_args
from most_peft.numeric import get_precision

TINY = json.dumps(dict(depth=2, dim=16, heads=2, n_patches=8, group_size=4, knn_k=3,
                       embed_hidden=[8, 16], fusion_layers=[1, 2]))


def run(*argv):
    return main([str(a) for a in argv])


def strip_timing(report):
    report = dict(report)
    report.pop("timing", None)
    return report


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    out = d / "runs"
    assert run("gen-data", "--seed", 1, "--classes", 3, "--samples-per-class", 8, "--points", 48,
               "--path", d / "src.mspc", "--out", out) == 0
    assert run("gen-data", "--seed", 2, "--task", "target", "--classes", 2,
               "--samples-per-class", 8, "--points", 48, "--noise", 0.02,
               "--path", d / "tgt.mspc", "--out", out) == 0
    assert run("pretrain", "--data", d / "src.mspc", "--ckpt", d / "pre.mstc", "--model", TINY,
               "--epochs", 2, "--out", out) == 0
    assert run("finetune", "--ckpt", d / "pre.mstc", "--data", d / "tgt.mspc", "--method", "most",
               "--b", 4, "--epochs", 2, "--save", d / "most.mstc", "--out", out) == 0
    return d


def test_parser_has_all_commands():
    assert set(build_parser().commands) == {"gen-data", "pretrain", "finetune", "eval", "diagnose",
                                            "bench", "audit-params", "merge"}


def test_global_flags_either_side():
    a = parse_args(["--seed", "5", "bench"])
    b = parse_args(["bench", "--seed", "5"])
    assert a.seed == b.seed == 5


def test_config_file_precedence(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"seed": 9, "d": 64, "b": [2]}))
    args = parse_args(["bench", "--config", str(cfg), "--d", "128"])
    assert args.seed == 9 and args.d == 128 and args.b == [2]
    cfg.write_text(json.dumps({"nonsense": 1}))
    assert run("bench", "--config", cfg) == 2
    cfg.write_text("{not json")
    assert run("bench", "--config", cfg) == 2
    assert run("bench", "--config", tmp_path / "missing.json") == 3


def test_usage_exit_codes(tmp_path):
    assert run("no-such-command") == 2
    assert run("bench", "--precision", "f16") == 2
    assert run("audit-params", "--model-shape", "huge", "--out", tmp_path) == 2
    assert run("bench", "--d", 30, "--b", 4, "--out", tmp_path) == 2


def test_io_exit_codes(tmp_path):
    assert run("gen-data", "--path", tmp_path / "no" / "dir" / "x.mspc", "--out", tmp_path) == 3
    bad = tmp_path / "bad.mspc"
    bad.write_bytes(b"garbage")
    assert run("pretrain", "--data", bad, "--ckpt", tmp_path / "c.mstc", "--out", tmp_path) == 3


def test_numeric_exit_code(workspace, tmp_path):
    # a wildly large step blows up the loss
    code = run("finetune", "--ckpt", workspace / "pre.mstc", "--data", workspace / "tgt.mspc",
               "--method", "full", "--lr", 1e30, "--epochs", 2, "--out", tmp_path)
    assert code == 4


def test_precision_restored():
    before = get_precision()
    assert run("bench", "--precision", "f32", "--d", 16, "--b", 4, "--G", 8, "--repeats", 1,
               "--out", "/tmp/most-peft-bench-test") == 0
    assert get_precision() == before


def test_reports_and_csv(workspace):
    out = workspace / "runs"
    rows = list(csv.DictReader(open(out / "runs.csv")))
    assert [r["command"] for r in rows[:4]] == ["gen-data", "gen-data", "pretrain", "finetune"]
    ft = json.loads((out / "finetune-most-s0.json").read_text())
    assert ft["trainable_params"] == ft["audit_params"]
    assert ft["merge"]["exact_max_abs_logit_diff"] < 1e-10
    assert "wall_clock_s" in ft["timing"]
    assert ft["config"]["cli"]["b"] == 4


def test_finetune_leaves_pretrained_checkpoint(workspace, tmp_path):
    before = (workspace / "pre.mstc").read_bytes()
    assert run("finetune", "--ckpt", workspace / "pre.mstc", "--data", workspace / "tgt.mspc",
               "--method", "bitfit", "--epochs", 1, "--out", tmp_path) == 0
    assert (workspace / "pre.mstc").read_bytes() == before


def test_runs_are_deterministic(workspace, tmp_path):
    reports = []
    for name in ("a", "b"):
        out = tmp_path / name
        out.mkdir()
        assert run("finetune", "--ckpt", workspace / "pre.mstc", "--data", workspace / "tgt.mspc",
                   "--method", "lora", "--epochs", 1, "--seed", 3, "--save", out / "m.mstc",
                   "--out", out) == 0
        reports.append(json.loads((out / "finetune-lora-s3.json").read_text()))
    assert (tmp_path / "a" / "m.mstc").read_bytes() == (tmp_path / "b" / "m.mstc").read_bytes()
    a, b = (strip_timing(r) for r in reports)
    a["config"]["cli"].pop("out"), b["config"]["cli"].pop("out")
    a["config"]["cli"].pop("save"), b["config"]["cli"].pop("save")
    a.pop("checkpoint"), b.pop("checkpoint")
    assert a == b


def test_gen_data_byte_identical(tmp_path):
    for name in ("a", "b"):
        assert run("gen-data", "--seed", 4, "--classes", 2, "--samples-per-class", 3, "--points", 16,
                   "--path", tmp_path / f"{name}.mspc", "--out", tmp_path / name) == 0
    assert (tmp_path / "a.mspc").read_bytes() == (tmp_path / "b.mspc").read_bytes()
    report = json.loads((tmp_path / "a" / "gen-data-source-s4.json").read_text())
    assert report["label_histogram"] == [3, 3]


def test_eval_reproduces_training_accuracy(workspace, tmp_path):
    assert run("eval", "--ckpt", workspace / "most.mstc", "--data", workspace / "tgt.mspc",
               "--out", tmp_path) == 0
    ev = json.loads((tmp_path / "eval-most.json").read_text())
    ft = json.loads((workspace / "runs" / "finetune-most-s0.json").read_text())
    assert ev["train_accuracy"] == ft["train_accuracy"]
    assert ev["test_accuracy"] == ft["test_accuracy"]
    assert ev["local_feature_distance"] == pytest.approx(ft["local_feature_distance"], abs=1e-12)


def test_eval_class_mismatch(workspace, tmp_path):
    assert run("eval", "--ckpt", workspace / "most.mstc", "--data", workspace / "src.mspc",
               "--out", tmp_path) == 2


def test_diagnose_rows(workspace, tmp_path):
    assert run("diagnose", "--ckpt", workspace / "most.mstc", workspace / "most.mstc",
               "--data", workspace / "tgt.mspc", "--out", tmp_path) == 0
    rows = list(csv.DictReader(open(tmp_path / "diagnose.csv")))
    assert len(rows) == 2 and rows[0]["method"].startswith("most")
    assert float(rows[0]["local_feature_distance"]) > 0


def test_merge(workspace, tmp_path):
    assert run("merge", "--ckpt", workspace / "most.mstc", "--mode", "exact",
               "--data", workspace / "tgt.mspc", "--out", tmp_path) == 0
    rep = json.loads((tmp_path / "merge-most-exact.json").read_text())
    assert rep["exact_max_abs_logit_diff"] < 1e-10
    assert run("merge", "--ckpt", workspace / "most.mstc", "--mode", "dropK",
               "--save", tmp_path / "dense.mstc", "--out", tmp_path) == 0
    dense = load_model(tmp_path / "dense.mstc")
    assert dense.method == "full" and not dense.adapters
    assert run("merge", "--ckpt", workspace / "most.mstc", "--mode", "exact",
               "--save", tmp_path / "x.mstc", "--out", tmp_path) == 2
    assert run("merge", "--ckpt", workspace / "pre.mstc", "--out", tmp_path) == 2


def test_audit_params_bracket(tmp_path):
    assert run("audit-params", "--model-shape", "pointmae-like", "--method", "most", "--b", 32,
               "--out", tmp_path) == 0
    rep = json.loads(next(tmp_path.glob("audit-*.json")).read_text())
    assert 600_000 <= rep["audit_params"] <= 1_000_000


def test_bench_flops(tmp_path):
    assert run("bench", "--d", 384, "--b", 16, "--G", 64, "--repeats", 2, "--out", tmp_path) == 0
    row = json.loads((tmp_path / "bench-d384.json").read_text())["rows"][0]
    assert row["monarch_flops"] == 2_359_296 and row["dense_flops"] == 18_874_368
    assert np.isfinite(row["monarch_s"])
