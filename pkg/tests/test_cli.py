"""Subcommand behavior and exit codes, driven in-process through main()."""

import hashlib
import json
import os
import shutil

import pytest

from gonogo.cli import main
from gonogo.checkpoint import peek_checkpoint

TINY = """\
[run]
scale = desk

[data]
n_traces = 8
steps = 16
n_pos = 10
n_neg = 8

[gan]
batch_size = 16
epochs = 1

[inversion]
epochs = 1
batch_size = 8
iterations = 2

[fc]
epochs = 3
patience = 2
"""


def read_jsonl(path):
    with open(path) as fh:
        return [json.loads(line) for line in fh]


def tree_digest(root):
    h = hashlib.sha256()
    for dirpath, dirnames, filenames in sorted(os.walk(root)):
        dirnames.sort()
        for name in sorted(filenames):
            full = os.path.join(dirpath, name)
            h.update(os.path.relpath(full, root).encode())
            h.update(open(full, "rb").read())
    return h.hexdigest()


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "run.ini"
    cfg.write_text(TINY)
    out = root / "out"
    base = ["--config", str(cfg), "--out", str(out)]
    for cmd in ("gen-data", "train-gan", "train-inv", "train-fc"):
        assert main([cmd] + base) == 0, cmd
    return cfg, out, base


def test_gen_data_layout(pipeline):
    _, out, _ = pipeline
    for split in ("positives", "train", "test"):
        assert (out / "data" / split / "manifest.jsonl").exists()
    summary = json.loads((out / "data" / "summary.json").read_text())
    assert summary["train"] == summary["test"] == 18
    assert summary["positives"] >= 2 * 10
    assert summary["scale"] == "desk"


def test_gen_data_reruns_byte_identical(tmp_path):
    cfg = tmp_path / "run.ini"
    cfg.write_text(TINY)
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert main(["gen-data", "--config", str(cfg), "--out", str(out),
                     "--seed", "5"]) == 0
        outs.append(tree_digest(out / "data"))
    assert outs[0] == outs[1]


def test_checkpoints_written(pipeline):
    _, out, _ = pipeline
    for kind, name in (("gen", "gen.ckpt"), ("dis", "dis.ckpt"),
                       ("inv", "inv.ckpt"), ("fc", "fc.ckpt")):
        header = peek_checkpoint(out / "models" / name)
        assert header["kind"] == kind
        assert header["scale"] == "desk"
    history = read_jsonl(out / "models" / "gan_history.jsonl")
    assert [set(h) for h in history] == [{"epoch", "d_loss", "g_loss"}]


def test_score_records(pipeline):
    _, out, base = pipeline
    assert main(["score"] + base) == 0
    rows = read_jsonl(out / "reports" / "scores.jsonl")
    assert len(rows) == 18
    for row in rows:
        assert set(row) == {"id", "R_s", "D_s", "A", "t_d", "fc_prob", "fc_decision"}
        assert row["t_d"] in ("GO", "NOGO")
        assert 0.0 <= row["fc_prob"] <= 1.0
        assert row["fc_decision"] in ("GO", "NOGO")
        assert row["A"] > 0


def test_score_rerun_byte_identical(pipeline):
    _, out, base = pipeline
    assert main(["score"] + base) == 0
    first = (out / "reports" / "scores.jsonl").read_bytes()
    assert main(["score"] + base) == 0
    assert (out / "reports" / "scores.jsonl").read_bytes() == first


def test_score_without_fc_head(pipeline, tmp_path):
    cfg, out, _ = pipeline
    out2 = tmp_path / "out2"
    shutil.copytree(out / "models", out2 / "models")
    os.remove(out2 / "models" / "fc.ckpt")
    assert main(["score", "--config", str(cfg), "--out", str(out2),
                 "--data", str(out / "data" / "test")]) == 0
    rows = read_jsonl(out2 / "reports" / "scores.jsonl")
    assert all(r["fc_prob"] is None and r["fc_decision"] is None for r in rows)


def test_eval_report(pipeline):
    _, out, base = pipeline
    assert main(["eval"] + base) == 0
    report = json.loads((out / "reports" / "report.json").read_text())
    modes = [(r["mode"], r["components"]) for r in report["rows"]]
    assert modes == [("unsupervised-ours", "R+D"), ("supervised-ours", "R+D+F"),
                     ("supervised-ours", "D+F"), ("supervised-ours", "F")]
    assert all(r["perf"] is None for r in report["rows"])
    text = (out / "reports" / "report.txt").read_text()
    assert text.startswith("Hz measured on in-memory images")
    assert "R+D+F" in text


def test_eval_rerun_byte_identical(pipeline):
    _, out, base = pipeline
    assert main(["eval"] + base) == 0
    first = (out / "reports" / "report.json").read_bytes()
    assert main(["eval"] + base) == 0
    assert (out / "reports" / "report.json").read_bytes() == first


def test_eval_baseline_row(pipeline):
    _, out, base = pipeline
    assert main(["eval", "--baseline", "--baseline-limit", "2"] + base) == 0
    report = json.loads((out / "reports" / "report.json").read_text())
    first = report["rows"][0]
    assert first["mode"] == "unsupervised-baseline"
    assert first["inversion"] == "iterative"
    assert first["n_test"] == 2


def test_bench(pipeline):
    _, out, base = pipeline
    assert main(["bench", "--images", "1", "--reps", "3",
                 "--iterations", "2"] + base) == 0
    perf = json.loads((out / "reports" / "perf.json").read_text())
    assert perf["feedforward"]["hz"] > 0
    assert perf["iterative"]["hz"] > 0
    assert perf["feedforward"]["peak_mem_bytes"] > 0
    assert perf["iterations"] == 2
    assert perf["speedup"] == perf["feedforward"]["hz"] / perf["iterative"]["hz"]


def test_costmap_demo(pipeline):
    _, out, base = pipeline
    assert main(["costmap-demo"] + base) == 0
    mission = json.loads((out / "reports" / "mission.json").read_text())
    assert mission["reached"] is True
    log = read_jsonl(out / "reports" / "mission.jsonl")
    assert set(log[0]) == {"step", "pose", "decision", "A", "replanned"}
    assert (out / "reports" / "mission_map.pgm").exists()
    assert (out / "reports" / "mission_map.meta").exists()


def test_saliency(pipeline):
    _, out, base = pipeline
    assert main(["saliency", "--limit", "2"] + base) == 0
    sal = out / "reports" / "saliency"
    assert sorted(p.name for p in sal.iterdir()) == \
        ["frame_000000.pgm", "frame_000001.pgm", "mean.pgm"]
    assert (out / "reports" / "residual_weights.pgm").exists()
    stats = json.loads((out / "reports" / "saliency.json").read_text())
    assert 0.0 <= stats["bottom_half_mass"] <= 1.0


def test_init_config(tmp_path):
    path = tmp_path / "default.ini"
    assert main(["init-config", str(path)]) == 0
    assert "[scoring]" in path.read_text()


# -- exit codes ---------------------------------------------------------------


def test_usage_errors():
    assert main([]) == 1
    assert main(["no-such-command"]) == 1


def test_help_exits_zero(capsys):
    assert main(["--help"]) == 0
    assert main(["score", "--help"]) == 0
    capsys.readouterr()


def test_malformed_config_exit_2(tmp_path):
    bad = tmp_path / "bad.ini"
    bad.write_text("[scoring]\nlam = 2.0\n")
    assert main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert main(["gen-data", "--config", str(tmp_path / "absent.ini"),
                 "--out", str(tmp_path / "o")]) == 2


def test_missing_inputs_exit_3(tmp_path):
    assert main(["train-gan", "--out", str(tmp_path / "empty")]) == 3
    assert main(["score", "--out", str(tmp_path / "empty")]) == 3


def test_missing_checkpoint_exit_3(pipeline, tmp_path):
    cfg, out, _ = pipeline
    # data present, models absent
    assert main(["score", "--config", str(cfg), "--out", str(tmp_path / "o"),
                 "--data", str(out / "data" / "test")]) == 3


def test_corrupt_checkpoint_exit_4(pipeline, tmp_path):
    cfg, out, _ = pipeline
    out2 = tmp_path / "o"
    shutil.copytree(out / "models", out2 / "models")
    blob = (out2 / "models" / "gen.ckpt").read_bytes()
    (out2 / "models" / "gen.ckpt").write_bytes(blob[:len(blob) // 2])
    assert main(["score", "--config", str(cfg), "--out", str(out2),
                 "--data", str(out / "data" / "test")]) == 4


def test_scale_mismatch_exit_5(pipeline, tmp_path):
    _, out, _ = pipeline
    full = tmp_path / "full.ini"
    full.write_text("[run]\nscale = full\n")
    assert main(["score", "--config", str(full), "--out", str(out)]) == 5
