import json
import subprocess
import sys

import numpy as np
import pytest

from gclab import analysis, tensorio
from gclab.cli import main
from gclab.tensor import rng_tensor


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_equiv_snl_distributive(capsys):
    code, out, _ = run(capsys, "equiv", "--check", "snl-distributive", "--seed", "0")
    assert code == 0
    assert "PASS" in out


def test_equiv_all(capsys):
    code, out, _ = run(capsys, "equiv", "--format", "json")
    assert code == 0
    rows = json.loads(out)
    assert [r["check"] for r in rows] == ["snl-distributive", "gc-framework", "se-framework"]


def test_unknown_subcommand(capsys):
    code, out, err = run(capsys, "frobnicate")
    assert code == 2
    assert out == ""
    assert "usage:" in err


def test_unknown_flag(capsys):
    code, _, err = run(capsys, "cost", "--bogus")
    assert code == 2 and "usage:" in err


def test_cost_all_gc_table(capsys):
    code, out, _ = run(capsys, "cost", "--arch", "resnet50", "--insert", "gc:c3c4c5:r16",
                       "--format", "table")
    assert code == 0
    assert "28.08M" in out
    assert "1 MAC = 1 FLOP" in out


def test_cost_reference_table(capsys):
    code, out, _ = run(capsys, "cost", "--table7a")
    assert code == 0
    lines = [l for l in out.splitlines() if not l.startswith("#")]
    assert lines[0] == "label,params_M,flops_G"
    assert [l.split(",")[1] for l in lines[1:]] == ["25.56", "27.66", "26.61", "25.69", "28.08"]


def test_cost_plus_one_gc_delta(capsys):
    _, out, _ = run(capsys, "cost", "--insert", "gc:+1c4:r16", "--format", "json")
    rep = json.loads(out)
    assert round(sum(i["params"] for i in rep["insertions"]) / 1e6, 2) == 0.13


def test_cost_ratio_monotone(capsys):
    def added(r):
        _, out, _ = run(capsys, "cost", "--insert", f"gc:c3c4c5:r{r}", "--format", "csv")
        return int(out.splitlines()[1].split(",")[5])
    assert added(4) > added(16)


def test_cost_bad_grammar(capsys):
    code, _, err = run(capsys, "cost", "--insert", "gc:c3c4c5:x16")
    assert code == 2 and "ratio" in err


def test_stats_rows(capsys, tmp_path):
    argv = ["stats", "--block", "nl", "--variant", "e-gaussian", "--channels", "8", "--hw", "6x6",
            "--probes", "input,att,output"]
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert run(capsys, *argv, "--out", str(a))[0] == 0
    assert run(capsys, *argv, "--out", str(b))[0] == 0
    lines = a.read_text().splitlines()
    assert len(lines) == 4  # header + 3 probes
    assert a.read_bytes() == b.read_bytes()


def test_stats_absent_probe(capsys):
    code, out, _ = run(capsys, "stats", "--block", "nl", "--variant", "gaussian", "--probes", "key")
    assert code == 0
    assert out.splitlines()[1].split(",")[3] == "absent"


def test_stats_from_input_file(capsys, tmp_path):
    x = rng_tensor(4, (1, 8, 3, 3), "normal")
    path = tmp_path / "x.txt"
    tensorio.write_tensor(x, path)
    code, out, _ = run(capsys, "stats", "--block", "snl", "--channels", "8", "--input", str(path),
                       "--probes", "att")
    assert code == 0
    assert out.splitlines()[1] == "snl,-,att,0,9,8,0"


def test_stats_malformed_input(capsys, tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("tensor v1 4 1 8 2 2\n1 2 3\nfoo\n")
    code, _, err = run(capsys, "stats", "--input", str(path))
    assert code == 1
    assert "line" in err


def test_stats_bad_probe(capsys):
    assert run(capsys, "stats", "--probes", "value")[0] == 2


def test_attn_export(capsys, tmp_path):
    stem = tmp_path / "map"
    code, _, err = run(capsys, "attn-export", "--block", "nl", "--channels", "8", "--hw", "4x5",
                       "--query", "0", "--out", str(stem))
    assert code == 0 and "per-query" in err
    grid = analysis.read_heatmap_csv(tmp_path / "map.csv")
    assert grid.shape == (4, 5)
    assert abs(grid.sum() - 1.0) < 1e-12
    assert analysis.read_pgm(tmp_path / "map.pgm").max() == 255


def test_attn_export_needs_out(capsys):
    assert run(capsys, "attn-export")[0] == 2


def test_gradcheck_ops(capsys):
    code, out, _ = run(capsys, "gradcheck", "--target", "ops", "--seeds", "2", "--format", "csv")
    assert code == 0
    assert "FAIL" not in out
    assert out.startswith("check,max_rel_err,tol,status")


def test_gradcheck_failure_exit(capsys):
    code, out, _ = run(capsys, "gradcheck", "--target", "ops", "--seeds", "1", "--tol", "1e-30")
    assert code == 1 and "FAIL" in out


def test_train_csv(capsys):
    code, out, _ = run(capsys, "train", "--epochs", "1", "--samples", "40", "--insert", "gc:c4:r4")
    assert code == 0
    assert out.splitlines()[0] == "epoch,train_loss,test_acc"
    assert len(out.splitlines()) == 3


def test_config_overrides_flags(capsys, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"probes": "att", "variant": "dot"}))
    code, out, _ = run(capsys, "stats", "--probes", "input", "--config", str(cfg))
    assert code == 0
    rows = out.splitlines()[1:]
    assert len(rows) == 1 and rows[0].startswith("nl,dot,att,")


def test_config_unknown_key(capsys, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"colour": "red"}))
    assert run(capsys, "cost", "--config", str(cfg))[0] == 2


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "gclab", "cost", "--table7a", "--format", "table"],
                          capture_output=True, text=True, check=False)
    assert proc.returncode == 0
    assert "28.08M" in proc.stdout
