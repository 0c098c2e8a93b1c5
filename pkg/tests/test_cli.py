import json

import pytest

from esft_serve.cli import main


def _records(capsys):
    return [json.loads(l) for l in capsys.readouterr().out.splitlines() if l.strip()]


def test_analyze_reference_jsonl(capsys):
    assert main(["analyze", "--reference", "--e-max", "13", "--jsonl", "-"]) == 0
    recs = _records(capsys)
    frag = next(r for r in recs if r["record"] == "fragmentation")
    assert frag["f_mem"] == pytest.approx(1.502, abs=1e-3) and frag["num_adapters"] == 10
    assert sum(r["record"] == "adapter" for r in recs) == 10


def test_analyze_without_adapters_reports_no_fragmentation(capsys):
    assert main(["analyze"]) == 0
    assert "F_mem = 1.000" in capsys.readouterr().out


def test_analyze_profile_file_and_file_output(tmp_path, capsys):
    prof = tmp_path / "p.txt"
    prof.write_text("a 2 1 0 1\nb 1 1 1 1\n")
    out = tmp_path / "r.jsonl"
    assert main(["analyze", "--profiles", str(prof), "--jsonl", str(out), "--expert-size", "6144",
                 "--page-size", "4096"]) == 0
    assert "F_mem" in capsys.readouterr().out
    recs = [json.loads(l) for l in out.read_text().splitlines()]
    assert recs[-1]["record"] == "dry_run" and recs[-1]["num_layers"] == 4


def test_bad_input_exit_code(tmp_path, capsys):
    prof = tmp_path / "p.txt"
    prof.write_text("a max=3\n")
    assert main(["analyze", "--profiles", str(prof)]) == 3
    assert main(["analyze", "--reference", "--e-max", "5"]) == 3
    assert "error" in capsys.readouterr().err


def test_usage_error_exit_code():
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 2


def test_generate_dump_and_verify(tmp_path, capsys):
    m, a = tmp_path / "m", tmp_path / "a"
    assert main(["gen-model", "--out", str(m), "--layers", "2", "--hidden", "16", "--intermediate", "8"]) == 0
    assert main(["gen-adapters", "--model", str(m), "--out", str(a), "--reference", "--count", "2"]) == 0
    dirs = sorted(str(p) for p in a.iterdir())
    assert len(dirs) == 2
    capsys.readouterr()
    assert main(["dump-map", "--model", str(m), "--adapters", *dirs, "--layer", "1", "--jsonl", "-"]) == 0
    rows = _records(capsys)
    assert len(rows) == 2 and all(len(r["row"]) == 64 for r in rows)
    assert main(["verify", "--model", str(m), "--adapters", *dirs, "--seeds", "2", "--max-batch", "32"]) == 0
    assert "PASS" in capsys.readouterr().out
    assert main(["dump-map", "--model", str(m), "--layer", "9"]) == 3


def test_serve_bench_trace_round_trip(tmp_path, capsys):
    t = tmp_path / "t.jsonl"
    args = ["serve-bench", "--num-adapters", "2", "--duration", "0.5", "--rate", "8", "--output-min", "2", "--output-max", "4"]
    assert main(args + ["--trace-out", str(t)]) == 0
    assert t.exists()
    capsys.readouterr()
    assert main(["serve-bench", "--trace-in", str(t), "--jsonl", "-"]) == 0
    summary = _records(capsys)[-1]
    assert summary["record"] == "summary" and summary["finished"] == summary["requests"]


def test_config_file_is_honoured(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({
        "model": {"num_layers": 2, "num_experts": 16, "top_k": 2, "hidden": 8, "intermediate": 4},
        "e_max": 4,
        "scheduler": {"token_budget": 64, "max_num_seqs": 8},
    }))
    assert main(["dump-map", "--config", str(cfg), "--num-adapters", "1", "--jsonl", "-"]) == 0
    (row,) = _records(capsys)
    assert len(row["row"]) == 16
    cfg.write_text('{"bogus": 1}')
    assert main(["dump-map", "--config", str(cfg)]) == 3


def test_reroute_mode(capsys):
    assert main(["serve-bench", "--mode", "reroute", "--repeats", "1", "--jsonl", "-"]) == 0
    recs = _records(capsys)
    assert recs and all(r["identical"] for r in recs)
