"""CLI subcommands: run, compare, audit, probe, gen."""

from __future__ import annotations

import json

import pytest

from routesim.cli import main
from routesim.trace import load_trace

SPEC = {
    "duration_s": 4.0,
    "mean_rate_rps": 10.0,
    "seed": 3,
    "classes": [
        {"weight": 0.5, "shared_blocks": 4, "output_tokens": [2, 5]},
        {"weight": 0.5, "shared_blocks": 2, "output_tokens": [1, 3]},
    ],
}

CONFIG = {
    "cluster": {"n_instances": 2, "seed": 1},
    "cache": {"capacity_blocks": None},
    "policy": {"kind": "multiplicative"},
    "trace": {"synthetic": SPEC},
}


@pytest.fixture
def spec_file(tmp_path):
    path = tmp_path / "spec.json"
    path.write_text(json.dumps(SPEC))
    return path


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(CONFIG))
    return path


def test_run_writes_six_files(tmp_path, config_file, capsys):
    out = tmp_path / "out"
    code = main(["run", "--config", str(config_file), "--out", str(out)])
    assert code == 0
    names = sorted(p.name for p in out.iterdir())
    assert names == [
        "cdf_tpot.csv",
        "cdf_ttft.csv",
        "hit_timeline.csv",
        "imbalance.csv",
        "requests.csv",
        "summary.json",
    ]


def test_run_missing_trace_names_path(tmp_path, capsys):
    code = main(["run", "--trace", str(tmp_path / "nope.jsonl"), "--out", str(tmp_path / "o")])
    assert code == 1
    assert "nope.jsonl" in capsys.readouterr().err


def test_run_policy_override_recorded(tmp_path, config_file):
    out = tmp_path / "out"
    code = main([
        "run", "--config", str(config_file), "--policy", "vllm", "--out", str(out)
    ])
    assert code == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["policy"] == "vllm"


def test_run_needs_exactly_one_source(tmp_path, spec_file):
    code = main(["run", "--out", str(tmp_path / "o")])
    assert code == 1
    trace = tmp_path / "t.jsonl"
    main(["gen", "--spec", str(spec_file), "--out", str(trace)])
    code = main([
        "run", "--trace", str(trace), "--synthetic", str(spec_file),
        "--out", str(tmp_path / "o"),
    ])
    assert code == 1


def test_gen_round_trips(tmp_path, spec_file):
    trace = tmp_path / "t.jsonl"
    assert main(["gen", "--spec", str(spec_file), "--out", str(trace)]) == 0
    records = load_trace(trace)
    assert len(records) > 5


def test_compare_runs_policies_on_identical_arrivals(tmp_path, config_file):
    out = tmp_path / "cmp"
    code = main([
        "compare", "--config", str(config_file),
        "--policies", "vllm,multiplicative", "--out", str(out),
    ])
    assert code == 0
    rows = (out / "compare.csv").read_text().splitlines()
    assert rows[0].startswith("policy,mean_ttft_ms")
    assert len(rows) == 3
    a = json.loads((out / "vllm" / "summary.json").read_text())
    b = json.loads((out / "multiplicative" / "summary.json").read_text())
    assert a["arrivals_hash"] == b["arrivals_hash"]


def test_compare_rejects_duplicates(tmp_path, config_file):
    code = main([
        "compare", "--config", str(config_file),
        "--policies", "vllm,vllm", "--out", str(tmp_path / "x"),
    ])
    assert code == 1


def test_compare_rate_sweep_fans_out(tmp_path, config_file):
    out = tmp_path / "sweep"
    code = main([
        "compare", "--config", str(config_file),
        "--policies", "vllm,least_bs", "--rates", "0.25,0.5",
        "--out", str(out),
    ])
    assert code == 0
    assert (out / "rate_0.25" / "compare.csv").exists()
    assert (out / "rate_0.5" / "compare.csv").exists()


def test_audit_flags_crafted_hotspot(tmp_path, capsys):
    # one class takes ~60% of arrivals; its prefix can only ever be cached
    # on the instances it is routed to, so the share condition trips
    spec = {
        "duration_s": 90.0,
        "mean_rate_rps": 8.0,
        "seed": 5,
        "classes": [
            {"weight": 0.6, "shared_blocks": 8, "output_tokens": [2, 4]},
            {"weight": 0.4, "shared_blocks": 2, "output_tokens": [2, 4]},
        ],
    }
    spec_path = tmp_path / "hot.json"
    spec_path.write_text(json.dumps(spec))
    trace = tmp_path / "hot.jsonl"
    main(["gen", "--spec", str(spec_path), "--out", str(trace)])
    code = main([
        "audit", "--trace", str(trace), "--instances", "16",
        "--out", str(tmp_path / "audit"),
    ])
    assert code == 0
    out = capsys.readouterr().out
    assert "first violation" in out
    assert (tmp_path / "audit" / "detector.csv").exists()


def test_audit_benign_uniform_trace(tmp_path, capsys):
    # 32 equally popular classes: each class's share of arrivals stays far
    # below any plausible holder share, so no window is suspect
    spec = {
        "duration_s": 60.0,
        "mean_rate_rps": 8.0,
        "seed": 6,
        "classes": [
            {"weight": 1 / 32, "shared_blocks": 2, "output_tokens": [1, 2]}
            for _ in range(32)
        ],
    }
    spec_path = tmp_path / "uniform.json"
    spec_path.write_text(json.dumps(spec))
    trace = tmp_path / "uniform.jsonl"
    main(["gen", "--spec", str(spec_path), "--out", str(trace)])
    code = main([
        "audit", "--trace", str(trace), "--instances", "16",
        "--out", str(tmp_path / "audit"),
    ])
    assert code == 0
    assert "benign everywhere" in capsys.readouterr().out


def test_audit_empty_trace_benign(tmp_path, capsys):
    trace = tmp_path / "empty.jsonl"
    trace.write_text("")
    code = main(["audit", "--trace", str(trace), "--out", str(tmp_path / "a")])
    assert code == 0
    assert "benign everywhere" in capsys.readouterr().out


def test_probe_prints_rate(tmp_path, spec_file, capsys):
    config = {
        "cluster": {"n_instances": 2},
        "cost_model": {"prefill_base_ms": 1.0, "prefill_per_token_ms": 0.01,
                       "decode_base_ms": 2.0, "decode_per_seq_ms": 0.2,
                       "max_batch_requests": 4},
        "cache": {"capacity_blocks": None},
        "trace": {"synthetic": {**SPEC, "duration_s": 30.0}},
    }
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(config))
    assert main(["probe", "--config", str(path)]) == 0
    out = capsys.readouterr().out
    assert "max_sustainable_rate_rps=" in out
    assert float(out.split("=")[1]) > 0


def test_unknown_policy_is_user_error(tmp_path, config_file):
    code = main([
        "run", "--config", str(config_file), "--policy", "nonsense",
        "--out", str(tmp_path / "o"),
    ])
    assert code == 1
