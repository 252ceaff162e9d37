"""Bench methodology (exact token counts, determinism, report schema) and the
CLI subcommands."""

import json
import subprocess
import sys

import pytest

from slotserve import load_engine_config
from slotserve.bench import BenchSpec, bench_config, parse_shapes, run_bench, validate_report
from slotserve.cli import main
from slotserve.errors import ParseError


class TestParseShapes:
    def test_basic(self):
        assert parse_shapes("512/32,1024/64") == [(512, 32), (1024, 64)]

    def test_whitespace(self):
        assert parse_shapes(" 8/2 , 16/4 ") == [(8, 2), (16, 4)]

    def test_malformed(self):
        for bad in ("512", "a/b", "8/0", "/4", "8/"):
            with pytest.raises(ParseError):
                parse_shapes(bad)


class TestRunBench:
    def test_report_structure_and_tokens(self, make_config):
        cfg = load_engine_config(make_config())
        spec = BenchSpec(shapes=[(8, 4), (16, 2)], warmup_runs=1, timed_runs=3, seed=5)
        report = run_bench(cfg, spec)
        assert [r["shape"] for r in report["rows"]] == ["8/4", "16/2"]
        for row in report["rows"]:
            assert len(row["tokens"]) == row["decode_len"]
            for phase in ("prefill_ms", "decode_ms", "total_ms"):
                agg = row[phase]
                assert agg["min"] <= agg["median"] <= agg["max"]
        validate_report(report)

    def test_single_run_aggregates_collapse(self, make_config):
        cfg = load_engine_config(make_config())
        report = run_bench(cfg, BenchSpec(shapes=[(4, 2)], warmup_runs=0, timed_runs=1))
        agg = report["rows"][0]["total_ms"]
        assert agg["min"] == agg["max"] == agg["mean"] == agg["median"]

    def test_deterministic_tokens_across_invocations(self, make_config):
        cfg = load_engine_config(make_config())
        spec = BenchSpec(shapes=[(8, 6)], warmup_runs=0, timed_runs=2, seed=9)
        a = run_bench(cfg, spec)
        b = run_bench(cfg, spec)
        assert a["rows"][0]["tokens"] == b["rows"][0]["tokens"]

    def test_seed_changes_prompt(self, make_config):
        cfg = load_engine_config(make_config())
        a = run_bench(cfg, BenchSpec(shapes=[(8, 6)], warmup_runs=0, timed_runs=1, seed=1))
        b = run_bench(cfg, BenchSpec(shapes=[(8, 6)], warmup_runs=0, timed_runs=1, seed=2))
        assert a["rows"][0]["tokens"] != b["rows"][0]["tokens"]

    def test_mode_matrix_identical_tokens(self, spec_config):
        cfg = load_engine_config(spec_config())
        outs = []
        for plan in (True, False):
            for speculative in (True, False):
                spec = BenchSpec(shapes=[(8, 8)], warmup_runs=0, timed_runs=1, seed=3,
                                 plan=plan, speculative=speculative)
                outs.append(run_bench(cfg, spec)["rows"][0]["tokens"])
        assert all(o == outs[0] for o in outs[1:])

    def test_bench_config_sizes_slot(self, make_config):
        cfg = load_engine_config(make_config())
        derived = bench_config(cfg, 128, 16, BenchSpec(shapes=[(128, 16)]))
        slot = derived.slots[0]
        assert slot.request_id == "bench"
        assert slot.max_new_tokens == 144
        assert slot.prefix_tokens == ()


class TestCliRun:
    def test_run_outputs_tokens_and_stats(self, make_config, capsys):
        rc = main(["run", "--config", make_config(), "--request-id", "a",
                   "--tokens", "1,2,3", "--max-new-tokens", "8"])
        assert rc == 0
        doc = json.loads(capsys.readouterr().out)
        assert len(doc["output_tokens"]) == 8
        assert {"prefill_ms", "decode_ms", "total_ms"} <= set(doc["stats"])

    def test_unknown_request_exit_2(self, make_config, capsys):
        rc = main(["run", "--config", make_config(), "--request-id", "ghost",
                   "--tokens", "1", "--max-new-tokens", "1"])
        assert rc == 2
        assert "ghost" in capsys.readouterr().err

    def test_config_error_exit_1(self, tmp_path, capsys):
        p = tmp_path / "bad.json"
        p.write_text("{broken")
        rc = main(["run", "--config", str(p), "--request-id", "a", "--tokens", "1"])
        assert rc == 1

    def test_tokens_file(self, make_config, tmp_path, capsys):
        from slotserve import write_token_file

        tf = tmp_path / "toks.bin"
        write_token_file(str(tf), [4, 5, 6])
        rc = main(["run", "--config", make_config(), "--request-id", "a",
                   "--tokens-file", str(tf), "--max-new-tokens", "2"])
        assert rc == 0
        inline = main(["run", "--config", make_config(), "--request-id", "a",
                       "--tokens", "4,5,6", "--max-new-tokens", "2"])
        outs = capsys.readouterr().out.strip().splitlines()
        assert json.loads(outs[0])["output_tokens"] == json.loads(outs[1])["output_tokens"]

    def test_missing_token_source(self, make_config, capsys):
        rc = main(["run", "--config", make_config(), "--request-id", "a"])
        assert rc == 1


class TestCliBench:
    def test_bench_writes_valid_report(self, make_config, tmp_path, capsys):
        report_path = tmp_path / "report.json"
        rc = main(["bench", "--config", make_config(), "--shapes", "8/2,4/2",
                   "--warmup", "0", "--runs", "2", "--report", str(report_path)])
        assert rc == 0
        on_disk = json.loads(report_path.read_text())
        validate_report(on_disk)
        assert len(on_disk["rows"]) == 2

    def test_malformed_shapes_exit_1(self, make_config, capsys):
        rc = main(["bench", "--config", make_config(), "--shapes", "oops"])
        assert rc == 1

    def test_plan_off_flag(self, make_config, capsys):
        rc = main(["bench", "--config", make_config(), "--shapes", "4/2",
                   "--warmup", "0", "--runs", "1", "--plan", "off"])
        assert rc == 0
        doc = json.loads(capsys.readouterr().out)
        assert doc["bench"]["plan"] is False


class TestCliTune:
    def test_tune_then_bench_chain(self, make_config, tmp_path, capsys):
        out_path = tmp_path / "tuned.json"
        rc = main(["tune", "--config", make_config(), "--output", str(out_path),
                   "--prefill-len", "6", "--decode-len", "3", "--reps", "3"])
        assert rc == 0
        entries = json.loads(out_path.read_text())
        assert entries
        assert all(all(e[k] != "" for k in
                       ("model_name", "hw_profile", "op_kind", "stage", "shape_sig"))
                   for e in entries)
        # the emitted file loads cleanly and steers resolution
        cfg_path = make_config(dispatch_table_path=str(out_path))
        rc = main(["bench", "--config", cfg_path, "--shapes", "6/3",
                   "--warmup", "0", "--runs", "1"])
        assert rc == 0
        from slotserve import Engine
        from slotserve.dispatch import DispatchKey

        engine = Engine(load_engine_config(cfg_path))
        probe = DispatchKey(**{k: entries[0][k] for k in
                               ("model_name", "hw_profile", "op_kind", "layer_role",
                                "op_name", "stage", "shape_sig")})
        hit = engine.table.resolve(probe)
        assert hit.impl_id == entries[0]["impl_id"]
        assert hit.key == probe

    def test_unwritable_output_exit_1(self, make_config, tmp_path):
        rc = main(["tune", "--config", make_config(),
                   "--output", str(tmp_path / "no_dir" / "x.json"),
                   "--prefill-len", "4", "--decode-len", "2", "--reps", "3"])
        assert rc == 1


class TestCliListKernels:
    def test_listing_json(self, capsys):
        rc = main(["list-kernels"])
        assert rc == 0
        listing = json.loads(capsys.readouterr().out)
        ids = {e["impl_id"] for e in listing}
        assert {"linear.naive", "linear.blocked", "linear.transposed_b",
                "attention.prefill_masked", "attention.decode_cached",
                "rope.fused", "rope.decomposed", "gelu.tanh", "gelu.erf",
                "rmsnorm.ref", "kv_update.append"} <= ids

    def test_console_script_subprocess(self):
        proc = subprocess.run([sys.executable, "-m", "slotserve.cli", "list-kernels"],
                              capture_output=True, text=True)
        assert proc.returncode == 0
        json.loads(proc.stdout)
