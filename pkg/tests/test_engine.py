"""End-to-end request pipeline: stopping rules, stats, exclusivity, and the
plain decode loop in both eager and replay modes."""

import threading

import numpy as np
import pytest

from slotserve import Engine, InferenceRequest, collect_stats, greedy_pick, load_engine_config
from slotserve.engine import Timers
from slotserve.errors import (
    CapacityError,
    ClosedHandle,
    SlotBusy,
    UnknownRequest,
    ValidationError,
)


def build(make_config, **overrides):
    return Engine(load_engine_config(make_config(**overrides)))


class TestExecute:
    def test_basic_generation(self, make_config):
        eng = build(make_config)
        out, stats = eng.generate("a", [1, 2, 3], max_new_tokens=8)
        assert len(out) == 8
        assert stats.new_tokens == 8
        assert stats.prompt_tokens == 3
        assert all(0 <= t < 256 for t in out)

    def test_prefix_counted_in_prompt_tokens(self, make_config):
        eng = build(make_config, slots=[
            {"request_id": "a", "prefix_tokens": [4, 5, 6, 7], "max_new_tokens": 64}])
        _, stats = eng.generate("a", [1, 2], max_new_tokens=4)
        assert stats.prompt_tokens == 6

    def test_zero_max_new_tokens(self, make_config):
        eng = build(make_config)
        out, stats = eng.generate("a", [1, 2, 3], max_new_tokens=0)
        assert out == []
        assert stats.decode_ms == 0.0
        assert stats.prefill_ms > 0.0
        assert stats.per_step_ms == []

    def test_stop_token_as_first_token(self, make_config):
        eng = build(make_config)
        probe, _ = eng.generate("a", [1, 2, 3], max_new_tokens=1)
        out, _ = eng.generate("a", [1, 2, 3], max_new_tokens=8, stop_token=probe[0])
        assert out == []

    def test_stop_token_mid_sequence(self, make_config):
        eng = build(make_config)
        probe, _ = eng.generate("a", [1, 2, 3], max_new_tokens=10)
        stop = probe[4]
        cut = probe.index(stop)  # first occurrence wins
        out, _ = eng.generate("a", [1, 2, 3], max_new_tokens=10, stop_token=stop)
        assert out == probe[:cut]

    def test_same_request_twice_identical(self, make_config):
        eng = build(make_config)
        a, _ = eng.generate("a", [9, 10, 11], max_new_tokens=12)
        b, _ = eng.generate("a", [9, 10, 11], max_new_tokens=12)
        assert a == b

    def test_unknown_request(self, make_config):
        eng = build(make_config)
        with pytest.raises(UnknownRequest):
            eng.generate("nope", [1], max_new_tokens=1)

    def test_empty_input_rejected(self, make_config):
        eng = build(make_config)
        with pytest.raises(ValidationError):
            eng.generate("a", [], max_new_tokens=1)

    def test_capacity_exhaustion(self, make_config):
        eng = build(make_config, slots=[
            {"request_id": "a", "prefix_tokens": [], "max_new_tokens": 5}])
        with pytest.raises(CapacityError):
            eng.generate("a", [1, 2, 3], max_new_tokens=10)

    def test_slot_default_gen_limit(self, make_config):
        eng = build(make_config, slots=[
            {"request_id": "a", "prefix_tokens": [], "max_new_tokens": 8}])
        out, _ = eng.generate("a", [1, 2])
        assert len(out) == 6  # dynamic budget 8 minus the 2 suffix positions

    def test_suffix_exactly_fills_budget(self, make_config):
        eng = build(make_config, slots=[
            {"request_id": "a", "prefix_tokens": [], "max_new_tokens": 24}])
        out, _ = eng.generate("a", list(range(20)), max_new_tokens=4)
        assert len(out) == 4


class TestConcurrency:
    def test_concurrent_execute_one_busy(self, make_config):
        eng = build(make_config)
        barrier = threading.Barrier(2)
        results = []

        def worker():
            barrier.wait()
            try:
                eng.generate("a", [1, 2, 3], max_new_tokens=30)
                results.append("ok")
            except SlotBusy:
                results.append("busy")

        threads = [threading.Thread(target=worker) for _ in range(2)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert sorted(results) == ["busy", "ok"]


class TestStats:
    def test_latency_decomposition(self, make_config):
        eng = build(make_config)
        for _ in range(3):
            _, stats = eng.generate("a", [1, 2, 3, 4], max_new_tokens=8)
            assert abs(stats.total_ms - (stats.prefill_ms + stats.decode_ms)) \
                <= 0.05 * stats.total_ms

    def test_per_step_length_equals_new_tokens(self, make_config):
        eng = build(make_config)
        out, stats = eng.generate("a", [1, 2, 3], max_new_tokens=7)
        assert len(stats.per_step_ms) == len(out) == 7

    def test_collect_stats_zero_decode(self):
        t = Timers()
        t.prefill_s = 0.004
        t.total_s = 0.005
        stats = collect_stats(t)
        assert stats.decode_ms == 0.0

    def test_collect_stats_accept_ratio_hand_counted(self):
        # 3 cycles of m=4 with accepts 4, 2, 4 -> 10 accepted of 12 proposed
        t = Timers()
        t.speculative = True
        for k in (4, 2, 4):
            t.spec_proposed += 4
            t.spec_accepted += k
        stats = collect_stats(t)
        assert stats.speculative["proposed"] == 12
        assert stats.speculative["accepted"] == 10
        assert stats.speculative["accept_ratio"] == pytest.approx(10 / 12)

    def test_stats_dict_schema(self, make_config):
        eng = build(make_config)
        _, stats = eng.generate("a", [1, 2], max_new_tokens=2)
        d = stats.to_dict()
        assert {"prefill_ms", "decode_ms", "total_ms", "prompt_tokens",
                "new_tokens", "per_step_ms"} <= set(d)


class TestGreedy:
    def test_argmax_tie_lowest_id(self):
        logits = np.zeros(16, dtype=np.float32)
        logits[[3, 7, 11]] = 2.5
        assert greedy_pick(logits) == 3

    def test_plan_on_off_identical(self, make_config):
        eng_on = build(make_config, capture_decode_plan=True)
        eng_off = build(make_config, capture_decode_plan=False)
        for prompt in ([1, 2, 3], [42], [200, 100, 50, 25]):
            a, _ = eng_on.generate("a", prompt, max_new_tokens=16)
            b, _ = eng_off.generate("a", prompt, max_new_tokens=16)
            assert a == b

    def test_plan_attached_when_configured(self, make_config):
        eng = build(make_config, capture_decode_plan=True)
        assert eng.plan_for("a") is not None
        eng2 = build(make_config, capture_decode_plan=False)
        assert eng2.plan_for("a") is None


class TestLifecycle:
    def test_shutdown_blocks_calls(self, make_config):
        eng = build(make_config)
        eng.shutdown()
        with pytest.raises(ClosedHandle):
            eng.generate("a", [1], max_new_tokens=1)

    def test_double_shutdown_noop(self, make_config):
        eng = build(make_config)
        eng.shutdown()
        eng.shutdown()

    def test_prefill_api(self, make_config):
        eng = build(make_config)
        stats = eng.prefill("a", [1, 2, 3])
        assert stats.new_tokens == 0
        assert stats.prefill_ms > 0

    def test_release_api(self, make_config):
        eng = build(make_config)
        eng.release("a")  # releasing a free slot is a no-op

    def test_two_engines_independent(self, make_config):
        e1 = build(make_config)
        e2 = build(make_config)
        out1, _ = e1.generate("a", [5, 6], max_new_tokens=4)
        e1.shutdown()
        out2, _ = e2.generate("a", [5, 6], max_new_tokens=4)
        assert out1 == out2


class TestOverriddenKernels:
    def test_mode_equivalences_hold_under_override_table(self, make_config, spec_config, tmp_path):
        # route every linear through the blocked kernel and every rope through
        # the decomposed variant; the row-wise discipline must keep plain,
        # replayed, and speculative decode token-identical
        import json as _json

        from slotserve.dispatch import KEY_FIELDS

        def entry(op_kind, impl_id, params=None):
            e = {f: "" for f in KEY_FIELDS}
            e["op_kind"] = op_kind
            e["impl_id"] = impl_id
            e["impl_params"] = params or {}
            return e

        table_path = tmp_path / "override.json"
        table_path.write_text(_json.dumps([
            entry("linear", "linear.blocked", {"tile": 8}),
            entry("rope", "rope.decomposed"),
        ]))
        outs = []
        for plan in (True, False):
            eng = build(make_config, dispatch_table_path=str(table_path),
                        capture_decode_plan=plan)
            out, _ = eng.generate("a", [3, 14, 15], max_new_tokens=12)
            outs.append(out)
            eng.shutdown()
        spec_eng = build(spec_config, dispatch_table_path=str(table_path))
        out_spec, _ = spec_eng.generate("a", [3, 14, 15], max_new_tokens=12)
        outs.append(out_spec)
        assert outs[1] == outs[0]
        assert outs[2] == outs[0]


class TestDistinctDecodeArtifact:
    def test_two_artifact_engine_runs(self, make_config, artifact_dir):
        eng = build(make_config, decode_artifact_path=str(artifact_dir / "base2.efmt"))
        out, _ = eng.generate("a", [1, 2, 3], max_new_tokens=6)
        assert len(out) == 6
        assert eng.artifacts.decode is not eng.artifacts.prefill
