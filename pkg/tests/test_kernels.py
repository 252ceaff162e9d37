"""Kernel registry contracts, cross-implementation agreement, and the
StepPlan capture/replay mechanism."""

import numpy as np
import pytest

from slotserve import (
    KVConfig,
    KVManager,
    KernelImpl,
    KernelRegistry,
    ModelRunner,
    SlotConfig,
    capture_decode_plan,
    default_table,
    generate_artifact,
    register_builtin_kernels,
    replay,
)
from slotserve.errors import (
    CaptureUnsupported,
    DuplicateImpl,
    GeometryDrift,
    ValidationError,
)
from slotserve.kernels import (
    linear_blocked,
    linear_naive,
    linear_transposed_b,
    rope_decomposed,
    rope_fused,
)


def runtime(art, max_new=1100, prefix=()):
    registry = register_builtin_kernels(KernelRegistry())
    table = default_table(registry)
    mgr = KVManager(
        KVConfig(max_seq_len=2048),
        [SlotConfig("s", tuple(prefix), max_new)],
        base_layers=art.arch.n_layers,
        n_kv_heads=art.arch.n_kv_heads,
        head_dim=art.arch.head_dim,
    )
    return registry, table, mgr.acquire("s")


class TestRegistry:
    def test_linear_has_multiple_impls(self):
        registry = register_builtin_kernels(KernelRegistry())
        assert len(registry.impls_for("linear")) >= 2

    def test_gelu_variants_distinct(self):
        registry = register_builtin_kernels(KernelRegistry())
        ids = {i.impl_id for i in registry.impls_for("gelu")}
        assert {"gelu.tanh", "gelu.erf"} <= ids

    def test_duplicate_rejected(self):
        registry = register_builtin_kernels(KernelRegistry())
        with pytest.raises(DuplicateImpl):
            registry.register(KernelImpl("linear.naive", "linear", linear_naive))

    def test_listing_is_self_describing(self):
        registry = register_builtin_kernels(KernelRegistry())
        listing = registry.listing()
        blocked = next(e for e in listing if e["impl_id"] == "linear.blocked")
        assert blocked["default_params"] == {"tile": 16}
        assert {"tile": 8} in blocked["tuning_presets"]
        assert all({"impl_id", "op_kind", "stages"} <= set(e) for e in listing)


class TestCrossImplEquality:
    def test_linear_variants_agree(self):
        # valid-input domain: activations O(1), weights in the artifact range
        rng = np.random.default_rng(0)
        for m, k, n in [(1, 64, 64), (5, 64, 128), (64, 64, 64)]:
            x = rng.uniform(-1, 1, size=(m, k)).astype(np.float32)
            w = rng.uniform(-0.05, 0.05, size=(k, n)).astype(np.float32)
            outs = []
            for fn, kw in [(linear_naive, {}), (linear_blocked, {"tile": 16}),
                           (linear_blocked, {"tile": 8}), (linear_transposed_b, {})]:
                out = np.empty((m, n), dtype=np.float32)
                fn(x, w, out, **kw)
                outs.append(out)
            for other in outs[1:]:
                assert np.abs(outs[0] - other).max() <= 1e-6

    def test_rope_variants_agree(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((6, 4, 16)).astype(np.float32)
        pos = np.arange(3, 9, dtype=np.int64)
        a = np.empty_like(x)
        b = np.empty_like(x)
        rope_fused(x, pos, a)
        rope_decomposed(x, pos, b)
        assert np.abs(a - b).max() <= 1e-6


class TestCaptureReplay:
    def _prepare(self, seed=0, prompt=(1, 2, 3, 4)):
        art = generate_artifact(seed)
        registry, table, slot = runtime(art)
        runner = ModelRunner(art, table, registry)
        runner.prefill(list(prompt), slot)
        table.freeze()
        return art, registry, table, slot, runner

    def test_captured_logits_equal_eager(self):
        art, registry, table, slot, runner = self._prepare()
        length = slot.current_len
        plan = capture_decode_plan(art, slot, table, registry)
        assert slot.current_len == length  # capture rewinds its real step
        eager = runner.decode_step(9, slot).logits.copy()
        slot.truncate(length)
        replayed = replay(plan, 9, length, slot).copy()
        assert np.array_equal(eager, replayed)

    def test_zero_resolutions_during_replay(self):
        art, registry, table, slot, runner = self._prepare()
        plan = capture_decode_plan(art, slot, table, registry)
        before = table.resolve_calls
        for i in range(1000):
            replay(plan, i % art.arch.vocab_size, slot.current_len, slot)
        assert table.resolve_calls == before
        assert plan.replay_count == 1000

    def test_plan_length_from_architecture(self):
        art, registry, table, slot, runner = self._prepare()
        plan = capture_decode_plan(art, slot, table, registry)
        per_layer = 15  # norm,q,k,v,rope_q,rope_k,append,attn,o,resid,norm,in,act,out,resid
        head_ops = 3  # embed, final norm, lm head
        assert len(plan.calls) == art.arch.n_layers * per_layer + head_ops

    def test_replay_increments_length(self):
        art, registry, table, slot, runner = self._prepare()
        plan = capture_decode_plan(art, slot, table, registry)
        n = slot.current_len
        replay(plan, 5, n, slot)
        assert slot.current_len == n + 1

    def test_replay_token_sequence_matches_eager(self):
        art, registry, table, slot, runner = self._prepare(seed=3)
        plan = capture_decode_plan(art, slot, table, registry)
        base_len = slot.current_len
        tok = 7
        eager_tokens = []
        for _ in range(32):
            logits = runner.decode_step(tok, slot).logits
            tok = int(np.argmax(logits))
            eager_tokens.append(tok)
        slot.truncate(base_len)
        tok = 7
        replay_tokens = []
        for _ in range(32):
            logits = replay(plan, tok, slot.current_len, slot)
            tok = int(np.argmax(logits))
            replay_tokens.append(tok)
        assert eager_tokens == replay_tokens

    def test_geometry_drift_on_other_slot(self):
        art, registry, table, slot, runner = self._prepare()
        plan = capture_decode_plan(art, slot, table, registry)
        _, _, other = runtime(art)
        with pytest.raises(GeometryDrift):
            replay(plan, 1, other.current_len, other)

    def test_position_mismatch_rejected(self):
        art, registry, table, slot, runner = self._prepare()
        plan = capture_decode_plan(art, slot, table, registry)
        with pytest.raises(ValidationError):
            replay(plan, 1, slot.current_len + 3, slot)

    def test_capture_requires_frozen_table(self):
        art = generate_artifact(0)
        registry, table, slot = runtime(art)
        ModelRunner(art, table, registry).prefill([1, 2], slot)
        with pytest.raises(ValidationError):
            capture_decode_plan(art, slot, table, registry)

    def test_noncapturable_impl_rejected(self):
        art = generate_artifact(0)
        registry, table, slot = runtime(art)
        from slotserve.dispatch import DispatchEntry, DispatchKey
        from slotserve.kernels import add_residual

        registry.register(
            KernelImpl("add.nocapture", "add", add_residual, capturable=False)
        )
        table.add_entry(DispatchEntry(DispatchKey(op_kind="add"), "add.nocapture"))
        ModelRunner(art, table, registry).prefill([1, 2], slot)
        table.freeze()
        with pytest.raises(CaptureUnsupported):
            capture_decode_plan(art, slot, table, registry)

    def test_kv_growth_one_per_replay(self):
        art, registry, table, slot, runner = self._prepare()
        plan = capture_decode_plan(art, slot, table, registry)
        start = slot.current_len
        for i in range(10):
            replay(plan, i, start + i, slot)
        assert slot.current_len == start + 10
