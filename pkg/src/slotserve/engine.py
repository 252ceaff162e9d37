"""Single-request execution pipeline: acquire slot, prefill the suffix, run the
decode loop (plain or speculative, eager or replayed), release, and report the
latency decomposition.

Greedy only; argmax ties go to the lowest token id. The speculative path is
lossless under greedy verification: every committed token is the base model's
argmax given the committed context, computed by the same row-wise kernels as
plain decode.
"""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass, field

import numpy as np

from .config import EngineConfig, load_engine_config, resolve_artifacts
from .dispatch import shape_sig_of
from .errors import (
    CapacityError,
    ClosedHandle,
    SlotBusy,
    UnknownRequest,
    ValidationError,
)
from .kernels import KernelRegistry, default_table, register_builtin_kernels
from .kv import KVManager, KVSlot, warmup
from .model import DRAFT_MODEL_NAME, ModelRunner, capture_decode_plan
from .plan import StepPlan, replay


@dataclass
class InferenceRequest:
    request_id: str
    input_tokens: list[int]
    max_new_tokens: int | None = None
    stop_token: int | None = None


@dataclass
class RequestStats:
    prefill_ms: float = 0.0
    decode_ms: float = 0.0
    total_ms: float = 0.0
    prompt_tokens: int = 0
    new_tokens: int = 0
    per_step_ms: list[float] = field(default_factory=list)
    speculative: dict | None = None

    def to_dict(self) -> dict:
        d = {
            "prefill_ms": self.prefill_ms,
            "decode_ms": self.decode_ms,
            "total_ms": self.total_ms,
            "prompt_tokens": self.prompt_tokens,
            "new_tokens": self.new_tokens,
            "per_step_ms": list(self.per_step_ms),
        }
        if self.speculative is not None:
            d["speculative"] = dict(self.speculative)
        return d


@dataclass
class InferenceResponse:
    output_tokens: list[int]
    stats: RequestStats


class Timers:
    """Raw per-request measurements, turned into RequestStats by collect_stats."""

    def __init__(self):
        self.prefill_s = 0.0
        self.decode_s = 0.0
        self.total_s = 0.0
        self.per_step_s: list[float] = []
        self.prompt_tokens = 0
        self.new_tokens = 0
        self.spec_proposed = 0
        self.spec_accepted = 0
        self.speculative = False


def collect_stats(timers: Timers) -> RequestStats:
    stats = RequestStats(
        prefill_ms=timers.prefill_s * 1e3,
        decode_ms=timers.decode_s * 1e3,
        total_ms=timers.total_s * 1e3,
        prompt_tokens=timers.prompt_tokens,
        new_tokens=timers.new_tokens,
        per_step_ms=[t * 1e3 for t in timers.per_step_s],
    )
    if timers.speculative:
        ratio = timers.spec_accepted / timers.spec_proposed if timers.spec_proposed else 0.0
        stats.speculative = {
            "proposed": timers.spec_proposed,
            "accepted": timers.spec_accepted,
            "accept_ratio": ratio,
        }
    return stats


def greedy_pick(logits: np.ndarray) -> int:
    """Argmax; numpy returns the first (lowest) index on ties."""
    return int(np.argmax(logits))


class Engine:
    """One configured engine instance owning its slots, table, and plans."""

    def __init__(self, cfg: EngineConfig):
        self.cfg = cfg
        arts = resolve_artifacts(cfg)
        self.registry = register_builtin_kernels(KernelRegistry())
        self.table = default_table(self.registry)
        if cfg.dispatch_table_path is not None:
            self.table.load_overrides(cfg.dispatch_table_path)
        arch = arts.prefill.arch
        self.spec_enabled = cfg.speculative.enabled
        self.block_len = cfg.speculative.block_len
        headroom = self.block_len if self.spec_enabled else 0
        draft_layers = arts.draft.arch.n_layers if arts.draft is not None else None
        self.manager = KVManager(
            cfg.kv,
            cfg.slots,
            base_layers=arch.n_layers,
            n_kv_heads=arch.n_kv_heads,
            head_dim=arch.head_dim,
            headroom=headroom,
            draft_layers=draft_layers,
        )
        self.runner_p = ModelRunner(arts.prefill, self.table, self.registry)
        self.runner_d = ModelRunner(arts.decode, self.table, self.registry)
        self.runner_draft = (
            ModelRunner(arts.draft, self.table, self.registry, model_name=DRAFT_MODEL_NAME)
            if arts.draft is not None
            else None
        )
        self.artifacts = arts
        for slot in self.manager.slots.values():
            for runner in (self.runner_p, self.runner_d, self.runner_draft):
                if runner is not None:
                    runner.buffers(slot)
                    runner.workspace(slot)
        warmup(self.manager, arts.prefill, self.table, self.registry)
        if self.runner_draft is not None:
            self._warm_draft()
        self.table.freeze()
        self._plans: dict[tuple[str, str], StepPlan] = {}
        if cfg.capture_decode_plan:
            for rid, slot in self.manager.slots.items():
                self._plans[(rid, "base")] = capture_decode_plan(
                    arts.decode, slot, self.table, self.registry
                )
                if self.runner_draft is not None:
                    self._plans[(rid, "draft")] = capture_decode_plan(
                        arts.draft,
                        slot,
                        self.table,
                        self.registry,
                        region_tag="draft",
                        model_name=DRAFT_MODEL_NAME,
                    )
        self._lock = threading.Lock()
        self._busy = False
        self.closed = False

    # -- public API ----------------------------------------------------------

    def execute(self, req: InferenceRequest) -> InferenceResponse:
        self._check_open()
        if not req.input_tokens:
            raise ValidationError("input_tokens must be non-empty")
        with self._lock:
            if self._busy:
                raise SlotBusy("engine is busy with another request")
            slot = self.manager.acquire(req.request_id)
            self._busy = True
        timers = Timers()
        timers.speculative = self.spec_enabled
        t_total = time.perf_counter()
        try:
            timers.prompt_tokens = slot.prefix_len + len(req.input_tokens)
            t0 = time.perf_counter()
            first = self.runner_p.prefill(list(req.input_tokens), slot, stage="prefill")
            timers.prefill_s = time.perf_counter() - t0
            if req.max_new_tokens is not None:
                if req.max_new_tokens < 0:
                    raise ValidationError(
                        f"max_new_tokens must be >= 0, got {req.max_new_tokens}"
                    )
                gen_limit = req.max_new_tokens
            else:
                # the slot default stops at the dynamic-region budget
                budget_left = slot.prefix_len + slot.max_new_tokens - slot.current_len
                gen_limit = min(slot.max_new_tokens, max(budget_left, 0))
            output: list[int] = []
            if gen_limit > 0:
                t0 = time.perf_counter()
                if self.spec_enabled:
                    output = self._decode_speculative(slot, req, first, gen_limit, timers)
                else:
                    output = self._decode_plain(slot, req, first.logits, gen_limit, timers)
                timers.decode_s = time.perf_counter() - t0
            timers.new_tokens = len(output)
            timers.total_s = time.perf_counter() - t_total
            return InferenceResponse(output_tokens=output, stats=collect_stats(timers))
        finally:
            self.manager.release(req.request_id)
            with self._lock:
                self._busy = False

    def generate(
        self,
        request_id: str,
        tokens: list[int],
        max_new_tokens: int | None = None,
        stop_token: int | None = None,
    ) -> tuple[list[int], RequestStats]:
        resp = self.execute(
            InferenceRequest(request_id, list(tokens), max_new_tokens, stop_token)
        )
        return resp.output_tokens, resp.stats

    def prefill(self, request_id: str, tokens: list[int]) -> RequestStats:
        resp = self.execute(InferenceRequest(request_id, list(tokens), max_new_tokens=0))
        return resp.stats

    def release(self, request_id: str) -> None:
        self._check_open()
        self.manager.release(request_id)

    def shutdown(self) -> None:
        self.closed = True

    def plan_for(self, request_id: str, region: str = "base") -> StepPlan | None:
        return self._plans.get((request_id, region))

    # -- decode loops ----------------------------------------------------------

    def _step_logits(self, slot: KVSlot, token: int, region: str = "base") -> np.ndarray:
        plan = self._plans.get((slot.request_id, region))
        if plan is not None:
            return replay(plan, token, slot.region(region).length, slot)
        runner = self.runner_d if region == "base" else self.runner_draft
        return runner.decode_step(token, slot, region_tag=region).logits

    def _decode_plain(
        self,
        slot: KVSlot,
        req: InferenceRequest,
        first_logits: np.ndarray,
        gen_limit: int,
        timers: Timers,
    ) -> list[int]:
        out: list[int] = []
        t0 = time.perf_counter()
        tok = greedy_pick(first_logits)
        if tok == req.stop_token:
            return out
        out.append(tok)
        timers.per_step_s.append(time.perf_counter() - t0)
        while len(out) < gen_limit:
            t0 = time.perf_counter()
            logits = self._step_logits(slot, out[-1])
            tok = greedy_pick(logits)
            if tok == req.stop_token:
                break
            out.append(tok)
            timers.per_step_s.append(time.perf_counter() - t0)
        return out

    def _decode_speculative(
        self,
        slot: KVSlot,
        req: InferenceRequest,
        first,
        gen_limit: int,
        timers: Timers,
    ) -> list[int]:
        """Alternate block-wise draft proposals with one batched verification pass.

        Invariant between cycles: the base KV holds committed_len - 1 entries and
        the next pass processes [last committed token] + proposals; the first
        cycle instead reuses the prefill logits and processes proposals only.
        """
        m = self.block_len
        draft_runner = self.runner_draft
        draft_bufs = draft_runner.buffers(slot)
        history = list(slot.config.prefix_tokens) + list(req.input_tokens)
        committed = len(history)  # includes prefix; base KV == committed right now
        prev_logits_pick: int | None = greedy_pick(first.logits)
        if draft_bufs.feat_in is not None and first.features is not None:
            draft_bufs.feat_in[0] = first.features
        out: list[int] = []
        stop = False
        while not stop and len(out) < gen_limit:
            t_cycle = time.perf_counter()
            self._refresh_feat_bias(draft_bufs)
            dreg = slot.draft
            target = committed - 1 if prev_logits_pick is None else committed
            if dreg.length > target:
                slot.truncate_draft(target)
            dlogits = None
            while dreg.length < committed:
                dlogits = self._step_logits(slot, history[dreg.length], region="draft")
            proposals: list[int] = []
            for j in range(m):
                proposals.append(greedy_pick(dlogits))
                if j < m - 1:
                    dlogits = self._step_logits(slot, proposals[-1], region="draft")
            if prev_logits_pick is not None:
                ver_tokens = proposals
                preds = [prev_logits_pick]
            else:
                ver_tokens = [history[committed - 1]] + proposals
                preds = []
            ver = self.runner_d.prefill(
                ver_tokens, slot, stage="prefill", all_logits=True
            )
            preds.extend(greedy_pick(ver.logits[r]) for r in range(len(ver_tokens)))
            accepted = 0
            while accepted < m and proposals[accepted] == preds[accepted]:
                accepted += 1
            cycle_tokens = proposals[:accepted] + [preds[accepted]]
            timers.spec_proposed += m
            timers.spec_accepted += accepted
            slot.truncate(committed + accepted)
            dtarget = committed + min(accepted, m - 1)
            if dreg.length > dtarget:
                slot.truncate_draft(dtarget)
            if ver.features is not None:
                row = accepted if prev_logits_pick is None else accepted - 1
                if row >= 0 and draft_bufs.feat_in is not None:
                    draft_bufs.feat_in[0] = ver.features[row]
            for tok in cycle_tokens:
                if tok == req.stop_token:
                    stop = True
                    break
                out.append(tok)
                history.append(tok)
                if len(out) >= gen_limit:
                    stop = True
                    break
            committed += accepted + 1
            prev_logits_pick = None
            timers.per_step_s.append(time.perf_counter() - t_cycle)
        return out

    def _refresh_feat_bias(self, draft_bufs) -> None:
        """Project the cached base features into the draft's input-bias buffer."""
        if draft_bufs.feat_bias is None or draft_bufs.feat_in is None:
            return
        w = self.artifacts.draft.tensor("feature_proj.weight")
        self.runner_draft.disp.call(
            "linear",
            "feature_proj",
            "decode",
            shape_sig_of("linear", m=1, in_features=w.shape[0], out_features=w.shape[1]),
            (draft_bufs.feat_in, w, draft_bufs.feat_bias),
        )

    # -- init helpers ----------------------------------------------------------

    def _warm_draft(self) -> None:
        """Run the draft over each configured prefix so draft KV_p is reusable."""
        for slot in self.manager.slots.values():
            if slot.prefix_len == 0:
                continue
            bufs = self.runner_draft.buffers(slot)
            if bufs.feat_in is not None and slot.warm_features is not None:
                bufs.feat_in[0] = slot.warm_features
            self._refresh_feat_bias(bufs)
            slot.draft.length = 0
            for tok in slot.config.prefix_tokens:
                self.runner_draft.decode_step(tok, slot, region_tag="draft")
            slot.draft_warm_len = slot.prefix_len

    def _check_open(self) -> None:
        if self.closed:
            raise ClosedHandle("engine has been shut down")


def create_engine(config_path: str) -> Engine:
    return Engine(load_engine_config(config_path))
