"""Reference decoder-only transformer (forward only), every operator routed
through the dispatch table.

Layer structure: pre-norm attention with rotary embeddings and grouped KV
heads, then a pre-norm two-layer GELU MLP. Logit rows depend only on their own
position's inputs (kernels are row-wise), which is what keeps a prefill pass,
sequential decode steps, and speculative verification bitwise consistent.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dispatch import DispatchTable, shape_sig_of
from .efmt import ModelArtifact
from .errors import ArchMismatch, CapacityError, ValidationError
from .kernels import (
    KernelRegistry,
    V_SAFE,
    gelu_erf,
    gelu_tanh,
    masked_softmax,
    rmsnorm_ref,
    rope_decomposed,
    rope_fused,
)
from .kv import KVSlot, alloc_array
from .plan import Dispatcher, StepPlan

MODEL_NAME = "ref_decoder"
DRAFT_MODEL_NAME = "ref_draft"

__all__ = [
    "ModelRunner",
    "ForwardResult",
    "capture_decode_plan",
    "rmsnorm",
    "apply_rope",
    "gelu",
    "masked_softmax",
    "MODEL_NAME",
    "DRAFT_MODEL_NAME",
]


def rmsnorm(x: np.ndarray, weight: np.ndarray, eps: float) -> np.ndarray:
    """y_i = x_i / sqrt(mean(x^2) + eps) * w_i over the last axis."""
    x = np.asarray(x, dtype=np.float32)
    weight = np.asarray(weight, dtype=np.float32)
    if x.shape[-1] != weight.shape[-1]:
        raise ValidationError(f"rmsnorm width {x.shape[-1]} != weight width {weight.shape[-1]}")
    if eps <= 0:
        raise ValidationError(f"rmsnorm eps must be positive, got {eps}")
    out = np.empty_like(x)
    rmsnorm_ref(x.reshape(-1, x.shape[-1]), weight, out.reshape(-1, x.shape[-1]), eps=eps)
    return out


def apply_rope(
    x: np.ndarray, positions, theta: float = 10000.0, variant: str = "fused"
) -> np.ndarray:
    """Rotary embedding over [seq, heads, head_dim] at the given absolute positions."""
    x = np.asarray(x, dtype=np.float32)
    pos = np.asarray(positions, dtype=np.int64)
    out = np.empty_like(x)
    fn = {"fused": rope_fused, "decomposed": rope_decomposed}[variant]
    fn(x, pos, out, theta=theta)
    return out


def gelu(x: np.ndarray, variant: str = "tanh") -> np.ndarray:
    x = np.asarray(x, dtype=np.float32)
    out = np.empty_like(x)
    {"tanh": gelu_tanh, "erf": gelu_erf}[variant](x, out)
    return out


@dataclass
class ForwardResult:
    logits: np.ndarray
    features: np.ndarray | None = None


class DecodeBuffers:
    """Fixed single-token scratch; the plan's dynamic inputs live here."""

    def __init__(self, arch):
        h = arch.hidden_dim
        qd = arch.n_heads * arch.head_dim
        kd = arch.n_kv_heads * arch.head_dim
        self.token = alloc_array((1,), np.int64)
        self.pos = alloc_array((1,), np.int64)
        self.kvlen = alloc_array((1,), np.int64)
        self.x = alloc_array((1, h))
        self.xn = alloc_array((1, h))
        self.q = alloc_array((1, qd))
        self.q_rot = alloc_array((1, qd))
        self.k = alloc_array((1, kd))
        self.k_rot = alloc_array((1, kd))
        self.v = alloc_array((1, kd))
        self.attn = alloc_array((1, qd))
        self.proj = alloc_array((1, h))
        self.mlp_h = alloc_array((1, arch.mlp_dim))
        self.mlp_o = alloc_array((1, h))
        self.logits = alloc_array((1, arch.vocab_size))
        self.q3 = self.q.reshape(1, arch.n_heads, arch.head_dim)
        self.q3_rot = self.q_rot.reshape(1, arch.n_heads, arch.head_dim)
        self.k3 = self.k.reshape(1, arch.n_kv_heads, arch.head_dim)
        self.k3_rot = self.k_rot.reshape(1, arch.n_kv_heads, arch.head_dim)
        self.v3 = self.v.reshape(1, arch.n_kv_heads, arch.head_dim)
        self.attn3 = self.attn.reshape(1, arch.n_heads, arch.head_dim)
        n_taps = len(arch.feature_tap_layers)
        self.features = alloc_array((n_taps * h,)) if n_taps else None
        self.feat_bias = alloc_array((1, h)) if arch.n_feature_taps else None
        self.feat_in = alloc_array((1, arch.n_feature_taps * h)) if arch.n_feature_taps else None


class PrefillWorkspace:
    """Per-slot scratch for batched passes, sized to the slot capacity."""

    def __init__(self, arch, capacity: int):
        h = arch.hidden_dim
        qd = arch.n_heads * arch.head_dim
        kd = arch.n_kv_heads * arch.head_dim
        cap = capacity
        self.tokens = alloc_array((cap,), np.int64)
        self.positions = alloc_array((cap,), np.int64)
        self.start = alloc_array((1,), np.int64)
        self.x = alloc_array((cap, h))
        self.xn = alloc_array((cap, h))
        self.q = alloc_array((cap, qd))
        self.q_rot = alloc_array((cap, qd))
        self.k = alloc_array((cap, kd))
        self.k_rot = alloc_array((cap, kd))
        self.v = alloc_array((cap, kd))
        self.attn = alloc_array((cap, qd))
        self.proj = alloc_array((cap, h))
        self.mlp_h = alloc_array((cap, arch.mlp_dim))
        self.mlp_o = alloc_array((cap, h))
        self.logits_last = alloc_array((1, arch.vocab_size))
        self.logits_all = alloc_array((cap, arch.vocab_size))
        self.q3 = self.q.reshape(cap, arch.n_heads, arch.head_dim)
        self.q3_rot = self.q_rot.reshape(cap, arch.n_heads, arch.head_dim)
        self.k3 = self.k.reshape(cap, arch.n_kv_heads, arch.head_dim)
        self.k3_rot = self.k_rot.reshape(cap, arch.n_kv_heads, arch.head_dim)
        self.v3 = self.v.reshape(cap, arch.n_kv_heads, arch.head_dim)
        self.attn3 = self.attn.reshape(cap, arch.n_heads, arch.head_dim)
        n_taps = len(arch.feature_tap_layers)
        self.features_all = alloc_array((cap, n_taps * h)) if n_taps else None


class ModelRunner:
    """Forward passes for one artifact, dispatching every op through the table."""

    def __init__(
        self,
        artifact: ModelArtifact,
        table: DispatchTable,
        registry: KernelRegistry,
        model_name: str = MODEL_NAME,
    ):
        self.artifact = artifact
        self.arch = artifact.arch
        self.model_name = model_name
        self.disp = Dispatcher(table, registry, model_name)
        self._layers = []
        for i in range(self.arch.n_layers):
            p = f"layers.{i}."
            t = artifact.tensor
            self._layers.append(
                {
                    "attn_norm": t(p + "attn_norm.weight"),
                    "wq": t(p + "attn.wq.weight"),
                    "wk": t(p + "attn.wk.weight"),
                    "wv": t(p + "attn.wv.weight"),
                    "wo": t(p + "attn.wo.weight"),
                    "mlp_norm": t(p + "mlp_norm.weight"),
                    "w_in": t(p + "mlp.w_in.weight"),
                    "w_out": t(p + "mlp.w_out.weight"),
                }
            )
        self._embed = artifact.tensor("embed_tokens")
        self._final_norm = artifact.tensor("final_norm.weight")
        self._lm_head = artifact.tensor("lm_head.weight")

    # -- buffer management -------------------------------------------------

    def _scratch_key(self, kind: str) -> tuple:
        a = self.arch
        return (kind, self.model_name, a.vocab_size, a.hidden_dim, a.mlp_dim, a.n_heads,
                a.n_kv_heads, a.head_dim, a.feature_tap_layers, a.n_feature_taps)

    def buffers(self, slot: KVSlot) -> DecodeBuffers:
        key = self._scratch_key("decode_bufs")
        bufs = slot.attachments.get(key)
        if bufs is None:
            bufs = DecodeBuffers(self.arch)
            slot.attachments[key] = bufs
        return bufs

    def workspace(self, slot: KVSlot) -> PrefillWorkspace:
        key = self._scratch_key("prefill_ws")
        ws = slot.attachments.get(key)
        if ws is None:
            ws = PrefillWorkspace(self.arch, slot.capacity)
            slot.attachments[key] = ws
        return ws

    def _check_slot(self, slot: KVSlot, region) -> None:
        if slot.geometry != (self.arch.n_kv_heads, self.arch.head_dim):
            raise ArchMismatch(
                f"slot geometry {slot.geometry} != artifact KV geometry "
                f"({self.arch.n_kv_heads}, {self.arch.head_dim})"
            )
        if region.n_layers != self.arch.n_layers:
            raise ArchMismatch(
                f"region depth {region.n_layers} != artifact depth {self.arch.n_layers}"
            )

    def _check_tokens(self, tokens) -> None:
        for t in tokens:
            if not 0 <= t < self.arch.vocab_size:
                raise ValidationError(f"token id {t} outside vocab [0, {self.arch.vocab_size})")

    # -- forward passes ----------------------------------------------------

    def prefill(
        self,
        tokens: list[int],
        slot: KVSlot,
        *,
        region_tag: str = "base",
        stage: str = "prefill",
        all_logits: bool = False,
        feat_bias: np.ndarray | None = None,
    ) -> ForwardResult:
        """Batched causal pass appending KV for every token; logits for the last
        position (or all positions when all_logits is set)."""
        if not tokens:
            raise ValidationError("prefill requires a non-empty token sequence")
        self._check_tokens(tokens)
        region = slot.region(region_tag)
        self._check_slot(slot, region)
        m = len(tokens)
        start = region.length
        if start + m > region.capacity:
            raise CapacityError(
                f"slot {slot.request_id!r}: prefill of {m} tokens exceeds capacity "
                f"{region.capacity} (at {start})"
            )
        ws = self.workspace(slot)
        arch = self.arch
        h, mlp, heads, kvh, hd = (
            arch.hidden_dim,
            arch.mlp_dim,
            arch.n_heads,
            arch.n_kv_heads,
            arch.head_dim,
        )
        ws.tokens[:m] = tokens
        ws.positions[:m] = np.arange(start, start + m, dtype=np.int64)
        ws.start[0] = start
        call = self.disp.call

        call("embed", "embed", stage, shape_sig_of("embed", m=m, dim=h),
             (ws.tokens[:m], self._embed, ws.x[:m]))
        if feat_bias is not None:
            call("add", "feat_add", stage, shape_sig_of("add", m=m, n=h),
                 (ws.x[:m], feat_bias, ws.x[:m]))

        lin_sig = lambda i, o: shape_sig_of("linear", m=m, in_features=i, out_features=o)
        norm_sig = shape_sig_of("rmsnorm", m=m, n=h)
        rope_sig = lambda nh: shape_sig_of("rope", seq=m, heads=nh, head_dim=hd)
        eps = {"eps": arch.rmsnorm_eps}
        theta = {"theta": arch.rope_theta}

        for li, lw in enumerate(self._layers):
            call("rmsnorm", "attn_norm", stage, norm_sig, (ws.x[:m], lw["attn_norm"], ws.xn[:m]),
                 params=eps)
            call("linear", "attn_q", stage, lin_sig(h, heads * hd), (ws.xn[:m], lw["wq"], ws.q[:m]))
            call("linear", "attn_k", stage, lin_sig(h, kvh * hd), (ws.xn[:m], lw["wk"], ws.k[:m]))
            call("linear", "attn_v", stage, lin_sig(h, kvh * hd), (ws.xn[:m], lw["wv"], ws.v[:m]))
            call("rope", "rope_q", stage, rope_sig(heads),
                 (ws.q3[:m], ws.positions[:m], ws.q3_rot[:m]), params=theta)
            call("rope", "rope_k", stage, rope_sig(kvh),
                 (ws.k3[:m], ws.positions[:m], ws.k3_rot[:m]), params=theta)
            call("kv_update", "kv_append", stage,
                 shape_sig_of("kv_update", positions=m, kv_heads=kvh, head_dim=hd),
                 (ws.k3_rot[:m], ws.v3[:m], region.k[li], region.v[li], ws.start))
            call("attention", "attn", stage,
                 shape_sig_of("attention", q_len=m, kv_len=start + m, heads=heads, head_dim=hd),
                 (ws.q3_rot[:m], region.k[li], region.v[li], ws.start, ws.attn3[:m]))
            call("linear", "attn_o", stage, lin_sig(heads * hd, h),
                 (ws.attn[:m], lw["wo"], ws.proj[:m]))
            call("add", "resid_attn", stage, shape_sig_of("add", m=m, n=h),
                 (ws.x[:m], ws.proj[:m], ws.x[:m]))
            call("rmsnorm", "mlp_norm", stage, norm_sig, (ws.x[:m], lw["mlp_norm"], ws.xn[:m]),
                 params=eps)
            call("linear", "mlp_in", stage, lin_sig(h, mlp), (ws.xn[:m], lw["w_in"], ws.mlp_h[:m]))
            call("gelu", "mlp_act", stage, shape_sig_of("gelu", m=m, n=mlp),
                 (ws.mlp_h[:m], ws.mlp_h[:m]), op_name=f"gelu_{arch.gelu_variant}")
            call("linear", "mlp_out", stage, lin_sig(mlp, h),
                 (ws.mlp_h[:m], lw["w_out"], ws.mlp_o[:m]))
            call("add", "resid_mlp", stage, shape_sig_of("add", m=m, n=h),
                 (ws.x[:m], ws.mlp_o[:m], ws.x[:m]))
            if ws.features_all is not None and li in arch.feature_tap_layers:
                seg = arch.feature_tap_layers.index(li)
                ws.features_all[:m, seg * h : (seg + 1) * h] = ws.x[:m]

        call("rmsnorm", "final_norm", stage, norm_sig, (ws.x[:m], self._final_norm, ws.xn[:m]),
             params=eps)
        if all_logits:
            call("linear", "lm_head", stage, lin_sig(h, arch.vocab_size),
                 (ws.xn[:m], self._lm_head, ws.logits_all[:m]))
            logits = ws.logits_all[:m]
        else:
            call("linear", "lm_head", stage,
                 shape_sig_of("linear", m=1, in_features=h, out_features=arch.vocab_size),
                 (ws.xn[m - 1 : m], self._lm_head, ws.logits_last))
            logits = ws.logits_last[0]
        region.length = start + m
        if not np.isfinite(ws.x[:m]).all():
            raise ValidationError("non-finite hidden state after forward pass")
        features = None
        if ws.features_all is not None:
            features = ws.features_all[:m] if all_logits else ws.features_all[m - 1]
        return ForwardResult(logits=logits, features=features)

    def decode_step(
        self,
        token: int,
        slot: KVSlot,
        *,
        region_tag: str = "base",
        stage: str = "decode",
        recorder: list | None = None,
    ) -> ForwardResult:
        """Single-token step: appends one KV entry and returns that position's logits."""
        self._check_tokens([token])
        region = slot.region(region_tag)
        self._check_slot(slot, region)
        if region.length + 1 > region.capacity:
            raise CapacityError(
                f"slot {slot.request_id!r} is full (capacity {region.capacity})"
            )
        bufs = self.buffers(slot)
        arch = self.arch
        h, mlp, heads, kvh, hd = (
            arch.hidden_dim,
            arch.mlp_dim,
            arch.n_heads,
            arch.n_kv_heads,
            arch.head_dim,
        )
        pos = region.length
        bufs.token[0] = token
        bufs.pos[0] = pos
        bufs.kvlen[0] = pos + 1
        call = self.disp.call

        call("embed", "embed", stage, shape_sig_of("embed", m=1, dim=h),
             (bufs.token, self._embed, bufs.x), recorder=recorder)
        if bufs.feat_bias is not None:
            call("add", "feat_add", stage, shape_sig_of("add", m=1, n=h),
                 (bufs.x, bufs.feat_bias, bufs.x), recorder=recorder)

        lin_sig = lambda i, o: shape_sig_of("linear", m=1, in_features=i, out_features=o)
        norm_sig = shape_sig_of("rmsnorm", m=1, n=h)
        eps = {"eps": arch.rmsnorm_eps}
        theta = {"theta": arch.rope_theta}

        for li, lw in enumerate(self._layers):
            call("rmsnorm", "attn_norm", stage, norm_sig, (bufs.x, lw["attn_norm"], bufs.xn),
                 params=eps, recorder=recorder)
            call("linear", "attn_q", stage, lin_sig(h, heads * hd), (bufs.xn, lw["wq"], bufs.q),
                 recorder=recorder)
            call("linear", "attn_k", stage, lin_sig(h, kvh * hd), (bufs.xn, lw["wk"], bufs.k),
                 recorder=recorder)
            call("linear", "attn_v", stage, lin_sig(h, kvh * hd), (bufs.xn, lw["wv"], bufs.v),
                 recorder=recorder)
            call("rope", "rope_q", stage, shape_sig_of("rope", seq=1, heads=heads, head_dim=hd),
                 (bufs.q3, bufs.pos, bufs.q3_rot), params=theta, recorder=recorder)
            call("rope", "rope_k", stage, shape_sig_of("rope", seq=1, heads=kvh, head_dim=hd),
                 (bufs.k3, bufs.pos, bufs.k3_rot), params=theta, recorder=recorder)
            call("kv_update", "kv_append", stage,
                 shape_sig_of("kv_update", positions=1, kv_heads=kvh, head_dim=hd),
                 (bufs.k3_rot, bufs.v3, region.k[li], region.v[li], bufs.pos),
                 recorder=recorder)
            call("attention", "attn", stage,
                 shape_sig_of("attention", q_len=1, kv_len=pos + 1, heads=heads, head_dim=hd),
                 (bufs.q3_rot, region.k[li], region.v[li], bufs.kvlen, bufs.attn3),
                 recorder=recorder)
            call("linear", "attn_o", stage, lin_sig(heads * hd, h),
                 (bufs.attn, lw["wo"], bufs.proj), recorder=recorder)
            call("add", "resid_attn", stage, shape_sig_of("add", m=1, n=h),
                 (bufs.x, bufs.proj, bufs.x), recorder=recorder)
            call("rmsnorm", "mlp_norm", stage, norm_sig, (bufs.x, lw["mlp_norm"], bufs.xn),
                 params=eps, recorder=recorder)
            call("linear", "mlp_in", stage, lin_sig(h, mlp), (bufs.xn, lw["w_in"], bufs.mlp_h),
                 recorder=recorder)
            call("gelu", "mlp_act", stage, shape_sig_of("gelu", m=1, n=mlp),
                 (bufs.mlp_h, bufs.mlp_h), op_name=f"gelu_{arch.gelu_variant}",
                 recorder=recorder)
            call("linear", "mlp_out", stage, lin_sig(mlp, h),
                 (bufs.mlp_h, lw["w_out"], bufs.mlp_o), recorder=recorder)
            call("add", "resid_mlp", stage, shape_sig_of("add", m=1, n=h),
                 (bufs.x, bufs.mlp_o, bufs.x), recorder=recorder)
            if bufs.features is not None and li in arch.feature_tap_layers:
                seg = arch.feature_tap_layers.index(li)
                bufs.features[seg * h : (seg + 1) * h] = bufs.x[0]

        call("rmsnorm", "final_norm", stage, norm_sig, (bufs.x, self._final_norm, bufs.xn),
             params=eps, recorder=recorder)
        call("linear", "lm_head", stage, lin_sig(h, arch.vocab_size),
             (bufs.xn, self._lm_head, bufs.logits), recorder=recorder)
        region.length = pos + 1
        return ForwardResult(logits=bufs.logits[0], features=bufs.features)


def capture_decode_plan(
    artifact: ModelArtifact,
    slot: KVSlot,
    table: DispatchTable,
    registry: KernelRegistry,
    *,
    region_tag: str = "base",
    model_name: str = MODEL_NAME,
) -> StepPlan:
    """Record one real decode step, then rewind the cache so the slot state is
    unchanged. The recorded plan replays with zero resolutions/allocations."""
    if not table.frozen:
        raise ValidationError("dispatch table must be frozen before plan capture")
    runner = ModelRunner(artifact, table, registry, model_name=model_name)
    region = slot.region(region_tag)
    pos = region.length
    recorder: list = []
    runner.decode_step(0, slot, region_tag=region_tag, recorder=recorder)
    region.length = pos
    bufs = runner.buffers(slot)
    return StepPlan(
        calls=recorder,
        token_buf=bufs.token,
        pos_buf=bufs.pos,
        kvlen_buf=bufs.kvlen,
        logits=bufs.logits,
        slot_id=slot.request_id,
        region_tag=region_tag,
        geometry=slot.geometry,
        capacity=region.capacity,
        k_storage=region.k,
        v_storage=region.v,
    )
