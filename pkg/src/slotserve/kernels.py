"""Kernel registry and the reference CPU implementations.

Bitwise discipline: prefill, decode, and speculative verification must produce
identical logits for the same position, so every kernel that reduces over the
hidden or KV axis processes one row at a time through the same numpy primitive
(sgemm rows are NOT bitwise equal to sgemv results), and attention slices the
KV cache per query row instead of padding masked positions (appending even
exact zeros to a BLAS reduction changes its grouping).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf as _erf

from .dispatch import DispatchEntry, DispatchKey
from .errors import DegenerateRow, DuplicateImpl, ShapeError

V_SAFE = np.float32(-1.0e4)


def masked_softmax(scores: np.ndarray, mask: np.ndarray, v_safe: float = V_SAFE) -> np.ndarray:
    """Softmax over the last axis with masked entries forced to a safe constant.

    Masked entries end up with probability <= 1e-8 for scores in [-100, 100];
    rows sum to 1 within 1e-6.
    """
    scores = np.asarray(scores, dtype=np.float32)
    mask = np.asarray(mask, dtype=bool)
    if scores.shape != mask.shape:
        raise ShapeError(f"scores shape {scores.shape} != mask shape {mask.shape}")
    if not mask.any(axis=-1).all():
        raise DegenerateRow("softmax row with every entry masked")
    safe = np.where(mask, scores, np.float32(v_safe))
    m = np.max(safe, axis=-1, keepdims=True)
    e = np.exp(safe - m)
    return e / np.sum(e, axis=-1, keepdims=True)


def rmsnorm_ref(x: np.ndarray, weight: np.ndarray, out: np.ndarray, *, eps: float = 1e-6) -> None:
    """y_i = x_i / sqrt(mean(x^2) + eps) * w_i, rows independent."""
    x = np.asarray(x, dtype=np.float32)
    ms = np.mean(np.square(x), axis=-1, keepdims=True)
    out[...] = x / np.sqrt(ms + np.float32(eps)) * weight


def gelu_tanh(x: np.ndarray, out: np.ndarray) -> None:
    x = np.asarray(x, dtype=np.float32)
    c = np.float32(math.sqrt(2.0 / math.pi))
    inner = c * (x + np.float32(0.044715) * x * x * x)
    out[...] = np.float32(0.5) * x * (np.float32(1.0) + np.tanh(inner))


def gelu_erf(x: np.ndarray, out: np.ndarray) -> None:
    x = np.asarray(x, dtype=np.float32)
    out[...] = (np.float32(0.5) * x * (np.float32(1.0) + _erf(x / np.float32(math.sqrt(2.0))))).astype(
        np.float32
    )


def _rope_cos_sin(positions: np.ndarray, head_dim: int, theta: float) -> tuple[np.ndarray, np.ndarray]:
    half = head_dim // 2
    inv_freq = theta ** (-np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)
    angles = positions.astype(np.float64)[:, None] * inv_freq[None, :]
    return np.cos(angles).astype(np.float32), np.sin(angles).astype(np.float32)


def rope_fused(x: np.ndarray, positions: np.ndarray, out: np.ndarray, *, theta: float = 10000.0) -> None:
    """Rotate (x_i, x_{i+d/2}) pairs in one pass."""
    seq, heads, hd = x.shape
    if hd % 2 != 0:
        raise ShapeError(f"head_dim must be even for rotary embedding, got {hd}")
    half = hd // 2
    cos, sin = _rope_cos_sin(positions, hd, theta)
    c = cos[:, None, :]
    s = sin[:, None, :]
    x1 = x[..., :half]
    x2 = x[..., half:]
    r1 = x1 * c - x2 * s
    r2 = x2 * c + x1 * s
    out[..., :half] = r1
    out[..., half:] = r2


def rope_decomposed(
    x: np.ndarray, positions: np.ndarray, out: np.ndarray, *, theta: float = 10000.0
) -> None:
    """Same rotation expressed as explicit slice, negate, and concat steps."""
    seq, heads, hd = x.shape
    if hd % 2 != 0:
        raise ShapeError(f"head_dim must be even for rotary embedding, got {hd}")
    half = hd // 2
    cos, sin = _rope_cos_sin(positions, hd, theta)
    cos_full = np.concatenate([cos, cos], axis=-1)[:, None, :]
    sin_full = np.concatenate([sin, sin], axis=-1)[:, None, :]
    upper = x[..., half:]
    lower = x[..., :half]
    rotated = np.concatenate([-upper, lower], axis=-1)
    result = x * cos_full + rotated * sin_full
    out[...] = result


def linear_naive(x: np.ndarray, w: np.ndarray, out: np.ndarray) -> None:
    """out[i] = x[i] @ w, one gemv per row so single-row calls match batched rows."""
    for i in range(x.shape[0]):
        out[i] = x[i] @ w


def linear_blocked(x: np.ndarray, w: np.ndarray, out: np.ndarray, *, tile: int = 16) -> None:
    """Row-wise matmul accumulating over input-dimension tiles of `tile`."""
    k_dim = x.shape[1]
    for i in range(x.shape[0]):
        acc = np.zeros(w.shape[1], dtype=np.float32)
        for k0 in range(0, k_dim, tile):
            k1 = min(k0 + tile, k_dim)
            acc += x[i, k0:k1] @ w[k0:k1]
        out[i] = acc


def linear_transposed_b(x: np.ndarray, w: np.ndarray, out: np.ndarray) -> None:
    """Row-wise matmul through the transposed weight view."""
    wt = w.T
    for i in range(x.shape[0]):
        out[i] = wt @ x[i]


def _attend_row(
    q_row: np.ndarray,
    k_slice: np.ndarray,
    v_slice: np.ndarray,
    scale: np.float32,
    v_safe: float,
) -> np.ndarray:
    """Grouped-query attention for one query row over a sliced KV prefix.

    q_row: [heads, head_dim]; k_slice/v_slice: [p, kv_heads, head_dim].
    Every call site (prefill row, decode step, verification row) reaches this
    exact function, which is what makes cross-phase logits bitwise equal.
    """
    p, kv_heads, hd = k_slice.shape
    heads = q_row.shape[0]
    group = heads // kv_heads
    q_g = q_row.reshape(kv_heads, group, hd)
    scores = np.einsum("pkd,kgd->kgp", k_slice, q_g) * scale
    probs = masked_softmax(scores, np.ones(scores.shape, dtype=bool), v_safe)
    ctx = np.einsum("kgp,pkd->kgd", probs, v_slice)
    return ctx.reshape(heads, hd)


def attention_prefill_masked(
    q: np.ndarray,
    k_cache: np.ndarray,
    v_cache: np.ndarray,
    idx_buf: np.ndarray,
    out: np.ndarray,
    *,
    v_safe: float = V_SAFE,
) -> None:
    """Causal attention for a block of query rows starting at cache position idx_buf[0].

    Row j attends positions [0, start + j]; causality is enforced by slicing,
    with the in-slice mask all-true through the masked-softmax path.
    """
    start = int(idx_buf[0])
    m, heads, hd = q.shape
    scale = np.float32(1.0 / math.sqrt(hd))
    for j in range(m):
        kv_len = start + j + 1
        out[j] = _attend_row(q[j], k_cache[:kv_len], v_cache[:kv_len], scale, v_safe)


def attention_decode_cached(
    q: np.ndarray,
    k_cache: np.ndarray,
    v_cache: np.ndarray,
    idx_buf: np.ndarray,
    out: np.ndarray,
    *,
    v_safe: float = V_SAFE,
) -> None:
    """Single-row attention over the first idx_buf[0] cached positions."""
    kv_len = int(idx_buf[0])
    m, heads, hd = q.shape
    if m != 1:
        raise ShapeError(f"decode attention expects one query row, got {m}")
    scale = np.float32(1.0 / math.sqrt(hd))
    out[0] = _attend_row(q[0], k_cache[:kv_len], v_cache[:kv_len], scale, v_safe)


def kv_update_append(
    k_new: np.ndarray,
    v_new: np.ndarray,
    k_cache: np.ndarray,
    v_cache: np.ndarray,
    pos_buf: np.ndarray,
) -> None:
    pos = int(pos_buf[0])
    m = k_new.shape[0]
    k_cache[pos : pos + m] = k_new
    v_cache[pos : pos + m] = v_new


def embed_lookup(token_buf: np.ndarray, table: np.ndarray, out: np.ndarray) -> None:
    out[...] = table[token_buf]


def add_residual(a: np.ndarray, b: np.ndarray, out: np.ndarray) -> None:
    out[...] = a + b


@dataclass(frozen=True)
class KernelImpl:
    """One registered implementation of an op_kind.

    All impls of one op_kind are extensionally equal within 1e-6 absolute,
    except semantically distinct variants registered under distinct op_names
    (gelu tanh vs erf).
    """

    impl_id: str
    op_kind: str
    fn: object
    stages: tuple[str, ...] = ()  # empty = applicable to every stage
    default_params: dict = field(default_factory=dict)
    tuning_presets: tuple = ()
    capturable: bool = True

    def applies_to_stage(self, stage: str) -> bool:
        return not self.stages or stage in self.stages


class KernelRegistry:
    def __init__(self):
        self._impls: dict[str, KernelImpl] = {}

    def register(self, impl: KernelImpl) -> None:
        if impl.impl_id in self._impls:
            raise DuplicateImpl(f"impl {impl.impl_id!r} already registered")
        self._impls[impl.impl_id] = impl

    def has(self, impl_id: str) -> bool:
        return impl_id in self._impls

    def get(self, impl_id: str) -> KernelImpl:
        return self._impls[impl_id]

    def impls_for(self, op_kind: str, stage: str = "") -> list[KernelImpl]:
        out = [i for i in self._impls.values() if i.op_kind == op_kind]
        if stage:
            out = [i for i in out if i.applies_to_stage(stage)]
        return sorted(out, key=lambda i: i.impl_id)

    def all_impls(self) -> list[KernelImpl]:
        return sorted(self._impls.values(), key=lambda i: i.impl_id)

    def listing(self) -> list[dict]:
        """Self-describing registry listing (the `list-kernels` payload)."""
        return [
            {
                "impl_id": i.impl_id,
                "op_kind": i.op_kind,
                "stages": list(i.stages) if i.stages else ["prefill", "decode"],
                "default_params": dict(i.default_params),
                "tuning_presets": [dict(p) for p in i.tuning_presets],
                "capturable": i.capturable,
            }
            for i in self.all_impls()
        ]

    def synth_args(self, op_kind: str, shape: dict[str, int]) -> tuple:
        """Synthetic call arguments of the given shape, for auto-tuner timing."""
        rng = np.random.default_rng(0)

        def f32(*s):
            return rng.standard_normal(s).astype(np.float32)

        if op_kind == "linear":
            m, k, n = shape["m"], shape["in_features"], shape["out_features"]
            return (f32(m, k), f32(k, n), np.empty((m, n), dtype=np.float32))
        if op_kind == "attention":
            q_len, kv_len = shape["q_len"], shape["kv_len"]
            heads, hd = shape["heads"], shape["head_dim"]
            idx = np.array([kv_len], dtype=np.int64)
            return (
                f32(q_len, heads, hd),
                f32(kv_len + q_len, heads, hd),
                f32(kv_len + q_len, heads, hd),
                idx,
                np.empty((q_len, heads, hd), dtype=np.float32),
            )
        if op_kind == "rope":
            seq, heads, hd = shape["seq"], shape["heads"], shape["head_dim"]
            pos = np.arange(seq, dtype=np.int64)
            x = f32(seq, heads, hd)
            return (x, pos, np.empty_like(x))
        if op_kind in ("gelu", "add", "rmsnorm"):
            m, n = shape["m"], shape["n"]
            x = f32(m, n)
            if op_kind == "rmsnorm":
                return (x, f32(n), np.empty_like(x))
            if op_kind == "add":
                return (x, f32(m, n), np.empty_like(x))
            return (x, np.empty_like(x))
        if op_kind == "kv_update":
            p, kvh, hd = shape["positions"], shape["kv_heads"], shape["head_dim"]
            return (
                f32(p, kvh, hd),
                f32(p, kvh, hd),
                np.empty((p + 64, kvh, hd), dtype=np.float32),
                np.empty((p + 64, kvh, hd), dtype=np.float32),
                np.zeros(1, dtype=np.int64),
            )
        if op_kind == "embed":
            m, dim = shape["m"], shape["dim"]
            return (
                np.zeros(m, dtype=np.int64),
                f32(256, dim),
                np.empty((m, dim), dtype=np.float32),
            )
        raise ShapeError(f"no synthetic inputs defined for op_kind {op_kind!r}")


def register_builtin_kernels(registry: KernelRegistry) -> KernelRegistry:
    registry.register(KernelImpl("linear.naive", "linear", linear_naive))
    registry.register(
        KernelImpl(
            "linear.blocked",
            "linear",
            linear_blocked,
            default_params={"tile": 16},
            tuning_presets=({"tile": 8}, {"tile": 16}, {"tile": 32}),
        )
    )
    registry.register(KernelImpl("linear.transposed_b", "linear", linear_transposed_b))
    registry.register(
        KernelImpl("attention.prefill_masked", "attention", attention_prefill_masked, stages=("prefill",))
    )
    registry.register(
        KernelImpl("attention.decode_cached", "attention", attention_decode_cached, stages=("decode",))
    )
    registry.register(KernelImpl("rope.fused", "rope", rope_fused))
    registry.register(KernelImpl("rope.decomposed", "rope", rope_decomposed))
    registry.register(KernelImpl("gelu.tanh", "gelu", gelu_tanh))
    registry.register(KernelImpl("gelu.erf", "gelu", gelu_erf))
    registry.register(KernelImpl("rmsnorm.ref", "rmsnorm", rmsnorm_ref))
    registry.register(KernelImpl("kv_update.append", "kv_update", kv_update_append))
    registry.register(KernelImpl("embed.lookup", "embed", embed_lookup))
    registry.register(KernelImpl("add.residual", "add", add_residual))
    return registry


def builtin_default_entries() -> list[DispatchEntry]:
    """Wildcard defaults guaranteeing a valid kernel for every supported context."""
    return [
        DispatchEntry(DispatchKey(op_kind="linear"), "linear.naive"),
        DispatchEntry(DispatchKey(op_kind="attention", stage="prefill"), "attention.prefill_masked"),
        DispatchEntry(DispatchKey(op_kind="attention", stage="decode"), "attention.decode_cached"),
        DispatchEntry(DispatchKey(op_kind="rope"), "rope.fused"),
        DispatchEntry(DispatchKey(op_kind="gelu"), "gelu.tanh"),
        DispatchEntry(DispatchKey(op_kind="gelu", op_name="gelu_tanh"), "gelu.tanh"),
        DispatchEntry(DispatchKey(op_kind="gelu", op_name="gelu_erf"), "gelu.erf"),
        DispatchEntry(DispatchKey(op_kind="rmsnorm"), "rmsnorm.ref"),
        DispatchEntry(DispatchKey(op_kind="kv_update"), "kv_update.append"),
        DispatchEntry(DispatchKey(op_kind="embed"), "embed.lookup"),
        DispatchEntry(DispatchKey(op_kind="add"), "add.residual"),
    ]


def default_table(registry: KernelRegistry):
    from .dispatch import DispatchTable

    return DispatchTable(registry, builtin_default_entries())
