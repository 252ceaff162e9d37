"""Slot-based KV cache: pre-allocation, prefix warmup, reuse, truncation,
draft-dedicated regions, and the pluggable compression transform.

All slot storage is allocated at init through `alloc_array`, which bumps a
global counter; steady-state decode performs no further engine allocations,
which the counter makes observable (numpy's internal temporaries inside kernel
calls are not engine allocations and are not tracked).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import KVConfig, SlotConfig
from .errors import CapacityError, RangeError, SlotBusy, UnknownRequest, ValidationError


class AllocationCounter:
    def __init__(self):
        self.count = 0
        self.bytes = 0

    def bump(self, nbytes: int) -> None:
        self.count += 1
        self.bytes += nbytes


alloc_counter = AllocationCounter()


def alloc_array(shape, dtype=np.float32) -> np.ndarray:
    arr = np.zeros(shape, dtype=dtype)
    alloc_counter.bump(arr.nbytes)
    return arr


@dataclass
class KVRegion:
    """One cache region: [n_layers, capacity, n_kv_heads, head_dim] keys/values."""

    k: np.ndarray
    v: np.ndarray
    length: int = 0

    @property
    def n_layers(self) -> int:
        return self.k.shape[0]

    @property
    def capacity(self) -> int:
        return self.k.shape[1]


@dataclass
class Compressor:
    """KV block transform C(KV); int8_per_channel keeps a symmetric scale per
    (layer, kv_head, channel) computed over the position axis."""

    strategy: str = "none"

    def quantize(self, block: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        if self.strategy == "none":
            raise ValidationError("quantize called on the identity compressor")
        scales = np.max(np.abs(block), axis=1, keepdims=True) / np.float32(127.0)
        with np.errstate(divide="ignore", invalid="ignore"):
            q = np.where(scales > 0, np.round(block / scales), 0.0)
        return q.astype(np.int8), scales.astype(np.float32)

    def dequantize(self, q: np.ndarray, scales: np.ndarray) -> np.ndarray:
        return (q.astype(np.float32) * scales).astype(np.float32)

    def roundtrip(self, block: np.ndarray) -> np.ndarray:
        """Reconstructed block; identity when strategy is "none"."""
        if self.strategy == "none":
            return block
        q, scales = self.quantize(np.asarray(block, dtype=np.float32))
        return self.dequantize(q, scales)


class KVSlot:
    """Pre-allocated per-request KV storage with a frozen prefix region.

    Positions [0, prefix_len) hold KV_p and never change after warmup; the
    dynamic region beyond holds the online suffix and generated tokens, sized
    by max_new_tokens plus speculative headroom for tentative writes.
    """

    def __init__(
        self,
        config: SlotConfig,
        base_layers: int,
        n_kv_heads: int,
        head_dim: int,
        headroom: int,
        draft_layers: int | None = None,
    ):
        self.config = config
        self.request_id = config.request_id
        self.prefix_len = len(config.prefix_tokens)
        self.max_new_tokens = config.max_new_tokens
        self.capacity = self.prefix_len + config.max_new_tokens + headroom
        self.geometry = (n_kv_heads, head_dim)
        self.base = KVRegion(
            k=alloc_array((base_layers, self.capacity, n_kv_heads, head_dim)),
            v=alloc_array((base_layers, self.capacity, n_kv_heads, head_dim)),
        )
        self.draft = None
        if draft_layers is not None:
            self.draft = KVRegion(
                k=alloc_array((draft_layers, self.capacity, n_kv_heads, head_dim)),
                v=alloc_array((draft_layers, self.capacity, n_kv_heads, head_dim)),
            )
        self.in_use = False
        self.warmed = self.prefix_len == 0
        self.draft_warm_len = 0
        self.warm_features: np.ndarray | None = None
        # Engine-attached scratch (decode buffers, prefill workspace, plans).
        self.attachments: dict = {}
        # Cold storage for the compressed prefix, pre-allocated when used.
        self.cold: dict | None = None

    @property
    def current_len(self) -> int:
        return self.base.length

    def region(self, tag: str) -> KVRegion:
        if tag == "base":
            return self.base
        if tag == "draft":
            if self.draft is None:
                raise ValidationError(f"slot {self.request_id!r} has no draft region")
            return self.draft
        raise ValidationError(f"unknown region tag {tag!r}")

    def truncate(self, new_len: int) -> None:
        """Drop base entries beyond new_len; the frozen prefix may not be cut."""
        if new_len < self.prefix_len or new_len > self.base.length:
            raise RangeError(
                f"truncate to {new_len} outside [{self.prefix_len}, {self.base.length}]"
            )
        self.base.length = new_len

    def truncate_draft(self, new_len: int) -> None:
        if self.draft is None:
            raise ValidationError(f"slot {self.request_id!r} has no draft region")
        if new_len < 0 or new_len > self.draft.length:
            raise RangeError(f"draft truncate to {new_len} outside [0, {self.draft.length}]")
        self.draft.length = new_len


class KVManager:
    """Owns all slots; serializes acquire/release; applies compression policy."""

    def __init__(
        self,
        cfg: KVConfig,
        slot_configs: list[SlotConfig] | tuple[SlotConfig, ...],
        base_layers: int,
        n_kv_heads: int,
        head_dim: int,
        headroom: int = 0,
        draft_layers: int | None = None,
    ):
        if len(slot_configs) > cfg.max_slots:
            raise CapacityError(
                f"{len(slot_configs)} slots configured, max_slots is {cfg.max_slots}"
            )
        self.cfg = cfg
        self.compressor = Compressor(cfg.compression)
        self.slots: dict[str, KVSlot] = {}
        for sc in slot_configs:
            if len(sc.prefix_tokens) >= cfg.max_seq_len:
                raise CapacityError(
                    f"slot {sc.request_id!r}: prefix length {len(sc.prefix_tokens)} "
                    f">= max_seq_len {cfg.max_seq_len}"
                )
            if len(sc.prefix_tokens) + sc.max_new_tokens > cfg.max_seq_len:
                raise CapacityError(
                    f"slot {sc.request_id!r}: prefix + max_new_tokens exceeds "
                    f"max_seq_len {cfg.max_seq_len}"
                )
            slot = KVSlot(sc, base_layers, n_kv_heads, head_dim, headroom, draft_layers)
            if cfg.compression != "none" and slot.prefix_len > 0:
                shape_k = slot.base.k[:, : slot.prefix_len].shape
                slot.cold = {
                    "qk": alloc_array(shape_k, np.int8),
                    "qv": alloc_array(shape_k, np.int8),
                    "sk": alloc_array((slot.base.n_layers, 1) + slot.geometry),
                    "sv": alloc_array((slot.base.n_layers, 1) + slot.geometry),
                    "stored": False,
                }
            self.slots[sc.request_id] = slot

    def get(self, request_id: str) -> KVSlot:
        slot = self.slots.get(request_id)
        if slot is None:
            raise UnknownRequest(f"no slot configured for request id {request_id!r}")
        return slot

    def acquire(self, request_id: str) -> KVSlot:
        slot = self.get(request_id)
        if slot.in_use:
            raise SlotBusy(f"slot {request_id!r} is already held by a live request")
        if slot.cold is not None and slot.cold["stored"]:
            k_p = self.compressor.dequantize(slot.cold["qk"], slot.cold["sk"])
            v_p = self.compressor.dequantize(slot.cold["qv"], slot.cold["sv"])
            slot.base.k[:, : slot.prefix_len] = k_p
            slot.base.v[:, : slot.prefix_len] = v_p
            slot.cold["stored"] = False
        slot.in_use = True
        slot.base.length = slot.prefix_len
        if slot.draft is not None:
            slot.draft.length = slot.draft_warm_len
        return slot

    def release(self, request_id: str) -> None:
        slot = self.get(request_id)
        if not slot.in_use:
            return
        if slot.cold is not None:
            kp = slot.base.k[:, : slot.prefix_len]
            vp = slot.base.v[:, : slot.prefix_len]
            slot.cold["qk"][...], slot.cold["sk"][...] = self.compressor.quantize(kp)
            slot.cold["qv"][...], slot.cold["sv"][...] = self.compressor.quantize(vp)
            slot.cold["stored"] = True
        slot.in_use = False


def warmup(manager: KVManager, artifact, table, registry) -> None:
    """Compute and freeze KV_p for every slot with a configured prefix."""
    from .model import ModelRunner

    runner = ModelRunner(artifact, table, registry)
    for slot in manager.slots.values():
        if slot.prefix_len == 0 or slot.warmed:
            continue
        slot.base.length = 0
        out = runner.prefill(list(slot.config.prefix_tokens), slot, stage="prefill")
        slot.warm_features = None if out.features is None else out.features.copy()
        slot.warmed = True
