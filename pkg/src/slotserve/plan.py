"""Decode-step capture/replay: the portable analog of GPU execution graphs.

A StepPlan is a recorded sequence of resolved kernel invocations with fixed
buffer bindings. Dynamic per-step values (token id, position, kv length) live
in small pre-declared integer buffers the kernels read at call time, so replay
performs zero dispatch resolutions and zero buffer allocations.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dispatch import DispatchTable, concrete_context
from .errors import CaptureUnsupported, GeometryDrift, CapacityError, ValidationError
from .kernels import KernelImpl, KernelRegistry


@dataclass(frozen=True)
class OpCall:
    impl: KernelImpl
    args: tuple
    params: dict


class Dispatcher:
    """Builds concrete contexts, resolves them, and executes the chosen kernel.

    When a recorder list is supplied, every executed call is appended to it
    with its resolved impl and bound buffers.
    """

    def __init__(self, table: DispatchTable, registry: KernelRegistry, model_name: str,
                 hw_profile: str = "cpu_ref"):
        self.table = table
        self.registry = registry
        self.model_name = model_name
        self.hw_profile = hw_profile

    def call(
        self,
        op_kind: str,
        layer_role: str,
        stage: str,
        shape_sig: str,
        args: tuple,
        op_name: str = "",
        params: dict | None = None,
        recorder: list | None = None,
    ) -> None:
        ctx = concrete_context(
            op_kind,
            layer_role,
            stage,
            shape_sig,
            op_name=op_name,
            model_name=self.model_name,
            hw_profile=self.hw_profile,
        )
        entry = self.table.resolve(ctx)
        impl = self.registry.get(entry.impl_id)
        merged = {**impl.default_params, **entry.impl_params, **(params or {})}
        if recorder is not None and not impl.capturable:
            raise CaptureUnsupported(f"impl {impl.impl_id!r} cannot be captured")
        impl.fn(*args, **merged)
        if recorder is not None:
            recorder.append(OpCall(impl, args, merged))


@dataclass
class StepPlan:
    """Replayable decode step bound to one slot region."""

    calls: list[OpCall]
    token_buf: np.ndarray
    pos_buf: np.ndarray
    kvlen_buf: np.ndarray
    logits: np.ndarray
    slot_id: str
    region_tag: str
    geometry: tuple
    capacity: int
    k_storage: np.ndarray
    v_storage: np.ndarray
    replay_count: int = 0

    def check_bound(self, slot, region) -> None:
        if (
            slot.request_id != self.slot_id
            or region.k is not self.k_storage
            or region.v is not self.v_storage
            or slot.geometry != self.geometry
            or region.capacity != self.capacity
        ):
            raise GeometryDrift(
                f"slot {slot.request_id!r} geometry or storage changed since capture"
            )


def replay(plan: StepPlan, token: int, position: int, slot) -> np.ndarray:
    """Execute the recorded step for one token; semantics of forward_decode_step.

    Returns the plan's logits buffer (valid until the next replay).
    """
    region = slot.region(plan.region_tag)
    plan.check_bound(slot, region)
    if position != region.length:
        raise ValidationError(
            f"replay position {position} != region length {region.length}"
        )
    if position >= region.capacity:
        raise CapacityError(f"slot {slot.request_id!r} is full (capacity {region.capacity})")
    plan.token_buf[0] = token
    plan.pos_buf[0] = position
    plan.kvlen_buf[0] = position + 1
    for call in plan.calls:
        call.impl.fn(*call.args, **call.params)
    region.length = position + 1
    plan.replay_count += 1
    return plan.logits[0]
