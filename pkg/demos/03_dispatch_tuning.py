"""The operator implementation table: wildcard defaults, specificity-ranked
overrides, and the auto-tuner emitting a deployment table.

Entries with empty fields are wildcards; concrete entries (a fixed shape_sig,
a fixed stage) override generic defaults.
"""

from slotserve import (
    DispatchEntry,
    DispatchKey,
    KernelRegistry,
    auto_tune,
    default_table,
    register_builtin_kernels,
    shape_sig_of,
)
from slotserve.dispatch import concrete_context, entries_to_json

registry = register_builtin_kernels(KernelRegistry())
table = default_table(registry)

ctx_decode = concrete_context(
    "linear", "lm_head", "decode",
    shape_sig_of("linear", m=1, in_features=64, out_features=256),
)
print("default linear impl:", table.resolve(ctx_decode).impl_id)

# A shape-specific override beats the wildcard default for that exact shape.
table.add_entry(
    DispatchEntry(
        DispatchKey(op_kind="linear", stage="decode",
                    shape_sig="m=1|in_features=64|out_features=256"),
        "linear.blocked",
        {"tile": 8},
    )
)
print("after override:    ", table.resolve(ctx_decode).impl_id)

other = concrete_context(
    "linear", "mlp_in", "decode",
    shape_sig_of("linear", m=1, in_features=64, out_features=128),
)
print("other shape keeps: ", table.resolve(other).impl_id)

# Auto-tune: time every candidate (impl x preset) on synthetic data of the
# observed shapes, keep the median-of-reps winner per context.
contexts = [
    concrete_context("linear", "mlp_in", "decode",
                     shape_sig_of("linear", m=1, in_features=64, out_features=128)),
    concrete_context("linear", "attn_q", "prefill",
                     shape_sig_of("linear", m=32, in_features=64, out_features=64)),
]
tuned = auto_tune(default_table(registry), contexts, registry, warmups=2, reps=5)
print("\ntuned entries:")
for row in entries_to_json(tuned):
    print(f"  {row['op_kind']:8s} {row['stage']:8s} {row['shape_sig']:42s}"
          f" -> {row['impl_id']} {row['impl_params']}")
