"""Fixed-prefix KV reuse: a slot bound to a system-prompt prefix is warmed once
at engine start; each request then prefills only its suffix.

The reused cache is bitwise identical to a fresh full prefill, so reuse is
purely a latency optimization.
"""

import json
import tempfile
from pathlib import Path

import numpy as np

from slotserve import Engine, Lcg64, load_engine_config
from slotserve.generator import generate_artifact_file

work = Path(tempfile.mkdtemp(prefix="slotserve_demo_"))
generate_artifact_file(str(work / "model.efmt"), seed=3)

system_prompt = Lcg64(99).token_ids(48, 256)  # stands in for a fixed instruction template
suffix = [7, 21, 42]

config = {
    "prefill_artifact_path": str(work / "model.efmt"),
    "slots": [
        {"request_id": "warm", "prefix_tokens": system_prompt, "max_new_tokens": 64},
        {"request_id": "cold", "prefix_tokens": [], "max_new_tokens": 128},
    ],
}
(work / "engine.json").write_text(json.dumps(config))
engine = Engine(load_engine_config(str(work / "engine.json")))

# Warm slot: only the 3-token suffix is prefilled online.
warm_tokens, warm_stats = engine.generate("warm", suffix, max_new_tokens=16)

# Cold slot: the full 51-token prompt goes through prefill.
cold_tokens, cold_stats = engine.generate("cold", system_prompt + suffix, max_new_tokens=16)

print("outputs identical:", warm_tokens == cold_tokens)
print(f"warm prefill_ms: {warm_stats.prefill_ms:7.3f}  (suffix only, {len(suffix)} tokens)")
print(f"cold prefill_ms: {cold_stats.prefill_ms:7.3f}  (full prompt, {len(system_prompt) + len(suffix)} tokens)")
print(f"prefill speedup: {cold_stats.prefill_ms / warm_stats.prefill_ms:.1f}x")

# The warmed prefix region is frozen: identical KV bytes across requests.
slot = engine.manager.slots["warm"]
snap = slot.base.k[:, : slot.prefix_len].copy()
engine.generate("warm", [5, 5, 5], max_new_tokens=8)
print("prefix KV frozen:", np.array_equal(snap, slot.base.k[:, : slot.prefix_len]))

engine.shutdown()
