"""Quickstart: generate a reference artifact, configure an engine, run one
request, and look at the latency decomposition."""

import json
import tempfile
from pathlib import Path

from slotserve import Engine, load_engine_config
from slotserve.generator import generate_artifact_file

work = Path(tempfile.mkdtemp(prefix="slotserve_demo_"))

# A deterministic desk-scale decoder: 4 layers, hidden 64, grouped KV heads.
generate_artifact_file(str(work / "model.efmt"), seed=7)

config = {
    "prefill_artifact_path": str(work / "model.efmt"),
    "slots": [
        {"request_id": "chat", "prefix_tokens": [], "max_new_tokens": 128},
    ],
    "capture_decode_plan": True,
    "seed": 0,
}
(work / "engine.json").write_text(json.dumps(config, indent=2))

engine = Engine(load_engine_config(str(work / "engine.json")))

prompt = [12, 144, 7, 31, 200]
tokens, stats = engine.generate("chat", prompt, max_new_tokens=24)

print("prompt:       ", prompt)
print("generated:    ", tokens)
print(f"prefill_ms:    {stats.prefill_ms:8.3f}")
print(f"decode_ms:     {stats.decode_ms:8.3f}")
print(f"total_ms:      {stats.total_ms:8.3f}")
print(f"tokens/step ms: {[round(t, 3) for t in stats.per_step_ms[:6]]} ...")

# Greedy decoding is deterministic: the same request gives the same tokens.
again, _ = engine.generate("chat", prompt, max_new_tokens=24)
assert again == tokens
print("re-run identical:", again == tokens)

engine.shutdown()
