"""Decode-step capture/replay: record one real decode step's resolved kernel
calls and buffer bindings, then replay the plan each step with zero dispatch
resolutions, feeding the token/position through fixed input buffers."""

import json
import statistics
import tempfile
from pathlib import Path

from slotserve import Engine, Lcg64, load_engine_config
from slotserve.generator import generate_artifact_file

work = Path(tempfile.mkdtemp(prefix="slotserve_demo_"))
generate_artifact_file(str(work / "model.efmt"), seed=4)

prompt = Lcg64(1).token_ids(16, 256)


def run(plan_on: bool):
    cfg = {
        "prefill_artifact_path": str(work / "model.efmt"),
        "slots": [{"request_id": "r", "prefix_tokens": [], "max_new_tokens": 128}],
        "capture_decode_plan": plan_on,
    }
    path = work / f"cfg_{plan_on}.json"
    path.write_text(json.dumps(cfg))
    engine = Engine(load_engine_config(str(path)))
    resolves_before = engine.table.resolve_calls
    tokens, stats = engine.generate("r", prompt, max_new_tokens=64)
    resolves = engine.table.resolve_calls - resolves_before
    engine.shutdown()
    return tokens, stats, resolves


replay_tokens, replay_stats, replay_resolves = run(plan_on=True)
eager_tokens, eager_stats, eager_resolves = run(plan_on=False)

print("token sequences identical:", replay_tokens == eager_tokens)
print(f"dispatch resolutions, replay mode: {replay_resolves:5d} (prefill only)")
print(f"dispatch resolutions, eager mode:  {eager_resolves:5d}")
med_replay = statistics.median(replay_stats.per_step_ms[1:])
med_eager = statistics.median(eager_stats.per_step_ms[1:])
print(f"median decode step, replay: {med_replay:.3f} ms")
print(f"median decode step, eager:  {med_eager:.3f} ms")
print(f"replay speedup: {med_eager / med_replay:.2f}x")
