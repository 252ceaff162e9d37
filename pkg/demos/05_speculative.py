"""Greedy speculative decoding: a small draft model conditioned on the base
model's intermediate features proposes token blocks; the base model verifies
them in one batched pass. Accepted-or-corrected commits keep the output
exactly equal to plain greedy decoding.
"""

import json
import tempfile
from pathlib import Path

from slotserve import REFERENCE_ARCH, Engine, Lcg64, draft_arch_for, load_engine_config
from slotserve.generator import generate_artifact_file

work = Path(tempfile.mkdtemp(prefix="slotserve_demo_"))
generate_artifact_file(str(work / "base.efmt"), seed=10)
generate_artifact_file(str(work / "draft.efmt"), seed=11, arch=draft_arch_for(REFERENCE_ARCH))

prompt = Lcg64(5).token_ids(8, 256)


def build(speculative: bool, draft_path: str = str(work / "draft.efmt"), m: int = 4) -> Engine:
    cfg = {
        "prefill_artifact_path": str(work / "base.efmt"),
        "slots": [{"request_id": "r", "prefix_tokens": [], "max_new_tokens": 128}],
    }
    if speculative:
        cfg["draft_artifact_path"] = draft_path
        cfg["speculative"] = {"enabled": True, "block_len": m}
    path = work / f"cfg{speculative}{Path(draft_path).name}.json"
    path.write_text(json.dumps(cfg))
    return Engine(load_engine_config(str(path)))


plain = build(speculative=False)
want, _ = plain.generate("r", prompt, max_new_tokens=32)

# An independent 1-layer draft: usually low acceptance on a random base, but
# the output is still exactly the greedy sequence (rejections commit the base
# model's own argmax).
spec = build(speculative=True)
got, stats = spec.generate("r", prompt, max_new_tokens=32)
print("lossless vs plain:", got == want)
s = stats.speculative
print(f"random draft:  proposed {s['proposed']:3d}, accepted {s['accepted']:3d},"
      f" ratio {s['accept_ratio']:.2f}, cycles {len(stats.per_step_ms)}")

# Upper bound: the base model drafting for itself accepts everything, so each
# cycle commits block_len + 1 tokens.
self_spec = build(speculative=True, draft_path=str(work / "base.efmt"))
got2, stats2 = self_spec.generate("r", prompt, max_new_tokens=32)
s2 = stats2.speculative
print("self-draft lossless:", got2 == want)
print(f"self draft:    proposed {s2['proposed']:3d}, accepted {s2['accepted']:3d},"
      f" ratio {s2['accept_ratio']:.2f}, cycles {len(stats2.per_step_ms)}")

for e in (plain, spec, self_spec):
    e.shutdown()
