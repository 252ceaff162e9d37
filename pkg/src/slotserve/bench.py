"""Shape-matrix latency benchmarking: fixed prefill/decode shapes, warmup plus
timed runs, and a machine-readable report with per-phase aggregate statistics.

Token outputs depend only on (seed, config, shape); EOS is disabled so every
run generates exactly decode_len tokens.
"""

from __future__ import annotations

import json
import platform
import statistics
import time
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from .config import EngineConfig, KVConfig, SlotConfig
from .engine import Engine
from .errors import ParseError, ValidationError
from .prng import Lcg64

BENCH_REQUEST_ID = "bench"


@dataclass
class BenchSpec:
    shapes: list[tuple[int, int]]
    warmup_runs: int = 3
    timed_runs: int = 10
    seed: int = 0
    plan: bool = True
    speculative: bool = False


def parse_shapes(text: str) -> list[tuple[int, int]]:
    """Parse "512/32,1024/64" into [(512, 32), (1024, 64)]."""
    shapes = []
    for part in text.split(","):
        p, sep, d = part.strip().partition("/")
        if not sep:
            raise ParseError(f"bad shape {part!r}: expected PREFILL/DECODE")
        try:
            shape = (int(p), int(d))
        except ValueError as e:
            raise ParseError(f"bad shape {part!r}: {e}") from e
        if shape[0] < 1 or shape[1] < 1:
            raise ParseError(f"bad shape {part!r}: lengths must be positive")
        shapes.append(shape)
    return shapes


def bench_config(base: EngineConfig, prefill_len: int, decode_len: int, spec: BenchSpec) -> EngineConfig:
    """Derive a single-slot engine config sized for one bench shape."""
    budget = prefill_len + decode_len
    kv = KVConfig(
        max_slots=base.kv.max_slots,
        max_seq_len=max(base.kv.max_seq_len, budget + base.speculative.block_len + 1),
        compression=base.kv.compression,
    )
    return replace(
        base,
        kv=kv,
        slots=(SlotConfig(request_id=BENCH_REQUEST_ID, prefix_tokens=(), max_new_tokens=budget),),
        capture_decode_plan=spec.plan,
        speculative=replace(base.speculative, enabled=spec.speculative),
    )


def _shape_prompt(seed: int, prefill_len: int, decode_len: int, vocab_size: int) -> list[int]:
    rng = Lcg64(((seed + 1) << 20) ^ (prefill_len * 65537 + decode_len))
    return rng.token_ids(prefill_len, vocab_size)


def _agg(values: list[float]) -> dict:
    return {
        "mean": statistics.fmean(values),
        "median": statistics.median(values),
        "min": min(values),
        "max": max(values),
    }


def run_bench(base: EngineConfig, spec: BenchSpec) -> dict:
    rows = []
    for prefill_len, decode_len in spec.shapes:
        cfg = bench_config(base, prefill_len, decode_len, spec)
        engine = Engine(cfg)
        vocab = engine.artifacts.prefill.arch.vocab_size
        prompt = _shape_prompt(spec.seed, prefill_len, decode_len, vocab)
        for _ in range(spec.warmup_runs):
            engine.generate(BENCH_REQUEST_ID, prompt, max_new_tokens=decode_len)
        prefill_ms, decode_ms, total_ms = [], [], []
        tokens_ref: list[int] | None = None
        for _ in range(spec.timed_runs):
            out, stats = engine.generate(BENCH_REQUEST_ID, prompt, max_new_tokens=decode_len)
            if len(out) != decode_len:
                raise ValidationError(
                    f"bench run generated {len(out)} tokens, expected {decode_len}"
                )
            if tokens_ref is None:
                tokens_ref = out
            elif out != tokens_ref:
                raise ValidationError("bench runs diverged for a fixed seed")
            prefill_ms.append(stats.prefill_ms)
            decode_ms.append(stats.decode_ms)
            total_ms.append(stats.total_ms)
        engine.shutdown()
        rows.append(
            {
                "shape": f"{prefill_len}/{decode_len}",
                "prefill_len": prefill_len,
                "decode_len": decode_len,
                "runs": spec.timed_runs,
                "prefill_ms": _agg(prefill_ms),
                "decode_ms": _agg(decode_ms),
                "total_ms": _agg(total_ms),
                "tokens": tokens_ref,
            }
        )
    report = {
        "schema_version": 1,
        "generated_at": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "environment": {
            "platform": platform.platform(),
            "python": platform.python_version(),
            "numpy": np.__version__,
        },
        "config": base.to_json_dict(),
        "bench": {
            "shapes": [f"{p}/{d}" for p, d in spec.shapes],
            "warmup_runs": spec.warmup_runs,
            "timed_runs": spec.timed_runs,
            "seed": spec.seed,
            "plan": spec.plan,
            "speculative": spec.speculative,
        },
        "rows": rows,
    }
    validate_report(report)
    return report


def report_schema() -> dict:
    text = resources.files("slotserve.schemas").joinpath("bench_report.schema.json").read_text(
        encoding="utf-8"
    )
    return json.loads(text)


def validate_report(report: dict) -> None:
    jsonschema.validate(report, report_schema())


def write_report(report: dict, path: str) -> None:
    Path(path).write_text(json.dumps(report, indent=2), encoding="utf-8")
