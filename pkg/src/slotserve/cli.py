"""Command-line front end: run single requests, benchmark shape matrices, run
the auto-tuner, and list registered kernels. All reports are UTF-8 JSON.

Exit codes: 0 success, 1 configuration error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace

from . import __version__
from .bench import BenchSpec, parse_shapes, run_bench, write_report
from .config import load_engine_config, read_token_file
from .dispatch import auto_tune, save_overrides
from .engine import Engine
from .errors import (
    ArchMismatch,
    ChecksumError,
    EngineError,
    FormatError,
    ParseError,
    ShapeError,
    ValidationError,
)
from .kernels import KernelRegistry, register_builtin_kernels

_CONFIG_ERRORS = (ParseError, ValidationError, FormatError, ShapeError, ChecksumError, ArchMismatch)


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except _CONFIG_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except EngineError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="slotserve")
    parser.add_argument("--version", action="version", version=f"slotserve {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="engine config JSON path")
    common.add_argument("--seed", type=int, default=None, help="override the config seed")

    p_run = sub.add_parser("run", parents=[common], help="execute one request")
    p_run.add_argument("--request-id", required=True)
    p_run.add_argument("--tokens", help="comma-separated token ids")
    p_run.add_argument("--tokens-file", help="binary little-endian u32 token file")
    p_run.add_argument("--max-new-tokens", type=int, default=None)
    p_run.add_argument("--stop-token", type=int, default=None)
    p_run.set_defaults(func=cmd_run)

    p_bench = sub.add_parser("bench", parents=[common], help="shape-matrix latency benchmark")
    p_bench.add_argument("--shapes", required=True, help="e.g. 512/32,1024/64")
    p_bench.add_argument("--warmup", type=int, default=3)
    p_bench.add_argument("--runs", type=int, default=10)
    p_bench.add_argument("--report", help="write the BenchReport JSON here")
    p_bench.add_argument("--plan", choices=["on", "off"], default="on")
    p_bench.add_argument("--speculative", choices=["on", "off"], default="off")
    p_bench.set_defaults(func=cmd_bench)

    p_tune = sub.add_parser("tune", parents=[common], help="auto-tune kernels for this config")
    p_tune.add_argument("--output", required=True, help="override file to write")
    p_tune.add_argument("--prefill-len", type=int, default=16)
    p_tune.add_argument("--decode-len", type=int, default=8)
    p_tune.add_argument("--warmups", type=int, default=1)
    p_tune.add_argument("--reps", type=int, default=5)
    p_tune.set_defaults(func=cmd_tune)

    p_list = sub.add_parser("list-kernels", help="print the kernel registry as JSON")
    p_list.set_defaults(func=cmd_list_kernels)
    return parser


def _load_config(args) -> "EngineConfig":
    cfg = load_engine_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def cmd_run(args) -> int:
    cfg = _load_config(args)
    if args.tokens_file:
        tokens = read_token_file(args.tokens_file)
    elif args.tokens:
        tokens = [int(t) for t in args.tokens.split(",") if t.strip() != ""]
    else:
        raise ValidationError("provide --tokens or --tokens-file")
    engine = Engine(cfg)
    try:
        out, stats = engine.generate(
            args.request_id, tokens, max_new_tokens=args.max_new_tokens,
            stop_token=args.stop_token,
        )
    finally:
        engine.shutdown()
    print(json.dumps({"output_tokens": out, "stats": stats.to_dict()}))
    return 0


def cmd_bench(args) -> int:
    cfg = _load_config(args)
    spec = BenchSpec(
        shapes=parse_shapes(args.shapes),
        warmup_runs=args.warmup,
        timed_runs=args.runs,
        seed=cfg.seed,
        plan=args.plan == "on",
        speculative=args.speculative == "on",
    )
    report = run_bench(cfg, spec)
    if args.report:
        write_report(report, args.report)
    print(json.dumps(report))
    return 0


def cmd_tune(args) -> int:
    from .bench import BENCH_REQUEST_ID, bench_config, _shape_prompt

    cfg = _load_config(args)
    # calibration must decode eagerly: a replayed plan performs no resolutions,
    # so decode-stage contexts would never be observed
    spec = BenchSpec(shapes=[(args.prefill_len, args.decode_len)], seed=cfg.seed, plan=False)
    calib_cfg = bench_config(cfg, args.prefill_len, args.decode_len, spec)
    engine = Engine(calib_cfg)
    try:
        engine.table.log = []
        vocab = engine.artifacts.prefill.arch.vocab_size
        prompt = _shape_prompt(cfg.seed, args.prefill_len, args.decode_len, vocab)
        engine.generate(BENCH_REQUEST_ID, prompt, max_new_tokens=args.decode_len)
        contexts = list(dict.fromkeys(engine.table.log))
        engine.table.log = None
        tuned = auto_tune(engine.table, contexts, engine.registry,
                          warmups=args.warmups, reps=args.reps)
    finally:
        engine.shutdown()
    save_overrides(tuned, args.output)
    print(json.dumps({"contexts": len(contexts), "entries": len(tuned), "output": args.output}))
    return 0


def cmd_list_kernels(args) -> int:
    registry = register_builtin_kernels(KernelRegistry())
    print(json.dumps(registry.listing(), indent=2))
    return 0


if __name__ == "__main__":
    sys.exit(main())
