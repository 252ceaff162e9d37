"""JSON-lines stdio bridge over the slotserve engine API.

One engine per process. Requests arrive one JSON object per stdin line:
    {"id": 1, "op": "generate", "request_id": "chat", "tokens": [1, 2],
     "max_new_tokens": 8, "stop_token": null}
Responses go to stdout, one JSON object per line:
    {"id": 1, "ok": true, "result": {...}}
    {"id": 1, "ok": false, "error": {"name": "UnknownRequest", "message": "..."}}
A ready/failed event (id null) is emitted once at startup. EOF on stdin shuts
the engine down and exits.
"""

import argparse
import json
import sys

from slotserve import create_engine
from slotserve.errors import EngineError


def emit(obj):
    sys.stdout.write(json.dumps(obj) + "\n")
    sys.stdout.flush()


def error_payload(exc):
    return {"name": type(exc).__name__, "message": str(exc)}


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--config", required=True)
    args = parser.parse_args()

    try:
        engine = create_engine(args.config)
    except Exception as exc:  # config/artifact failures cross the boundary by name
        emit({"id": None, "ok": False, "error": error_payload(exc)})
        return 1
    emit({"id": None, "ok": True, "event": "ready"})

    for line in sys.stdin:
        line = line.strip()
        if not line:
            continue
        try:
            req = json.loads(line)
        except json.JSONDecodeError as exc:
            emit({"id": None, "ok": False, "error": error_payload(exc)})
            continue
        rid = req.get("id")
        op = req.get("op")
        try:
            if op == "generate":
                tokens, stats = engine.generate(
                    req["request_id"],
                    [int(t) for t in req["tokens"]],
                    max_new_tokens=req.get("max_new_tokens"),
                    stop_token=req.get("stop_token"),
                )
                emit({"id": rid, "ok": True,
                      "result": {"tokens": tokens, "stats": stats.to_dict()}})
            elif op == "prefill":
                stats = engine.prefill(req["request_id"], [int(t) for t in req["tokens"]])
                emit({"id": rid, "ok": True, "result": {"stats": stats.to_dict()}})
            elif op == "release":
                engine.release(req["request_id"])
                emit({"id": rid, "ok": True, "result": {}})
            elif op == "shutdown":
                engine.shutdown()
                emit({"id": rid, "ok": True, "result": {}})
                return 0
            elif op == "ping":
                emit({"id": rid, "ok": True, "result": {}})
            else:
                emit({"id": rid, "ok": False,
                      "error": {"name": "ValidationError", "message": f"unknown op {op!r}"}})
        except EngineError as exc:
            emit({"id": rid, "ok": False, "error": error_payload(exc)})
        except Exception as exc:
            emit({"id": rid, "ok": False, "error": error_payload(exc)})

    engine.shutdown()
    return 0


if __name__ == "__main__":
    sys.exit(main())
