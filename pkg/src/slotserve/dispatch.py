"""Operator implementation table: wildcard context matching with a specificity
hierarchy, external JSON overrides, and the auto-tuning module.

An entry field equal to "" is a wildcard. Resolution picks, among matching
entries, the one with the most concrete fields; ties break by field priority
(shape_sig > stage > op_name > layer_role > op_kind > hw_profile > model_name),
then lexicographically smallest impl_id, then latest insertion.
"""

from __future__ import annotations

import json
import statistics
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

from .errors import (
    NoCandidates,
    NoKernel,
    ParseError,
    TableFrozen,
    UnknownImpl,
    ValidationError,
)

KEY_FIELDS = (
    "model_name",
    "hw_profile",
    "op_kind",
    "layer_role",
    "op_name",
    "stage",
    "shape_sig",
)

# Most context-discriminating first; used only to break specificity-count ties.
PRIORITY_FIELDS = (
    "shape_sig",
    "stage",
    "op_name",
    "layer_role",
    "op_kind",
    "hw_profile",
    "model_name",
)

# Canonical shape_sig key order per op_kind.
SHAPE_SIG_KEYS: dict[str, tuple[str, ...]] = {
    "linear": ("m", "in_features", "out_features"),
    "attention": ("q_len", "kv_len", "heads", "head_dim"),
    "rope": ("seq", "heads", "head_dim"),
    "gelu": ("m", "n"),
    "rmsnorm": ("m", "n"),
    "kv_update": ("positions", "kv_heads", "head_dim"),
    "embed": ("m", "dim"),
    "add": ("m", "n"),
}


@dataclass(frozen=True)
class DispatchKey:
    model_name: str = ""
    hw_profile: str = ""
    op_kind: str = ""
    layer_role: str = ""
    op_name: str = ""
    stage: str = ""
    shape_sig: str = ""

    def is_concrete(self) -> bool:
        return all(getattr(self, f) != "" for f in KEY_FIELDS)

    def matches(self, ctx: "DispatchKey") -> bool:
        """True when every non-wildcard field equals the context's field."""
        return all(
            getattr(self, f) in ("", getattr(ctx, f)) for f in KEY_FIELDS
        )

    def specificity(self) -> int:
        return sum(1 for f in KEY_FIELDS if getattr(self, f) != "")


@dataclass(frozen=True)
class DispatchEntry:
    key: DispatchKey
    impl_id: str
    impl_params: dict = field(default_factory=dict, hash=False, compare=False)


def shape_sig_of(op_kind: str, **dims: int) -> str:
    keys = SHAPE_SIG_KEYS.get(op_kind)
    if keys is None:
        keys = tuple(sorted(dims))
    missing = [k for k in keys if k not in dims]
    if missing:
        raise ValidationError(f"shape_sig for {op_kind!r} missing dims {missing}")
    return "|".join(f"{k}={int(dims[k])}" for k in keys)


def parse_shape_sig(sig: str) -> dict[str, int]:
    out: dict[str, int] = {}
    for part in sig.split("|"):
        k, _, v = part.partition("=")
        if not k or not v:
            raise ParseError(f"bad shape_sig fragment {part!r} in {sig!r}")
        out[k] = int(v)
    return out


class DispatchTable:
    """Ordered entry list over a kernel registry, with a resolution cache.

    Mutation (add_entry/load_overrides) is only legal before freeze(); after
    that the table is read-only and safe to share.
    """

    def __init__(self, registry, entries: list[DispatchEntry] | None = None):
        self.registry = registry
        self.entries: list[DispatchEntry] = list(entries or [])
        self._cache: dict[DispatchKey, DispatchEntry] = {}
        self.frozen = False
        self.resolve_calls = 0
        self.cache_misses = 0
        self.log: list[DispatchKey] | None = None

    def add_entry(self, entry: DispatchEntry) -> None:
        if self.frozen:
            raise TableFrozen("dispatch table is frozen")
        self.entries.append(entry)
        self._cache.clear()

    def freeze(self) -> None:
        self.frozen = True

    def resolve(self, ctx: DispatchKey) -> DispatchEntry:
        """Pick the most specific matching entry for a fully-concrete context."""
        self.resolve_calls += 1
        if self.log is not None:
            self.log.append(ctx)
        cached = self._cache.get(ctx)
        if cached is not None:
            return cached
        self.cache_misses += 1
        if not ctx.is_concrete():
            raise ValidationError(f"resolution context has wildcard fields: {ctx}")
        best_rank = None
        best = None
        for idx, entry in enumerate(self.entries):
            if not entry.key.matches(ctx):
                continue
            rank = (
                entry.key.specificity(),
                tuple(1 if getattr(entry.key, f) != "" else 0 for f in PRIORITY_FIELDS),
                _NegStr(entry.impl_id),
                idx,
            )
            if best_rank is None or rank > best_rank:
                best_rank = rank
                best = entry
        if best is None:
            raise NoKernel(f"no entry matches context {ctx} (missing built-in default?)")
        if not self.registry.has(best.impl_id):
            raise NoKernel(f"entry references unregistered impl {best.impl_id!r}")
        self._cache[ctx] = best
        return best

    def load_overrides(self, path: str) -> "DispatchTable":
        """Append entries from an external JSON override document."""
        if self.frozen:
            raise TableFrozen("dispatch table is frozen")
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as e:
            raise ParseError(f"cannot read overrides {path}: {e}") from e
        except json.JSONDecodeError as e:
            raise ParseError(f"{path}: malformed JSON: {e}") from e
        for entry in entries_from_json(doc):
            if not self.registry.has(entry.impl_id):
                raise UnknownImpl(f"{path}: unknown impl_id {entry.impl_id!r}")
            self.entries.append(entry)
        self._cache.clear()
        return self


class _NegStr:
    """Wrapper inverting string comparison so max-rank prefers the smallest impl_id."""

    __slots__ = ("s",)

    def __init__(self, s: str):
        self.s = s

    def __lt__(self, other: "_NegStr") -> bool:
        return self.s > other.s

    def __gt__(self, other: "_NegStr") -> bool:
        return self.s < other.s

    def __eq__(self, other) -> bool:
        return isinstance(other, _NegStr) and self.s == other.s


def entries_from_json(doc) -> list[DispatchEntry]:
    if not isinstance(doc, list):
        raise ParseError("override document must be a JSON array")
    out = []
    for i, obj in enumerate(doc):
        if not isinstance(obj, dict):
            raise ParseError(f"override entry {i} is not an object")
        required = set(KEY_FIELDS) | {"impl_id", "impl_params"}
        missing = required - set(obj)
        if missing:
            raise ParseError(f"override entry {i} missing keys {sorted(missing)}")
        extra = set(obj) - required
        if extra:
            raise ParseError(f"override entry {i} has unknown keys {sorted(extra)}")
        key = DispatchKey(**{f: str(obj[f]) for f in KEY_FIELDS})
        params = obj["impl_params"]
        if not isinstance(params, dict):
            raise ParseError(f"override entry {i}: impl_params must be an object")
        out.append(DispatchEntry(key=key, impl_id=str(obj["impl_id"]), impl_params=params))
    return out


def entries_to_json(entries: list[DispatchEntry]) -> list[dict]:
    return [
        {**{f: getattr(e.key, f) for f in KEY_FIELDS}, "impl_id": e.impl_id,
         "impl_params": e.impl_params}
        for e in entries
    ]


def save_overrides(entries: list[DispatchEntry], path: str) -> None:
    Path(path).write_text(json.dumps(entries_to_json(entries), indent=2), encoding="utf-8")


def auto_tune(
    table: DispatchTable,
    calibration_contexts: list[DispatchKey],
    registry,
    warmups: int = 1,
    reps: int = 5,
) -> list[DispatchEntry]:
    """Microbenchmark every candidate impl per observed context; emit the winners.

    Each candidate runs `warmups` untimed plus `reps` timed executions on
    synthetic data of the context's shape; median rep time decides. Emitted
    entries are fully concrete.
    """
    if warmups < 1:
        raise ValidationError(f"warmups must be >= 1, got {warmups}")
    if reps < 3 or reps % 2 == 0:
        raise ValidationError(f"reps must be odd and >= 3, got {reps}")
    tuned: list[DispatchEntry] = []
    seen: set[DispatchKey] = set()
    for ctx in calibration_contexts:
        if ctx in seen:
            continue
        seen.add(ctx)
        if not ctx.is_concrete():
            raise ValidationError(f"calibration context has wildcards: {ctx}")
        candidates = []
        for impl in registry.impls_for(ctx.op_kind, ctx.stage):
            presets = impl.tuning_presets or [dict(impl.default_params)]
            for params in presets:
                candidates.append((impl, dict(params)))
        if not candidates:
            raise NoCandidates(f"no registered impl for context {ctx}")
        shape = parse_shape_sig(ctx.shape_sig)
        timed: list[tuple[float, str, dict]] = []
        for impl, params in candidates:
            args = registry.synth_args(ctx.op_kind, shape)
            for _ in range(warmups):
                impl.fn(*args, **params)
            samples = []
            for _ in range(reps):
                t0 = time.perf_counter()
                impl.fn(*args, **params)
                samples.append(time.perf_counter() - t0)
            timed.append((statistics.median(samples), impl.impl_id, params))
        timed.sort(key=lambda t: (t[0], t[1]))
        best_time, best_id, best_params = timed[0]
        tuned.append(DispatchEntry(key=ctx, impl_id=best_id, impl_params=best_params))
    return tuned


def concrete_context(
    op_kind: str,
    layer_role: str,
    stage: str,
    shape_sig: str,
    op_name: str = "",
    model_name: str = "ref_decoder",
    hw_profile: str = "cpu_ref",
) -> DispatchKey:
    """A fully-concrete context; empty op_name is spelled "-" to stay wildcard-free."""
    return DispatchKey(
        model_name=model_name,
        hw_profile=hw_profile,
        op_kind=op_kind,
        layer_role=layer_role,
        op_name=op_name or "-",
        stage=stage,
        shape_sig=shape_sig,
    )
