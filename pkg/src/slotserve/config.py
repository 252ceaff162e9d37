"""Engine configuration: one strict JSON document plus artifact resolution.

Only greedy sampling is supported; anything else is rejected at load time.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

from .efmt import ModelArtifact, check_compatible, load_artifact
from .errors import ArchMismatch, ParseError, ValidationError

TokenSequence = list[int]


@dataclass(frozen=True)
class SamplingConfig:
    temperature: float = 0.0
    top_k: int = 1
    top_p: float = 1.0

    def validate(self) -> None:
        if not (self.temperature == 0 and self.top_k == 1 and self.top_p == 1.0):
            raise ValidationError(
                "only greedy sampling is supported "
                f"(temperature=0, top_k=1, top_p=1); got temperature={self.temperature}, "
                f"top_k={self.top_k}, top_p={self.top_p}"
            )


@dataclass(frozen=True)
class SpecConfig:
    enabled: bool = False
    block_len: int = 4

    def validate(self) -> None:
        if self.block_len < 1:
            raise ValidationError(f"speculative block_len must be >= 1, got {self.block_len}")


@dataclass(frozen=True)
class KVConfig:
    max_slots: int = 8
    max_seq_len: int = 2048
    compression: str = "none"

    def validate(self) -> None:
        if self.max_slots < 1:
            raise ValidationError(f"kv.max_slots must be positive, got {self.max_slots}")
        if self.max_seq_len < 1:
            raise ValidationError(f"kv.max_seq_len must be positive, got {self.max_seq_len}")
        if self.compression not in ("none", "int8_per_channel"):
            raise ValidationError(f"unknown kv.compression {self.compression!r}")


@dataclass(frozen=True)
class SlotConfig:
    """One pre-allocated request slot.

    max_new_tokens budgets the slot's dynamic region: online suffix tokens plus
    generated tokens together must fit in it.
    """

    request_id: str
    prefix_tokens: tuple[int, ...] = ()
    max_new_tokens: int = 256
    prefix_file: str | None = None

    def validate(self) -> None:
        if not self.request_id:
            raise ValidationError("slot request_id must be a non-empty string")
        if self.max_new_tokens < 1:
            raise ValidationError(
                f"slot {self.request_id!r}: max_new_tokens must be positive"
            )
        if any(t < 0 for t in self.prefix_tokens):
            raise ValidationError(f"slot {self.request_id!r}: negative prefix token id")


@dataclass(frozen=True)
class EngineConfig:
    prefill_artifact_path: str
    decode_artifact_path: str | None = None
    draft_artifact_path: str | None = None
    sampling: SamplingConfig = SamplingConfig()
    kv: KVConfig = KVConfig()
    slots: tuple[SlotConfig, ...] = ()
    dispatch_table_path: str | None = None
    capture_decode_plan: bool = True
    speculative: SpecConfig = SpecConfig()
    seed: int = 0

    def validate(self) -> None:
        self.sampling.validate()
        self.kv.validate()
        self.speculative.validate()
        seen: set[str] = set()
        for slot in self.slots:
            slot.validate()
            if slot.request_id in seen:
                raise ValidationError(f"duplicate slot request_id {slot.request_id!r}")
            seen.add(slot.request_id)
        if self.seed < 0:
            raise ValidationError(f"seed must be unsigned, got {self.seed}")
        if self.speculative.block_len + 1 > self.kv.max_seq_len:
            raise ValidationError(
                f"speculative block_len {self.speculative.block_len} does not fit "
                f"kv.max_seq_len {self.kv.max_seq_len}"
            )

    def to_json_dict(self) -> dict:
        d: dict = {"prefill_artifact_path": self.prefill_artifact_path}
        if self.decode_artifact_path is not None:
            d["decode_artifact_path"] = self.decode_artifact_path
        if self.draft_artifact_path is not None:
            d["draft_artifact_path"] = self.draft_artifact_path
        d["sampling"] = {
            "temperature": self.sampling.temperature,
            "top_k": self.sampling.top_k,
            "top_p": self.sampling.top_p,
        }
        d["kv"] = {
            "max_slots": self.kv.max_slots,
            "max_seq_len": self.kv.max_seq_len,
            "compression": self.kv.compression,
        }
        d["slots"] = [
            {
                "request_id": s.request_id,
                "prefix_tokens": list(s.prefix_tokens),
                "max_new_tokens": s.max_new_tokens,
            }
            for s in self.slots
        ]
        if self.dispatch_table_path is not None:
            d["dispatch_table_path"] = self.dispatch_table_path
        d["capture_decode_plan"] = self.capture_decode_plan
        d["speculative"] = {
            "enabled": self.speculative.enabled,
            "block_len": self.speculative.block_len,
        }
        d["seed"] = self.seed
        return d


_TOP_KEYS = {
    "prefill_artifact_path",
    "decode_artifact_path",
    "draft_artifact_path",
    "sampling",
    "kv",
    "slots",
    "dispatch_table_path",
    "capture_decode_plan",
    "speculative",
    "seed",
}


def load_engine_config(path: str) -> EngineConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ParseError(f"cannot read config {path}: {e}") from e
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ParseError(f"{path}: malformed JSON: {e}") from e
    return config_from_dict(doc, base_dir=str(Path(path).parent))


def config_from_dict(doc: dict, base_dir: str = ".") -> EngineConfig:
    if not isinstance(doc, dict):
        raise ParseError("config document must be a JSON object")
    unknown = set(doc) - _TOP_KEYS
    if unknown:
        raise ValidationError(f"unknown config keys: {sorted(unknown)}")
    if "prefill_artifact_path" not in doc:
        raise ValidationError("config missing required key 'prefill_artifact_path'")

    sampling = _sub(doc, "sampling", SamplingConfig, {"temperature", "top_k", "top_p"})
    kv = _sub(doc, "kv", KVConfig, {"max_slots", "max_seq_len", "compression"})
    speculative = _sub(doc, "speculative", SpecConfig, {"enabled", "block_len"})
    slots = tuple(
        _slot_from_dict(s, base_dir) for s in _expect_list(doc.get("slots", []), "slots")
    )

    cfg = EngineConfig(
        prefill_artifact_path=str(doc["prefill_artifact_path"]),
        decode_artifact_path=_opt_str(doc, "decode_artifact_path"),
        draft_artifact_path=_opt_str(doc, "draft_artifact_path"),
        sampling=sampling,
        kv=kv,
        slots=slots,
        dispatch_table_path=_opt_str(doc, "dispatch_table_path"),
        capture_decode_plan=bool(doc.get("capture_decode_plan", True)),
        speculative=speculative,
        seed=int(doc.get("seed", 0)),
    )
    cfg.validate()
    return cfg


class ResolvedArtifacts(NamedTuple):
    prefill: ModelArtifact
    decode: ModelArtifact
    draft: ModelArtifact | None


def resolve_artifacts(cfg: EngineConfig) -> ResolvedArtifacts:
    """Load the prefill/decode/draft artifact triple with decode->prefill fallback."""
    prefill = load_artifact(cfg.prefill_artifact_path)
    if cfg.decode_artifact_path is not None:
        decode = load_artifact(cfg.decode_artifact_path)
        check_compatible(prefill.arch, decode.arch)
    else:
        decode = prefill  # both phases share the same model instance
    draft = None
    if cfg.speculative.enabled:
        if cfg.draft_artifact_path is None:
            raise ValidationError("speculative decoding enabled but draft_artifact_path missing")
        draft = load_artifact(cfg.draft_artifact_path)
        _check_draft_compat(prefill, draft)
    return ResolvedArtifacts(prefill, decode, draft)


def read_token_file(path: str) -> list[int]:
    """Binary token file: little-endian u32 ids."""
    raw = Path(path).read_bytes()
    if len(raw) % 4 != 0:
        raise ParseError(f"token file {path}: size {len(raw)} not a multiple of 4")
    n = len(raw) // 4
    return list(struct.unpack(f"<{n}I", raw))


def write_token_file(path: str, tokens: list[int]) -> None:
    Path(path).write_bytes(struct.pack(f"<{len(tokens)}I", *tokens))


def _check_draft_compat(base: ModelArtifact, draft: ModelArtifact) -> None:
    b, d = base.arch, draft.arch
    if b.vocab_size != d.vocab_size or b.hidden_dim != d.hidden_dim:
        raise ArchMismatch(
            f"draft vocab/hidden ({d.vocab_size},{d.hidden_dim}) does not match "
            f"base ({b.vocab_size},{b.hidden_dim})"
        )
    if (b.n_kv_heads, b.head_dim) != (d.n_kv_heads, d.head_dim):
        raise ArchMismatch("draft KV head geometry does not match base")
    # a draft with n_feature_taps == 0 simply ignores base features
    if d.n_feature_taps and d.n_feature_taps != len(b.feature_tap_layers):
        raise ArchMismatch(
            f"draft expects {d.n_feature_taps} feature taps, base provides "
            f"{len(b.feature_tap_layers)}"
        )


def _sub(doc: dict, key: str, cls, allowed: set):
    raw = doc.get(key, {})
    if not isinstance(raw, dict):
        raise ParseError(f"config key {key!r} must be an object")
    unknown = set(raw) - allowed
    if unknown:
        raise ValidationError(f"unknown keys in {key!r}: {sorted(unknown)}")
    return cls(**raw)


def _slot_from_dict(s: dict, base_dir: str) -> SlotConfig:
    if not isinstance(s, dict):
        raise ParseError("each slot must be an object")
    allowed = {"request_id", "prefix_tokens", "prefix_file", "max_new_tokens"}
    unknown = set(s) - allowed
    if unknown:
        raise ValidationError(f"unknown slot keys: {sorted(unknown)}")
    if "request_id" not in s:
        raise ValidationError("slot missing request_id")
    if "prefix_tokens" in s and "prefix_file" in s:
        raise ValidationError(
            f"slot {s['request_id']!r}: give prefix_tokens or prefix_file, not both"
        )
    prefix_file = s.get("prefix_file")
    if prefix_file is not None:
        p = Path(prefix_file)
        if not p.is_absolute():
            p = Path(base_dir) / p
        prefix = tuple(read_token_file(str(p)))
    else:
        prefix = tuple(int(t) for t in s.get("prefix_tokens", []))
    return SlotConfig(
        request_id=str(s["request_id"]),
        prefix_tokens=prefix,
        max_new_tokens=int(s.get("max_new_tokens", 256)),
        prefix_file=prefix_file,
    )


def _opt_str(doc: dict, key: str) -> str | None:
    v = doc.get(key)
    return None if v is None else str(v)


def _expect_list(v, key: str) -> list:
    if not isinstance(v, list):
        raise ParseError(f"config key {key!r} must be a list")
    return v
