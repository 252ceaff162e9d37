"""EFMT tensor container: load/save model artifacts and check their manifests.

Layout: 8-byte magic "EFMT0001", little-endian u64 header length H, UTF-8 JSON
header of H bytes, then the tensor payload starting at the first 64-byte-aligned
offset past the header. Tensor offsets in the header are payload-relative.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import ArchMismatch, ChecksumError, FormatError, ShapeError

MAGIC = b"EFMT0001"
ALIGN = 64

_ARCH_FIELDS = (
    "vocab_size",
    "hidden_dim",
    "n_layers",
    "n_heads",
    "n_kv_heads",
    "head_dim",
    "mlp_dim",
    "rope_theta",
    "rmsnorm_eps",
    "gelu_variant",
    "feature_tap_layers",
)


@dataclass(frozen=True)
class ArchMeta:
    """Architecture metadata carried inside an artifact header."""

    vocab_size: int
    hidden_dim: int
    n_layers: int
    n_heads: int
    n_kv_heads: int
    head_dim: int
    mlp_dim: int
    rope_theta: float = 10000.0
    rmsnorm_eps: float = 1e-6
    gelu_variant: str = "tanh"
    feature_tap_layers: tuple[int, ...] = ()
    # Set for draft artifacts: number of base tap layers whose concatenated
    # features feed the input projection. 0 means no feature conditioning.
    n_feature_taps: int = 0

    def __post_init__(self):
        if self.hidden_dim != self.n_heads * self.head_dim:
            raise ShapeError(
                f"hidden_dim {self.hidden_dim} != n_heads*head_dim "
                f"{self.n_heads}*{self.head_dim}"
            )
        if self.n_heads % self.n_kv_heads != 0:
            raise ShapeError(
                f"n_heads {self.n_heads} not divisible by n_kv_heads {self.n_kv_heads}"
            )
        if self.gelu_variant not in ("tanh", "erf"):
            raise ShapeError(f"unknown gelu_variant {self.gelu_variant!r}")

    def to_json_dict(self) -> dict:
        d = {k: getattr(self, k) for k in _ARCH_FIELDS}
        d["feature_tap_layers"] = list(self.feature_tap_layers)
        if self.n_feature_taps:
            d["n_feature_taps"] = self.n_feature_taps
        return d

    @classmethod
    def from_json_dict(cls, d: dict) -> "ArchMeta":
        missing = [k for k in _ARCH_FIELDS if k not in d]
        if missing:
            raise FormatError(f"arch header missing fields: {missing}")
        kwargs = dict(d)
        kwargs["feature_tap_layers"] = tuple(kwargs.get("feature_tap_layers", ()))
        kwargs["n_feature_taps"] = int(kwargs.pop("n_feature_taps", 0))
        try:
            return cls(**kwargs)
        except TypeError as e:
            raise FormatError(f"bad arch header: {e}") from e

    def kv_geometry(self) -> tuple[int, int, int]:
        return (self.n_layers, self.n_kv_heads, self.head_dim)


def parameter_manifest(arch: ArchMeta) -> dict[str, tuple[int, ...]]:
    """Exact tensor name -> shape map an artifact of this architecture must carry."""
    m: dict[str, tuple[int, ...]] = {}
    h, hd = arch.hidden_dim, arch.head_dim
    m["embed_tokens"] = (arch.vocab_size, h)
    if arch.n_feature_taps:
        m["feature_proj.weight"] = (arch.n_feature_taps * h, h)
    for i in range(arch.n_layers):
        p = f"layers.{i}."
        m[p + "attn_norm.weight"] = (h,)
        m[p + "attn.wq.weight"] = (h, arch.n_heads * hd)
        m[p + "attn.wk.weight"] = (h, arch.n_kv_heads * hd)
        m[p + "attn.wv.weight"] = (h, arch.n_kv_heads * hd)
        m[p + "attn.wo.weight"] = (arch.n_heads * hd, h)
        m[p + "mlp_norm.weight"] = (h,)
        m[p + "mlp.w_in.weight"] = (h, arch.mlp_dim)
        m[p + "mlp.w_out.weight"] = (arch.mlp_dim, h)
    m["final_norm.weight"] = (h,)
    m["lm_head.weight"] = (h, arch.vocab_size)
    return m


@dataclass
class ModelArtifact:
    """A loaded artifact: immutable f32 tensors plus architecture metadata."""

    arch: ArchMeta
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def tensor(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def check_manifest(self) -> None:
        manifest = parameter_manifest(self.arch)
        for name, shape in manifest.items():
            if name not in self.tensors:
                raise ShapeError(f"artifact missing tensor {name!r}")
            got = self.tensors[name].shape
            if tuple(got) != shape:
                raise ShapeError(f"tensor {name!r} has shape {tuple(got)}, expected {shape}")
        extra = set(self.tensors) - set(manifest)
        if extra:
            raise ShapeError(f"artifact carries unexpected tensors: {sorted(extra)}")


def write_artifact(path: str, artifact: ModelArtifact, with_checksum: bool = True) -> None:
    names = sorted(artifact.tensors)
    entries: dict[str, dict] = {}
    offset = 0
    blobs: list[bytes] = []
    for name in names:
        t = np.ascontiguousarray(artifact.tensors[name], dtype=np.float32)
        raw = t.tobytes()
        entries[name] = {
            "dtype": "f32",
            "shape": list(t.shape),
            "offset": offset,
            "nbytes": len(raw),
        }
        blobs.append(raw)
        offset += len(raw)
    payload = b"".join(blobs)
    header: dict = {"arch": artifact.arch.to_json_dict(), "tensors": entries}
    if with_checksum:
        header["checksum"] = zlib.crc32(payload)
    header_bytes = json.dumps(header).encode("utf-8")
    payload_start = _align_up(16 + len(header_bytes))
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(header_bytes)))
        f.write(header_bytes)
        f.write(b"\0" * (payload_start - 16 - len(header_bytes)))
        f.write(payload)


def load_artifact(path: str) -> ModelArtifact:
    """Load an EFMT artifact into memory-resident f32 tensors and verify its manifest."""
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 16 or data[:8] != MAGIC:
        raise FormatError(f"{path}: not an EFMT file (bad magic or too short)")
    (header_len,) = struct.unpack("<Q", data[8:16])
    if 16 + header_len > len(data):
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(data[16 : 16 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: bad JSON header: {e}") from e
    if not isinstance(header, dict) or "arch" not in header or "tensors" not in header:
        raise FormatError(f"{path}: header missing 'arch' or 'tensors'")
    arch = ArchMeta.from_json_dict(header["arch"])
    payload_start = _align_up(16 + header_len)
    payload = data[payload_start:]
    if "checksum" in header and zlib.crc32(payload) != header["checksum"]:
        raise ChecksumError(f"{path}: payload checksum mismatch")
    if not isinstance(header["tensors"], dict):
        raise FormatError(f"{path}: 'tensors' must be an object")
    tensors: dict[str, np.ndarray] = {}
    for name, ent in header["tensors"].items():
        if not isinstance(ent, dict) or not {"dtype", "shape", "offset", "nbytes"} <= set(ent):
            raise FormatError(f"{path}: tensor {name!r} entry malformed")
        if ent.get("dtype") != "f32":
            raise FormatError(f"{path}: tensor {name!r} has unsupported dtype {ent.get('dtype')}")
        off, nbytes = int(ent["offset"]), int(ent["nbytes"])
        shape = tuple(int(s) for s in ent["shape"])
        if off < 0 or off + nbytes > len(payload):
            raise FormatError(f"{path}: tensor {name!r} payload out of bounds")
        expected = int(np.prod(shape, dtype=np.int64)) * 4 if shape else 4
        if nbytes != expected:
            raise FormatError(f"{path}: tensor {name!r} nbytes {nbytes} != shape size {expected}")
        arr = np.frombuffer(payload, dtype="<f4", count=nbytes // 4, offset=off)
        tensors[name] = np.ascontiguousarray(arr.reshape(shape)).astype(np.float32, copy=False)
    art = ModelArtifact(arch=arch, tensors=tensors)
    art.check_manifest()
    return art


def check_compatible(a: ArchMeta, b: ArchMeta) -> None:
    """Prefill/decode artifact compatibility: shared vocab, width, and KV geometry."""
    if a.vocab_size != b.vocab_size or a.hidden_dim != b.hidden_dim:
        raise ArchMismatch(
            f"vocab/hidden mismatch: ({a.vocab_size},{a.hidden_dim}) vs "
            f"({b.vocab_size},{b.hidden_dim})"
        )
    if a.kv_geometry() != b.kv_geometry():
        raise ArchMismatch(f"KV geometry mismatch: {a.kv_geometry()} vs {b.kv_geometry()}")


def _align_up(n: int) -> int:
    return (n + ALIGN - 1) // ALIGN * ALIGN
