"""Deterministic reference artifact generator.

Parameters are drawn from a single Lcg64 stream seeded directly with the given
seed, tensor by tensor in sorted-name order, each value uniform f32 in
[-0.05, 0.05]. The result is bit-exact across platforms.
"""

from __future__ import annotations

import numpy as np

from .efmt import ArchMeta, ModelArtifact, parameter_manifest, write_artifact
from .prng import Lcg64

WEIGHT_LO = -0.05
WEIGHT_HI = 0.05

REFERENCE_ARCH = ArchMeta(
    vocab_size=256,
    hidden_dim=64,
    n_layers=4,
    n_heads=4,
    n_kv_heads=2,
    head_dim=16,
    mlp_dim=128,
    rope_theta=10000.0,
    rmsnorm_eps=1e-6,
    gelu_variant="tanh",
    feature_tap_layers=(0, 2, 3),
)


def draft_arch_for(base: ArchMeta) -> ArchMeta:
    """Single-layer draft architecture conditioned on the base model's tap features."""
    return ArchMeta(
        vocab_size=base.vocab_size,
        hidden_dim=base.hidden_dim,
        n_layers=1,
        n_heads=base.n_heads,
        n_kv_heads=base.n_kv_heads,
        head_dim=base.head_dim,
        mlp_dim=base.mlp_dim,
        rope_theta=base.rope_theta,
        rmsnorm_eps=base.rmsnorm_eps,
        gelu_variant=base.gelu_variant,
        feature_tap_layers=(),
        n_feature_taps=len(base.feature_tap_layers),
    )


def generate_artifact(seed: int, arch: ArchMeta | None = None) -> ModelArtifact:
    arch = arch or REFERENCE_ARCH
    rng = Lcg64(seed)
    tensors: dict[str, np.ndarray] = {}
    manifest = parameter_manifest(arch)
    for name in sorted(manifest):
        shape = manifest[name]
        count = int(np.prod(shape, dtype=np.int64))
        tensors[name] = rng.uniform_f32_block(count, WEIGHT_LO, WEIGHT_HI).reshape(shape)
    return ModelArtifact(arch=arch, tensors=tensors)


def generate_artifact_file(path: str, seed: int, arch: ArchMeta | None = None) -> ModelArtifact:
    art = generate_artifact(seed, arch)
    write_artifact(path, art)
    return art
