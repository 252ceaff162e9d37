"""slotserve: a single-request inference runtime for small decoder-only
transformers, with slot-based KV cache reuse, a dispatchable kernel table,
capture/replay decode plans, and greedy speculative decoding."""

from .config import (
    EngineConfig,
    KVConfig,
    SamplingConfig,
    SlotConfig,
    SpecConfig,
    load_engine_config,
    read_token_file,
    resolve_artifacts,
    write_token_file,
)
from .dispatch import (
    DispatchEntry,
    DispatchKey,
    DispatchTable,
    auto_tune,
    parse_shape_sig,
    save_overrides,
    shape_sig_of,
)
from .efmt import ArchMeta, ModelArtifact, load_artifact, parameter_manifest, write_artifact
from .engine import (
    Engine,
    InferenceRequest,
    InferenceResponse,
    RequestStats,
    collect_stats,
    create_engine,
    greedy_pick,
)
from .errors import *  # noqa: F401,F403
from .generator import REFERENCE_ARCH, draft_arch_for, generate_artifact, generate_artifact_file
from .kernels import (
    KernelImpl,
    KernelRegistry,
    V_SAFE,
    builtin_default_entries,
    default_table,
    masked_softmax,
    register_builtin_kernels,
)
from .kv import Compressor, KVManager, KVSlot, alloc_counter, warmup
from .model import ModelRunner, apply_rope, capture_decode_plan, gelu, rmsnorm
from .plan import StepPlan, replay
from .prng import Lcg64

__version__ = "0.1.0"
