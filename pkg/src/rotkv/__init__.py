"""Per-head rotary-chunk selection and low-rank KV-cache compression.

Desk-scale attention stacks with three interchangeable cache layouts,
greedy and exhaustive chunk selection, separated and joint low-rank
factorization of the key/value path, exact cost accounting, and a
deterministic pipeline CLI.
"""

from .attention import (
    CompressedModel,
    DecodeOutput,
    KVCacheStore,
    assemble_compressed,
    cache_bytes,
    compress_model,
    decode_step_compressed,
    decode_step_full,
    decode_step_ropelite,
    forward_compressed,
    forward_full,
    forward_ropelite,
)
from .chunk_select import (
    CalibrationBatch,
    EliteSelection,
    contribution_select,
    exhaustive_search,
    expected_forward_passes,
    ropelite_search,
    synthetic_calibration,
    uniform_select,
)
from .linalg import SvdResult, matmul, svd, truncated_factors
from .lowrank import (
    AllocationCandidate,
    CostReport,
    LowRankFactors,
    allocate_configs,
    allocate_slrd_split,
    cost_jlrd,
    cost_slrd,
    decompose_jlrd,
    decompose_slrd,
    reassemble,
    split_key_projection,
)
from .model import AttentionWeights, LayerWeights, ModelConfig, random_weights
from .pipeline import RunManifest, gen_model, run_pipeline, verify
from .rope import ChunkSet, RopeParams, frequencies, relative_score, rotate

__version__ = "0.1.0"

__all__ = [
    "AllocationCandidate",
    "AttentionWeights",
    "CalibrationBatch",
    "ChunkSet",
    "CompressedModel",
    "CostReport",
    "DecodeOutput",
    "EliteSelection",
    "KVCacheStore",
    "LayerWeights",
    "LowRankFactors",
    "ModelConfig",
    "RopeParams",
    "RunManifest",
    "SvdResult",
    "allocate_configs",
    "allocate_slrd_split",
    "assemble_compressed",
    "cache_bytes",
    "compress_model",
    "contribution_select",
    "cost_jlrd",
    "cost_slrd",
    "decode_step_compressed",
    "decode_step_full",
    "decode_step_ropelite",
    "decompose_jlrd",
    "decompose_slrd",
    "exhaustive_search",
    "expected_forward_passes",
    "forward_compressed",
    "forward_full",
    "forward_ropelite",
    "frequencies",
    "gen_model",
    "matmul",
    "random_weights",
    "reassemble",
    "relative_score",
    "ropelite_search",
    "rotate",
    "run_pipeline",
    "split_key_projection",
    "svd",
    "synthetic_calibration",
    "truncated_factors",
    "uniform_select",
    "verify",
]
