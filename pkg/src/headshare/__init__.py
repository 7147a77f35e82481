"""Head-wise attention weight sharing for transformer checkpoints."""

__version__ = "0.1.0"

from .errors import HeadShareError
from .similarity import MatchFunction, attention_map_similarity, cosine, match_score
from .store import HeadRef, HeadSlices, ModelConfig, TensorStore, head_slices, load_store, save_store
from .sharing import (
    CandidateBuffer,
    SharePlan,
    apply_share_plan,
    build_candidate_buffer,
    direct_share,
    ffn_match,
    select_top_n,
)

__all__ = [
    "CandidateBuffer",
    "HeadRef",
    "HeadShareError",
    "HeadSlices",
    "MatchFunction",
    "ModelConfig",
    "SharePlan",
    "TensorStore",
    "apply_share_plan",
    "attention_map_similarity",
    "build_candidate_buffer",
    "cosine",
    "direct_share",
    "ffn_match",
    "head_slices",
    "load_store",
    "match_score",
    "save_store",
    "select_top_n",
]
