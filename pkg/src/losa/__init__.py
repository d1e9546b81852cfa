"""Locality-aware sparse prefix attention for block-wise diffusion LM decoding."""

from .attention import PartialAttention, dense_attention, merge_partials, partial_attention, sparse_prefix_attention
from .engine import (
    BlockState,
    EngineConfig,
    StepStats,
    build_prefixes,
    init_block,
    run_block,
    step_dense,
    step_losa,
    step_quest,
)
from .locality import ActiveSet, locality_scores, select_active_threshold, select_active_topk
from .selector import PagedPrefix, SelectionResult, build_paged_prefix, page_upper_bound, select_pages, union_selection
from .workload import DenoiseWorkload, GenConfig, gen_synthetic, load_trace, save_trace

__version__ = "0.1.0"

__all__ = [
    "ActiveSet",
    "BlockState",
    "DenoiseWorkload",
    "EngineConfig",
    "GenConfig",
    "PagedPrefix",
    "PartialAttention",
    "SelectionResult",
    "StepStats",
    "build_paged_prefix",
    "build_prefixes",
    "dense_attention",
    "gen_synthetic",
    "init_block",
    "load_trace",
    "locality_scores",
    "merge_partials",
    "page_upper_bound",
    "partial_attention",
    "run_block",
    "save_trace",
    "select_active_threshold",
    "select_active_topk",
    "select_pages",
    "sparse_prefix_attention",
    "step_dense",
    "step_losa",
    "step_quest",
    "union_selection",
]
